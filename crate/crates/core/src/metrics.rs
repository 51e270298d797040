//! Detection and caption-quality metrics.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::read_jsonl;
use crate::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }
}

/// Mann–Whitney AUC as an exact fraction `(2·wins + ties, 2·P·N)`.
pub fn auc_fraction(s: &ScoredSet) -> Result<(u128, u128)> {
    let mut pairs: Vec<(f64, u8)> = s.scores.iter().copied().zip(s.labels.iter().copied()).collect();
    let pos = pairs.iter().filter(|p| p.1 == 1).count() as u128;
    let neg = pairs.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut numerator = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let group_pos = pairs[i..j].iter().filter(|p| p.1 == 1).count() as u128;
        let group_neg = (j - i) as u128 - group_pos;
        numerator += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok((numerator, 2 * pos * neg))
}

pub fn auc(s: &ScoredSet) -> Result<f64> {
    let (n, d) = auc_fraction(s)?;
    Ok(n as f64 / d as f64)
}

/// Fraction of samples where `score ≥ threshold` agrees with the label.
pub fn accuracy(s: &ScoredSet, threshold: f64) -> Result<f64> {
    if s.scores.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(&score, &label)| (score >= threshold) == (label == 1))
        .count();
    Ok(hits as f64 / s.scores.len() as f64)
}

/// Lowercases and splits on whitespace; punctuation characters become tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '\'' && !word.is_empty() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionItem {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl CaptionItem {
    pub fn from_text(hypothesis: &str, references: &[&str]) -> Self {
        Self {
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEvalSet {
    pub items: Vec<CaptionItem>,
}

impl CaptionEvalSet {
    pub fn new(items: Vec<CaptionItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty caption set".into()));
        }
        if items.iter().any(|i| i.references.is_empty()) {
            return Err(Error::InvalidArgument("every item needs a reference".into()));
        }
        Ok(Self { items })
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with uniform weights and the closest reference length.
pub fn bleu4(set: &CaptionEvalSet) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for item in &set.items {
        let c = item.hypothesis.len();
        hyp_len += c;
        ref_len += item
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=4 {
            let hyp = ngrams(&item.hypothesis, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &item.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &hyp {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let p = if matched[i] == 0 {
                BLEU_EPSILON
            } else {
                matched[i] as f64 / total[i] as f64
            };
            p.ln() / 4.0
        })
        .sum();
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn rouge_item(item: &CaptionItem) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    item.references
        .iter()
        .map(|r| {
            let l = lcs(&item.hypothesis, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / item.hypothesis.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean over items of the best-reference LCS F-measure.
pub fn rouge_l(set: &CaptionEvalSet) -> f64 {
    set.items.iter().map(rouge_item).sum::<f64>() / set.items.len() as f64
}

/// Exact-match alignment as `(hyp index, ref index)` pairs in hypothesis order.
/// Each hypothesis token takes the reference slot right after the previous
/// match when possible, else the first free slot.
fn align(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in hyp.iter().enumerate() {
        let next = out.last().map(|&(_, j)| j + 1);
        let slot = next
            .filter(|&j| j < reference.len() && !used[j] && &reference[j] == tok)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok));
        if let Some(j) = slot {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn meteor_pair(hyp: &[String], reference: &[String]) -> f64 {
    let alignment = align(hyp, reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// METEOR with exact unigram matching only, best reference per item.
pub fn meteor(set: &CaptionEvalSet) -> f64 {
    let total: f64 = set
        .items
        .iter()
        .map(|item| item.references.iter().map(|r| meteor_pair(&item.hypothesis, r)).fold(0.0, f64::max))
        .sum();
    total / set.items.len() as f64
}

fn tf_idf<'a>(counts: HashMap<&'a [String], usize>, df: &HashMap<&[String], usize>, n_items: usize) -> HashMap<&'a [String], f64> {
    counts
        .into_iter()
        .map(|(g, k)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, k as f64 * (n_items as f64 / d).ln())
        })
        .collect()
}

/// CIDEr: TF-IDF cosine per n-gram order with a Gaussian length penalty.
pub fn cider(set: &CaptionEvalSet) -> Result<f64> {
    let n_items = set.items.len();
    if n_items < 2 {
        return Err(Error::InvalidArgument("CIDEr needs at least two items".into()));
    }
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for item in &set.items {
            let mut seen: Vec<&[String]> = item.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for item in &set.items {
            let hyp = tf_idf(ngrams(&item.hypothesis, n), &df, n_items);
            let hyp_norm = hyp.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut sum = 0.0;
            for r in &item.references {
                let rv = tf_idf(ngrams(r, n), &df, n_items);
                let r_norm = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if hyp_norm == 0.0 || r_norm == 0.0 {
                    continue;
                }
                let dot: f64 = hyp.iter().map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0)).sum();
                let delta = item.hypothesis.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                sum += dot / (hyp_norm * r_norm) * penalty;
            }
            total += sum / item.references.len() as f64;
        }
    }
    Ok(total / 4.0 * 10.0 / n_items as f64)
}

pub fn vqa_average(bleu4: f64, cider: f64, rouge_l: f64, meteor: f64) -> Result<f64> {
    let v = [bleu4, cider, rouge_l, meteor];
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite metric value".into()));
    }
    Ok(v.iter().sum::<f64>() / 4.0)
}

/// One line of a predictions JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub score: f64,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub bleu4: Option<f64>,
    pub cider: Option<f64>,
    pub rouge_l: Option<f64>,
    pub meteor: Option<f64>,
    pub vqa_average: Option<f64>,
    pub n: usize,
    pub config_hash: String,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path)
}

/// Detection metrics over every prediction; caption metrics over those
/// carrying both a hypothesis and references.
pub fn evaluate(preds: &[Prediction], threshold: f64, config_hash: &str) -> Result<EvalReport> {
    let set = ScoredSet::new(preds.iter().map(|p| p.score).collect(), preds.iter().map(|p| p.label).collect())?;
    let items: Vec<CaptionItem> = preds
        .iter()
        .filter_map(|p| match (&p.hypothesis, &p.references) {
            (Some(h), Some(r)) if !r.is_empty() => Some(CaptionItem {
                hypothesis: tokenize(h),
                references: r.iter().map(|x| tokenize(x)).collect(),
            }),
            _ => None,
        })
        .collect();
    let mut report = EvalReport {
        auc: auc(&set)?,
        accuracy: accuracy(&set, threshold)?,
        bleu4: None,
        cider: None,
        rouge_l: None,
        meteor: None,
        vqa_average: None,
        n: preds.len(),
        config_hash: config_hash.to_string(),
    };
    if items.len() >= 2 {
        let captions = CaptionEvalSet::new(items)?;
        let (b, c, r, m) = (bleu4(&captions), cider(&captions)?, rouge_l(&captions), meteor(&captions));
        report.bleu4 = Some(b);
        report.cider = Some(c);
        report.rouge_l = Some(r);
        report.meteor = Some(m);
        report.vqa_average = Some(vqa_average(b, c, r, m)?);
    }
    Ok(report)
}
