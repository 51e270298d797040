//! Stage 2: a projector maps frozen encoder features into the token space of
//! a small decoder-only language model, trained autoregressively on
//! instruction pairs.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use authguard_nn::layers::{BlockStack, Embedding, LayerNorm, Linear, Mlp};
use authguard_nn::{read_checkpoint, write_checkpoint, Adam, AdamConfig, CustomOp, Float, Graph, ParamGrads, ParamId, ParamStore, Var};
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::InstructionSample;
use crate::io::{write_json, JsonlLog};
use crate::metrics::tokenize;
use crate::seed::rng_for;
use crate::synthface::LabeledImage;
use crate::train::Stage1Model;
use crate::{Error, Label, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const IMAGE: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<image>"];

pub const PROJ_PREFIX: &str = "proj.";
pub const LM_PREFIX: &str = "lm.";

/// Word-level vocabulary: special tokens first, then words by descending
/// frequency with ties broken lexically.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Config("vocabulary must start with the special tokens and add words".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Config("duplicate vocabulary entries".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Config(format!("vocab size {max_size} leaves no room for words")));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    /// Joins words with spaces, attaching punctuation to the preceding word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.tokens.get(id).map(String::as_str).unwrap_or("<unk>");
            let punct = tok.chars().all(|c| !c.is_alphanumeric()) && !tok.starts_with('<');
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub d_v: usize,
    pub d_l: usize,
    pub hidden: usize,
}

impl ProjectorConfig {
    pub fn new(d_v: usize, d_l: usize) -> Self {
        Self { d_v, d_l, hidden: 2 * d_l }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_l == 0 || self.hidden == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub d_l: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            layers: 2,
            d_l: 256,
            heads: 4,
            max_seq: 256,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Config(format!("vocab size {} is too small", self.vocab_size)));
        }
        if self.heads == 0 || self.d_l % self.heads != 0 || self.layers == 0 || self.max_seq < 2 {
            return Err(Error::Config("invalid language model shape".into()));
        }
        Ok(())
    }
}

/// Two-layer GELU MLP applied row-wise to `[e; patch tokens]`.
#[derive(Clone, Debug)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    pub mlp: Mlp,
}

impl Projector {
    pub fn new<F: Float, R: rand::Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ProjectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            mlp: Mlp::new(store, rng, "proj.mlp", cfg.d_v, cfg.hidden, cfg.d_l)?,
        })
    }

    /// `(N_p + 1) × d_l` visual tokens with the class embedding first.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, e: Var, patches: Var) -> Var {
        let x = g.concat_rows(&[e, patches]);
        self.mlp.forward(g, x)
    }
}

/// Value-level projection of patch tokens and a class embedding.
pub fn project_tokens(store: &ParamStore<f32>, proj: &Projector, patch_tokens: &Array2<f32>, e: &Array1<f32>) -> Result<Array2<f32>> {
    if patch_tokens.ncols() != proj.cfg.d_v || e.len() != proj.cfg.d_v {
        return Err(Error::Shape(format!(
            "projector expects width {}, got patches {} and e {}",
            proj.cfg.d_v,
            patch_tokens.ncols(),
            e.len()
        )));
    }
    let mut g = Graph::new(store);
    let ev = g.input(e.clone().insert_axis(ndarray::Axis(0)));
    let pv = g.input(patch_tokens.clone());
    let out = proj.forward(&mut g, ev, pv);
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub cfg: ToyLmConfig,
    pub embed: Embedding,
    pub positions: ParamId,
    pub blocks: BlockStack,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl ToyLm {
    pub fn new<F: Float, R: rand::Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ToyLmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Embedding::new(store, rng, "lm.embed", cfg.vocab_size, cfg.d_l)?,
            positions: store.normal("lm.positions", cfg.max_seq, cfg.d_l, 0.02, rng)?,
            blocks: BlockStack::new(store, rng, "lm.blocks", cfg.layers, cfg.d_l, cfg.heads, 4 * cfg.d_l, true)?,
            norm: LayerNorm::new(store, "lm.norm", cfg.d_l)?,
            head: Linear::new(store, rng, "lm.head", cfg.d_l, cfg.vocab_size)?,
        })
    }

    /// Next-token logits for every position of an embedded sequence.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let n = g.shape(x).0;
        let pos = g.param(self.positions);
        let pos = g.slice_rows(pos, 0, n);
        let x = g.add(x, pos);
        let x = self.blocks.forward(g, x);
        let x = self.norm.forward(g, x);
        self.head.forward(g, x)
    }
}

/// Layout of one training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledSequence {
    pub n_visual: usize,
    /// Token ids for every non-visual position, in order: BOS, question, response, EOS.
    pub text_ids: Vec<usize>,
    pub question_len: usize,
    /// Per position of the full sequence: whether the token there is a loss target.
    pub mask: Vec<bool>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Token id at sequence position `p`, or `None` for visual positions.
    pub fn token_at(&self, p: usize) -> Option<usize> {
        match p {
            0 => Some(self.text_ids[0]),
            p if p <= self.n_visual => None,
            p => Some(self.text_ids[p - self.n_visual]),
        }
    }

    /// `(position, token)` for every masked position.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .filter(|&p| self.mask[p])
            .map(|p| (p, self.token_at(p).expect("targets are text")))
            .collect()
    }
}

/// `[BOS] ⊕ visual ⊕ question ⊕ response ⊕ [EOS]`, targets on response and EOS.
pub fn assemble_sequence(n_visual: usize, question: &[usize], response: &[usize], max_seq: usize) -> Result<AssembledSequence> {
    let len = 1 + n_visual + question.len() + response.len() + 1;
    if len > max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence of {len} tokens exceeds max_seq {max_seq}"
        )));
    }
    let mut text_ids = vec![BOS];
    text_ids.extend_from_slice(question);
    text_ids.extend_from_slice(response);
    text_ids.push(EOS);
    let first_target = 1 + n_visual + question.len();
    let mask = (0..len).map(|p| p >= first_target).collect();
    Ok(AssembledSequence {
        n_visual,
        text_ids,
        question_len: question.len(),
        mask,
    })
}

/// Mean next-token NLL over `targets`, where logits row `p − 1` predicts
/// the token at position `p`. Returns the loss and its gradient w.r.t. the logits.
pub fn ar_nll_grad<F: Float>(logits: ArrayView2<F>, targets: &[(usize, usize)]) -> Result<(F, Array2<F>)> {
    if targets.is_empty() {
        return Err(Error::Degenerate("loss mask is all zero".into()));
    }
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = F::zero();
    let inv = F::one() / F::lit(targets.len() as f64);
    for &(p, tok) in targets {
        if p == 0 || p > logits.nrows() || tok >= logits.ncols() {
            return Err(Error::Shape(format!("target ({p}, {tok}) outside logits {:?}", logits.dim())));
        }
        let row = logits.row(p - 1);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum = row.iter().map(|&v| (v - max).exp()).sum::<F>();
        let lse = max + sum.ln();
        loss += (lse - row[tok]) * inv;
        let mut g = grad.row_mut(p - 1);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv += (row[j] - lse).exp() * inv;
        }
        g[tok] -= inv;
    }
    Ok((loss, grad))
}

pub fn ar_nll<F: Float>(logits: ArrayView2<F>, targets: &[(usize, usize)]) -> Result<F> {
    ar_nll_grad(logits, targets).map(|(l, _)| l)
}

/// Graph node for [`ar_nll_grad`]; input `[logits]`.
pub struct ArLossOp<F: Float> {
    targets: Vec<(usize, usize)>,
    grad: Option<Array2<F>>,
}

impl<F: Float> ArLossOp<F> {
    pub fn new(targets: Vec<(usize, usize)>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Degenerate("loss mask is all zero".into()));
        }
        Ok(Self { targets, grad: None })
    }
}

impl<F: Float> CustomOp<F> for ArLossOp<F> {
    fn name(&self) -> &'static str {
        "ar_nll"
    }

    fn forward(&mut self, inputs: &[&Array2<F>]) -> Array2<F> {
        let (loss, grad) = ar_nll_grad(inputs[0].view(), &self.targets).expect("targets validated against logits");
        self.grad = Some(grad);
        Array2::from_elem((1, 1), loss)
    }

    fn backward(&self, _: &[&Array2<F>], _: &Array2<F>, grad: &Array2<F>) -> Vec<Array2<F>> {
        let s = grad[[0, 0]];
        vec![self.grad.as_ref().expect("forward ran").mapv(|v| v * s)]
    }
}

/// Frozen encoder outputs feeding the projector.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    /// Gated class embedding `e`.
    pub e: Array1<f32>,
    /// Patch tokens entering the encoder's last block.
    pub patches: Array2<f32>,
    pub classifier_logit: f32,
}

pub fn visual_features(encoder: &Stage1Model, image: &LabeledImage) -> Result<VisualFeatures> {
    let patches = encoder.encoder.patches(image)?;
    let mut g = Graph::new(&encoder.store);
    let vars = encoder.encoder.forward(&mut g, patches, encoder.config.train.ablation, None);
    let pen = g.value(vars.penultimate);
    Ok(VisualFeatures {
        e: g.value(vars.e).row(0).to_owned(),
        patches: pen.slice(s![1.., ..]).to_owned(),
        classifier_logit: g.scalar(vars.logit),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub lm: ToyLmConfig,
    /// Projector hidden width; `null` means `2·d_l`.
    pub projector_hidden: Option<usize>,
    pub lr_projector: f64,
    pub lr_joint: f64,
    pub epochs_projector: usize,
    pub epochs_joint: usize,
    pub batch_size: usize,
    /// Seeded subsample of the training instructions; `null` uses all.
    pub max_samples: Option<usize>,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    /// Accepted for compatibility; low-rank adaptation is not implemented.
    pub lora_rank: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lm: ToyLmConfig::default(),
            projector_hidden: None,
            lr_projector: 1e-3,
            lr_joint: 1e-3,
            epochs_projector: 1,
            epochs_joint: 1,
            batch_size: 8,
            max_samples: None,
            seed: 0,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            lora_rank: None,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.batch_size == 0 || self.epochs_projector + self.epochs_joint == 0 {
            return Err(Error::Config("stage-2 batch size and epochs must be positive".into()));
        }
        if self.lora_rank.is_some_and(|r| r > 0) {
            return Err(Error::Config("low-rank adaptation is not supported; use full fine-tuning".into()));
        }
        Ok(())
    }
}

/// Projector, language model and vocabulary.
pub struct Stage2Model {
    pub config: Stage2Config,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    pub projector: Projector,
    pub lm: ToyLm,
    /// Checksum of the stage-1 parameters this model was trained against.
    pub encoder_checksum: String,
}

impl Stage2Model {
    /// `config.lm.vocab_size` is an upper bound; the built model uses `vocab.len()`.
    pub fn new(config: &Stage2Config, vocab: Vocab, d_v: usize, encoder_checksum: String) -> Result<Self> {
        let mut config = config.clone();
        config.validate()?;
        if vocab.len() > config.lm.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} exceeds vocab_size {}",
                vocab.len(),
                config.lm.vocab_size
            )));
        }
        config.lm.vocab_size = vocab.len();
        let mut store = ParamStore::new();
        let mut rng = rng_for(config.seed, "stage2/init");
        let mut pcfg = ProjectorConfig::new(d_v, config.lm.d_l);
        if let Some(h) = config.projector_hidden {
            pcfg.hidden = h;
        }
        let projector = Projector::new(&mut store, &mut rng, &pcfg)?;
        let lm = ToyLm::new(&mut store, &mut rng, &config.lm)?;
        Ok(Self {
            config,
            vocab,
            store,
            projector,
            lm,
            encoder_checksum,
        })
    }

    pub fn save(&self, path: &Path, encoder_checkpoint: &Path) -> Result<()> {
        let meta = json!({
            "kind": "stage2",
            "config": self.config,
            "vocab": self.vocab.tokens(),
            "d_v": self.projector.cfg.d_v,
            "encoder_checksum": self.encoder_checksum,
            "encoder_checkpoint": encoder_checkpoint,
        });
        write_checkpoint(path, &self.store, meta)?;
        Ok(())
    }

    /// Loads a stage-2 checkpoint, verifying it belongs to `encoder`.
    pub fn load(path: &Path, encoder: &Stage1Model) -> Result<Self> {
        let (manifest, stored) = read_checkpoint(path)?;
        let meta = &manifest.metadata;
        if meta.get("kind").and_then(Value::as_str) != Some("stage2") {
            return Err(Error::Config(format!("{} is not a stage-2 checkpoint", path.display())));
        }
        let checksum = meta["encoder_checksum"].as_str().unwrap_or_default().to_string();
        if checksum != encoder.checksum() {
            return Err(Error::Config("stage-2 checkpoint was trained against a different encoder".into()));
        }
        let config: Stage2Config = serde_json::from_value(meta["config"].clone())?;
        let vocab = Vocab::from_tokens(serde_json::from_value(meta["vocab"].clone())?)?;
        let d_v = meta["d_v"].as_u64().unwrap_or(0) as usize;
        let mut model = Self::new(&config, vocab, d_v, checksum)?;
        model.store.copy_from(&stored)?;
        Ok(model)
    }

    pub fn projector_checksum(&self) -> String {
        self.store.checksum(PROJ_PREFIX)
    }

    pub fn lm_checksum(&self) -> String {
        self.store.checksum(LM_PREFIX)
    }

    /// Builds the embedded sequence and returns `(logits, sequence)`.
    fn embed<F: Float>(&self, g: &mut Graph<F>, feats: &VisualFeatures, seq: &AssembledSequence) -> Var {
        let e = g.input(feats.e.mapv(|v| F::lit(v as f64)).insert_axis(ndarray::Axis(0)));
        let p = g.input(feats.patches.mapv(|v| F::lit(v as f64)));
        let visual = self.projector.forward(g, e, p);
        let bos = self.lm.embed.forward(g, &seq.text_ids[..1]);
        let rest = self.lm.embed.forward(g, &seq.text_ids[1..]);
        let x = g.concat_rows(&[bos, visual, rest]);
        self.lm.forward(g, x)
    }

    pub fn assemble(&self, feats: &VisualFeatures, question: &str, response: &str) -> Result<AssembledSequence> {
        assemble_sequence(
            feats.patches.nrows() + 1,
            &self.vocab.encode(question),
            &self.vocab.encode(response),
            self.lm.cfg.max_seq,
        )
    }

    /// Teacher-forced loss of one sample.
    pub fn ar_loss(&self, feats: &VisualFeatures, question: &str, response: &str) -> Result<f64> {
        let seq = self.assemble(feats, question, response)?;
        let mut g = Graph::new(&self.store);
        let logits = self.embed(&mut g, feats, &seq);
        Ok(ar_nll(g.value(logits).view(), &seq.targets())? as f64)
    }

    /// Greedy decoding of up to `max_new` tokens after the question.
    pub fn generate_ids(&self, feats: &VisualFeatures, question: &str, max_new: usize) -> Result<Vec<usize>> {
        let q = self.vocab.encode(question);
        let n_visual = feats.patches.nrows() + 1;
        let mut out = Vec::new();
        for _ in 0..max_new {
            let mut text_ids = vec![BOS];
            text_ids.extend_from_slice(&q);
            text_ids.extend_from_slice(&out);
            if 1 + n_visual + q.len() + out.len() > self.lm.cfg.max_seq {
                break;
            }
            let seq = AssembledSequence {
                n_visual,
                mask: vec![false; n_visual + text_ids.len()],
                text_ids,
                question_len: q.len(),
            };
            let mut g = Graph::new(&self.store);
            let logits = self.embed(&mut g, feats, &seq);
            let lv = g.value(logits);
            let last = lv.row(lv.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD && *i != BOS && *i != IMAGE)
                .fold((EOS, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    pub fn generate(&self, encoder: &Stage1Model, image: &LabeledImage, question: &str, max_new: usize) -> Result<Generation> {
        let feats = visual_features(encoder, image)?;
        let response = self.vocab.decode(&self.generate_ids(&feats, question, max_new)?);
        Ok(Generation {
            image_id: image.id.clone(),
            question: question.to_string(),
            verdict: verdict(&response),
            response,
            classifier_score: sigmoid(feats.classifier_logit as f64),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `fake` if the first sentence mentions "fake", else `real`.
pub fn verdict(response: &str) -> Label {
    let first = response.split_inclusive(['.', '!', '?']).next().unwrap_or("");
    if first.to_lowercase().contains("fake") {
        Label::Fake
    } else {
        Label::Real
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub image_id: String,
    pub question: String,
    pub response: String,
    pub verdict: Label,
    pub classifier_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Outcome {
    pub n_samples: usize,
    pub initial_loss: f64,
    pub after_projector_loss: f64,
    pub final_loss: f64,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub lm_checksum_initial: String,
    pub lm_checksum_after_projector: String,
    pub projector_checksum_initial: String,
    pub projector_checksum_after_projector: String,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

struct Prepared<'a> {
    feats: &'a VisualFeatures,
    seq: AssembledSequence,
}

fn mean_loss(model: &Stage2Model, samples: &[Prepared<'_>]) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|p| {
            let mut g = Graph::new(&model.store);
            let logits = model.embed(&mut g, p.feats, &p.seq);
            ar_nll(g.value(logits).view(), &p.seq.targets()).map(|l| l as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn run_substep(
    model: &mut Stage2Model,
    samples: &[Prepared<'_>],
    trainable: Vec<ParamId>,
    lr: f64,
    epochs: usize,
    phase: &str,
    log: &mut JsonlLog,
    global_step: &mut usize,
) -> Result<()> {
    let cfg = model.config.clone();
    let mut adam = Adam::new(cfg.adam.clone(), trainable.clone());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng_for(cfg.seed, &format!("stage2/{phase}/{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            let scale = 1.0 / chunk.len() as f32;
            let results: Vec<(f32, ParamGrads<f32>)> = chunk
                .par_iter()
                .map(|&i| {
                    let p = &samples[i];
                    let mut g = Graph::new(&model.store);
                    let logits = model.embed(&mut g, p.feats, &p.seq);
                    let loss = g.custom(&[logits], Box::new(ArLossOp::new(p.seq.targets())?));
                    let value = g.scalar(loss);
                    let grads = g.backward(&[(loss, Array2::from_elem((1, 1), scale))]).into_params();
                    Ok((value, grads))
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::new(model.store.len());
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += *l as f64 * scale as f64;
                grads.merge(g);
            }
            let keep: std::collections::HashSet<ParamId> = trainable.iter().copied().collect();
            grads.retain(|id| keep.contains(&id));
            let norm = match cfg.grad_clip {
                Some(c) => grads.clip_global_norm(c),
                None => grads.global_norm(),
            };
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    detail: format!("stage-2 {phase}: ar_loss={loss} grad_norm={norm}"),
                });
            }
            adam.step(&mut model.store, &grads, lr);
            log.append(
                &json!({ "phase": phase, "epoch": epoch, "step": step, "global_step": *global_step, "loss": loss, "grad_norm": norm }),
            )?;
            step += 1;
            *global_step += 1;
        }
    }
    Ok(())
}

/// Selects the instructions used for training: those whose image is known,
/// optionally subsampled with a seeded shuffle.
pub fn select_instructions<'a>(
    instructions: &'a [InstructionSample],
    images: &HashMap<&str, &LabeledImage>,
    cfg: &Stage2Config,
) -> Vec<&'a InstructionSample> {
    let mut chosen: Vec<&InstructionSample> = instructions.iter().filter(|s| images.contains_key(s.image_id.as_str())).collect();
    if let Some(max) = cfg.max_samples {
        if chosen.len() > max {
            chosen.shuffle(&mut rng_for(cfg.seed, "stage2/subsample"));
            chosen.truncate(max);
        }
    }
    chosen
}

/// Two sub-steps over `instructions`: projector only, then projector and LM.
/// Writes `stage2.ckpt` and `stage2_loss.jsonl` into `out_dir`.
pub fn train_stage2(
    encoder: &Stage1Model,
    encoder_checkpoint: &Path,
    train_images: &[&LabeledImage],
    instructions: &[InstructionSample],
    cfg: &Stage2Config,
    out_dir: &Path,
) -> Result<(Stage2Model, Stage2Outcome)> {
    cfg.validate()?;
    let encoder_checksum_before = encoder.checksum();
    let images: HashMap<&str, &LabeledImage> = train_images.iter().map(|i| (i.id.as_str(), *i)).collect();
    let chosen = select_instructions(instructions, &images, cfg);
    if chosen.is_empty() {
        return Err(Error::Config("no instruction sample refers to a training image".into()));
    }
    let vocab = Vocab::build(
        chosen.iter().flat_map(|s| [s.question.as_str(), s.response.as_str()]),
        cfg.lm.vocab_size,
    )?;
    let mut model = Stage2Model::new(cfg, vocab, encoder.config.backbone.embed_dim, encoder_checksum_before.clone())?;

    let mut ids: Vec<&str> = chosen.iter().map(|s| s.image_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let feats: HashMap<&str, VisualFeatures> = ids
        .par_iter()
        .map(|id| Ok((*id, visual_features(encoder, images[id])?)))
        .collect::<Result<_>>()?;
    let samples = chosen
        .iter()
        .map(|s| {
            let f = &feats[s.image_id.as_str()];
            Ok(Prepared {
                feats: f,
                seq: model.assemble(f, &s.question, &s.response)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(out_dir).map_err(crate::io::file_err(out_dir))?;
    write_json(&out_dir.join("stage2_config.json"), cfg)?;
    let loss_log = out_dir.join("stage2_loss.jsonl");
    let mut log = JsonlLog::create(&loss_log)?;

    let initial_loss = mean_loss(&model, &samples)?;
    let lm_checksum_initial = model.lm_checksum();
    let projector_checksum_initial = model.projector_checksum();
    let proj_ids: Vec<ParamId> = model.store.ids_with_prefix(PROJ_PREFIX).collect();
    let mut global_step = 0;
    run_substep(
        &mut model,
        &samples,
        proj_ids.clone(),
        cfg.lr_projector,
        cfg.epochs_projector,
        "projector",
        &mut log,
        &mut global_step,
    )?;
    let after_projector_loss = mean_loss(&model, &samples)?;
    let lm_checksum_after_projector = model.lm_checksum();
    let projector_checksum_after_projector = model.projector_checksum();
    let all_ids: Vec<ParamId> = model.store.ids().collect();
    run_substep(
        &mut model,
        &samples,
        all_ids,
        cfg.lr_joint,
        cfg.epochs_joint,
        "joint",
        &mut log,
        &mut global_step,
    )?;
    let final_loss = mean_loss(&model, &samples)?;
    log.append(&json!({ "initial_loss": initial_loss, "after_projector_loss": after_projector_loss, "final_loss": final_loss }))?;

    let encoder_checksum_after = encoder.checksum();
    if encoder_checksum_after != encoder_checksum_before {
        return Err(Error::Contract("encoder parameters changed during stage 2".into()));
    }
    let checkpoint = out_dir.join("stage2.ckpt");
    model.save(&checkpoint, encoder_checkpoint)?;
    let outcome = Stage2Outcome {
        n_samples: samples.len(),
        initial_loss,
        after_projector_loss,
        final_loss,
        encoder_checksum_before,
        encoder_checksum_after,
        lm_checksum_initial,
        lm_checksum_after_projector,
        projector_checksum_initial,
        projector_checksum_after_projector,
        checkpoint,
        loss_log,
    };
    Ok((model, outcome))
}
