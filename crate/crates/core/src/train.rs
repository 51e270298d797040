//! Stage-1 training: optimizer, schedule, ablation switches, checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use authguard_nn::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Graph, ParamGrads, ParamStore};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::CaptionRecord;
use crate::encoder::{Branches, ExpertEncoder, GatedFeatures, VisionBackboneConfig, TEXT_PREFIX};
use crate::io::{write_json, JsonlLog};
use crate::metrics::{auc, ScoredSet};
use crate::objectives::{bce_loss_grad, clamp_temperature, contrastive_loss_grad, kl_regularizer_grad, total_loss, LossConfig};
use crate::seed::{rng_for, sha256_hex};
use crate::synthface::{LabeledImage, Split, SynthCorpus};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Branches,
    /// Global gradient-norm clip; `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 3e-4,
            warmup_steps: 100,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            ablation: Branches::FULL,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || (self.ablation.use_contrastive && self.batch_size < 2) {
            return Err(Error::Config("batch_size must be at least 2 with the contrastive loss".into()));
        }
        if !(self.lr_base > 0.0) {
            return Err(Error::Config("lr_base must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a stage-1 run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: VisionBackboneConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Applies `path=value` overrides such as `train.lr_base=1e-3`. The value
    /// is parsed as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let mut node = &mut tree;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(key))
                    .ok_or_else(|| Error::Config(format!("unknown config field `{path}`")))?;
            }
            *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The four ablation rows, from classification only to the full model.
pub const ABLATION_PRESETS: [(&str, Branches); 4] = [
    (
        "none",
        Branches {
            use_contrastive: false,
            use_uncertainty: false,
            use_adapter: false,
        },
    ),
    (
        "semantic",
        Branches {
            use_contrastive: true,
            use_uncertainty: false,
            use_adapter: false,
        },
    ),
    (
        "semantic-uncertainty",
        Branches {
            use_contrastive: true,
            use_uncertainty: true,
            use_adapter: false,
        },
    ),
    ("full", Branches::FULL),
];

pub fn ablation_preset(name: &str) -> Result<Branches> {
    ABLATION_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| *b)
        .ok_or_else(|| Error::Config(format!("unknown ablation preset `{name}`")))
}

/// Linear warmup to `lr_base`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps <= cfg.warmup_steps {
        return Err(Error::Config(format!(
            "total steps {total_steps} must exceed warmup steps {}",
            cfg.warmup_steps
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} > total {total_steps}")));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_base * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Encoder parameters plus the config they were built from.
pub struct Stage1Model {
    pub config: RunConfig,
    pub store: ParamStore<f32>,
    pub encoder: ExpertEncoder,
}

impl Stage1Model {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = ExpertEncoder::new(&mut store, &config.backbone, config.train.seed, config.loss.temperature_w)?;
        Ok(Self { config, store, encoder })
    }

    pub fn save(&self, path: &Path, extra: Value) -> Result<()> {
        let meta = json!({ "kind": "stage1", "config": self.config, "info": extra });
        write_checkpoint(path, &self.store, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, stored) = read_checkpoint(path)?;
        if manifest.metadata.get("kind").and_then(Value::as_str) != Some("stage1") {
            return Err(Error::Config(format!("{} is not a stage-1 checkpoint", path.display())));
        }
        let config: RunConfig = serde_json::from_value(manifest.metadata["config"].clone())?;
        let mut model = Self::new(config)?;
        model.store.copy_from(&stored)?;
        Ok(model)
    }

    pub fn checksum(&self) -> String {
        self.store.checksum("")
    }

    pub fn text_checksum(&self) -> String {
        self.store.checksum(TEXT_PREFIX)
    }

    pub fn features(&self, image: &LabeledImage) -> Result<GatedFeatures> {
        self.encoder.features(&self.store, image, self.config.train.ablation)
    }

    /// Classifier logits for many images, in input order.
    pub fn logits(&self, images: &[&LabeledImage]) -> Result<Vec<f64>> {
        images.par_iter().map(|img| self.features(img).map(|f| f.logit as f64)).collect()
    }

    pub fn auc_on(&self, images: &[&LabeledImage]) -> Result<f64> {
        let scores = self.logits(images)?;
        let labels = images.iter().map(|i| i.label.target() as u8).collect();
        auc(&ScoredSet::new(scores, labels)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_cst: f64,
    pub loss_kl: f64,
    /// Batch mean of the gate weights `(w₁, w₂)`; `(1, 0)` without the adapter.
    pub gate_mean: [f64; 2],
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Frozen text embeddings keyed by sentence.
pub type TextCache = HashMap<String, Array1<f32>>;

pub fn build_text_cache<'a>(model: &Stage1Model, sentences: impl IntoIterator<Item = &'a str>) -> Result<TextCache> {
    let mut unique: Vec<&str> = sentences.into_iter().collect();
    unique.sort_unstable();
    unique.dedup();
    unique
        .par_iter()
        .map(|s| Ok((s.to_string(), model.encoder.text.encode(&model.store, s)?.t)))
        .collect()
}

fn noise(seed: u64, step: usize, id: &str, dim: usize) -> Array2<f32> {
    let mut rng = rng_for(seed, &format!("noise/{step}/{id}"));
    Array2::from_shape_simple_fn((1, dim), || rng.sample(StandardNormal))
}

/// One optimizer step over `batch`, each image paired with an optional caption sentence.
pub fn train_step(
    model: &mut Stage1Model,
    adam: &mut Adam<f32>,
    batch: &[(&LabeledImage, Option<&str>)],
    texts: &TextCache,
    step: usize,
    lr: f64,
) -> Result<StepReport> {
    let cfg = &model.config;
    let branches = cfg.train.ablation;
    let b = batch.len();
    let d = cfg.backbone.embed_dim;
    if b == 0 || (branches.use_contrastive && b < 2) {
        return Err(Error::InvalidArgument(format!("batch of {b} is too small")));
    }
    let sample_sigma = branches.use_uncertainty && branches.use_contrastive;
    let encoder = &model.encoder;
    let store = &model.store;
    let graphs = batch
        .par_iter()
        .map(|(img, _)| {
            let patches = encoder.patches(img)?;
            let eps = sample_sigma.then(|| noise(cfg.train.seed, step, &img.id, d));
            let mut g = Graph::new(store);
            let vars = encoder.forward(&mut g, patches, branches, eps);
            Ok((g, vars))
        })
        .collect::<Result<Vec<_>>>()?;

    let logits: Vec<f32> = graphs.iter().map(|(g, v)| g.scalar(v.logit)).collect();
    let labels: Vec<f32> = batch.iter().map(|(img, _)| img.label.target() as f32).collect();
    let (loss_cls, dlogits) = bce_loss_grad(&logits, &labels)?;

    let stack = |pick: &dyn Fn(&crate::encoder::SampleVars) -> Option<authguard_nn::Var>| -> Option<Array2<f32>> {
        let rows: Option<Vec<Array1<f32>>> = graphs.iter().map(|(g, v)| pick(v).map(|x| g.value(x).row(0).to_owned())).collect();
        rows.map(|rows| {
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            ndarray::stack(ndarray::Axis(0), &views).expect("equal widths")
        })
    };

    let (mut loss_cst, mut dz, mut dw) = (0.0f32, None, 0.0f32);
    if branches.use_contrastive {
        let z = stack(&|v| v.z).ok_or_else(|| Error::Contract("z missing with contrastive loss".into()))?;
        let mut t = Array2::zeros((b, d));
        for (i, (img, sentence)) in batch.iter().enumerate() {
            let s = sentence.ok_or_else(|| Error::Config(format!("no caption sentence for {}", img.id)))?;
            let emb = texts
                .get(s)
                .ok_or_else(|| Error::Contract(format!("sentence {s:?} missing from the text cache")))?;
            t.row_mut(i).assign(emb);
        }
        let w = store.get(encoder.temperature)[[0, 0]];
        let c = contrastive_loss_grad(z.view(), t.view(), w)?;
        loss_cst = c.loss;
        dz = Some(c.dz);
        dw = c.dw;
    }

    let (mut loss_kl, mut dkl) = (0.0f32, None);
    if sample_sigma && cfg.loss.kl_weight > 0.0 {
        let mu = stack(&|v| v.mu).expect("mu computed");
        let sigma = stack(&|v| v.sigma).expect("sigma computed");
        let (l, dmu, dsigma) = kl_regularizer_grad(mu.view(), sigma.view())?;
        loss_kl = l;
        dkl = Some((dmu, dsigma));
    }

    let total = total_loss(loss_cls as f64, loss_cst as f64, loss_kl as f64, &cfg.loss);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            step: step as u64,
            detail: format!("cls={loss_cls} cst={loss_cst} kl={loss_kl}"),
        });
    }

    let (alpha, beta, kl_w) = (cfg.loss.alpha as f32, cfg.loss.beta as f32, cfg.loss.kl_weight as f32);
    let per_sample: Vec<ParamGrads<f32>> = graphs
        .par_iter()
        .enumerate()
        .map(|(i, (g, v))| {
            let mut seeds = vec![(v.logit, Array2::from_elem((1, 1), beta * dlogits[i]))];
            if let (Some(dz), Some(z)) = (&dz, v.z) {
                seeds.push((z, dz.row(i).insert_axis(ndarray::Axis(0)).mapv(|x| alpha * x)));
            }
            if let (Some((dmu, dsigma)), Some(mu), Some(sigma)) = (&dkl, v.mu, v.sigma) {
                seeds.push((mu, dmu.row(i).insert_axis(ndarray::Axis(0)).mapv(|x| kl_w * x)));
                seeds.push((sigma, dsigma.row(i).insert_axis(ndarray::Axis(0)).mapv(|x| kl_w * x)));
            }
            g.backward(&seeds).into_params()
        })
        .collect();

    let gate_mean = if branches.use_adapter {
        let mut m = [0.0; 2];
        for (g, v) in &graphs {
            let w = g.value(v.w.expect("gate computed"));
            m[0] += w[[0, 0]] as f64 / b as f64;
            m[1] += w[[0, 1]] as f64 / b as f64;
        }
        m
    } else {
        [1.0, 0.0]
    };
    drop(graphs);

    let mut grads = ParamGrads::new(model.store.len());
    for g in &per_sample {
        grads.merge(g);
    }
    if branches.use_contrastive {
        grads.accumulate(encoder.temperature, &Array2::from_elem((1, 1), alpha * dw));
    }
    let grad_norm = match cfg.train.grad_clip {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step: step as u64,
            detail: format!("gradient norm {grad_norm}; cls={loss_cls} cst={loss_cst} kl={loss_kl}"),
        });
    }
    let temperature = model.encoder.temperature;
    adam.step(&mut model.store, &grads, lr);
    let w = model.store.get_mut(temperature);
    w[[0, 0]] = clamp_temperature(w[[0, 0]] as f64) as f32;

    Ok(StepReport {
        step,
        lr,
        loss_total: total,
        loss_cls: loss_cls as f64,
        loss_cst: loss_cst as f64,
        loss_kl: loss_kl as f64,
        gate_mean,
        grad_norm,
    })
}

pub fn trainable_optimizer(model: &Stage1Model) -> Adam<f32> {
    let ids = model.store.ids().filter(|&id| !model.store.name(id).starts_with(TEXT_PREFIX));
    Adam::new(model.config.train.adam.clone(), ids.collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    pub train_loss_mean: f64,
    pub train_cls_mean: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Outcome {
    pub config_hash: String,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub final_checksum: String,
    pub text_checksum_before: String,
    pub text_checksum_after: String,
    /// Classification loss of the first batch, measured before any update.
    pub initial_cls_loss: f64,
}

/// Batches of train-split images for one epoch, in seeded shuffle order.
/// A trailing batch too small for the contrastive loss is dropped.
pub fn epoch_batches<'c>(train: &[&'c LabeledImage], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<&'c LabeledImage>> {
    let mut order: Vec<&LabeledImage> = train.to_vec();
    order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));
    let min = if cfg.ablation.use_contrastive { 2 } else { 1 };
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= min)
        .map(|c| c.to_vec())
        .collect()
}

/// Trains on the corpus train split, validating after every epoch. Writes
/// `metrics.jsonl`, `best.ckpt`, `final.ckpt` and `config.json` into `out_dir`.
pub fn train_stage1(corpus: &SynthCorpus, captions: &[CaptionRecord], config: &RunConfig, out_dir: &Path) -> Result<Stage1Outcome> {
    let mut model = Stage1Model::new(config.clone())?;
    if corpus.image_side != config.backbone.image_side {
        return Err(Error::Config(format!(
            "corpus images are {}px, backbone expects {}px",
            corpus.image_side, config.backbone.image_side
        )));
    }
    let train: Vec<&LabeledImage> = corpus.samples_in(Split::Train).collect();
    let val: Vec<&LabeledImage> = corpus.samples_in(Split::Val).collect();
    let tc = &config.train;

    let by_id: HashMap<&str, &CaptionRecord> = captions.iter().map(|c| (c.image_id.as_str(), c)).collect();
    let mut texts = TextCache::new();
    if tc.ablation.use_contrastive {
        for img in &train {
            match by_id.get(img.id.as_str()) {
                Some(rec) if !rec.sentences.is_empty() => {}
                _ => return Err(Error::Config(format!("no caption for training image {}", img.id))),
            }
        }
        let sentences = train
            .iter()
            .flat_map(|img| by_id[img.id.as_str()].sentences.iter().map(|s| s.text.as_str()));
        texts = build_text_cache(&model, sentences)?;
    }

    let steps_per_epoch = epoch_batches(&train, tc, 0).len();
    let total_steps = steps_per_epoch * tc.epochs;
    lr_at(0, total_steps, tc)?;

    std::fs::create_dir_all(out_dir).map_err(crate::io::file_err(out_dir))?;
    write_json(&out_dir.join("config.json"), config)?;
    let metrics_log = out_dir.join("metrics.jsonl");
    let mut log = JsonlLog::create(&metrics_log)?;
    let best_checkpoint = out_dir.join("best.ckpt");
    let final_checkpoint = out_dir.join("final.ckpt");

    let text_checksum_before = model.text_checksum();
    let mut adam = trainable_optimizer(&model);
    let mut step = 0;
    let mut epochs = Vec::new();
    let (mut best_epoch, mut best_val_auc) = (0, f64::NEG_INFINITY);
    let mut initial_cls_loss = f64::NAN;
    for epoch in 0..tc.epochs {
        let (mut loss_sum, mut cls_sum) = (0.0, 0.0);
        let batches = epoch_batches(&train, tc, epoch);
        for images in &batches {
            let mut pick = rng_for(tc.seed, &format!("captions/{step}"));
            let batch: Vec<(&LabeledImage, Option<&str>)> = images
                .iter()
                .map(|img| {
                    let sentence = tc.ablation.use_contrastive.then(|| {
                        let sents = &by_id[img.id.as_str()].sentences;
                        sents[pick.random_range(0..sents.len())].text.as_str()
                    });
                    (*img, sentence)
                })
                .collect();
            let lr = lr_at(step, total_steps, tc)?;
            let report = train_step(&mut model, &mut adam, &batch, &texts, step, lr)?;
            if step == 0 {
                initial_cls_loss = report.loss_cls;
            }
            loss_sum += report.loss_total;
            cls_sum += report.loss_cls;
            log.append(&json!({
                "step": step,
                "lr": lr,
                "loss_total": report.loss_total,
                "loss_cls": report.loss_cls,
                "loss_cst": report.loss_cst,
                "loss_kl": report.loss_kl,
                "gate_w1_mean": report.gate_mean[0],
                "grad_norm": report.grad_norm,
            }))?;
            step += 1;
        }
        let val_auc = model.auc_on(&val)?;
        let summary = EpochSummary {
            epoch,
            step,
            train_loss_mean: loss_sum / batches.len() as f64,
            train_cls_mean: cls_sum / batches.len() as f64,
            val_auc,
        };
        tracing::info!(epoch, val_auc, loss = summary.train_loss_mean, "epoch done");
        log.append(&summary)?;
        if val_auc > best_val_auc {
            best_val_auc = val_auc;
            best_epoch = epoch;
            model.save(&best_checkpoint, json!({ "epoch": epoch, "val_auc": val_auc }))?;
        }
        epochs.push(summary);
    }
    model.save(
        &final_checkpoint,
        json!({ "epoch": tc.epochs - 1, "val_auc": epochs.last().map(|e| e.val_auc) }),
    )?;

    let text_checksum_after = model.text_checksum();
    if text_checksum_after != text_checksum_before {
        return Err(Error::Contract("text encoder parameters changed during training".into()));
    }
    Ok(Stage1Outcome {
        config_hash: config.hash(),
        epochs,
        best_epoch,
        best_val_auc,
        best_checkpoint,
        final_checkpoint,
        metrics_log,
        final_checksum: model.checksum(),
        text_checksum_before,
        text_checksum_after,
        initial_cls_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_captions, StubClient};
    use crate::synthface::make_corpus_with_side;

    fn tiny_config(ablation: Branches) -> RunConfig {
        RunConfig {
            backbone: VisionBackboneConfig {
                image_side: 32,
                patch_size: 8,
                embed_dim: 32,
                layers: 2,
                heads: 4,
                mlp_ratio: 2.0,
            },
            train: TrainConfig {
                warmup_steps: 2,
                epochs: 1,
                batch_size: 8,
                seed: 3,
                ablation,
                lr_base: 1e-3,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(100, 1100, &cfg).unwrap(), cfg.lr_base);
        assert!((lr_at(600, 1100, &cfg).unwrap() - cfg.lr_base / 2.0).abs() < 1e-15);
        assert!(lr_at(1100, 1100, &cfg).unwrap().abs() < 1e-15);
        assert!(lr_at(0, 100, &cfg).is_err());
        assert!(lr_at(1101, 1100, &cfg).is_err());
    }

    #[test]
    fn config_validation_and_overrides() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let o = cfg
            .with_overrides(&[
                ("train.lr_base".into(), "5e-6".into()),
                ("train.ablation.use_adapter".into(), "false".into()),
                ("loss.alpha".into(), "1".into()),
            ])
            .unwrap();
        assert_eq!(o.train.lr_base, 5e-6);
        assert!(!o.train.ablation.use_adapter);
        assert_eq!(o.loss.alpha, 1.0);
        assert!(matches!(
            cfg.with_overrides(&[("train.nope".into(), "1".into())]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.with_overrides(&[("train.epochs".into(), "zero".into())]),
            Err(Error::Config(_))
        ));
        assert_ne!(o.hash(), cfg.hash());
    }

    #[test]
    fn presets_cover_the_ablation_rows() {
        assert_eq!(ablation_preset("full").unwrap(), Branches::FULL);
        assert!(!ablation_preset("none").unwrap().use_contrastive);
        assert!(ablation_preset("semantic-uncertainty").unwrap().use_uncertainty);
        assert!(ablation_preset("bogus").is_err());
    }

    fn batch_fixture() -> (SynthCorpus, Vec<CaptionRecord>) {
        let corpus = make_corpus_with_side(11, 16, 32).unwrap();
        let captions = generate_captions(corpus.samples.iter(), &StubClient, 2, false).unwrap().records;
        (corpus, captions)
    }

    fn run_steps(ablation: Branches, n: usize) -> (Vec<StepReport>, Stage1Model) {
        let (corpus, captions) = batch_fixture();
        let mut model = Stage1Model::new(tiny_config(ablation)).unwrap();
        let texts = build_text_cache(&model, captions.iter().flat_map(|c| c.sentences.iter().map(|s| s.text.as_str()))).unwrap();
        let by_id: HashMap<_, _> = captions.iter().map(|c| (c.image_id.as_str(), c)).collect();
        let batch: Vec<_> = corpus
            .samples
            .iter()
            .take(8)
            .map(|img| (img, Some(by_id[img.id.as_str()].sentences[0].text.as_str())))
            .collect();
        let mut adam = trainable_optimizer(&model);
        let reports = (0..n)
            .map(|s| train_step(&mut model, &mut adam, &batch, &texts, s, 1e-3).unwrap())
            .collect();
        (reports, model)
    }

    #[test]
    fn full_step_reports_sane_values() {
        let (reports, model) = run_steps(Branches::FULL, 3);
        let r = &reports[0];
        assert!(r.loss_cst > 0.0 && r.loss_cls > 0.0);
        assert!(r.gate_mean.iter().all(|&w| w > 0.0 && w < 1.0));
        assert!((r.gate_mean[0] + r.gate_mean[1] - 1.0).abs() < 1e-6);
        let w = model.encoder.temperature(&model.store);
        assert!((1.0..=100.0).contains(&w));
        assert_ne!(w as f32, (1.0 / 0.07) as f32);
    }

    #[test]
    fn classification_only_skips_text() {
        let (reports, model) = run_steps(ablation_preset("none").unwrap(), 1);
        assert_eq!(reports[0].loss_cst, 0.0);
        assert_eq!(reports[0].gate_mean, [1.0, 0.0]);
        assert_eq!(model.encoder.temperature(&model.store) as f32, (1.0 / 0.07) as f32);
    }

    #[test]
    fn steps_are_deterministic() {
        let (a, ma) = run_steps(Branches::FULL, 2);
        let (b, mb) = run_steps(Branches::FULL, 2);
        assert_eq!(a, b);
        assert_eq!(ma.checksum(), mb.checksum());
    }

    #[test]
    fn text_encoder_is_never_updated() {
        let (_, trained) = run_steps(Branches::FULL, 2);
        let fresh = Stage1Model::new(tiny_config(Branches::FULL)).unwrap();
        assert_eq!(trained.text_checksum(), fresh.text_checksum());
        assert_ne!(trained.checksum(), fresh.checksum());
    }

    #[test]
    fn missing_captions_are_a_config_error() {
        let (corpus, _) = batch_fixture();
        let dir = tempfile::tempdir().unwrap();
        let err = train_stage1(&corpus, &[], &tiny_config(Branches::FULL), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn stage1_writes_reloadable_checkpoints() {
        let (corpus, captions) = batch_fixture();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Branches::FULL);
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        let out = train_stage1(&corpus, &captions, &cfg, dir.path()).unwrap();
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.text_checksum_before, out.text_checksum_after);
        let reloaded = Stage1Model::load(&out.final_checkpoint).unwrap();
        assert_eq!(reloaded.checksum(), out.final_checksum);
        let val: Vec<_> = corpus.samples_in(Split::Val).collect();
        assert_eq!(reloaded.auc_on(&val).unwrap(), out.epochs[1].val_auc);
        let lines = std::fs::read_to_string(&out.metrics_log).unwrap();
        assert_eq!(lines.lines().count(), out.epochs[1].step + 2);
    }
}
