use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use authguard_core::datagen::{
    build_instruction_samples, generate_captions, read_captions, read_instructions, write_captions, write_instructions, HttpClient,
    HttpClientConfig, MllmClient, StubClient, DETECTION_QUESTION,
};
use authguard_core::io::{read_json, write_json, write_jsonl};
use authguard_core::metrics::{evaluate, read_predictions, Prediction};
use authguard_core::reasoning::{train_stage2, Generation, Stage2Config, Stage2Model};
use authguard_core::report::{plot_series, series_from_log, write_ablation_table, AblationRow, AblationTable, Series};
use authguard_core::seed::sha256_hex;
use authguard_core::synthface::{make_corpus_with_side, LabeledImage, Split, SynthCorpus, DEFAULT_SIDE};
use authguard_core::train::{ablation_preset, train_stage1, RunConfig, Stage1Model, Stage1Outcome, ABLATION_PRESETS};
use authguard_core::Error;
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::RunManifest;
use crate::OverrideArgs;

pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn parse_overrides(o: &OverrideArgs) -> std::result::Result<Vec<(String, String)>, CliError> {
    o.set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CliError::Usage(format!("override `{s}` is not PATH=VALUE")))
        })
        .collect()
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, overlaid with an optional (possibly partial) JSON config file.
fn load_config<T: Serialize + serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, CliError> {
    let mut tree = serde_json::to_value(T::default()).map_err(|e| CliError::Runtime(e.into()))?;
    if let Some(p) = path {
        let patch: Value = read_json(p)?;
        merge_json(&mut tree, patch);
    }
    serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn create_dir(dir: &Path) -> std::result::Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Runtime(Error::File {
            path: dir.display().to_string(),
            source: e,
        })
    })
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}` (train, val, test)")),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = DEFAULT_SIDE)]
    pub side: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: SynthArgs) -> CliResult {
    let corpus = make_corpus_with_side(a.seed, a.n, a.side)?;
    corpus.save(&a.out)?;
    let hash = sha256_hex(format!("synth:{}:{}:{}", a.seed, a.n, a.side).as_bytes());
    let mut m = RunManifest::new("synth", hash, a.seed);
    m.artifact(a.out.join("corpus.json"));
    m.write(&a.out)?;
    tracing::info!(n = a.n, dir = %a.out.display(), "corpus written");
    Ok(())
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the offline deterministic captioner instead of an HTTP endpoint.
    #[arg(long)]
    pub stub: bool,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "AUTHGUARD_API_KEY")]
    pub api_key_env: String,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Attach the PNG to each request.
    #[arg(long)]
    pub attach_png: bool,
}

pub fn datagen(a: DatagenArgs) -> CliResult {
    let corpus = SynthCorpus::load(&a.corpus)?;
    let client: Box<dyn MllmClient> = if a.stub {
        Box::new(StubClient)
    } else {
        let endpoint = a
            .endpoint
            .clone()
            .ok_or_else(|| CliError::Usage("either --stub or --endpoint is required".into()))?;
        let mut cfg = HttpClientConfig {
            endpoint,
            api_key_env: a.api_key_env.clone(),
            timeout_secs: a.timeout_secs,
            retries: a.retries,
            ..HttpClientConfig::default()
        };
        if let Some(m) = &a.model {
            cfg.model = m.clone();
        }
        Box::new(HttpClient::new(cfg)?)
    };
    let outcome = generate_captions(corpus.samples.iter(), client.as_ref(), a.concurrency, a.attach_png)?;
    let instructions = build_instruction_samples(&outcome.records)?;
    create_dir(&a.out)?;
    let captions_path = a.out.join("captions.jsonl");
    let instructions_path = a.out.join("instructions.jsonl");
    let failures_path = a.out.join("failures.jsonl");
    write_captions(&captions_path, &outcome.records)?;
    write_instructions(&instructions_path, &instructions)?;
    write_jsonl(&failures_path, &outcome.failures)?;
    let source = if a.stub {
        "stub".to_string()
    } else {
        a.endpoint.clone().unwrap_or_default()
    };
    let mut m = RunManifest::new("datagen", sha256_hex(source.as_bytes()), corpus.seed);
    m.artifact(captions_path).artifact(instructions_path).artifact(failures_path);
    m.write(&a.out)?;
    tracing::info!(
        captions = outcome.records.len(),
        failures = outcome.failures.len(),
        instructions = instructions.len(),
        "datagen done"
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// `captions.jsonl` from `datagen`; required unless the contrastive loss is off.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// One of: none, semantic, semantic-uncertainty, full.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Run every ablation preset for every seed in `--seeds`.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

/// `summary.json` of a stage-1 run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderRunSummary {
    pub preset: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub outcome: Stage1Outcome,
    pub test_auc: f64,
    pub test_accuracy: f64,
}

fn run_encoder(
    corpus: &SynthCorpus,
    captions: &[authguard_core::datagen::CaptionRecord],
    config: &RunConfig,
    preset: Option<String>,
    out: &Path,
) -> std::result::Result<EncoderRunSummary, CliError> {
    let outcome = train_stage1(corpus, captions, config, out)?;
    let model = Stage1Model::load(&outcome.final_checkpoint)?;
    let test: Vec<&LabeledImage> = corpus.samples_in(Split::Test).collect();
    let preds = predictions(&model, &test)?;
    let report = evaluate(&preds, 0.5, &config.hash())?;
    let summary = EncoderRunSummary {
        preset,
        seed: config.train.seed,
        config: config.clone(),
        test_auc: report.auc,
        test_accuracy: report.accuracy,
        outcome,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    let mut m = RunManifest::new("train-encoder", config.hash(), config.train.seed);
    m.artifact(out.join("config.json"))
        .artifact(&summary.outcome.metrics_log)
        .artifact(&summary.outcome.best_checkpoint)
        .artifact(&summary.outcome.final_checkpoint)
        .artifact(summary_path);
    m.write(out)?;
    tracing::info!(test_auc = summary.test_auc, dir = %out.display(), "encoder trained");
    Ok(summary)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn predictions(model: &Stage1Model, images: &[&LabeledImage]) -> std::result::Result<Vec<Prediction>, CliError> {
    let logits = model.logits(images)?;
    Ok(images
        .iter()
        .zip(logits)
        .map(|(img, l)| Prediction {
            image_id: img.id.clone(),
            score: sigmoid(l),
            label: img.label.target() as u8,
            hypothesis: None,
            references: None,
        })
        .collect())
}

pub fn train_encoder(a: TrainEncoderArgs) -> CliResult {
    let mut base: RunConfig = load_config(a.config.as_deref())?;
    if let Some(p) = &a.ablation {
        base.train.ablation = ablation_preset(p)?;
    }
    if let Some(s) = a.seed {
        base.train.seed = s;
    }
    let base = base.with_overrides(&parse_overrides(&a.overrides)?)?;
    let corpus = SynthCorpus::load(&a.corpus)?;
    let captions = match &a.captions {
        Some(p) => read_captions(p)?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    if !a.sweep {
        run_encoder(&corpus, &captions, &base, a.ablation.clone(), &a.out)?;
        return Ok(());
    }

    let seeds = if a.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        a.seeds.clone()
    };
    let mut rows = Vec::new();
    let mut m = RunManifest::new("train-encoder --sweep", base.hash(), seeds[0]);
    for (name, branches) in ABLATION_PRESETS {
        let mut aucs = Vec::new();
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.train.ablation = branches;
            cfg.train.seed = seed;
            let dir = a.out.join(name).join(format!("seed-{seed}"));
            let s = run_encoder(&corpus, &captions, &cfg, Some(name.to_string()), &dir)?;
            aucs.push(s.test_auc);
            m.artifact(dir);
        }
        rows.push(AblationRow {
            name: name.to_string(),
            use_contrastive: branches.use_contrastive,
            use_uncertainty: branches.use_uncertainty,
            use_adapter: branches.use_adapter,
            aucs,
        });
    }
    let table = AblationTable { rows };
    write_ablation_table(&a.out, &table)?;
    m.artifact(a.out.join("ablation.json")).artifact(a.out.join("ablation.md"));
    m.write(&a.out)?;
    println!("{}", table.to_markdown());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainReasonerArgs {
    /// Stage-1 checkpoint (`final.ckpt` or `best.ckpt`).
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `instructions.jsonl` from `datagen`.
    #[arg(long)]
    pub instructions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON stage-2 config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

fn stage2_config(a: &TrainReasonerArgs) -> std::result::Result<Stage2Config, CliError> {
    let mut cfg: Stage2Config = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.max_samples.is_some() {
        cfg.max_samples = a.max_samples;
    }
    let mut tree = serde_json::to_value(&cfg).map_err(|e| CliError::Runtime(e.into()))?;
    for (path, raw) in parse_overrides(&a.overrides)? {
        let mut node = &mut tree;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| CliError::Usage(format!("unknown config field `{path}`")))?;
        }
        *node = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
    }
    let cfg: Stage2Config = serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_reasoner(a: TrainReasonerArgs) -> CliResult {
    let cfg = stage2_config(&a)?;
    let encoder = Stage1Model::load(&a.encoder)?;
    let corpus = SynthCorpus::load(&a.corpus)?;
    let instructions = read_instructions(&a.instructions)?;
    let train: Vec<&LabeledImage> = corpus.samples_in(Split::Train).collect();
    let (_, outcome) = train_stage2(&encoder, &a.encoder, &train, &instructions, &cfg, &a.out)?;
    let summary_path = a.out.join("summary.json");
    write_json(&summary_path, &outcome)?;
    let hash = sha256_hex(&serde_json::to_vec(&cfg).map_err(|e| CliError::Runtime(e.into()))?);
    let mut m = RunManifest::new("train-reasoner", hash, cfg.seed);
    m.artifact(&outcome.checkpoint).artifact(&outcome.loss_log).artifact(summary_path);
    m.write(&a.out)?;
    tracing::info!(initial = outcome.initial_loss, last = outcome.final_loss, "reasoner trained");
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions JSONL; when given, no model is loaded.
    #[arg(long, conflicts_with_all = ["encoder", "corpus"])]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Stage-2 checkpoint; enables caption metrics.
    #[arg(long, requires = "instructions")]
    pub reasoner: Option<PathBuf>,
    /// Reference responses for caption metrics.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 48)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Directory for predictions, report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> CliResult {
    let (preds, hash) = if let Some(p) = &a.pred {
        let bytes = std::fs::read(p).map_err(|e| {
            CliError::Runtime(Error::File {
                path: p.display().to_string(),
                source: e,
            })
        })?;
        (read_predictions(p)?, sha256_hex(&bytes))
    } else {
        let (Some(enc), Some(corpus)) = (&a.encoder, &a.corpus) else {
            return Err(CliError::Usage("eval needs --pred or both --encoder and --corpus".into()));
        };
        let encoder = Stage1Model::load(enc)?;
        let corpus = SynthCorpus::load(corpus)?;
        let mut images: Vec<&LabeledImage> = corpus.samples_in(a.split).collect();
        if let Some(n) = a.limit {
            images.truncate(n);
        }
        let mut preds = predictions(&encoder, &images)?;
        if let (Some(r), Some(i)) = (&a.reasoner, &a.instructions) {
            let reasoner = Stage2Model::load(r, &encoder)?;
            let mut refs: HashMap<String, Vec<String>> = HashMap::new();
            for s in read_instructions(i)? {
                if s.question == DETECTION_QUESTION {
                    refs.entry(s.image_id).or_default().push(s.response);
                }
            }
            let gens: Vec<_> = images
                .par_iter()
                .map(|img| reasoner.generate(&encoder, img, DETECTION_QUESTION, a.max_new))
                .collect();
            for (p, g) in preds.iter_mut().zip(gens) {
                let g = g?;
                if let Some(r) = refs.get(&p.image_id) {
                    p.hypothesis = Some(g.response);
                    p.references = Some(r.clone());
                }
            }
        }
        (preds, encoder.config.hash())
    };
    let report = evaluate(&preds, a.threshold, &hash)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        let pred_path = out.join("predictions.jsonl");
        let report_path = out.join("eval.json");
        write_jsonl(&pred_path, &preds)?;
        write_json(&report_path, &report)?;
        let mut m = RunManifest::new("eval", hash.clone(), 0);
        m.artifact(pred_path).artifact(report_path);
        m.write(out)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.into()))?
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub reasoner: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// A single image; otherwise every image of `--split`.
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = DETECTION_QUESTION)]
    pub question: String,
    #[arg(long, default_value_t = 48)]
    pub max_new: usize,
    /// JSONL output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn generate(a: GenerateArgs) -> CliResult {
    let encoder = Stage1Model::load(&a.encoder)?;
    let reasoner = Stage2Model::load(&a.reasoner, &encoder)?;
    let corpus = SynthCorpus::load(&a.corpus)?;
    let images: Vec<&LabeledImage> = match &a.image_id {
        Some(id) => vec![corpus
            .get(id)
            .ok_or_else(|| CliError::Runtime(Error::InvalidArgument(format!("no image `{id}` in the corpus"))))?],
        None => {
            let mut v: Vec<&LabeledImage> = corpus.samples_in(a.split).collect();
            if let Some(n) = a.limit {
                v.truncate(n);
            }
            v
        }
    };
    let gens = images
        .par_iter()
        .map(|img| reasoner.generate(&encoder, img, &a.question, a.max_new))
        .collect::<authguard_core::Result<Vec<Generation>>>()?;
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_jsonl(path, &gens)?;
            let agree = gens
                .iter()
                .filter(|g| (g.verdict == authguard_core::Label::Fake) == (g.classifier_score >= 0.5))
                .count();
            tracing::info!(n = gens.len(), agreement = agree as f64 / gens.len().max(1) as f64, "generated");
        }
        None => {
            for g in &gens {
                println!("{}", serde_json::to_string(g).map_err(|e| CliError::Runtime(e.into()))?);
            }
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories from `train-encoder` (single or `--sweep`) and `train-reasoner`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Every directory under `root` (inclusive) holding `file`.
fn find_dirs_with(root: &Path, file: &str) -> Vec<PathBuf> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_dir() && e.path().join(file).is_file())
        .map(|e| e.into_path())
        .collect()
}

fn label_for(dir: &Path) -> String {
    dir.components()
        .rev()
        .take(2)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn report(a: ReportArgs) -> CliResult {
    create_dir(&a.out)?;
    let mut m = RunManifest::new("report", sha256_hex(format!("{:?}", a.runs).as_bytes()), 0);
    let (mut loss, mut auc, mut stage2) = (Vec::new(), Vec::new(), Vec::new());
    let mut by_preset: BTreeMap<String, AblationRow> = BTreeMap::new();
    for root in &a.runs {
        for dir in find_dirs_with(root, "metrics.jsonl") {
            let log = dir.join("metrics.jsonl");
            let name = label_for(&dir);
            loss.push(series_from_log(&log, &name, "step", "loss_total")?);
            auc.push(series_from_log(&log, &name, "epoch", "val_auc")?);
            if let Ok(s) = read_json::<EncoderRunSummary>(&dir.join("summary.json")) {
                let key = s.preset.clone().unwrap_or_else(|| "custom".into());
                let b = s.config.train.ablation;
                by_preset
                    .entry(key.clone())
                    .or_insert_with(|| AblationRow {
                        name: key,
                        use_contrastive: b.use_contrastive,
                        use_uncertainty: b.use_uncertainty,
                        use_adapter: b.use_adapter,
                        aucs: Vec::new(),
                    })
                    .aucs
                    .push(s.test_auc);
            }
        }
        for dir in find_dirs_with(root, "stage2_loss.jsonl") {
            stage2.push(series_from_log(
                &dir.join("stage2_loss.jsonl"),
                &label_for(&dir),
                "global_step",
                "loss",
            )?);
        }
    }
    let mut plot = |file: &str, title: &str, x: &str, y: &str, s: &[Series]| -> CliResult {
        if s.iter().any(|s| !s.points.is_empty()) {
            let path = a.out.join(file);
            plot_series(&path, title, x, y, s)?;
            m.artifact(path);
        }
        Ok(())
    };
    plot("loss.svg", "Stage-1 training loss", "step", "total loss", &loss)?;
    plot("val_auc.svg", "Validation AUC", "epoch", "AUC", &auc)?;
    plot("stage2_loss.svg", "Stage-2 autoregressive loss", "step", "ar loss", &stage2)?;
    if !by_preset.is_empty() {
        let order = |n: &str| ABLATION_PRESETS.iter().position(|(p, _)| *p == n).unwrap_or(usize::MAX);
        let mut rows: Vec<AblationRow> = by_preset.into_values().collect();
        rows.sort_by_key(|r| order(&r.name));
        let table = AblationTable { rows };
        write_ablation_table(&a.out, &table)?;
        m.artifact(a.out.join("ablation.md")).artifact(a.out.join("ablation.json"));
        println!("{}", table.to_markdown());
    }
    m.write(&a.out)?;
    Ok(())
}
