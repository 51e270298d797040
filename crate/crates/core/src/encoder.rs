//! The expert vision stack and the frozen text encoder.
//!
//! A ViT backbone produces the raw embedding `h`. Three heads read `h`:
//! a probabilistic head giving `(μ, σ)` from which the contrastive feature
//! `z` is drawn, a statistical branch giving `v`, and a gate `softmax(R(v))`
//! that mixes them into `e = w₁·v + w₂·z` for the classifier.

use authguard_nn::layers::{BlockStack, LayerNorm, Linear};
use authguard_nn::{Float, Graph, ParamId, ParamStore, Var};
use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::rng_for;
use crate::synthface::{LabeledImage, CHANNELS};
use crate::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const TEXT_BUCKETS: usize = 8192;
pub const TEXT_MAX_TOKENS: usize = 64;
pub const TEXT_LAYERS: usize = 2;
/// Seed name the frozen text encoder is initialized from, independent of the run seed.
pub const TEXT_SEED_NAME: &str = "text-encoder/frozen";

pub const TEXT_PREFIX: &str = "text.";
pub const TEMPERATURE_PARAM: &str = "loss.temperature";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionBackboneConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VisionBackboneConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_size: 8,
            embed_dim: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl VisionBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.layers < 2 {
            return Err(Error::Config("the backbone needs at least two layers".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Splits an `S × S × 3` image into row-major `P × P` patches, one flattened
/// patch per output row.
pub fn patchify(pixels: &Array3<f32>, patch: usize) -> Result<Array2<f32>> {
    let (h, w, c) = pixels.dim();
    if h != w || c != CHANNELS || h % patch != 0 {
        return Err(Error::Shape(format!("cannot patchify {h}x{w}x{c} with patch {patch}")));
    }
    let grid = h / patch;
    let mut out = Array2::zeros((grid * grid, patch * patch * c));
    for pr in 0..grid {
        for pc in 0..grid {
            let block = pixels.slice(s![pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch, ..]);
            let mut row = out.row_mut(pr * grid + pc);
            for (dst, &v) in row.iter_mut().zip(block.iter()) {
                *dst = v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbedding {
    pub class_token: Array1<f32>,
    /// Final-layer patch tokens, `num_patches × d`.
    pub patch_tokens: Array2<f32>,
    /// Patch tokens entering the final block.
    pub penultimate_patch_tokens: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDistribution {
    pub mu: Array1<f32>,
    pub sigma: Array1<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedFeatures {
    pub z: Array1<f32>,
    pub v: Array1<f32>,
    pub w: [f32; 2],
    pub e: Array1<f32>,
    pub logit: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub t: Array1<f32>,
}

#[derive(Clone, Debug)]
pub struct VisionBackbone {
    pub cfg: VisionBackboneConfig,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub blocks: BlockStack,
    pub norm: LayerNorm,
}

impl VisionBackbone {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &VisionBackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(store, rng, "vision.patch_embed", cfg.patch_dim(), d)?,
            class_token: store.normal("vision.class_token", 1, d, 0.02, rng)?,
            positions: store.normal("vision.positions", cfg.num_patches() + 1, d, 0.02, rng)?,
            blocks: BlockStack::new(store, rng, "vision.blocks", cfg.layers, d, cfg.heads, cfg.mlp_hidden(), false)?,
            norm: LayerNorm::new(store, "vision.norm", d)?,
        })
    }

    /// Returns `(h, penultimate)`: normalized final tokens and the tokens
    /// entering the last block, both `(N_p + 1) × d` with the class token first.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, patches: Var) -> (Var, Var) {
        let x = self.patch_embed.forward(g, patches);
        let cls = g.param(self.class_token);
        let x = g.concat_rows(&[cls, x]);
        let pos = g.param(self.positions);
        let x = g.add(x, pos);
        let (x, penultimate) = self.blocks.forward_with_penultimate(g, x);
        (self.norm.forward(g, x), penultimate)
    }
}

/// A stack of self-attention blocks read out at the class position.
#[derive(Clone, Debug)]
pub struct ClassReadout {
    pub blocks: BlockStack,
    pub norm: Option<LayerNorm>,
    pub out: Option<Linear>,
}

impl ClassReadout {
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, h: Var) -> Var {
        let x = self.blocks.forward(g, h);
        let mut x = g.slice_rows(x, 0, 1);
        if let Some(norm) = &self.norm {
            x = norm.forward(g, x);
        }
        match &self.out {
            Some(out) => out.forward(g, x),
            None => x,
        }
    }
}

/// `μ = f_μ(h)`, `σ = softplus(f_σ(h)) + 1e-6` from two independent stacks.
#[derive(Clone, Debug)]
pub struct ProbHead {
    pub mu: ClassReadout,
    pub sigma: ClassReadout,
}

/// Initial bias of the σ head's output layer, so `σ` starts near 0.05.
const SIGMA_BIAS_INIT: f64 = -3.0;

impl ProbHead {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &VisionBackboneConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let mut readout = |store: &mut ParamStore<F>, name: &str| -> Result<ClassReadout> {
            Ok(ClassReadout {
                blocks: BlockStack::new(
                    store,
                    rng,
                    &format!("heads.{name}.blocks"),
                    2,
                    d,
                    cfg.heads,
                    cfg.mlp_hidden(),
                    false,
                )?,
                norm: Some(LayerNorm::new(store, &format!("heads.{name}.norm"), d)?),
                out: Some(Linear::new(store, rng, &format!("heads.{name}.out"), d, d)?),
            })
        };
        let mu = readout(store, "mu")?;
        let sigma = readout(store, "sigma")?;
        let bias = sigma.out.as_ref().expect("sigma out").bias;
        store.get_mut(bias).fill(F::lit(SIGMA_BIAS_INIT));
        Ok(Self { mu, sigma })
    }

    pub fn forward_mu<F: Float>(&self, g: &mut Graph<F>, h: Var) -> Var {
        self.mu.forward(g, h)
    }

    pub fn forward_sigma<F: Float>(&self, g: &mut Graph<F>, h: Var) -> Var {
        let raw = self.sigma.forward(g, h);
        sigma_from_raw(g, raw)
    }
}

/// `softplus(raw) + 1e-6`.
pub fn sigma_from_raw<F: Float>(g: &mut Graph<F>, raw: Var) -> Var {
    let sp = g.softplus(raw);
    let floor = g.input(Array2::from_elem(g.shape(raw), F::lit(SIGMA_FLOOR)));
    g.add(sp, floor)
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(d: &EmbeddingDistribution, eps: &Array1<f32>) -> Result<Array1<f32>> {
    if eps.len() != d.mu.len() || d.sigma.len() != d.mu.len() {
        return Err(Error::Shape(format!("eps {} vs mu {}", eps.len(), d.mu.len())));
    }
    Ok(&d.mu + &(&d.sigma * eps))
}

/// Softmax over two router logits.
pub fn gate_weights(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let (a, b) = ((logits[0] - m).exp(), (logits[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// `e = w₁·v + w₂·z`.
pub fn aggregate(v: &Array1<f32>, z: &Array1<f32>, w: [f32; 2]) -> Result<Array1<f32>> {
    if ((w[0] as f64 + w[1] as f64) - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("gate weights {w:?} do not sum to 1")));
    }
    if v.len() != z.len() {
        return Err(Error::Shape(format!("v {} vs z {}", v.len(), z.len())));
    }
    Ok(v.mapv(|x| w[0] * x) + z.mapv(|x| w[1] * x))
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub positions: ParamId,
    pub blocks: BlockStack,
    pub norm: LayerNorm,
    pub dim: usize,
}

/// Lowercase alphanumeric words.
pub fn text_tokens(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// FNV-1a bucket of a word.
pub fn text_bucket(word: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % TEXT_BUCKETS as u64) as usize
}

impl TextEncoder {
    /// Parameters come from [`TEXT_SEED_NAME`] only, so every run shares them.
    pub fn new<F: Float>(store: &mut ParamStore<F>, dim: usize, heads: usize) -> Result<Self> {
        let mut rng = rng_for(0, TEXT_SEED_NAME);
        Ok(Self {
            embed: store.normal("text.embed", TEXT_BUCKETS, dim, 1.0, &mut rng)?,
            positions: store.normal("text.positions", TEXT_MAX_TOKENS, dim, 0.02, &mut rng)?,
            blocks: BlockStack::new(store, &mut rng, "text.blocks", TEXT_LAYERS, dim, heads, 4 * dim, false)?,
            norm: LayerNorm::new(store, "text.norm", dim)?,
            dim,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, sentence: &str) -> Result<Var> {
        let mut ids: Vec<usize> = text_tokens(sentence).iter().map(|w| text_bucket(w)).collect();
        if ids.is_empty() {
            return Err(Error::Degenerate(format!("sentence {sentence:?} has no tokens")));
        }
        ids.truncate(TEXT_MAX_TOKENS);
        let table = g.param(self.embed);
        let x = g.gather(table, &ids);
        let pos = g.param(self.positions);
        let pos = g.slice_rows(pos, 0, ids.len());
        let x = g.add(x, pos);
        let x = self.blocks.forward(g, x);
        let x = self.norm.forward(g, x);
        Ok(g.mean_rows(x))
    }

    pub fn encode(&self, store: &ParamStore<f32>, sentence: &str) -> Result<TextEmbedding> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, sentence)?;
        Ok(TextEmbedding {
            t: g.value(out).row(0).to_owned(),
        })
    }
}

/// Which parts of the stack participate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    /// Compute the contrastive feature `z` (needed for the contrastive loss).
    pub use_contrastive: bool,
    /// Sample `z = μ + σ·ε`; otherwise `z = μ`.
    pub use_uncertainty: bool,
    /// Gate `v` and `z` into `e`; otherwise `e = v`.
    pub use_adapter: bool,
}

impl Branches {
    pub const FULL: Branches = Branches {
        use_contrastive: true,
        use_uncertainty: true,
        use_adapter: true,
    };

    fn needs_z(self) -> bool {
        self.use_contrastive || self.use_adapter
    }
}

/// Graph handles produced for one image.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub h: Var,
    pub penultimate: Var,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    pub z: Option<Var>,
    pub v: Var,
    pub w: Option<Var>,
    pub e: Var,
    pub logit: Var,
}

#[derive(Clone, Debug)]
pub struct ExpertEncoder {
    pub backbone: VisionBackbone,
    pub prob: ProbHead,
    pub stat: ClassReadout,
    pub gate: Linear,
    pub classifier: Linear,
    pub temperature: ParamId,
    pub text: TextEncoder,
}

impl ExpertEncoder {
    /// Builds every parameter; `init_seed` drives all but the text encoder.
    pub fn new(store: &mut ParamStore<f32>, cfg: &VisionBackboneConfig, init_seed: u64, temperature: f64) -> Result<Self> {
        let mut rng = rng_for(init_seed, "init");
        let backbone = VisionBackbone::new(store, &mut rng, cfg)?;
        let prob = ProbHead::new(store, &mut rng, cfg)?;
        let d = cfg.embed_dim;
        let stat = ClassReadout {
            blocks: BlockStack::new(store, &mut rng, "heads.stat.blocks", 2, d, cfg.heads, cfg.mlp_hidden(), false)?,
            norm: Some(LayerNorm::new(store, "heads.stat.norm", d)?),
            out: None,
        };
        let gate = Linear::new(store, &mut rng, "heads.gate", d, 2)?;
        let classifier = Linear::new(store, &mut rng, "heads.cls", d, 1)?;
        let temperature = store.filled(TEMPERATURE_PARAM, 1, 1, temperature)?;
        let text = TextEncoder::new(store, d, cfg.heads)?;
        Ok(Self {
            backbone,
            prob,
            stat,
            gate,
            classifier,
            temperature,
            text,
        })
    }

    pub fn cfg(&self) -> &VisionBackboneConfig {
        &self.backbone.cfg
    }

    /// Forward pass for one image given as patch rows. `eps` is the
    /// reparameterization noise; `None` uses `z = μ` (evaluation).
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, patches: Array2<F>, branches: Branches, eps: Option<Array2<F>>) -> SampleVars {
        let x = g.input(patches);
        let (h, penultimate) = self.backbone.forward(g, x);
        let v = self.stat.forward(g, h);
        let (mut mu, mut sigma, mut z) = (None, None, None);
        if branches.needs_z() {
            let m = self.prob.forward_mu(g, h);
            mu = Some(m);
            z = Some(match (branches.use_uncertainty, eps) {
                (true, Some(eps)) => {
                    let s = self.prob.forward_sigma(g, h);
                    sigma = Some(s);
                    let eps = g.input(eps);
                    let noise = g.mul(s, eps);
                    g.add(m, noise)
                }
                _ => m,
            });
        }
        let (w, e) = match (branches.use_adapter, z) {
            (true, Some(z)) => {
                let logits = self.gate.forward(g, v);
                let w = g.softmax_rows(logits);
                let w1 = g.slice_cols(w, 0, 1);
                let w2 = g.slice_cols(w, 1, 2);
                let a = g.mul_col(v, w1);
                let b = g.mul_col(z, w2);
                (Some(w), g.add(a, b))
            }
            _ => (None, v),
        };
        let logit = self.classifier.forward(g, e);
        SampleVars {
            h,
            penultimate,
            mu,
            sigma,
            z,
            v,
            w,
            e,
            logit,
        }
    }

    pub fn patches(&self, image: &LabeledImage) -> Result<Array2<f32>> {
        if image.side() != self.cfg().image_side {
            return Err(Error::Shape(format!(
                "image {} has side {}, encoder expects {}",
                image.id,
                image.side(),
                self.cfg().image_side
            )));
        }
        // Centred to [-1, 1].
        Ok(patchify(&image.pixels, self.cfg().patch_size)?.mapv(|p| 2.0 * p - 1.0))
    }

    pub fn encode_image(&self, store: &ParamStore<f32>, image: &LabeledImage) -> Result<RawEmbedding> {
        let patches = self.patches(image)?;
        let mut g = Graph::new(store);
        let x = g.input(patches);
        let (h, pen) = self.backbone.forward(&mut g, x);
        let hv = g.value(h);
        let n = hv.nrows();
        Ok(RawEmbedding {
            class_token: hv.row(0).to_owned(),
            patch_tokens: hv.slice(s![1..n, ..]).to_owned(),
            penultimate_patch_tokens: g.value(pen).slice(s![1..n, ..]).to_owned(),
        })
    }

    /// `(μ, σ)` for an image.
    pub fn distribution(&self, store: &ParamStore<f32>, image: &LabeledImage) -> Result<EmbeddingDistribution> {
        let patches = self.patches(image)?;
        let mut g = Graph::new(store);
        let x = g.input(patches);
        let (h, _) = self.backbone.forward(&mut g, x);
        let mu = self.prob.forward_mu(&mut g, h);
        let sigma = self.prob.forward_sigma(&mut g, h);
        Ok(EmbeddingDistribution {
            mu: g.value(mu).row(0).to_owned(),
            sigma: g.value(sigma).row(0).to_owned(),
        })
    }

    /// Deterministic features (`z = μ`) for an image.
    pub fn features(&self, store: &ParamStore<f32>, image: &LabeledImage, branches: Branches) -> Result<GatedFeatures> {
        let patches = self.patches(image)?;
        let mut g = Graph::new(store);
        let vars = self.forward(&mut g, patches, branches, None);
        Ok(gated_values(&g, &vars))
    }

    pub fn temperature(&self, store: &ParamStore<f32>) -> f64 {
        store.get(self.temperature)[[0, 0]] as f64
    }
}

/// Reads a [`GatedFeatures`] out of an evaluated graph.
pub fn gated_values(g: &Graph<f32>, vars: &SampleVars) -> GatedFeatures {
    let row = |v: Var| g.value(v).row(0).to_owned();
    let v = row(vars.v);
    let z = vars.z.map(row).unwrap_or_else(|| Array1::zeros(v.len()));
    let w = vars.w.map(|w| [g.value(w)[[0, 0]], g.value(w)[[0, 1]]]).unwrap_or([1.0, 0.0]);
    GatedFeatures {
        z,
        v,
        w,
        e: row(vars.e),
        logit: g.scalar(vars.logit),
    }
}
