//! Training objectives with closed-form gradients.
//!
//! Each loss is a pure function returning its value together with the
//! gradient of that value with respect to every input. The `*Op` wrappers
//! expose the same functions as graph nodes.

use authguard_nn::{CustomOp, Float};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TEMPERATURE_MIN: f64 = 1.0;
pub const TEMPERATURE_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the contrastive term.
    pub alpha: f64,
    /// Weight on the classification term.
    pub beta: f64,
    /// Initial value of the learnable similarity scale.
    pub temperature_w: f64,
    pub kl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            temperature_w: 1.0 / 0.07,
            kl_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.kl_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature_w > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

pub fn clamp_temperature(w: f64) -> f64 {
    w.clamp(TEMPERATURE_MIN, TEMPERATURE_MAX)
}

/// Value and gradients of the symmetric contrastive loss.
#[derive(Clone, Debug)]
pub struct ContrastiveGrad<F: Float> {
    pub loss: F,
    pub dz: Array2<F>,
    pub dt: Array2<F>,
    pub dw: F,
}

fn normalize_rows<F: Float>(x: ArrayView2<F>, what: &str) -> Result<(Array2<F>, Vec<F>)> {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if !(n > F::zero()) || !n.is_finite() {
            return Err(Error::Degenerate(format!("{what} row {i} has zero or non-finite norm")));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn log_softmax_rows<F: Float>(s: &Array2<F>) -> Array2<F> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Gradient through `x̂ = x / ‖x‖` row-wise.
fn normalize_backward<F: Float>(xhat: &Array2<F>, norms: &[F], dxhat: &Array2<F>) -> Array2<F> {
    let mut out = dxhat.clone();
    for ((mut o, xh), &n) in out.rows_mut().into_iter().zip(xhat.rows()).zip(norms) {
        let dot = o.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
        for (ov, &xv) in o.iter_mut().zip(xh.iter()) {
            *ov = (*ov - xv * dot) / n;
        }
    }
    out
}

/// Symmetric image↔text InfoNCE over matched rows of `z` and `t`:
/// `−(1/2B) Σ_i [log softmax_k(w ẑ_i·t̂_k)_i + log softmax_k(w t̂_i·ẑ_k)_i]`.
pub fn contrastive_loss_grad<F: Float>(z: ArrayView2<F>, t: ArrayView2<F>, w: F) -> Result<ContrastiveGrad<F>> {
    let b = z.nrows();
    if b == 0 {
        return Err(Error::Degenerate("empty contrastive batch".into()));
    }
    if t.dim() != z.dim() {
        return Err(Error::Shape(format!("image {:?} vs text {:?}", z.dim(), t.dim())));
    }
    let (zh, zn) = normalize_rows(z, "image")?;
    let (th, tn) = normalize_rows(t, "text")?;
    let cos = zh.dot(&th.t());
    let s = cos.mapv(|v| v * w);
    let lp_img = log_softmax_rows(&s);
    let st = s.t().to_owned();
    let lp_txt = log_softmax_rows(&st);
    let bf = F::lit(b as f64);
    let two_b = F::lit(2.0) * bf;
    let loss = -(0..b).map(|i| lp_img[[i, i]] + lp_txt[[i, i]]).sum::<F>() / two_b;

    // dL/dS = (P_img − I + (P_txt − I)ᵀ) / 2B
    let mut g = lp_img.mapv(|v| v.exp()) + &lp_txt.mapv(|v| v.exp()).t();
    for i in 0..b {
        g[[i, i]] -= F::lit(2.0);
    }
    g.mapv_inplace(|v| v / two_b);
    let dw = (&g * &cos).sum();
    let dzh = g.dot(&th).mapv(|v| v * w);
    let dth = g.t().dot(&zh).mapv(|v| v * w);
    Ok(ContrastiveGrad {
        loss,
        dz: normalize_backward(&zh, &zn, &dzh),
        dt: normalize_backward(&th, &tn, &dth),
        dw,
    })
}

pub fn contrastive_loss<F: Float>(z: ArrayView2<F>, t: ArrayView2<F>, w: F) -> Result<F> {
    contrastive_loss_grad(z, t, w).map(|g| g.loss)
}

fn check_labels<F: Float>(labels: &[F]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&y| y != F::zero() && y != F::one()) {
        return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, `softplus(l) − y·l` per element.
/// Returns the loss and `dloss/dlogit = (σ(l) − y)/B`.
pub fn bce_loss_grad<F: Float>(logits: &[F], labels: &[F]) -> Result<(F, Vec<F>)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits vs {} labels", logits.len(), labels.len())));
    }
    check_labels(labels)?;
    let n = F::lit(logits.len() as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        loss += l.max(F::zero()) - y * l + (-l.abs()).exp().ln_1p();
        let p = if l >= F::zero() {
            F::one() / (F::one() + (-l).exp())
        } else {
            let e = l.exp();
            e / (F::one() + e)
        };
        grad.push((p - y) / n);
    }
    Ok((loss / n, grad))
}

pub fn bce_loss<F: Float>(logits: &[F], labels: &[F]) -> Result<F> {
    bce_loss_grad(logits, labels).map(|(l, _)| l)
}

/// Mean over all elements of `KL(N(μ, σ²) ‖ N(0, 1)) = ½(σ² + μ² − 1 − ln σ²)`.
pub fn kl_regularizer_grad<F: Float>(mu: ArrayView2<F>, sigma: ArrayView2<F>) -> Result<(F, Array2<F>, Array2<F>)> {
    if mu.dim() != sigma.dim() || mu.is_empty() {
        return Err(Error::Shape(format!("mu {:?} vs sigma {:?}", mu.dim(), sigma.dim())));
    }
    if sigma.iter().any(|&s| !(s > F::zero())) {
        return Err(Error::Degenerate("sigma must be strictly positive".into()));
    }
    let n = F::lit(mu.len() as f64);
    let half = F::lit(0.5);
    let loss = mu
        .iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| half * (s * s + m * m - F::one() - (s * s).ln()))
        .sum::<F>()
        / n;
    let dmu = mu.mapv(|m| m / n);
    let dsigma = sigma.mapv(|s| (s - F::one() / s) / n);
    Ok((loss, dmu, dsigma))
}

pub fn kl_regularizer<F: Float>(mu: ArrayView2<F>, sigma: ArrayView2<F>) -> Result<F> {
    kl_regularizer_grad(mu, sigma).map(|(l, _, _)| l)
}

/// `β·L_cls + α·L_cst + kl_weight·L_kl`.
pub fn total_loss(cls: f64, cst: f64, kl: f64, cfg: &LossConfig) -> f64 {
    cfg.beta * cls + cfg.alpha * cst + cfg.kl_weight * kl
}

/// Graph node for [`contrastive_loss_grad`]; inputs `[z (B×d), t (B×d), w (1×1)]`.
#[derive(Default)]
pub struct ContrastiveOp<F: Float> {
    cached: Option<ContrastiveGrad<F>>,
}

impl<F: Float> ContrastiveOp<F> {
    pub fn new() -> Self {
        Self { cached: None }
    }
}

impl<F: Float> CustomOp<F> for ContrastiveOp<F> {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn forward(&mut self, inputs: &[&Array2<F>]) -> Array2<F> {
        let g =
            contrastive_loss_grad(inputs[0].view(), inputs[1].view(), inputs[2][[0, 0]]).expect("contrastive inputs validated by caller");
        let out = Array2::from_elem((1, 1), g.loss);
        self.cached = Some(g);
        out
    }

    fn backward(&self, _: &[&Array2<F>], _: &Array2<F>, grad: &Array2<F>) -> Vec<Array2<F>> {
        let c = self.cached.as_ref().expect("forward ran");
        let s = grad[[0, 0]];
        vec![c.dz.mapv(|v| v * s), c.dt.mapv(|v| v * s), Array2::from_elem((1, 1), c.dw * s)]
    }
}

/// Graph node for [`bce_loss_grad`]; input `[logits (B×1)]`, labels fixed.
pub struct BceOp<F: Float> {
    labels: Vec<F>,
    grad: Vec<F>,
}

impl<F: Float> BceOp<F> {
    pub fn new(labels: Vec<F>) -> Result<Self> {
        check_labels(&labels)?;
        Ok(Self { labels, grad: Vec::new() })
    }
}

impl<F: Float> CustomOp<F> for BceOp<F> {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn forward(&mut self, inputs: &[&Array2<F>]) -> Array2<F> {
        let logits: Vec<F> = inputs[0].iter().copied().collect();
        let (loss, grad) = bce_loss_grad(&logits, &self.labels).expect("labels validated");
        self.grad = grad;
        Array2::from_elem((1, 1), loss)
    }

    fn backward(&self, inputs: &[&Array2<F>], _: &Array2<F>, grad: &Array2<F>) -> Vec<Array2<F>> {
        let s = grad[[0, 0]];
        let g = Array1::from(self.grad.iter().map(|&v| v * s).collect::<Vec<_>>());
        vec![g.into_shape_with_order(inputs[0].dim()).expect("same length")]
    }
}

/// Graph node for [`kl_regularizer_grad`]; inputs `[mu, sigma]`.
#[derive(Default)]
pub struct KlOp<F: Float> {
    grads: Option<(Array2<F>, Array2<F>)>,
}

impl<F: Float> KlOp<F> {
    pub fn new() -> Self {
        Self { grads: None }
    }
}

impl<F: Float> CustomOp<F> for KlOp<F> {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn forward(&mut self, inputs: &[&Array2<F>]) -> Array2<F> {
        let (loss, dmu, dsigma) = kl_regularizer_grad(inputs[0].view(), inputs[1].view()).expect("sigma > 0");
        self.grads = Some((dmu, dsigma));
        Array2::from_elem((1, 1), loss)
    }

    fn backward(&self, _: &[&Array2<F>], _: &Array2<F>, grad: &Array2<F>) -> Vec<Array2<F>> {
        let (dmu, dsigma) = self.grads.as_ref().expect("forward ran");
        let s = grad[[0, 0]];
        vec![dmu.mapv(|v| v * s), dsigma.mapv(|v| v * s)]
    }
}

/// Row-wise mean of a matrix, used to report batch-average gate weights.
pub fn column_means(x: &Array2<f32>) -> Vec<f64> {
    x.mean_axis(Axis(0))
        .map(|m| m.iter().map(|&v| v as f64).collect())
        .unwrap_or_default()
}
