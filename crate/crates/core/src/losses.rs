//! Generator objectives: classification KLD, adversarial terms,
//! reconstruction, feature cycle consistency, triangulation and proximity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PROB_FLOOR};
use crate::tensor::{norm2, Tensor};

/// Floor for the latent distance ratio and its denominator.
pub const RATIO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriConfig {
    pub alpha: f64,
    pub ratio_floor: f64,
}

impl Default for TriConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            ratio_floor: RATIO_FLOOR,
        }
    }
}

impl TriConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.ratio_floor > 0.0) {
            return Err(Error::Config("ratio_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub adv: f64,
    pub rec: f64,
    pub fea: f64,
    pub tri: f64,
    /// Proximity baseline, off unless set.
    pub prox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            adv: 1.0,
            rec: 1.0,
            fea: 1.0,
            tri: 1.0,
            prox: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.adv, self.rec, self.fea, self.tri, self.prox];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub cls: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub rec: f64,
    pub fea: f64,
    pub tri: f64,
    pub prox: Option<f64>,
    /// Generator objective.
    pub total: f64,
    /// Set when a discriminator output had to be clamped into (0, 1).
    pub adv_clamped: bool,
}

impl LossReport {
    /// Weighted generator objective from the individual terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.cls * self.cls
            + w.adv * self.adv_g
            + w.rec * self.rec
            + w.fea * self.fea
            + w.tri * self.tri
            + w.prox * self.prox.unwrap_or(0.0)
    }
}

fn check_prob(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
        return Err(Error::InvalidArgument(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `sum p (ln p - ln p_hat)` with `p_hat` floored at `PROB_FLOOR`.
pub fn loss_cls(p_intended: &[f64], p_predicted: &[f64]) -> Result<f64> {
    if p_intended.len() != p_predicted.len() {
        return Err(Error::shape("loss_cls", "probability vectors differ in length"));
    }
    check_prob(p_intended, "intended distribution")?;
    check_prob(p_predicted, "predicted distribution")?;
    Ok(p_intended
        .iter()
        .zip(p_predicted)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(PROB_FLOOR).ln()))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvTerms {
    pub g_term: f64,
    pub d_term: f64,
    pub clamped: bool,
}

const D_LO: f64 = 1e-12;
const D_HI: f64 = 1.0 - 1e-12;

/// Batch means of `-ln D(fake)` and `-[ln D(real) + ln(1 - D(fake))]`.
pub fn loss_adv(d_real: &[f64], d_fake: &[f64]) -> AdvTerms {
    let mut clamped = false;
    let mut c = |v: f64| {
        let out = v.clamp(D_LO, D_HI);
        clamped |= out != v;
        out
    };
    let real: Vec<f64> = d_real.iter().map(|&v| c(v)).collect();
    let fake: Vec<f64> = d_fake.iter().map(|&v| c(v)).collect();
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len().max(1) as f64;
    AdvTerms {
        g_term: mean(&fake, &|f| -f.ln()),
        d_term: mean(&real, &|r| -r.ln()) + mean(&fake, &|f| -(1.0 - f).ln()),
        clamped,
    }
}

/// Mean absolute difference.
pub fn loss_rec(x: &Tensor, x_regen: &Tensor) -> Result<f64> {
    l1_mean(x, x_regen)
}

pub fn loss_prox(x_s: &Tensor, x_k: &Tensor) -> Result<f64> {
    l1_mean(x_s, x_k)
}

pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Euclidean distance between an intended latent and its round trip.
pub fn loss_fea(z_k: &[f64], z_roundtrip: &[f64]) -> Result<f64> {
    if z_k.len() != z_roundtrip.len() {
        return Err(Error::shape("loss_fea", "latents differ in length"));
    }
    Ok(dist(z_k, z_roundtrip))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

/// Latent ratio `|z_k - z_ref| / max(|z_s - z_k|, floor)`.
pub fn tri_ratio(z_s: &[f64], z_k: &[f64], z_ref: &[f64], floor: f64) -> f64 {
    dist(z_k, z_ref) / dist(z_s, z_k).max(floor)
}

/// Acceptable range for `|x_s - x_k|` given `d_ref = |x_k - x_ref|`.
pub fn tri_band(d_ref: f64, ratio: f64, cfg: &TriConfig) -> (f64, f64) {
    let r = ratio.max(cfg.ratio_floor);
    ((1.0 - cfg.alpha) * d_ref / r, (1.0 + cfg.alpha) * d_ref / r)
}

/// Distance from `d_src` to the closed band.
pub fn tri_hinge(d_src: f64, band: (f64, f64)) -> f64 {
    (band.0 - d_src).max(0.0) + (d_src - band.1).max(0.0)
}

/// Triangulation loss. The reference is a target-class image for `k >= 0.5`
/// and a source-class image otherwise.
#[allow(clippy::too_many_arguments)]
pub fn loss_tri(
    x_s: &Tensor,
    x_k: &Tensor,
    x_ref: &Tensor,
    z_s: &[f64],
    z_k: &[f64],
    z_ref: &[f64],
    k: f64,
    cfg: &TriConfig,
) -> Result<f64> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument(format!("step factor {k} outside [0, 1]")));
    }
    if k < 0.5 && z_s == z_k {
        if x_ref == x_s {
            return Ok(0.0);
        }
        return Err(Error::RatioDegenerate);
    }
    let d_src = l1_mean(x_s, x_k)?;
    let d_ref = l1_mean(x_k, x_ref)?;
    let r = tri_ratio(z_s, z_k, z_ref, cfg.ratio_floor);
    Ok(tri_hinge(d_src, tri_band(d_ref, r, cfg)))
}

/// Per-sample mean absolute difference of two `[B, ...]` nodes.
pub fn l1_per_sample(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean_per_sample(d)
}

/// Per-sample triangulation hinge on `[B, ...]` image nodes. `inv_ratio`
/// holds `1 / max(r, floor)` for every element.
pub fn tri_node(
    g: &mut Graph,
    x_s: NodeId,
    x_k: NodeId,
    x_ref: NodeId,
    inv_ratio: &[f64],
    alpha: f64,
) -> Result<NodeId> {
    let d_src = l1_per_sample(g, x_s, x_k)?;
    let d_ref = l1_per_sample(g, x_k, x_ref)?;
    if g.value(d_ref).len() != inv_ratio.len() {
        return Err(Error::shape("tri", "one ratio per batch element expected"));
    }
    let inv = g.constant(Tensor::from_vec(inv_ratio.to_vec()));
    let base = g.mul(d_ref, inv)?;
    let lo = g.scale(base, 1.0 - alpha)?;
    let hi = g.scale(base, 1.0 + alpha)?;
    let below = g.sub(lo, d_src)?;
    let below = g.relu(below)?;
    let above = g.sub(d_src, hi)?;
    let above = g.relu(above)?;
    g.add(below, above)
}

/// Per-sample Euclidean distance between `[B, N]` nodes.
pub fn l2_per_sample(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.sum_sq_per_sample(d)?;
    g.sqrt(sq)
}
