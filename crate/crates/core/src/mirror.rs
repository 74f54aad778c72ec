//! Latent-space geometry of pairwise decision boundaries ("mirrors").
//!
//! For source class `s` and target class `t` of a linear softmax head the
//! pairwise boundary is the hyperplane `W_m^T z + b_m = 0` with
//! `W_m = W_t - W_s` and `b_m = b_t - b_s`. Travelling a source latent along
//! the unit normal by a step factor `k` gives the semi-factual segment
//! (`k < 0.5`), the projection onto the boundary (`k = 0.5`), counterfactuals
//! (`k > 0.5`) and the mirror image (`k = 1`).

use serde::{Deserialize, Serialize};

use crate::classifier::head_logits;
use crate::error::{Error, Result};
use crate::lbfgs::{lbfgs_minimize, LbfgsOptions};
use crate::tensor::{argmax, dot, norm2, sigmoid, softmax, Tensor};

/// Residual above which a multi-class reflection counts as unreachable.
pub const REFLECTION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Mirror {
    pub source: usize,
    pub target: usize,
    /// `W_t - W_s`.
    pub w: Vec<f64>,
    /// `b_t - b_s`.
    pub b: f64,
    /// `w / |w|`.
    pub unit: Vec<f64>,
    pub norm: f64,
}

/// Builds the mirror between columns `s` and `t` of a `[N, C]` head.
pub fn make_mirror(w: &Tensor, b: &[f64], s: usize, t: usize) -> Result<Mirror> {
    let [n, c] = match *w.shape() {
        [n, c] => [n, c],
        ref sh => return Err(Error::shape("make_mirror", format!("head weight {sh:?}"))),
    };
    if s == t || s >= c || t >= c || b.len() != c {
        return Err(Error::InvalidArgument(format!(
            "class pair ({s}, {t}) invalid for a {c}-class head"
        )));
    }
    let wd = w.data();
    let wm: Vec<f64> = (0..n).map(|i| wd[i * c + t] - wd[i * c + s]).collect();
    let norm = norm2(&wm);
    if norm < 1e-12 {
        return Err(Error::DegenerateMirror {
            source_class: s,
            target: t,
        });
    }
    Ok(Mirror {
        source: s,
        target: t,
        unit: wm.iter().map(|v| v / norm).collect(),
        w: wm,
        b: b[t] - b[s],
        norm,
    })
}

impl Mirror {
    /// `W_m^T z + b_m`.
    pub fn margin(&self, z: &[f64]) -> f64 {
        dot(&self.w, z) + self.b
    }

    /// Pairwise two-class confidence of the target, `sigmoid(W_m^T z + b_m)`.
    pub fn pair_confidence(&self, z: &[f64]) -> f64 {
        sigmoid(self.margin(z))
    }

    /// Offset `z_k - z_s` of the binary position function.
    pub fn delta(&self, z_s: &[f64], k: f64) -> Vec<f64> {
        // Signed distance to the hyperplane along the unit normal.
        let dist = self.margin(z_s) / self.norm;
        self.unit.iter().map(|u| -2.0 * k * dist * u).collect()
    }
}

fn check_k(k: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument(format!("step factor {k} outside [0, 1]")));
    }
    Ok(())
}

/// `z_k = z_s - 2k (W_m^T z_s + b_m) / |W_m| * unit(W_m)`.
pub fn position(z_s: &[f64], mirror: &Mirror, k: f64) -> Result<Vec<f64>> {
    check_k(k)?;
    if z_s.len() != mirror.w.len() {
        return Err(Error::shape(
            "position",
            format!("latent of {} for mirror of {}", z_s.len(), mirror.w.len()),
        ));
    }
    if k == 0.0 {
        return Ok(z_s.to_vec());
    }
    Ok(z_s.iter().zip(mirror.delta(z_s, k)).map(|(a, d)| a + d).collect())
}

pub fn pair_confidence(z: &[f64], mirror: &Mirror) -> f64 {
    mirror.pair_confidence(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryMode {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KfeKind {
    Sfe,
    Projection,
    Cfe,
    Reflection,
}

impl KfeKind {
    pub fn of(k: f64) -> Self {
        if k == 1.0 {
            KfeKind::Reflection
        } else if k == 0.5 {
            KfeKind::Projection
        } else if k > 0.5 {
            KfeKind::Cfe
        } else {
            KfeKind::Sfe
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfePoint {
    pub k: f64,
    pub z: Vec<f64>,
    pub q_pair: f64,
    pub p_multi: Vec<f64>,
    pub kind: KfeKind,
}

/// Where a trajectory travels to.
#[derive(Debug, Clone, PartialEq)]
pub enum Reflector {
    /// Straight reflection across the pairwise boundary.
    Binary(Mirror),
    /// Interpolation towards a logit-matched reflection point `z_r'`.
    Multiclass { mirror: Mirror, reflection: Vec<f64> },
}

impl Reflector {
    pub fn mirror(&self) -> &Mirror {
        match self {
            Reflector::Binary(m) | Reflector::Multiclass { mirror: m, .. } => m,
        }
    }

    pub fn mode(&self) -> TrajectoryMode {
        match self {
            Reflector::Binary(_) => TrajectoryMode::Binary,
            Reflector::Multiclass { .. } => TrajectoryMode::Multiclass,
        }
    }

    /// `z_k - z_s` for the step factor `k`.
    pub fn delta(&self, z_s: &[f64], k: f64) -> Result<Vec<f64>> {
        check_k(k)?;
        match self {
            Reflector::Binary(m) => Ok(m.delta(z_s, k)),
            Reflector::Multiclass { reflection, .. } => {
                if reflection.len() != z_s.len() {
                    return Err(Error::shape("reflector", "latent width mismatch"));
                }
                Ok(reflection.iter().zip(z_s).map(|(r, s)| k * (r - s)).collect())
            }
        }
    }

    pub fn latent_at(&self, z_s: &[f64], k: f64) -> Result<Vec<f64>> {
        if k == 0.0 {
            check_k(k)?;
            return Ok(z_s.to_vec());
        }
        Ok(z_s.iter().zip(self.delta(z_s, k)?).map(|(a, d)| a + d).collect())
    }
}

/// Linear head `(W: [N, C], b)`, used to score latent points.
#[derive(Debug, Clone, Copy)]
pub struct Head<'a> {
    pub w: &'a Tensor,
    pub b: &'a [f64],
}

impl<'a> Head<'a> {
    pub fn new(w: &'a Tensor, b: &'a [f64]) -> Self {
        Self { w, b }
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        head_logits(self.w, self.b, z)
    }

    pub fn probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(z)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub source_z: Vec<f64>,
    pub reflector: Reflector,
    pub points: Vec<KfePoint>,
}

impl Trajectory {
    pub fn mode(&self) -> TrajectoryMode {
        self.reflector.mode()
    }

    pub fn point_at(&self, head: Head<'_>, k: f64) -> Result<KfePoint> {
        let z = self.reflector.latent_at(&self.source_z, k)?;
        Ok(KfePoint {
            k,
            q_pair: self.reflector.mirror().pair_confidence(&z),
            p_multi: head.probs(&z)?,
            kind: KfeKind::of(k),
            z,
        })
    }
}

/// Uniform grid `k_i = i / (steps - 1)` from the source to the reflection.
pub fn sample_trajectory(
    z_s: &[f64],
    reflector: &Reflector,
    head: Head<'_>,
    steps: usize,
) -> Result<Trajectory> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 steps, got {steps}")));
    }
    let mut traj = Trajectory {
        source_z: z_s.to_vec(),
        reflector: reflector.clone(),
        points: Vec::with_capacity(steps),
    };
    for i in 0..steps {
        let k = if i == steps - 1 {
            1.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        let p = traj.point_at(head, k)?;
        traj.points.push(p);
    }
    Ok(traj)
}

/// Width of the bracket left by the first-flip bisection.
pub const FLIP_RESOLUTION: f64 = 1e-3;

fn flipped(p: &[f64], t: usize) -> bool {
    p.iter().enumerate().all(|(c, &v)| c == t || p[t] > v)
}

/// Smallest-`k` point whose softmax argmax is the target class, refined by
/// bisection between the last unflipped and first flipped grid points.
pub fn first_cfe(traj: &Trajectory, head: Head<'_>) -> Result<KfePoint> {
    let t = traj.reflector.mirror().target;
    let idx = traj
        .points
        .iter()
        .position(|p| flipped(&p.p_multi, t))
        .ok_or(Error::NoFlip { target: t })?;
    if idx == 0 {
        return Ok(traj.points[0].clone());
    }
    let mut lo = traj.points[idx - 1].k;
    let mut hi_point = traj.points[idx].clone();
    while hi_point.k - lo > FLIP_RESOLUTION {
        let mid = 0.5 * (lo + hi_point.k);
        let p = traj.point_at(head, mid)?;
        if flipped(&p.p_multi, t) {
            hi_point = p;
        } else {
            lo = mid;
        }
    }
    Ok(hi_point)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    pub z: Vec<f64>,
    /// `|W^T z + b - l_target|`.
    pub residual: f64,
    pub iterations: usize,
}

/// Logits the multi-class reflection aims for: source and target logits of
/// `z_s` swapped, every other class unchanged.
pub fn reflection_target_logits(head: Head<'_>, z_s: &[f64], mirror: &Mirror) -> Result<Vec<f64>> {
    let mut l = head.logits(z_s)?;
    l.swap(mirror.source, mirror.target);
    Ok(l)
}

/// Finds `z_r'` with `W^T z_r' + b` matching the swapped logits, starting
/// L-BFGS from the binary reflection.
pub fn multiclass_reflection(z_s: &[f64], mirror: &Mirror, head: Head<'_>) -> Result<Reflection> {
    multiclass_reflection_with(z_s, mirror, head, &LbfgsOptions::default())
}

pub fn multiclass_reflection_with(
    z_s: &[f64],
    mirror: &Mirror,
    head: Head<'_>,
    opts: &LbfgsOptions,
) -> Result<Reflection> {
    let target = reflection_target_logits(head, z_s, mirror)?;
    let start = position(z_s, mirror, 1.0)?;
    let [n, c] = [head.w.shape()[0], head.w.shape()[1]];
    let wd = head.w.data();
    let objective = |z: &[f64]| {
        let l = head_logits(head.w, head.b, z).expect("shape checked");
        let r: Vec<f64> = l.iter().zip(&target).map(|(a, b)| a - b).collect();
        let grad = (0..n)
            .map(|i| (0..c).map(|j| wd[i * c + j] * r[j]).sum())
            .collect();
        (0.5 * dot(&r, &r), grad)
    };
    let residual_of = |z: &[f64]| -> Result<f64> {
        let l = head.logits(z)?;
        Ok(norm2(&l.iter().zip(&target).map(|(a, b)| a - b).collect::<Vec<_>>()))
    };
    let (z, iterations) = match lbfgs_minimize(objective, &start, opts) {
        Ok(r) => (r.x, r.iterations),
        Err(Error::LineSearchStalled { best_x, iterations, .. }) => (best_x, iterations),
        Err(e) => return Err(e),
    };
    let residual = residual_of(&z)?;
    if residual > REFLECTION_TOL {
        return Err(Error::ReflectionUnreachable { residual, best: z });
    }
    Ok(Reflection {
        z,
        residual,
        iterations,
    })
}

/// Builds the reflector for the requested mode.
pub fn reflector_for(
    z_s: &[f64],
    mirror: Mirror,
    head: Head<'_>,
    mode: TrajectoryMode,
) -> Result<Reflector> {
    Ok(match mode {
        TrajectoryMode::Binary => Reflector::Binary(mirror),
        TrajectoryMode::Multiclass => {
            let r = multiclass_reflection(z_s, &mirror, head)?;
            Reflector::Multiclass {
                mirror,
                reflection: r.z,
            }
        }
    })
}

/// Last-layer feature map at step `k`: the source map shifted uniformly by
/// `z_k - z_s` in every spatial cell, so that its spatial mean equals `z_k`.
pub fn kfe_feature(f_s: &Tensor, z_s: &[f64], k: f64, reflector: &Reflector) -> Result<Tensor> {
    let [c, h, w] = match *f_s.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::shape("kfe_feature", format!("feature map {s:?}"))),
    };
    if c != z_s.len() {
        return Err(Error::shape(
            "kfe_feature",
            format!("{c} channels for a latent of {}", z_s.len()),
        ));
    }
    let hw = h * w;
    for (ch, plane) in f_s.data().chunks(hw).enumerate() {
        let mean = plane.iter().sum::<f64>() / hw as f64;
        if (mean - z_s[ch]).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "channel {ch}: spatial mean {mean} does not match latent {}",
                z_s[ch]
            )));
        }
    }
    let delta = reflector.delta(z_s, k)?;
    let mut out = f_s.clone();
    for (plane, d) in out.data_mut().chunks_mut(hw).zip(&delta) {
        plane.iter_mut().for_each(|v| *v += d);
    }
    Ok(out)
}

/// Argmax of the head at `z`.
pub fn predicted_class(head: Head<'_>, z: &[f64]) -> Result<usize> {
    Ok(argmax(&head.logits(z)?))
}
