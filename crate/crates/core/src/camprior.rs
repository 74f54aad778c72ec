//! Class activation maps, spatial prior masks and the skip-connection
//! feature editor (SPE) with its masked mixture (CSP).

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{push_conv, Bound, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    /// `[C, H, W]` unnormalized maps `U`.
    pub raw: Tensor,
    /// `[C, H, W]` maps scaled so that each positive map peaks at 1.
    pub normalized: Tensor,
}

impl Cam {
    pub fn num_classes(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.raw.shape()[1], self.raw.shape()[2])
    }

    /// Normalized map of class `c` as a flat `H * W` slice.
    pub fn class_map(&self, c: usize) -> &[f64] {
        let (h, w) = self.spatial();
        &self.normalized.data()[c * h * w..(c + 1) * h * w]
    }
}

/// Normalizes one map: `max(U, 0) / max(U)`, all zeros when nothing is
/// positive.
pub fn normalize_map(u: &[f64]) -> Vec<f64> {
    let peak = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        u.iter().map(|v| v.max(0.0) / peak).collect()
    } else {
        vec![0.0; u.len()]
    }
}

/// `U_c[h, w] = sum_n W[n, c] f[n, h, w]` for a `[N, H, W]` feature map.
pub fn cam(w: &Tensor, f: &Tensor) -> Result<Cam> {
    let (n, c) = match *w.shape() {
        [n, c] => (n, c),
        ref s => return Err(Error::shape("cam", format!("head weight {s:?}"))),
    };
    let (fc, h, wd) = match *f.shape() {
        [fc, h, wd] => (fc, h, wd),
        ref s => return Err(Error::shape("cam", format!("feature map {s:?}"))),
    };
    if fc != n {
        return Err(Error::shape("cam", format!("{fc} channels for a head with N = {n}")));
    }
    let hw = h * wd;
    let mut raw = vec![0.0; c * hw];
    let (wv, fv) = (w.data(), f.data());
    for cls in 0..c {
        let out = &mut raw[cls * hw..(cls + 1) * hw];
        for ch in 0..n {
            let k = wv[ch * c + cls];
            for (o, x) in out.iter_mut().zip(&fv[ch * hw..(ch + 1) * hw]) {
                *o += k * x;
            }
        }
    }
    let normalized: Vec<f64> = raw.chunks(hw).flat_map(normalize_map).collect();
    Ok(Cam {
        raw: Tensor::new(vec![c, h, wd], raw)?,
        normalized: Tensor::new(vec![c, h, wd], normalized)?,
    })
}

/// `min(max(1 - k, lo), hi)`.
pub fn rho(k: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold bounds must satisfy 0 <= {lo} <= {hi} <= 1"
        )));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument(format!("step factor {k} outside [0, 1]")));
    }
    Ok((1.0 - k).max(lo).min(hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask {
    /// `H_l * W_l` cells, each 0 or 1.
    pub mask: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub rho: f64,
    /// `(H_i, W_i, mask)` for every requested layer resolution.
    pub upsampled: Vec<(usize, usize, Vec<f64>)>,
}

impl PriorMask {
    pub fn cells(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Union of the source and target maps thresholded strictly above `rho`,
/// nearest-upsampled to each `(H_i, W_i)` in `layers`.
pub fn prior_mask(
    cam: &Cam,
    source: usize,
    target: usize,
    rho: f64,
    layers: &[(usize, usize)],
) -> Result<PriorMask> {
    let c = cam.num_classes();
    if source >= c || target >= c {
        return Err(Error::InvalidArgument(format!("class out of range for {c} cams")));
    }
    let (h, w) = cam.spatial();
    let mask = mask_union(cam.class_map(source), cam.class_map(target), rho);
    let upsampled = layers
        .iter()
        .map(|&(lh, lw)| {
            if lh % h != 0 || lw % w != 0 || lh / h != lw / w {
                return Err(Error::shape(
                    "prior_mask",
                    format!("layer {lh}x{lw} is not an integer multiple of {h}x{w}"),
                ));
            }
            Ok((lh, lw, nearest(&mask, h, w, lh / h)))
        })
        .collect::<Result<_>>()?;
    Ok(PriorMask {
        mask,
        height: h,
        width: w,
        rho,
        upsampled,
    })
}

/// `(N_s > rho) or (N_t > rho)` cell by cell.
pub fn mask_union(ns: &[f64], nt: &[f64], rho: f64) -> Vec<f64> {
    ns.iter()
        .zip(nt)
        .map(|(&a, &b)| if a > rho || b > rho { 1.0 } else { 0.0 })
        .collect()
}

fn nearest(m: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    crate::graph::upsample_raw(m, 1, h, w, f)
}

/// Shapes of one SPE tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeLayer {
    /// `(C_i, H_i, W_i)` of the tapped feature.
    pub tap: (usize, usize, usize),
    /// `(C_l, H_l, W_l)` of the last feature.
    pub last: (usize, usize, usize),
}

impl SpeLayer {
    pub fn factor(&self) -> Result<usize> {
        let (_, hi, wi) = self.tap;
        let (_, hl, wl) = self.last;
        if hl == 0 || hi % hl != 0 || wi % wl != 0 || hi / hl != wi / wl {
            return Err(Error::shape(
                "spe",
                format!("tap {hi}x{wi} is not an integer multiple of {hl}x{wl}"),
            ));
        }
        Ok(hi / hl)
    }
}

/// Parameter names of SPE tap `i` inside a generator's [`ModelParams`].
pub fn spe_names(i: usize) -> [String; 4] {
    [
        format!("spe{i}.bottleneck.w"),
        format!("spe{i}.bottleneck.b"),
        format!("spe{i}.decoder.w"),
        format!("spe{i}.decoder.b"),
    ]
}

/// Adds the 1x1 bottleneck `C_i -> C_l` and decoder `2 C_l -> C_i` of tap `i`.
pub fn push_spe<R: Rng>(params: &mut ModelParams, rng: &mut R, i: usize, layer: &SpeLayer) -> Result<()> {
    layer.factor()?;
    let (ci, ..) = layer.tap;
    let (cl, ..) = layer.last;
    push_conv(params, rng, &format!("spe{i}.bottleneck"), ci, cl, 1);
    push_conv(params, rng, &format!("spe{i}.decoder"), 2 * cl, ci, 1);
    Ok(())
}

/// `u = D(concat(B(f_s^i), f_k^l))` on `[B, C, H, W]` nodes.
pub fn spe_transform(
    g: &mut Graph,
    p: &Bound,
    i: usize,
    layer: &SpeLayer,
    f_tap: NodeId,
    f_k_last: NodeId,
) -> Result<NodeId> {
    let factor = layer.factor()?;
    let expect = |node: NodeId, (c, h, w): (usize, usize, usize), what: &str| -> Result<()> {
        match *g.value(node).shape() {
            [_, a, b, d] if (a, b, d) == (c, h, w) => Ok(()),
            ref s => Err(Error::shape("spe_transform", format!("{what} {s:?}, expected [_, {c}, {h}, {w}]"))),
        }
    };
    expect(f_tap, layer.tap, "tapped feature")?;
    expect(f_k_last, layer.last, "last feature")?;
    let [bw, bb, dw, db] = spe_names(i);
    let b = g.conv2d(f_tap, p.id(&bw), p.id(&bb))?;
    let b = if factor > 1 { g.avg_pool(b, factor)? } else { b };
    let cat = g.concat_channels(b, f_k_last)?;
    let d = g.conv2d(cat, p.id(&dw), p.id(&db))?;
    if factor > 1 {
        g.upsample(d, factor)
    } else {
        Ok(d)
    }
}

fn check_binary(mask: &[f64]) -> Result<()> {
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mixture mask must be binary".into()));
    }
    Ok(())
}

/// `(1 - M) f + M u` on `[C, H, W]` tensors with an `H * W` mask.
pub fn csp_mix(f: &Tensor, u: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if f.shape() != u.shape() || f.shape().len() != 3 {
        return Err(Error::shape("csp_mix", format!("{:?} vs {:?}", f.shape(), u.shape())));
    }
    let hw = f.shape()[1] * f.shape()[2];
    if mask.len() != hw {
        return Err(Error::shape("csp_mix", format!("mask of {} for {hw} cells", mask.len())));
    }
    check_binary(mask)?;
    let mut out = f.clone();
    for (plane, up) in out.data_mut().chunks_mut(hw).zip(u.data().chunks(hw)) {
        for ((o, &uv), &m) in plane.iter_mut().zip(up).zip(mask) {
            if m == 1.0 {
                *o = uv;
            }
        }
    }
    Ok(out)
}

/// Graph form of [`csp_mix`] for `[B, C, H, W]` nodes; `masks` holds one
/// `H * W` mask per batch element.
pub fn csp_mix_node(g: &mut Graph, f: NodeId, u: NodeId, masks: &[Vec<f64>]) -> Result<NodeId> {
    let shape = g.value(f).shape().to_vec();
    if shape.len() != 4 || g.value(u).shape() != shape.as_slice() {
        return Err(Error::shape(
            "csp_mix",
            format!("{shape:?} vs {:?}", g.value(u).shape()),
        ));
    }
    let (bsz, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if masks.len() != bsz || masks.iter().any(|m| m.len() != hw) {
        return Err(Error::shape("csp_mix", "one mask of H * W cells per element expected"));
    }
    let mut full = Vec::with_capacity(bsz * c * hw);
    for m in masks {
        check_binary(m)?;
        for _ in 0..c {
            full.extend_from_slice(m);
        }
    }
    let m = g.constant(Tensor::new(shape, full)?);
    let diff = g.sub(u, f)?;
    let sel = g.mul(m, diff)?;
    g.add(f, sel)
}
