//! Shared checks for the integration tests and the acceptance runner.
#![allow(dead_code)]

use mirror_cfe::gradcheck::gradient_check;
use mirror_cfe::graph::{Graph, NodeId};
use mirror_cfe::Tensor;
use mirror_cfe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform magnitudes in `[lo, hi)` with random signs, keeping clear of kinks at 0.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `sum(w * out)` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let w = uniform(&mut rng(shape.iter().sum::<usize>() as u64), &shape, 0.5, 1.5);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check(at: &Tensor, build: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) -> f64 {
    gradient_check(
        |g, x| {
            let out = build(g, x)?;
            project(g, out)
        },
        at,
        1e-5,
        usize::MAX,
    )
    .unwrap()
}

/// Worst relative finite-difference error of every differentiable primitive,
/// one entry per (primitive, argument).
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(3);
    let m = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let m2 = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let bias = uniform(&mut r, &[4], -1.0, 1.0);
    let img = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let img_b = uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let kern = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let cb = uniform(&mut r, &[2], -1.0, 1.0);
    let kinked = away_from_zero(&mut r, &[2, 3, 4, 4], 0.1, 1.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let logits = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let p = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap();
    let q = Tensor::new(vec![2, 3], vec![0.1, 0.6, 0.3, 0.25, 0.25, 0.5]).unwrap();
    let other = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);

    let mut out = Vec::new();
    let mut add = |name, e| out.push((name, e));
    add("matmul.a", check(&m, |g, x| { let b = g.constant(m2.clone()); g.matmul(x, b) }));
    add("matmul.b", check(&m2, |g, x| { let a = g.constant(m.clone()); g.matmul(a, x) }));
    add("add_row_bias.x", check(&m, |g, x| { let b = g.constant(bias.clone()); g.add_row_bias(x, b) }));
    add("add_row_bias.bias", check(&bias, |g, x| { let a = g.constant(m.clone()); g.add_row_bias(a, x) }));
    add("conv2d.x", check(&img, |g, x| {
        let (w, b) = (g.constant(kern.clone()), g.constant(cb.clone()));
        g.conv2d(x, w, b)
    }));
    add("conv2d.w", check(&kern, |g, w| {
        let (x, b) = (g.constant(img.clone()), g.constant(cb.clone()));
        g.conv2d(x, w, b)
    }));
    add("conv2d.b", check(&cb, |g, b| {
        let (x, w) = (g.constant(img.clone()), g.constant(kern.clone()));
        g.conv2d(x, w, b)
    }));
    add("upsample", check(&img, |g, x| g.upsample(x, 2)));
    add("avg_pool", check(&img, |g, x| g.avg_pool(x, 2)));
    add("relu", check(&kinked, |g, x| g.relu(x)));
    add("abs", check(&kinked, |g, x| g.abs(x)));
    add("sigmoid", check(&img, |g, x| g.sigmoid(x)));
    add("softmax", check(&logits, |g, x| g.softmax(x)));
    add("ln_clamped", check(&pos, |g, x| g.ln_clamped(x, 0.1, 10.0)));
    add("sqrt", check(&pos, |g, x| g.sqrt(x)));
    add("gap", check(&img, |g, x| g.gap(x)));
    add("add", check(&img, |g, x| { let o = g.constant(other.clone()); g.add(x, o) }));
    add("sub.a", check(&img, |g, x| { let o = g.constant(other.clone()); g.sub(x, o) }));
    add("sub.b", check(&img, |g, x| { let o = g.constant(other.clone()); g.sub(o, x) }));
    add("mul", check(&img, |g, x| { let o = g.constant(other.clone()); g.mul(x, o) }));
    add("mul.self", check(&img, |g, x| g.mul(x, x)));
    add("scale", check(&img, |g, x| g.scale(x, -1.7)));
    add("add_scalar", check(&img, |g, x| g.add_scalar(x, 0.3)));
    add("reshape", check(&img, |g, x| g.reshape(x, &[2, 48])));
    add("concat_channels.a", check(&img, |g, x| { let o = g.constant(img_b.clone()); g.concat_channels(x, o) }));
    add("concat_channels.b", check(&img_b, |g, x| { let o = g.constant(img.clone()); g.concat_channels(o, x) }));
    add("mean", check(&img, |g, x| g.mean(x)));
    add("sum", check(&img, |g, x| g.sum(x)));
    add("mean_per_sample", check(&img, |g, x| g.mean_per_sample(x)));
    add("sum_sq_per_sample", check(&img, |g, x| g.sum_sq_per_sample(x)));
    add("kld.p", check(&p, |g, x| { let o = g.constant(q.clone()); g.kld(x, o) }));
    add("kld.q", check(&q, |g, x| { let o = g.constant(p.clone()); g.kld(o, x) }));
    out
}

pub struct ConvCase {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn conv_case(r: &mut impl Rng) -> ConvCase {
    let bs = r.gen_range(1..=2);
    let ci = r.gen_range(1..=3);
    let co = r.gen_range(1..=3);
    let h = r.gen_range(1..=6);
    let w = r.gen_range(1..=6);
    let k = [1, 3, 5][r.gen_range(0..3)];
    ConvCase {
        x: uniform(r, &[bs, ci, h, w], -1.0, 1.0),
        w: uniform(r, &[co, ci, k, k], -1.0, 1.0),
        b: uniform(r, &[co], -1.0, 1.0),
    }
}

/// Zero-padded "same" convolution written as plain nested loops.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [bs, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let pad = (k / 2) as isize;
    let xi = |n: usize, c: usize, y: usize, xx: usize| x.data()[((n * ci + c) * h + y) * wd + xx];
    let wi = |o: usize, c: usize, dy: usize, dx: usize| w.data()[((o * ci + c) * k + dy) * k + dx];
    let mut out = vec![0.0; bs * co * h * wd];
    for n in 0..bs {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dx as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += wi(o, c, dy, dx) * xi(n, c, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of `sum(g_out * conv(x, w, b))` by the same loops, as `(dx, dw, db)`.
pub fn naive_conv_grads(x: &Tensor, w: &Tensor, g_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [bs, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for n in 0..bs {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let go = g_out[((n * co + o) * h + y) * wd + xx];
                    db[o] += go;
                    for c in 0..ci {
                        for dy in 0..k {
                            for dxk in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dxk as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    let xi = ((n * ci + c) * h + sy as usize) * wd + sx as usize;
                                    let wi = ((o * ci + c) * k + dy) * k + dxk;
                                    dx[xi] += go * w.data()[wi];
                                    dw[wi] += go * x.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between the graph convolution (forward and all three
/// gradients) and the loop oracle over `cases` random shapes.
pub fn conv_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = conv_case(&mut r);
        let mut g = Graph::new();
        let (x, w, b) = (g.param(c.x.clone()), g.param(c.w.clone()), g.param(c.b.clone()));
        let y = g.conv2d(x, w, b).unwrap();
        worst = worst.max(max_abs_diff(g.value(y).data(), &naive_conv(&c.x, &c.w, &c.b)));
        let go = uniform(&mut r, g.value(y).shape(), -1.0, 1.0);
        let gn = g.constant(go.clone());
        let prod = g.mul(y, gn).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let (dx, dw, db) = naive_conv_grads(&c.x, &c.w, go.data());
        worst = worst.max(max_abs_diff(grads.get(x).unwrap().data(), &dx));
        worst = worst.max(max_abs_diff(grads.get(w).unwrap().data(), &dw));
        worst = worst.max(max_abs_diff(grads.get(b).unwrap().data(), &db));
    }
    worst
}

pub struct TriOracleSummary {
    pub trials: usize,
    pub max_error: f64,
    pub in_band: usize,
    pub in_band_nonzero: usize,
    pub hinge_max_error: f64,
    pub alpha_violations: usize,
}

fn l1_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

fn l2_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Triangulation loss written out case by case.
pub fn tri_brute(xs: &[f64], xk: &[f64], xr: &[f64], zs: &[f64], zk: &[f64], zr: &[f64], alpha: f64, floor: f64) -> f64 {
    let d_src = l1_loop(xs, xk);
    let d_ref = l1_loop(xk, xr);
    let mut den = l2_loop(zs, zk);
    if den < floor {
        den = floor;
    }
    let mut r = l2_loop(zk, zr) / den;
    if r < floor {
        r = floor;
    }
    let lo = (1.0 - alpha) * d_ref / r;
    let hi = (1.0 + alpha) * d_ref / r;
    if d_src < lo {
        lo - d_src
    } else if d_src > hi {
        d_src - hi
    } else {
        0.0
    }
}

/// Compares `loss_tri` against [`tri_brute`] on random triples and checks
/// band, hinge and alpha-monotonicity behaviour.
pub fn tri_oracle(trials: usize, seed: u64) -> TriOracleSummary {
    use mirror_cfe::losses::{loss_tri, tri_band, tri_hinge, TriConfig, RATIO_FLOOR};
    let mut r = rng(seed);
    let mut s = TriOracleSummary {
        trials,
        max_error: 0.0,
        in_band: 0,
        in_band_nonzero: 0,
        hinge_max_error: 0.0,
        alpha_violations: 0,
    };
    for _ in 0..trials {
        let xs = uniform(&mut r, &[1, 4, 4], 0.0, 1.0);
        let xk = uniform(&mut r, &[1, 4, 4], 0.0, 1.0);
        let xr = uniform(&mut r, &[1, 4, 4], 0.0, 1.0);
        let zs: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let zk: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let zr: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let k = r.gen_range(0.0..=1.0);
        let alpha = r.gen_range(0.0..=1.0);
        let cfg = TriConfig { alpha, ..TriConfig::default() };
        let got = loss_tri(&xs, &xk, &xr, &zs, &zk, &zr, k, &cfg).unwrap();
        let want = tri_brute(xs.data(), xk.data(), xr.data(), &zs, &zk, &zr, alpha, RATIO_FLOOR);
        s.max_error = s.max_error.max((got - want).abs());

        // Hinge on distances placed inside, below and above a random band.
        let d_ref = r.gen_range(0.0..1.0);
        let ratio = r.gen_range(0.1..3.0);
        let (lo, hi) = tri_band(d_ref, ratio, &cfg);
        let inside = lo + r.gen_range(0.0..=1.0) * (hi - lo);
        s.in_band += 1;
        if tri_hinge(inside, (lo, hi)) != 0.0 {
            s.in_band_nonzero += 1;
        }
        let gap = r.gen_range(1e-3..1.0);
        let below = (lo - gap).max(0.0);
        s.hinge_max_error = s
            .hinge_max_error
            .max((tri_hinge(below, (lo, hi)) - (lo - below)).abs())
            .max((tri_hinge(hi + gap, (lo, hi)) - gap).abs());

        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let a = step as f64 / 20.0;
            let v = loss_tri(&xs, &xk, &xr, &zs, &zk, &zr, k, &TriConfig { alpha: a, ..cfg }).unwrap();
            if v > prev + 1e-15 {
                s.alpha_violations += 1;
            }
            prev = v;
        }
    }
    s
}

pub struct CamSuiteSummary {
    pub hand_cases_ok: bool,
    pub maps: usize,
    pub monotone_violations: usize,
    pub csp_cases_ok: bool,
}

/// Normalization hand cases, mask growth over the k grid on random
/// feature maps, and exact CSP identity/replacement.
pub fn cam_suite(maps: usize, seed: u64) -> CamSuiteSummary {
    use mirror_cfe::camprior::{cam, csp_mix, normalize_map, prior_mask, rho};
    let mut hand = normalize_map(&[2.0, -1.0, 1.0, 0.0]) == vec![1.0, 0.0, 0.5, 0.0]
        && normalize_map(&[-3.0, -1.0]) == vec![0.0, 0.0]
        && normalize_map(&[0.0, 0.0]) == vec![0.0, 0.0];
    // Two channels, two classes: class 0 reads channel 0, class 1 reads
    // channel 1 with weight -1.
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
    let f = Tensor::new(vec![2, 1, 2], vec![4.0, 2.0, 1.0, -3.0]).unwrap();
    let c = cam(&w, &f).unwrap();
    hand &= c.raw.data() == [4.0, 2.0, -1.0, 3.0];
    hand &= c.normalized.data() == [1.0, 0.5, 0.0, 1.0];
    hand &= rho(0.0, 0.2, 0.8).unwrap() == 0.8 && rho(1.0, 0.2, 0.8).unwrap() == 0.2;
    hand &= (rho(0.5, 0.2, 0.8).unwrap() - 0.5).abs() < 1e-15;
    let m = prior_mask(&c, 0, 1, 0.5, &[(2, 4)]).unwrap();
    hand &= m.mask == vec![1.0, 1.0] && m.upsampled[0].2 == vec![1.0; 8];
    let m = prior_mask(&c, 0, 1, 0.6, &[]).unwrap();
    hand &= m.mask == vec![1.0, 1.0];
    let m = prior_mask(&c, 0, 0, 0.6, &[]).unwrap();
    hand &= m.mask == vec![1.0, 0.0];

    let mut r = rng(seed);
    let mut violations = 0;
    for _ in 0..maps {
        let n = r.gen_range(2..6);
        let classes = r.gen_range(2..5);
        let w = uniform(&mut r, &[n, classes], -1.0, 1.0);
        let f = uniform(&mut r, &[n, 4, 4], -1.0, 1.0);
        let c = cam(&w, &f).unwrap();
        let s = r.gen_range(0..classes);
        let t = (s + r.gen_range(1..classes)) % classes;
        let mut prev = 0;
        for i in 0..=20 {
            let k = i as f64 / 20.0;
            let cells = prior_mask(&c, s, t, rho(k, 0.2, 0.8).unwrap(), &[]).unwrap().cells();
            if cells < prev {
                violations += 1;
            }
            prev = cells;
        }
    }

    let f = uniform(&mut r, &[3, 4, 4], -1.0, 1.0);
    let u = uniform(&mut r, &[3, 4, 4], -1.0, 1.0);
    let half: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
    let mixed = csp_mix(&f, &u, &half).unwrap();
    let mut csp = csp_mix(&f, &u, &[0.0; 16]).unwrap() == f && csp_mix(&f, &u, &[1.0; 16]).unwrap() == u;
    csp &= csp_mix(&mixed, &u, &half).unwrap() == mixed;
    csp &= mixed
        .data()
        .iter()
        .enumerate()
        .all(|(i, &v)| v == if i % 2 == 1 { u.data()[i] } else { f.data()[i] });
    CamSuiteSummary {
        hand_cases_ok: hand,
        maps,
        monotone_violations: violations,
        csp_cases_ok: csp,
    }
}

fn random_head(r: &mut impl Rng, n: usize, c: usize) -> (Tensor, Vec<f64>) {
    use rand_distr::StandardNormal;
    let w: Vec<f64> = (0..n * c).map(|_| r.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
    (Tensor::new(vec![n, c], w).unwrap(), b)
}

fn random_pair(r: &mut impl Rng, c: usize) -> (usize, usize) {
    let s = r.gen_range(0..c);
    (s, (s + r.gen_range(1..c)) % c)
}

pub struct GeometrySummary {
    pub trials: usize,
    pub projection: f64,
    pub flip: f64,
    pub k0_exact: bool,
    pub involution: f64,
}

/// Binary position-function invariants on random heads with `N = 64`.
pub fn geometry_suite(trials: usize, seed: u64) -> GeometrySummary {
    use mirror_cfe::mirror::{make_mirror, position};
    let mut r = rng(seed);
    let mut out = GeometrySummary { trials, projection: 0.0, flip: 0.0, k0_exact: true, involution: 0.0 };
    for _ in 0..trials {
        let c = r.gen_range(2..=6);
        let (w, b) = random_head(&mut r, 64, c);
        let (s, t) = random_pair(&mut r, c);
        let z: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let m = make_mirror(&w, &b, s, t).unwrap();
        let q0 = m.pair_confidence(&z);
        let zp = position(&z, &m, 0.5).unwrap();
        let zr = position(&z, &m, 1.0).unwrap();
        out.projection = out.projection.max((m.pair_confidence(&zp) - 0.5).abs());
        out.flip = out.flip.max((m.pair_confidence(&zr) - (1.0 - q0)).abs());
        out.k0_exact &= position(&z, &m, 0.0)
            .unwrap()
            .iter()
            .zip(&z)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let back = position(&zr, &m, 1.0).unwrap();
        out.involution = out.involution.max(l2_loop(&back, &z));
    }
    out
}

pub struct ReflectionSummary {
    pub trials: usize,
    pub within: usize,
    pub median_iterations: usize,
    pub binary_trials: usize,
    pub binary_error: f64,
}

/// L-BFGS reflections on random full-rank 5-class heads with `N = 16`, and
/// on equal-norm two-class heads where the binary reflection already swaps
/// the logits.
pub fn reflection_suite(trials: usize, seed: u64) -> ReflectionSummary {
    use mirror_cfe::mirror::{make_mirror, multiclass_reflection, position, Head};
    let mut r = rng(seed);
    let mut iters = Vec::with_capacity(trials);
    let mut within = 0;
    for _ in 0..trials {
        let (w, b) = random_head(&mut r, 16, 5);
        let (s, t) = random_pair(&mut r, 5);
        let z: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let m = make_mirror(&w, &b, s, t).unwrap();
        if let Ok(refl) = multiclass_reflection(&z, &m, Head::new(&w, &b)) {
            if refl.residual <= 1e-6 {
                within += 1;
            }
            iters.push(refl.iterations);
        } else {
            iters.push(usize::MAX);
        }
    }
    iters.sort_unstable();
    let mut binary_error: f64 = 0.0;
    let binary_trials = trials;
    for _ in 0..binary_trials {
        let (mut w, b) = random_head(&mut r, 16, 2);
        let (n0, n1) = {
            let d = w.data();
            let col = |j: usize| (0..16).map(|i| d[i * 2 + j] * d[i * 2 + j]).sum::<f64>().sqrt();
            (col(0), col(1))
        };
        for i in 0..16 {
            w.data_mut()[i * 2 + 1] *= n0 / n1;
        }
        let z: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let m = make_mirror(&w, &b, 0, 1).unwrap();
        let refl = multiclass_reflection(&z, &m, Head::new(&w, &b)).unwrap();
        let eq1 = position(&z, &m, 1.0).unwrap();
        binary_error = binary_error.max(l2_loop(&refl.z, &eq1));
    }
    ReflectionSummary {
        trials,
        within,
        median_iterations: iters[trials / 2],
        binary_trials,
        binary_error,
    }
}
