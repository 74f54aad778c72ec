//! Counterfactual quality metrics and transition rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, FeatureStack};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::l1_mean;
use crate::mirror::{self, Head, TrajectoryMode};
use crate::tensor::{argmax, softmax, Tensor};
use crate::trainer::Generator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurConfig {
    pub size: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { size: 3, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub source: usize,
    pub target: usize,
    pub samples: usize,
    pub steps: usize,
    pub blur: BlurConfig,
    pub mode: TrajectoryMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            source: 0,
            target: 1,
            samples: 200,
            steps: 21,
            blur: BlurConfig::default(),
            mode: TrajectoryMode::Multiclass,
        }
    }
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blur needs an odd size and positive sigma, got {size} / {sigma}"
        )));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Full 2-D kernel, row-major `size * size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    let t = gaussian_taps(size, sigma)?;
    Ok(t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect())
}

/// Separable Gaussian blur of a `[C, H, W]` image with edge replication.
pub fn gaussian_blur(img: &Tensor, blur: &BlurConfig) -> Result<Tensor> {
    let taps = gaussian_taps(blur.size, blur.sigma)?;
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("gaussian_blur", format!("{s:?}"))),
    };
    let r = (blur.size / 2) as i64;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    let src = img.data();
    let at = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t * src[base + y * w + at(x as i64 + j as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t * tmp[base + at(y as i64 + j as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

pub fn denoised_validity(clf: &Classifier, x_cf: &Tensor, t: usize, blur: &BlurConfig) -> Result<bool> {
    Ok(clf.predict(&gaussian_blur(x_cf, blur)?)? == t)
}

/// `(|z_k - F(x)|, mean_c |softmax(z_k)_c - softmax(F(x))_c|)` for a
/// generated image `x` of intended latent `z_k`.
pub fn faithfulness(clf: &Classifier, z_k: &[f64], roundtrip: &FeatureStack) -> Result<(f64, f64)> {
    let fea = crate::losses::loss_fea(z_k, &roundtrip.z)?;
    let (_, p) = clf.classify(z_k)?;
    let conf = p.iter().zip(&roundtrip.probs).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    Ok((fea, conf))
}

/// Metrics of one generated counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointMetrics {
    pub k: f64,
    pub validity: bool,
    pub l1: f64,
    pub d_validity: bool,
    pub fea_dist: f64,
    pub conf_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    /// Dataset id of the source image.
    pub sample: usize,
    pub source: usize,
    pub target: usize,
    /// `None` when the latent trajectory never flips to the target.
    pub first_cfe: Option<PointMetrics>,
    pub reflection: PointMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub validity: f64,
    pub l1: f64,
    pub d_validity: f64,
    pub fea_dist: f64,
    pub conf_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub discovery_rate: f64,
    pub no_flip: usize,
    pub mean_first_cfe_k: f64,
    /// Means over samples with a first CFE.
    pub first_cfe: Aggregate,
    pub reflection: Aggregate,
}

pub const REPORT_CSV_HEADER: &str = "sample,source,target,first_cfe_k,validity,l1,d_validity,fea_dist,conf_l1";

fn aggregate<'a>(pts: impl Iterator<Item = &'a PointMetrics>) -> Aggregate {
    let pts: Vec<&PointMetrics> = pts.collect();
    let n = pts.len() as f64;
    let mean = |f: &dyn Fn(&PointMetrics) -> f64| {
        if pts.is_empty() {
            f64::NAN
        } else {
            pts.iter().map(|p| f(p)).sum::<f64>() / n
        }
    };
    Aggregate {
        validity: mean(&|p| f64::from(u8::from(p.validity))),
        l1: mean(&|p| p.l1),
        d_validity: mean(&|p| f64::from(u8::from(p.d_validity))),
        fea_dist: mean(&|p| p.fea_dist),
        conf_l1: mean(&|p| p.conf_l1),
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let flipped: Vec<f64> = rows.iter().filter_map(|r| r.first_cfe.map(|p| p.k)).collect();
        let n = rows.len();
        Self {
            discovery_rate: if n == 0 { f64::NAN } else { flipped.len() as f64 / n as f64 },
            no_flip: n - flipped.len(),
            mean_first_cfe_k: if flipped.is_empty() {
                f64::NAN
            } else {
                flipped.iter().sum::<f64>() / flipped.len() as f64
            },
            first_cfe: aggregate(rows.iter().filter_map(|r| r.first_cfe.as_ref())),
            reflection: aggregate(rows.iter().map(|r| &r.reflection)),
            rows,
        }
    }

    fn csv_with(&self, pick: impl Fn(&EvalRow) -> Option<PointMetrics>) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        let b = |v: bool| u8::from(v);
        for r in &self.rows {
            let k = r.first_cfe.map(|p| p.k.to_string()).unwrap_or_default();
            match pick(r) {
                Some(p) => writeln!(
                    s,
                    "{},{},{},{k},{},{},{},{},{}",
                    r.sample,
                    r.source,
                    r.target,
                    b(p.validity),
                    p.l1,
                    b(p.d_validity),
                    p.fea_dist,
                    p.conf_l1
                ),
                None => writeln!(s, "{},{},{},,,,,,", r.sample, r.source, r.target),
            }
            .unwrap();
        }
        s
    }

    /// Metrics of the `k = 1` counterfactuals; `first_cfe_k` is empty for
    /// samples without a flip.
    pub fn to_csv(&self) -> String {
        self.csv_with(|r| Some(r.reflection))
    }

    /// Same layout with metrics taken at the first counterfactual.
    pub fn first_cfe_csv(&self) -> String {
        self.csv_with(|r| r.first_cfe)
    }
}

struct Pending {
    row: usize,
    first: bool,
    k: f64,
    input: Tensor,
    z_k: Vec<f64>,
    ssc: Option<crate::trainer::SscInput>,
}

/// Evaluates one class pair on up to `cfg.samples` test images labelled
/// `cfg.source`.
pub fn evaluate_suite(
    clf: &Classifier,
    generator: &Generator,
    test: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (s, t) = (cfg.source, cfg.target);
    let head = Head::new(clf.weight(), clf.bias());
    let idx: Vec<usize> = test.indices_of(s).into_iter().take(cfg.samples).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("no test samples of class {s}")));
    }
    let images: Vec<Tensor> = idx.iter().map(|&i| test.images[i].clone()).collect();
    let stacks = clf.featurize_batch(&images)?;
    let mut pending = Vec::new();
    let mut first_k = vec![None; idx.len()];
    for (row, fs) in stacks.iter().enumerate() {
        let m = mirror::make_mirror(clf.weight(), clf.bias(), s, t)?;
        let reflector = mirror::reflector_for(&fs.z, m, head, cfg.mode)?;
        let traj = mirror::sample_trajectory(&fs.z, &reflector, head, cfg.steps)?;
        let mut ks = vec![(false, 1.0)];
        match mirror::first_cfe(&traj, head) {
            Ok(p) => {
                if argmax(&p.p_multi) != t {
                    return Err(Error::InvalidArgument(format!(
                        "first counterfactual of sample {} does not flip to {t}",
                        test.ids[idx[row]]
                    )));
                }
                first_k[row] = Some(p.k);
                ks.insert(0, (true, p.k));
            }
            Err(Error::NoFlip { .. }) => {}
            Err(e) => return Err(e),
        }
        for (first, k) in ks {
            let input = mirror::kfe_feature(fs.last(), &fs.z, k, &reflector)?;
            let ssc = generator.ssc_input(clf, fs, &input, s, t, Some(k))?;
            pending.push(Pending {
                row,
                first,
                k,
                z_k: reflector.latent_at(&fs.z, k)?,
                input,
                ssc,
            });
        }
    }

    let mut metrics: Vec<[Option<PointMetrics>; 2]> = vec![[None, None]; idx.len()];
    for chunk in pending.chunks(64) {
        let inputs: Vec<Tensor> = chunk.iter().map(|p| p.input.clone()).collect();
        let ssc: Option<Vec<_>> = chunk.iter().map(|p| p.ssc.clone()).collect();
        let generated = generator.generate(&inputs, ssc.as_deref())?;
        let back = clf.featurize_batch(&generated)?;
        for ((p, x), fs) in chunk.iter().zip(&generated).zip(&back) {
            let (fea_dist, conf_l1) = faithfulness(clf, &p.z_k, fs)?;
            let pm = PointMetrics {
                k: p.k,
                validity: fs.predicted() == t,
                l1: l1_mean(x, &images[p.row])?,
                d_validity: denoised_validity(clf, x, t, &cfg.blur)?,
                fea_dist,
                conf_l1,
            };
            metrics[p.row][usize::from(!p.first)] = Some(pm);
        }
    }
    let rows = idx
        .iter()
        .zip(metrics)
        .map(|(&i, [first, refl])| EvalRow {
            sample: test.ids[i],
            source: s,
            target: t,
            first_cfe: first,
            reflection: refl.expect("every sample has a k = 1 point"),
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}

/// One frame of an animated transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub k: f64,
    pub image: Tensor,
    pub intended_q_source: f64,
    pub intended_q_target: f64,
    pub pred_p_source: f64,
    pub pred_p_target: f64,
    pub l1_to_source: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// The classifier's own prediction for the input image.
    pub source: usize,
    pub target: usize,
    pub frames: Vec<Frame>,
}

pub const CONFIDENCE_CSV_HEADER: &str =
    "k,intended_q_source,intended_q_target,pred_p_source,pred_p_target,l1_to_source";

impl Transition {
    pub fn confidence_csv(&self) -> String {
        let mut s = format!("{CONFIDENCE_CSV_HEADER}\n");
        for f in &self.frames {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                f.k, f.intended_q_source, f.intended_q_target, f.pred_p_source, f.pred_p_target, f.l1_to_source
            )
            .unwrap();
        }
        s
    }
}

/// Renders the trajectory from the predicted class of `image` to `target`.
pub fn explain(
    clf: &Classifier,
    generator: &Generator,
    image: &Tensor,
    target: usize,
    steps: usize,
    mode: TrajectoryMode,
) -> Result<Transition> {
    let head = Head::new(clf.weight(), clf.bias());
    let fs = clf.featurize(image)?;
    let s = fs.predicted();
    if target >= clf.num_classes() || target == s {
        return Err(Error::InvalidArgument(format!(
            "target {target} must be a class other than the predicted source {s}"
        )));
    }
    let m = mirror::make_mirror(clf.weight(), clf.bias(), s, target)?;
    let reflector = mirror::reflector_for(&fs.z, m, head, mode)?;
    let traj = mirror::sample_trajectory(&fs.z, &reflector, head, steps)?;
    let mut inputs = Vec::with_capacity(steps);
    let mut ssc = Vec::with_capacity(steps);
    for p in &traj.points {
        let f = mirror::kfe_feature(fs.last(), &fs.z, p.k, &reflector)?;
        if let Some(x) = generator.ssc_input(clf, &fs, &f, s, target, Some(p.k))? {
            ssc.push(x);
        }
        inputs.push(f);
    }
    let ssc_ref = generator.config().ssc.then_some(ssc.as_slice());
    let images = generator.generate(&inputs, ssc_ref)?;
    let back = clf.featurize_batch(&images)?;
    let frames = traj
        .points
        .iter()
        .zip(images)
        .zip(back)
        .map(|((p, img), b)| {
            Ok(Frame {
                k: p.k,
                intended_q_source: 1.0 - p.q_pair,
                intended_q_target: p.q_pair,
                pred_p_source: b.probs[s],
                pred_p_target: b.probs[target],
                l1_to_source: l1_mean(&img, image)?,
                image: img,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Transition {
        source: s,
        target,
        frames,
    })
}

/// Softmax probabilities the head assigns to `z`.
pub fn intended_probs(clf: &Classifier, z: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&crate::classifier::head_logits(clf.weight(), clf.bias(), z)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one() {
        for (size, sigma) in [(3, 1.0), (5, 0.7), (7, 2.5)] {
            let k = gaussian_kernel(size, sigma).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gaussian_taps(4, 1.0).is_err());
    }

    #[test]
    fn constant_image_is_fixed() {
        let img = Tensor::full(&[1, 5, 5], 0.37);
        let b = gaussian_blur(&img, &BlurConfig::default()).unwrap();
        for v in b.data() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let img = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64 / 9.0).collect()).unwrap();
        let b = gaussian_blur(&img, &BlurConfig { size: 3, sigma: 1e-3 }).unwrap();
        for (a, c) in img.data().iter().zip(b.data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn report_aggregates_are_row_means() {
        let pm = |v: bool, l1: f64| PointMetrics {
            k: 1.0,
            validity: v,
            l1,
            d_validity: !v,
            fea_dist: l1 * 2.0,
            conf_l1: l1 / 2.0,
        };
        let rows = vec![
            EvalRow { sample: 0, source: 0, target: 1, first_cfe: Some(PointMetrics { k: 0.6, ..pm(true, 0.1) }), reflection: pm(true, 0.2) },
            EvalRow { sample: 1, source: 0, target: 1, first_cfe: None, reflection: pm(false, 0.4) },
        ];
        let r = EvalReport::from_rows(rows);
        assert_eq!(r.discovery_rate, 0.5);
        assert_eq!(r.no_flip, 1);
        assert!((r.reflection.l1 - 0.3).abs() < 1e-12);
        assert_eq!(r.reflection.validity, 0.5);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,0,1,,0,"));
    }
}
