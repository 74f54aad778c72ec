//! Seeded synthetic shape dataset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    HorizontalBar,
    VerticalBar,
    Cross,
    Disk,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::HorizontalBar,
        ShapeKind::VerticalBar,
        ShapeKind::Cross,
        ShapeKind::Disk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::HorizontalBar => "horizontal-bar",
            ShapeKind::VerticalBar => "vertical-bar",
            ShapeKind::Cross => "cross",
            ShapeKind::Disk => "disk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub classes: Vec<ShapeKind>,
    pub per_class: usize,
    /// Maximum centre offset in pixels along each axis.
    pub position_jitter: u32,
    /// Inclusive stroke thickness range in pixels.
    pub thickness: (u32, u32),
    pub intensity: (f64, f64),
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            classes: ShapeKind::ALL.to_vec(),
            per_class: 400,
            position_jitter: 2,
            thickness: (1, 3),
            intensity: (0.6, 1.0),
            noise_sigma: 0.05,
            train_fraction: 0.5,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.classes.is_empty() || self.classes.len() > ShapeKind::ALL.len() {
            return bad("between 1 and 4 shape classes are supported");
        }
        if self.per_class == 0 {
            return bad("per_class must be positive");
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad("image_size must be a multiple of 4 and at least 8");
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("intensity range must lie within [0, 1]");
        }
        if self.thickness.0 == 0 || self.thickness.0 > self.thickness.1 {
            return bad("thickness range must be positive and ordered");
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images are `[1, H, W]` tensors in `[0, 1]`; `ids` are positions in the
/// originally generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Indices of the samples carrying `label`, in dataset order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> LabeledDataset {
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            split,
            num_classes: self.num_classes,
        }
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n = cfg.image_size;
    let mut images = Vec::with_capacity(cfg.per_class * cfg.classes.len());
    let mut labels = Vec::with_capacity(images.capacity());
    for (label, &kind) in cfg.classes.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let j = cfg.position_jitter as i64;
            let dx = rng.gen_range(-j..=j);
            let dy = rng.gen_range(-j..=j);
            let thick = rng.gen_range(cfg.thickness.0..=cfg.thickness.1) as i64;
            let intensity = if cfg.intensity.0 < cfg.intensity.1 {
                rng.gen_range(cfg.intensity.0..cfg.intensity.1)
            } else {
                cfg.intensity.0
            };
            let mut px = render(kind, n, dx, dy, thick, intensity);
            if cfg.noise_sigma > 0.0 {
                for v in px.iter_mut() {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            images.push(Tensor::new(vec![1, n, n], px)?);
            labels.push(label);
        }
    }
    let ids = (0..images.len()).collect();
    Ok(LabeledDataset {
        images,
        labels,
        ids,
        split: Split::Full,
        num_classes: cfg.classes.len(),
    })
}

/// Rasterizes one shape; strokes and disks are clipped to the image.
fn render(kind: ShapeKind, n: usize, dx: i64, dy: i64, thick: i64, intensity: f64) -> Vec<f64> {
    let mut px = vec![0.0; n * n];
    let half = n as i64 / 2;
    let (cx, cy) = (half + dx, half + dy);
    // Bars span the central 5/8 of the image.
    let reach = (n as i64 * 5) / 16;
    let lo_t = -(thick / 2);
    let hi_t = lo_t + thick;
    let mut set = |x: i64, y: i64| {
        if (0..n as i64).contains(&x) && (0..n as i64).contains(&y) {
            px[y as usize * n + x as usize] = intensity;
        }
    };
    let hbar = |set: &mut dyn FnMut(i64, i64)| {
        for x in cx - reach..cx + reach {
            for t in lo_t..hi_t {
                set(x, cy + t);
            }
        }
    };
    let vbar = |set: &mut dyn FnMut(i64, i64)| {
        for y in cy - reach..cy + reach {
            for t in lo_t..hi_t {
                set(cx + t, y);
            }
        }
    };
    match kind {
        ShapeKind::HorizontalBar => hbar(&mut set),
        ShapeKind::VerticalBar => vbar(&mut set),
        ShapeKind::Cross => {
            hbar(&mut set);
            vbar(&mut set);
        }
        ShapeKind::Disk => {
            let r = (thick + 3) as f64 + 0.5;
            for y in cy - 6..=cy + 6 {
                for x in cx - 6..=cx + 6 {
                    let (fx, fy) = ((x - cx) as f64, (y - cy) as f64);
                    if fx * fx + fy * fy <= r * r {
                        set(x, y);
                    }
                }
            }
        }
    }
    px
}

/// Class-stratified seeded split. Each class contributes exactly
/// `round(fraction * count)` samples to the train part.
pub fn split(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..dataset.num_classes {
        let mut idx = dataset.indices_of(c);
        idx.shuffle(&mut rng);
        let k = (train_fraction * idx.len() as f64).round() as usize;
        let (a, b) = idx.split_at(k);
        train.extend_from_slice(a);
        test.extend_from_slice(b);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        dataset.subset(&train, Split::Train),
        dataset.subset(&test, Split::Test),
    ))
}
