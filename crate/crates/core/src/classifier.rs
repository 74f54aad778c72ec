//! The frozen CNN classifier `F`: conv stages, global average pooling and a
//! linear softmax head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::AdamState;
use crate::params::{he_normal, push_conv, Bound, ModelParams, Role};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv stage; each stage halves the resolution.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            in_channels: 1,
            channels: vec![8, 16],
            kernel: 3,
            num_classes: 4,
        }
    }
}

impl ClassifierConfig {
    /// Latent width `N`, the channel count of the last stage.
    pub fn latent_dim(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }

    /// `(C_i, H_i, W_i)` of every stage output `f^i`.
    pub fn feature_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut s = self.image_size;
        self.channels
            .iter()
            .map(|&c| {
                s /= 2;
                (c, s, s)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.num_classes < 2 || self.kernel % 2 == 0 {
            return Err(Error::Config(
                "classifier: needs >= 1 stage, >= 2 classes and an odd kernel".into(),
            ));
        }
        if self.image_size % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(
                "classifier: image_size must be divisible by 2^stages".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 20,
            batch: 2,
            seed: 1,
        }
    }
}

/// Per-image outputs of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// Stage outputs `f^1..f^l`, each `[C_i, H_i, W_i]`.
    pub features: Vec<Tensor>,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl FeatureStack {
    pub fn last(&self) -> &Tensor {
        self.features.last().expect("at least one stage")
    }

    pub fn predicted(&self) -> usize {
        tensor::argmax(&self.probs)
    }
}

/// Graph nodes produced by one classifier pass.
#[derive(Debug, Clone)]
pub struct ClassifierNodes {
    pub features: Vec<NodeId>,
    pub z: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl Classifier {
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new(Role::Classifier);
        let mut c_in = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            push_conv(&mut params, &mut rng, &format!("conv{}", i + 1), c_in, c, config.kernel);
            c_in = c;
        }
        let n = config.latent_dim();
        params.insert("head.w", he_normal(&mut rng, &[n, config.num_classes], n));
        params.insert("head.b", Tensor::zeros(&[config.num_classes]));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ClassifierConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.role != Role::Classifier {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let n = config.latent_dim();
        let w = params.require("head.w")?;
        if w.shape() != [n, config.num_classes] {
            return Err(Error::Checkpoint(format!("head.w has shape {:?}", w.shape())));
        }
        for i in 0..config.channels.len() {
            params.require(&format!("conv{}.w", i + 1))?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Head weights `W`, shape `[N, |C|]`.
    pub fn weight(&self) -> &Tensor {
        self.params.get("head.w").expect("validated")
    }

    /// Head bias `b`, length `|C|`.
    pub fn bias(&self) -> &[f64] {
        self.params.get("head.b").expect("validated").data()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, &serde_json::to_value(&self.config)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, cfg) = ModelParams::load(path)?;
        Self::from_parts(serde_json::from_value(cfg)?, params)
    }

    /// Bind the parameters as constants (the frozen path).
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    /// Full forward pass on a `[B, C, H, W]` node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<ClassifierNodes> {
        let mut h = x;
        let mut features = Vec::with_capacity(self.config.channels.len());
        for i in 1..=self.config.channels.len() {
            let c = g.conv2d(h, p.id(&format!("conv{i}.w")), p.id(&format!("conv{i}.b")))?;
            let r = g.relu(c)?;
            h = g.avg_pool(r, 2)?;
            features.push(h);
        }
        let z = g.gap(h)?;
        let lin = g.matmul(z, p.id("head.w"))?;
        let logits = g.add_row_bias(lin, p.id("head.b"))?;
        let probs = g.softmax(logits)?;
        Ok(ClassifierNodes {
            features,
            z,
            logits,
            probs,
        })
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let c = &self.config;
        if img.shape() != [c.in_channels, c.image_size, c.image_size] {
            return Err(Error::shape(
                "featurize",
                format!(
                    "image {:?}, expected [{}, {}, {}]",
                    img.shape(),
                    c.in_channels,
                    c.image_size,
                    c.image_size
                ),
            ));
        }
        Ok(())
    }

    pub fn featurize(&self, image: &Tensor) -> Result<FeatureStack> {
        Ok(self.featurize_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn featurize_batch(&self, images: &[Tensor]) -> Result<Vec<FeatureStack>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(Tensor::stack(images)?);
        let nodes = self.forward(&mut g, &p, x)?;
        (0..images.len())
            .map(|i| {
                Ok(FeatureStack {
                    features: nodes
                        .features
                        .iter()
                        .map(|&f| g.value(f).index_batch(i))
                        .collect::<Result<_>>()?,
                    z: g.value(nodes.z).index_batch(i)?.into_data(),
                    logits: g.value(nodes.logits).index_batch(i)?.into_data(),
                    probs: g.value(nodes.probs).index_batch(i)?.into_data(),
                })
            })
            .collect()
    }

    /// Head only: `logits = W^T z + b`, `probs = softmax(logits)`.
    pub fn classify(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let logits = head_logits(self.weight(), self.bias(), z)?;
        let probs = tensor::softmax(&logits);
        Ok((logits, probs))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.featurize(image)?.predicted())
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Ok(f64::NAN);
        }
        let mut correct = 0;
        for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(64) {
            let imgs: Vec<Tensor> = chunk.iter().map(|&i| ds.images[i].clone()).collect();
            for (fs, &i) in self.featurize_batch(&imgs)?.iter().zip(chunk) {
                correct += usize::from(fs.predicted() == ds.labels[i]);
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }
}

/// `W^T z + b` for `W: [N, C]`.
pub fn head_logits(w: &Tensor, b: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let [n, c] = match *w.shape() {
        [n, c] => [n, c],
        ref s => return Err(Error::shape("classify", format!("head weight {s:?}"))),
    };
    if z.len() != n || b.len() != c {
        return Err(Error::shape(
            "classify",
            format!("latent of {} for head [{n}, {c}]", z.len()),
        ));
    }
    let wd = w.data();
    Ok((0..c)
        .map(|j| b[j] + (0..n).map(|i| wd[i * c + j] * z[i]).sum::<f64>())
        .collect())
}

fn one_hot(labels: &[usize], c: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        data[i * c + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), c], data).expect("shape")
}

/// Trains a classifier with Adam on a mean cross-entropy objective
/// (KL divergence from one-hot targets). Returns the frozen classifier and
/// per-epoch statistics.
pub fn train_classifier(
    config: ClassifierConfig,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    hyper: &ClassifierTrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Classifier, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty train split".into()));
    }
    if hyper.batch == 0 || hyper.epochs == 0 {
        return Err(Error::Config("classifier: epochs and batch must be positive".into()));
    }
    let mut clf = Classifier::init(config, hyper.seed)?;
    let mut adam = AdamState::new(&clf.params, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let c = clf.config.num_classes;
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(hyper.batch).enumerate() {
            let imgs: Vec<Tensor> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&imgs)?);
            let out = clf.forward(&mut g, &p, x)?;
            let target = g.constant(one_hot(&labels, c));
            let kl = g.kld(target, out.probs)?;
            let loss = g.mean(kl)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: "classifier loss".into(),
                });
            }
            let mut grads = g.backward(loss)?;
            let gs: Vec<Option<Tensor>> = p.ids().map(|id| grads.take(id)).collect();
            adam.step(&mut clf.params, &gs)?;
            loss_sum += lv;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            train_accuracy: clf.accuracy(train)?,
            test_accuracy: match test {
                Some(t) => clf.accuracy(t)?,
                None => f64::NAN,
            },
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((clf, history))
}
