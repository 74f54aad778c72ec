//! Generator and discriminator networks and the adversarial training loop
//! against a frozen classifier.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camprior::{self, push_spe, SpeLayer};
use crate::classifier::{Classifier, ClassifierConfig, FeatureStack};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PROB_FLOOR};
use crate::losses::{self, LossReport, LossWeights, TriConfig};
use crate::mirror::{self, Head, TrajectoryMode};
use crate::optim::AdamState;
use crate::params::{he_normal, push_conv, Bound, ModelParams, Role};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Decoder stage widths, coarsest first; one stage per classifier stage.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Width of the dense path from the pooled input to a map at the input
    /// resolution; 0 disables it.
    pub global_channels: usize,
    /// Enables the skip-connection controller on classifier stage `ssc_tap`.
    pub ssc: bool,
    pub ssc_tap: usize,
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub disc_channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 8],
            kernel: 3,
            global_channels: 16,
            ssc: false,
            ssc_tap: 1,
            rho_lo: 0.2,
            rho_hi: 0.8,
            disc_channels: vec![8, 16],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, clf: &ClassifierConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.channels.len() != clf.channels.len() {
            return bad(format!(
                "{} decoder stages for a {}-stage classifier",
                self.channels.len(),
                clf.channels.len()
            ));
        }
        if self.kernel % 2 == 0 || self.channels.contains(&0) || self.disc_channels.is_empty() {
            return bad("odd kernel and non-empty positive widths required".into());
        }
        if self.ssc && (self.ssc_tap == 0 || self.ssc_tap >= clf.channels.len()) {
            return bad(format!("ssc_tap must name an intermediate stage, got {}", self.ssc_tap));
        }
        camprior::rho(0.5, self.rho_lo, self.rho_hi).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Per-element inputs of the skip-connection controller.
#[derive(Debug, Clone, PartialEq)]
pub struct SscInput {
    /// Source feature `f_s^i` at the tapped stage.
    pub tap: Tensor,
    /// Binary prior mask at the tapped resolution.
    pub mask: Vec<f64>,
}

/// Decoder `G` from last-layer features to images.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    classifier: ClassifierConfig,
    params: ModelParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorManifest {
    generator: GeneratorConfig,
    classifier: ClassifierConfig,
}

impl Generator {
    pub fn init(config: GeneratorConfig, classifier: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate(classifier)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new(Role::Generator);
        let k = config.kernel;
        let mut c_in = classifier.latent_dim();
        let shapes = classifier.feature_shapes();
        if config.global_channels > 0 {
            let (cl, hl, wl) = *shapes.last().expect("stages");
            let width = config.global_channels * hl * wl;
            params.insert("g.fc.w", he_normal(&mut rng, &[cl, width], cl));
            params.insert("g.fc.b", Tensor::zeros(&[width]));
            c_in += config.global_channels;
        }
        for (j, &c_out) in config.channels.iter().enumerate() {
            let extra = match Self::tap_stage(&config, classifier) {
                Some(stage) if stage == j + 1 => shapes[config.ssc_tap - 1].0,
                _ => 0,
            };
            push_conv(&mut params, &mut rng, &format!("g.conv{}", j + 1), c_in + extra, c_out, k);
            c_in = c_out;
        }
        push_conv(&mut params, &mut rng, "g.out", c_in, classifier.in_channels, k);
        if config.ssc {
            push_spe(&mut params, &mut rng, config.ssc_tap, &Self::spe_layer(&config, classifier))?;
        }
        Ok(Self {
            config,
            classifier: classifier.clone(),
            params,
        })
    }

    /// Decoder stage (1-based, counted after its upsample) whose resolution
    /// matches the tapped classifier stage.
    fn tap_stage(config: &GeneratorConfig, clf: &ClassifierConfig) -> Option<usize> {
        config.ssc.then(|| clf.channels.len() - config.ssc_tap)
    }

    fn spe_layer(config: &GeneratorConfig, clf: &ClassifierConfig) -> SpeLayer {
        let shapes = clf.feature_shapes();
        SpeLayer {
            tap: shapes[config.ssc_tap - 1],
            last: *shapes.last().expect("stages"),
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn manifest(&self) -> serde_json::Value {
        serde_json::to_value(GeneratorManifest {
            generator: self.config.clone(),
            classifier: self.classifier.clone(),
        })
        .expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.manifest())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.to_bytes(&self.manifest())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, cfg) = ModelParams::load(path)?;
        if params.role != Role::Generator {
            return Err(Error::Checkpoint(format!("expected a generator, found {:?}", params.role)));
        }
        let m: GeneratorManifest = serde_json::from_value(cfg)?;
        let fresh = Self::init(m.generator.clone(), &m.classifier, 0)?;
        for (name, t) in fresh.params.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", got.shape())));
            }
        }
        Ok(Self {
            config: m.generator,
            classifier: m.classifier,
            params,
        })
    }

    /// Forward pass on `[B, C_l, H_l, W_l]`. `ssc` carries the stacked
    /// tapped features and one mask per element when the controller is on.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        f_last: NodeId,
        ssc: Option<(NodeId, &[Vec<f64>])>,
    ) -> Result<NodeId> {
        let tap_stage = Self::tap_stage(&self.config, &self.classifier);
        let mut h = f_last;
        if self.config.global_channels > 0 {
            let [b, _, hl, wl] = match *g.value(f_last).shape() {
                [b, c, hl, wl] => [b, c, hl, wl],
                ref s => return Err(Error::shape("generator", format!("input {s:?}"))),
            };
            let z = g.gap(f_last)?;
            let m = g.matmul(z, p.id("g.fc.w"))?;
            let m = g.add_row_bias(m, p.id("g.fc.b"))?;
            let m = g.reshape(m, &[b, self.config.global_channels, hl, wl])?;
            h = g.concat_channels(h, m)?;
        }
        for j in 1..=self.config.channels.len() {
            h = g.upsample(h, 2)?;
            if tap_stage == Some(j) {
                let (tap, masks) = ssc.ok_or_else(|| {
                    Error::InvalidArgument("generator built with ssc needs tapped features".into())
                })?;
                let layer = Self::spe_layer(&self.config, &self.classifier);
                let u = camprior::spe_transform(g, p, self.config.ssc_tap, &layer, tap, f_last)?;
                let mixed = camprior::csp_mix_node(g, tap, u, masks)?;
                h = g.concat_channels(h, mixed)?;
            }
            let c = g.conv2d(h, p.id(&format!("g.conv{j}.w")), p.id(&format!("g.conv{j}.b")))?;
            h = g.relu(c)?;
        }
        let out = g.conv2d(h, p.id("g.out.w"), p.id("g.out.b"))?;
        g.sigmoid(out)
    }

    /// Generates images for a batch of `[C_l, H_l, W_l]` features.
    pub fn generate(&self, features: &[Tensor], ssc: Option<&[SscInput]>) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(Tensor::stack(features)?);
        let masks: Vec<Vec<f64>>;
        let ssc_nodes = match (self.config.ssc, ssc) {
            (true, Some(items)) => {
                let taps: Vec<Tensor> = items.iter().map(|s| s.tap.clone()).collect();
                masks = items.iter().map(|s| s.mask.clone()).collect();
                Some((g.constant(Tensor::stack(&taps)?), masks.as_slice()))
            }
            (true, None) => {
                return Err(Error::InvalidArgument("generator needs ssc inputs".into()))
            }
            (false, _) => None,
        };
        let out = self.forward(&mut g, &p, f, ssc_nodes)?;
        (0..features.len()).map(|i| g.value(out).index_batch(i)).collect()
    }

    /// Controller inputs for a source stack at step `k` (`None` gives the
    /// reconstruction threshold).
    pub fn ssc_input(
        &self,
        clf: &Classifier,
        source: &FeatureStack,
        f_k: &Tensor,
        s: usize,
        t: usize,
        k: Option<f64>,
    ) -> Result<Option<SscInput>> {
        if !self.config.ssc {
            return Ok(None);
        }
        let rho = match k {
            Some(k) => camprior::rho(k, self.config.rho_lo, self.config.rho_hi)?,
            None => self.config.rho_hi,
        };
        let tap = source.features[self.config.ssc_tap - 1].clone();
        let (_, h, w) = (tap.shape()[0], tap.shape()[1], tap.shape()[2]);
        let cam = camprior::cam(clf.weight(), f_k)?;
        let m = camprior::prior_mask(&cam, s, t, rho, &[(h, w)])?;
        Ok(Some(SscInput {
            tap,
            mask: m.upsampled.into_iter().next().expect("one layer").2,
        }))
    }
}

/// Discriminator `D`: conv stages, global average pooling, sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    params: ModelParams,
    stages: usize,
}

impl Discriminator {
    pub fn init(config: &GeneratorConfig, clf: &ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        let mut params = ModelParams::new(Role::Discriminator);
        let mut c_in = clf.in_channels;
        for (i, &c) in config.disc_channels.iter().enumerate() {
            push_conv(&mut params, &mut rng, &format!("d.conv{}", i + 1), c_in, c, config.kernel);
            c_in = c;
        }
        params.insert("d.head.w", he_normal(&mut rng, &[c_in, 1], c_in));
        params.insert("d.head.b", Tensor::zeros(&[1]));
        Self {
            params,
            stages: config.disc_channels.len(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &serde_json::json!({ "stages": self.stages }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.to_bytes(&serde_json::json!({ "stages": self.stages }))
    }

    /// `[B, C, H, W]` images to `[B, 1]` probabilities of being real.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for i in 1..=self.stages {
            let c = g.conv2d(h, p.id(&format!("d.conv{i}.w")), p.id(&format!("d.conv{i}.b")))?;
            let r = g.relu(c)?;
            h = g.avg_pool(r, 2)?;
        }
        let z = g.gap(h)?;
        let l = g.matmul(z, p.id("d.head.w"))?;
        let l = g.add_row_bias(l, p.id("d.head.b"))?;
        g.sigmoid(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum KRule {
    /// `k ~ U[0, 1]`.
    Uniform,
    /// `k` drawn uniformly from `{i / (steps - 1)}`, so both endpoints and
    /// the projection (for odd `steps`) occur exactly.
    EndpointsGrid { steps: usize },
}

impl KRule {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            KRule::Uniform => rng.gen_range(0.0..=1.0),
            KRule::EndpointsGrid { steps } => {
                let i = rng.gen_range(0..steps.max(2));
                i as f64 / (steps.max(2) - 1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Adam first-moment decay for both networks.
    pub beta1: f64,
    pub weights: LossWeights,
    pub tri: TriConfig,
    pub k_rule: KRule,
    /// Share of batch elements that reconstruct a real image.
    pub recon_fraction: f64,
    pub mode: TrajectoryMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 4,
            lr: 2e-4,
            beta1: 0.5,
            weights: LossWeights::default(),
            tri: TriConfig::default(),
            k_rule: KRule::Uniform,
            recon_fraction: 0.25,
            mode: TrajectoryMode::Multiclass,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("train: epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config("train: lr must be positive and beta1 in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.recon_fraction) {
            return Err(Error::Config("train: recon_fraction outside [0, 1]".into()));
        }
        if let KRule::EndpointsGrid { steps } = self.k_rule {
            if steps < 2 {
                return Err(Error::Config("train: k grid needs at least 2 steps".into()));
            }
        }
        self.weights.validate()?;
        self.tri.validate()
    }
}

/// Frozen classifier outputs for every image of a dataset.
pub struct FeaturePool<'a> {
    pub dataset: &'a LabeledDataset,
    pub stacks: Vec<FeatureStack>,
    /// Dataset indices per true label.
    pub by_label: Vec<Vec<usize>>,
}

impl<'a> FeaturePool<'a> {
    pub fn new(clf: &Classifier, dataset: &'a LabeledDataset) -> Result<Self> {
        let mut stacks = Vec::with_capacity(dataset.len());
        for chunk in dataset.images.chunks(64) {
            stacks.extend(clf.featurize_batch(chunk)?);
        }
        let by_label = (0..dataset.num_classes).map(|c| dataset.indices_of(c)).collect();
        Ok(Self {
            dataset,
            stacks,
            by_label,
        })
    }
}

/// One element of a generator batch.
#[derive(Debug, Clone, PartialEq)]
pub struct KfeSample {
    /// Dataset index of the source image.
    pub image: usize,
    pub source: usize,
    /// Equal to `source` for reconstruction elements.
    pub target: usize,
    /// `None` marks a reconstruction element.
    pub k: Option<f64>,
    /// Generator input `f_k^l`.
    pub input: Tensor,
    pub z_k: Vec<f64>,
    pub p_intended: Vec<f64>,
    /// Dataset index of the triangulation reference, when the loss applies.
    pub reference: Option<usize>,
    /// `1 / max(ratio, floor)` for the triangulation band.
    pub inv_ratio: f64,
    pub ssc: Option<SscInput>,
}

impl KfeSample {
    pub fn is_reconstruction(&self) -> bool {
        self.k.is_none()
    }
}

pub fn sample_kfe_batch<R: Rng>(
    pool: &FeaturePool<'_>,
    clf: &Classifier,
    generator: &Generator,
    cfg: &TrainConfig,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<KfeSample>> {
    let c = clf.num_classes();
    let present = pool.by_label.iter().filter(|v| !v.is_empty()).count();
    if c < 2 || present < 2 {
        return Err(Error::InvalidArgument("training needs at least two classes".into()));
    }
    let head = Head::new(clf.weight(), clf.bias());
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let image = rng.gen_range(0..pool.dataset.len());
        let fs = &pool.stacks[image];
        let s = fs.predicted();
        if rng.gen_bool(cfg.recon_fraction) {
            out.push(KfeSample {
                image,
                source: s,
                target: s,
                k: None,
                input: fs.last().clone(),
                z_k: fs.z.clone(),
                p_intended: fs.probs.clone(),
                reference: None,
                inv_ratio: 0.0,
                ssc: generator.ssc_input(clf, fs, fs.last(), s, s, None)?,
            });
            continue;
        }
        let mut t = rng.gen_range(0..c - 1);
        if t >= s {
            t += 1;
        }
        let k = cfg.k_rule.sample(rng);
        let m = mirror::make_mirror(clf.weight(), clf.bias(), s, t)?;
        let reflector = mirror::reflector_for(&fs.z, m, head, cfg.mode)?;
        let input = mirror::kfe_feature(fs.last(), &fs.z, k, &reflector)?;
        let z_k = reflector.latent_at(&fs.z, k)?;
        let p_intended = softmax(&head.logits(&z_k)?);
        let pool_class = if k >= 0.5 { t } else { s };
        let reference = if k == 0.0 {
            None
        } else {
            pool.by_label[pool_class].choose(rng).copied()
        };
        let inv_ratio = match reference {
            Some(r) => {
                let ratio = losses::tri_ratio(&fs.z, &z_k, &pool.stacks[r].z, cfg.tri.ratio_floor);
                1.0 / ratio.max(cfg.tri.ratio_floor)
            }
            None => 0.0,
        };
        let ssc = generator.ssc_input(clf, fs, &input, s, t, Some(k))?;
        out.push(KfeSample {
            image,
            source: s,
            target: t,
            k: Some(k),
            input,
            z_k,
            p_intended,
            reference,
            inv_ratio,
            ssc,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub cls: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub rec: f64,
    pub fea: f64,
    pub tri: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,cls,adv_g,adv_d,rec,fea,tri,total";

pub fn loss_history_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.cls, r.adv_g, r.adv_d, r.rec, r.fea, r.tri, r.total
        )
        .unwrap();
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub history: Vec<LossRow>,
    /// Set when training stopped on a non-finite loss; the networks are then
    /// the last finite state.
    pub aborted: Option<Error>,
}

/// Masked mean weights: `1 / count` on selected elements.
fn mean_mask(sel: &[bool]) -> (Tensor, usize) {
    let n = sel.iter().filter(|&&b| b).count();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    (
        Tensor::from_vec(sel.iter().map(|&b| if b { w } else { 0.0 }).collect()),
        n,
    )
}

fn masked_mean(g: &mut Graph, per_sample: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.constant(weights.clone());
    let m = g.mul(per_sample, w)?;
    g.sum(m)
}

fn stack_images(ds: &LabeledDataset, idx: impl Iterator<Item = usize>) -> Result<Tensor> {
    Tensor::stack(&idx.map(|i| ds.images[i].clone()).collect::<Vec<_>>())
}

struct StepResult {
    report: LossReport,
    g_grads: Vec<Option<Tensor>>,
}

fn train_step(
    clf: &Classifier,
    generator: &Generator,
    disc: &Discriminator,
    pool: &FeaturePool<'_>,
    cfg: &TrainConfig,
    batch: &[KfeSample],
    mut update_d: impl FnMut(&[Option<Tensor>]) -> Result<Discriminator>,
) -> Result<StepResult> {
    let ds = pool.dataset;
    let b = batch.len();
    let w = &cfg.weights;

    // Generator forward.
    let mut g = Graph::new();
    let gp = generator.params.bind(&mut g, true);
    let f = g.constant(Tensor::stack(&batch.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?);
    let masks: Vec<Vec<f64>>;
    let ssc = if generator.config.ssc {
        let taps: Vec<Tensor> = batch
            .iter()
            .map(|s| s.ssc.as_ref().map(|x| x.tap.clone()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidArgument("missing ssc inputs".into()))?;
        masks = batch.iter().map(|s| s.ssc.as_ref().expect("checked").mask.clone()).collect();
        Some((g.constant(Tensor::stack(&taps)?), masks.as_slice()))
    } else {
        None
    };
    let fake = generator.forward(&mut g, &gp, f, ssc)?;
    let real = stack_images(ds, batch.iter().map(|s| s.image))?;

    // Discriminator step on detached fakes.
    let mut gd = Graph::new();
    let dp = disc.params.bind(&mut gd, true);
    let real_n = gd.constant(real.clone());
    let fake_n = gd.constant(g.value(fake).clone());
    let d_real = disc.forward(&mut gd, &dp, real_n)?;
    let d_fake = disc.forward(&mut gd, &dp, fake_n)?;
    let lr = gd.ln_clamped(d_real, PROB_FLOOR, 1.0)?;
    let one_minus = gd.scale(d_fake, -1.0)?;
    let one_minus = gd.add_scalar(one_minus, 1.0)?;
    let lf = gd.ln_clamped(one_minus, PROB_FLOOR, 1.0)?;
    let lr_m = gd.mean(lr)?;
    let lf_m = gd.mean(lf)?;
    let d_sum = gd.add(lr_m, lf_m)?;
    let d_loss = gd.scale(d_sum, -1.0)?;
    let adv = losses::loss_adv(gd.value(d_real).data(), gd.value(d_fake).data());
    let mut dgr = gd.backward(d_loss)?;
    let d_grads: Vec<Option<Tensor>> = dp.ids().map(|id| dgr.take(id)).collect();
    let adv_d = gd.value(d_loss).item();
    let disc_next = update_d(&d_grads)?;

    // Generator objective against the updated discriminator.
    let dcp = disc_next.params.bind(&mut g, false);
    let dg = disc_next.forward(&mut g, &dcp, fake)?;
    let ldg = g.ln_clamped(dg, PROB_FLOOR, 1.0)?;
    let ldg = g.mean(ldg)?;
    let adv_g = g.scale(ldg, -1.0)?;

    let cp = clf.bind(&mut g);
    let cf = clf.forward(&mut g, &cp, fake)?;
    let intended = g.constant(Tensor::new(
        vec![b, clf.num_classes()],
        batch.iter().flat_map(|s| s.p_intended.iter().copied()).collect(),
    )?);
    let kl = g.kld(intended, cf.probs)?;
    let cls = g.mean(kl)?;

    let kfe: Vec<bool> = batch.iter().map(|s| !s.is_reconstruction()).collect();
    let rec_sel: Vec<bool> = kfe.iter().map(|k| !k).collect();
    let tri_sel: Vec<bool> = batch.iter().map(|s| s.reference.is_some()).collect();
    let (kfe_w, _) = mean_mask(&kfe);
    let (rec_w, _) = mean_mask(&rec_sel);
    let (tri_w, _) = mean_mask(&tri_sel);

    let real_c = g.constant(real);
    let rec_ps = losses::l1_per_sample(&mut g, fake, real_c)?;
    let rec = masked_mean(&mut g, rec_ps, &rec_w)?;

    let zk = g.constant(Tensor::new(
        vec![b, clf.config().latent_dim()],
        batch.iter().flat_map(|s| s.z_k.iter().copied()).collect(),
    )?);
    let fea_ps = losses::l2_per_sample(&mut g, cf.z, zk)?;
    let fea = masked_mean(&mut g, fea_ps, &kfe_w)?;

    let refs = stack_images(ds, batch.iter().map(|s| s.reference.unwrap_or(s.image)))?;
    let ref_c = g.constant(refs);
    let inv: Vec<f64> = batch.iter().map(|s| s.inv_ratio).collect();
    let tri_ps = losses::tri_node(&mut g, real_c, fake, ref_c, &inv, cfg.tri.alpha)?;
    let tri = masked_mean(&mut g, tri_ps, &tri_w)?;

    let prox = if w.prox > 0.0 {
        let p = losses::l1_per_sample(&mut g, fake, real_c)?;
        Some(masked_mean(&mut g, p, &kfe_w)?)
    } else {
        None
    };

    let mut terms = vec![(cls, w.cls), (adv_g, w.adv), (rec, w.rec), (fea, w.fea), (tri, w.tri)];
    if let Some(p) = prox {
        terms.push((p, w.prox));
    }
    let mut total = None;
    for (node, wt) in terms {
        let s = g.scale(node, wt)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("terms");
    let mut ggr = g.backward(total)?;
    let g_grads = gp.ids().map(|id| ggr.take(id)).collect();
    let v = |n: NodeId| g.value(n).item();
    Ok(StepResult {
        report: LossReport {
            cls: v(cls),
            adv_g: v(adv_g),
            adv_d,
            rec: v(rec),
            fea: v(fea),
            tri: v(tri),
            prox: prox.map(v),
            total: v(total),
            adv_clamped: adv.clamped,
        },
        g_grads,
    })
}

/// Alternating discriminator/generator training. `on_step` sees every loss
/// row as it is produced.
pub fn train_generator(
    clf: &Classifier,
    train: &LabeledDataset,
    gen_config: &GeneratorConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    gen_config.validate(clf.config())?;
    let checksum = clf.checksum();
    let pool = FeaturePool::new(clf, train)?;
    let mut generator = Generator::init(gen_config.clone(), clf.config(), cfg.seed)?;
    let mut disc = Discriminator::init(gen_config, clf.config(), cfg.seed);
    let mut g_adam = AdamState::with_betas(&generator.params, cfg.lr, cfg.beta1, 0.999, 1e-8);
    let mut d_adam = AdamState::with_betas(&disc.params, cfg.lr, cfg.beta1, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let steps = (train.len() / cfg.batch).max(1);
    let mut history = Vec::with_capacity(cfg.epochs * steps);
    let mut aborted = None;

    'outer: for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let batch = sample_kfe_batch(&pool, clf, &generator, cfg, cfg.batch, &mut rng)?;
            let mut d_next = disc.clone();
            let mut d_adam_next = d_adam.clone();
            let result = train_step(clf, &generator, &disc, &pool, cfg, &batch, |grads| {
                d_adam_next.step(&mut d_next.params, grads)?;
                Ok(d_next.clone())
            });
            let r = match result {
                Ok(r) if r.report.total.is_finite() && r.report.adv_d.is_finite() => r,
                Ok(_) | Err(Error::NumericOverflow { .. }) => {
                    aborted = Some(Error::Diverged {
                        epoch,
                        step,
                        what: "generator loss".into(),
                    });
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let mut g_next = generator.clone();
            let mut g_adam_next = g_adam.clone();
            g_adam_next.step(&mut g_next.params, &r.g_grads)?;
            if !g_next.params.iter().all(|(_, t)| t.all_finite())
                || !d_next.params.iter().all(|(_, t)| t.all_finite())
            {
                aborted = Some(Error::Diverged {
                    epoch,
                    step,
                    what: "parameters".into(),
                });
                break 'outer;
            }
            generator = g_next;
            g_adam = g_adam_next;
            disc = d_next;
            d_adam = d_adam_next;
            let row = LossRow {
                epoch,
                step,
                cls: r.report.cls,
                adv_g: r.report.adv_g,
                adv_d: r.report.adv_d,
                rec: r.report.rec,
                fea: r.report.fea,
                tri: r.report.tri,
                total: r.report.total,
            };
            on_step(&row);
            history.push(row);
        }
    }
    let after = clf.checksum();
    if after != checksum {
        return Err(Error::ClassifierMutated {
            before: checksum,
            after,
        });
    }
    Ok(TrainOutcome {
        generator,
        discriminator: disc,
        history,
        aborted,
    })
}
