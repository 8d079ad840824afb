//! Network assembly: CNN/VGG baselines, the amplitude and phase branches, MCNN,
//! DMCNN and the M1-M6 ablation ladder, plus the multi-head loss, averaged
//! prediction, training loop and batched inference.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{softmax_rows, AdamState, Graph, Mode, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::layers::{ConvKind, ConvUnit, DenseBlock, Linear, WeightedSum};
use crate::metrics::ConfusionMatrix;
use crate::polsar::{channel_stats, patch_batch, ChannelCube, ChannelStats, CubeForm, PatchSet};
use crate::tensor::{derive_seed, rng_from_seed, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    CnnV1,
    CnnV2,
    VggV1,
    VggV2,
    Mcnn,
    Dmcnn,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::CnnV1,
        Variant::CnnV2,
        Variant::VggV1,
        Variant::VggV2,
        Variant::Mcnn,
        Variant::Dmcnn,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
    ];

    pub const ABLATION: [Variant; 6] = [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::M5, Variant::M6];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CnnV1 => "CNN_v1",
            Variant::CnnV2 => "CNN_v2",
            Variant::VggV1 => "VGG_v1",
            Variant::VggV2 => "VGG_v2",
            Variant::Mcnn => "MCNN",
            Variant::Dmcnn => "DMCNN",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::M6 => "M6",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }

    /// Cube form the variant consumes.
    pub fn input_form(self) -> CubeForm {
        match self {
            Variant::CnnV1 | Variant::VggV1 => CubeForm::RealImag,
            _ => CubeForm::AmpPhase,
        }
    }

    fn phase_conv(self) -> ConvKind {
        match self {
            Variant::Dmcnn | Variant::M6 => ConvKind::DepthwiseSeparable,
            _ => ConvKind::Vanilla,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. Dropout values are drop probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub classes: usize,
    pub patch_size: usize,
    pub widths: [usize; 3],
    pub fc_width: usize,
    pub conv_drop: f64,
    pub fc_drop: f64,
    pub growth: usize,
    pub multiplier: usize,
    pub dense_layers: usize,
    /// Side-head loss weights for the phase, amplitude and fusion heads.
    pub alphas: [f64; 3],
    /// Branch block (2 or 3) whose pre-pool maps feed the fusion module.
    pub fusion_source: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, classes: usize) -> Self {
        ModelConfig {
            variant,
            classes,
            patch_size: 14,
            widths: [32, 64, 64],
            fc_width: 128,
            conv_drop: 0.2,
            fc_drop: 0.5,
            growth: 16,
            multiplier: 4,
            dense_layers: 5,
            alphas: [1.0; 3],
            fusion_source: 3,
        }
    }

    /// Narrow widths used for the small EMISAR training set.
    pub fn emisar(variant: Variant, classes: usize) -> Self {
        ModelConfig { widths: [12, 24, 24], growth: 12, multiplier: 2, conv_drop: 0.0, ..ModelConfig::new(variant, classes) }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.widths.contains(&0) || self.fc_width == 0 || self.growth == 0 || self.multiplier == 0 || self.dense_layers == 0 {
            return err("widths, fc_width, growth, multiplier and dense_layers must be positive".into());
        }
        for (name, p) in [("conv_dropout", self.conv_drop), ("fc_dropout", self.fc_drop)] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !matches!(self.fusion_source, 2 | 3) {
            return err(format!("fusion_source must be 2 or 3, got {}", self.fusion_source));
        }
        let min = if matches!(self.variant, Variant::CnnV1 | Variant::CnnV2) { 8 } else { 4 };
        if self.patch_size < min {
            return err(format!("patch size {} is below the minimum {min} for {}", self.patch_size, self.variant));
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return err("side-loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Spatial side of branch block `b` (1-based) before pooling.
    fn block_side(&self, b: usize) -> usize {
        self.patch_size >> (b - 1)
    }
}

fn dropout_opt(p: f64) -> Option<f64> {
    (p > 0.0).then_some(p)
}

/// `FC -> Dropout -> ReLU -> FC(classes)`.
#[derive(Debug, Clone)]
struct Head {
    hidden: Linear,
    out: Linear,
    drop: f64,
}

impl Head {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, features: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Head {
            hidden: Linear::new(store, &format!("{prefix}/fc"), features, cfg.fc_width, seed)?,
            out: Linear::new(store, &format!("{prefix}/out"), cfg.fc_width, cfg.classes, seed)?,
            drop: cfg.fc_drop,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let flat = g.flatten(x)?;
        let mut h = self.hidden.forward(g, store, flat)?;
        if self.drop > 0.0 {
            h = g.dropout(h, self.drop)?;
        }
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

/// Three blocks of two composite conv layers with 2x2 max pooling after the
/// first two blocks; dropout is skipped on the last conv of each block.
#[derive(Debug, Clone)]
struct Branch {
    units: Vec<ConvUnit>,
    head: Option<Head>,
}

impl Branch {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        kind: ConvKind,
        cfg: &ModelConfig,
        with_head: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(6);
        let mut c = in_channels;
        for (b, &w) in cfg.widths.iter().enumerate() {
            for u in 0..2 {
                let drop = if u == 1 { None } else { dropout_opt(cfg.conv_drop) };
                units.push(ConvUnit::new(store, &format!("{prefix}/block{}/unit{}", b + 1, u + 1), kind, c, w, drop, seed)?);
                c = w;
            }
        }
        let head = if with_head {
            let side = cfg.block_side(3);
            Some(Head::new(store, prefix, cfg.widths[2] * side * side, cfg, seed)?)
        } else {
            None
        };
        Ok(Branch { units, head })
    }

    /// Pre-pool output of every block.
    fn maps<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<[NodeId; 3]> {
        let mut out = [0; 3];
        let mut h = x;
        for (b, slot) in out.iter_mut().enumerate() {
            h = self.units[2 * b].forward(g, store, h)?;
            h = self.units[2 * b + 1].forward(g, store, h)?;
            *slot = h;
            if b < 2 {
                h = g.max_pool2(h)?;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum FusionBody {
    Conv(ConvUnit),
    Dense(DenseBlock),
}

#[derive(Debug, Clone)]
struct Fusion {
    body: FusionBody,
    head: Head,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Arch {
    Cnn { units: Vec<ConvUnit>, out: Linear },
    Vgg { branch: Branch },
    Multi { phase: Branch, amp: Branch, fusion: Option<Fusion>, main: Option<WeightedSum> },
}

pub const INPUT_MEAN: &str = "input_norm/mean";
pub const INPUT_STD: &str = "input_norm/std";

/// A built network: parameters plus the layer wiring.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

impl<T: Scalar> Model<T> {
    /// Initial parameters depend only on `(seed, parameter name)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        store.add(INPUT_MEAN, Tensor::zeros(&[9]), false)?;
        store.add(INPUT_STD, Tensor::full(&[9], T::one()), false)?;
        let cfg = &config;
        let arch = match cfg.variant {
            Variant::CnnV1 | Variant::CnnV2 => {
                let widths = [32, 64, 64];
                let mut units = Vec::new();
                let mut c = 9;
                for (i, &w) in widths.iter().enumerate() {
                    units.push(ConvUnit::new(&mut store, &format!("cnn/conv{}", i + 1), ConvKind::Vanilla, c, w, None, seed)?);
                    c = w;
                }
                let side = cfg.patch_size >> 3;
                let out = Linear::new(&mut store, "cnn/out", c * side * side, cfg.classes, seed)?;
                Arch::Cnn { units, out }
            }
            Variant::VggV1 | Variant::VggV2 => {
                Arch::Vgg { branch: Branch::new(&mut store, "vgg", 9, ConvKind::Vanilla, cfg, true, seed)? }
            }
            v => {
                let side_heads = !matches!(v, Variant::M2 | Variant::M3);
                let phase = Branch::new(&mut store, "phase_branch", 3, v.phase_conv(), cfg, side_heads, seed)?;
                let amp = Branch::new(&mut store, "amp_branch", 6, ConvKind::Vanilla, cfg, side_heads, seed)?;
                let fusion = if v == Variant::M1 {
                    None
                } else {
                    let in_ch = 2 * cfg.widths[cfg.fusion_source - 1];
                    let side = cfg.block_side(cfg.fusion_source);
                    let (body, out_ch) = if v == Variant::M2 {
                        let w = 2 * cfg.widths[2];
                        let unit = ConvUnit::new(&mut store, "fusion/conv", ConvKind::Vanilla, in_ch, w, None, seed)?;
                        (FusionBody::Conv(unit), w)
                    } else {
                        let block = DenseBlock::new(
                            &mut store,
                            "fusion/dense",
                            in_ch,
                            cfg.dense_layers,
                            cfg.growth,
                            cfg.multiplier,
                            dropout_opt(cfg.conv_drop),
                            seed,
                        )?;
                        let oc = block.out_channels();
                        (FusionBody::Dense(block), oc)
                    };
                    let head = Head::new(&mut store, "fusion", out_ch * side * side, cfg, seed)?;
                    Some(Fusion { body, head })
                };
                let main = if matches!(v, Variant::Mcnn | Variant::Dmcnn | Variant::M5 | Variant::M6) {
                    Some(WeightedSum::new(&mut store, "main", 3)?)
                } else {
                    None
                };
                Arch::Multi { phase, amp, fusion, main }
            }
        };
        Ok(Model { config, store, arch })
    }

    pub fn head_names(&self) -> Vec<&'static str> {
        match &self.arch {
            Arch::Cnn { .. } | Arch::Vgg { .. } => vec!["out"],
            Arch::Multi { fusion, main, .. } => match (fusion.is_some(), main.is_some(), self.config.variant) {
                (false, _, _) => vec!["phase", "amplitude"],
                (true, true, _) => vec!["phase", "amplitude", "fusion", "main"],
                (true, false, Variant::M4) => vec!["phase", "amplitude", "fusion"],
                _ => vec!["fusion"],
            },
        }
    }

    /// Loss weight of each head, aligned with [`Model::head_names`].
    pub fn loss_weights(&self) -> Vec<f64> {
        let a = self.config.alphas;
        match self.head_names().len() {
            4 => vec![a[0], a[1], a[2], 1.0],
            3 => vec![a[0], a[1], 1.0],
            n => vec![1.0; n],
        }
    }

    /// Trainable parameter count under a name prefix such as `phase_branch`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.store.trainable_count(prefix)
    }

    pub fn input_stats(&self) -> ChannelStats {
        let get = |n: &str| self.store.by_name(n).unwrap().value.data().iter().map(|v| v.as_f64()).collect();
        ChannelStats { mean: get(INPUT_MEAN), std: get(INPUT_STD) }
    }

    pub fn set_input_stats(&mut self, stats: &ChannelStats) -> Result<()> {
        if stats.mean.len() != 9 || stats.std.len() != 9 {
            return Err(Error::Data(format!("input statistics must cover 9 channels, got {}", stats.mean.len())));
        }
        for (name, vals) in [(INPUT_MEAN, &stats.mean), (INPUT_STD, &stats.std)] {
            let id = self.store.id(name).unwrap();
            self.store.get_mut(id).value = Tensor::new(&[9], vals.iter().map(|&v| T::from_f64(v)).collect())?;
        }
        Ok(())
    }

    /// Standardizes with statistics of the training centre pixels.
    pub fn fit_input_stats(&mut self, train: &PatchSet) -> Result<()> {
        let stats = channel_stats(&train.cube, &train.centers());
        for (c, s) in stats.std.iter().enumerate() {
            if *s == 0.0 {
                log::warn!("input channel {c} is constant over the training pixels; it will only be centred");
            }
        }
        self.set_input_stats(&stats)
    }

    /// Applies the stored input standardization and converts precision.
    pub fn prepare_input(&self, batch: &Tensor<f32>) -> Result<Tensor<T>> {
        let d = batch.dims();
        if d.len() != 4 || d[1] != 9 || d[2] != self.config.patch_size || d[3] != self.config.patch_size {
            return Err(Error::Data(format!("expected patches [N, 9, {p}, {p}], got {d:?}", p = self.config.patch_size)));
        }
        let stats = self.input_stats();
        let plane = d[2] * d[3];
        let data = batch
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % 9;
                let s = if stats.std[c] > 0.0 { stats.std[c] } else { 1.0 };
                T::from_f64((v as f64 - stats.mean[c]) / s)
            })
            .collect();
        Tensor::new(d, data)
    }

    /// Logits of every head, ordered as [`Model::head_names`].
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        let s = &self.store;
        match &self.arch {
            Arch::Cnn { units, out } => {
                let mut h = x;
                for u in units {
                    h = u.forward(g, s, h)?;
                    h = g.max_pool2(h)?;
                }
                let flat = g.flatten(h)?;
                Ok(vec![out.forward(g, s, flat)?])
            }
            Arch::Vgg { branch } => {
                let maps = branch.maps(g, s, x)?;
                Ok(vec![branch.head.as_ref().unwrap().forward(g, s, maps[2])?])
            }
            Arch::Multi { phase, amp, fusion, main } => {
                let amp_in = g.slice_channels(x, 0, 6)?;
                let phase_in = g.slice_channels(x, 6, 3)?;
                let pm = phase.maps(g, s, phase_in)?;
                let am = amp.maps(g, s, amp_in)?;
                let mut heads = Vec::new();
                if let (Some(ph), Some(ah)) = (&phase.head, &amp.head) {
                    heads.push(ph.forward(g, s, pm[2])?);
                    heads.push(ah.forward(g, s, am[2])?);
                }
                if let Some(f) = fusion {
                    let src = self.config.fusion_source - 1;
                    let joined = g.concat_channels(&[pm[src], am[src]])?;
                    let body = match &f.body {
                        FusionBody::Conv(u) => u.forward(g, s, joined)?,
                        FusionBody::Dense(d) => d.forward(g, s, joined)?,
                    };
                    heads.push(f.head.forward(g, s, body)?);
                }
                if let Some(ws) = main {
                    let m = ws.forward(g, s, &heads[..3])?;
                    heads.push(m);
                }
                Ok(heads)
            }
        }
    }

    /// Eval-mode averaged class probabilities for a raw patch batch, `[N * classes]`.
    pub fn predict_probs(&self, batch: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(self.prepare_input(batch)?);
        let heads = self.forward(&mut g, x)?;
        let probs: Vec<Vec<T>> = heads.iter().map(|&h| softmax_rows(g.value(h).data(), self.config.classes)).collect();
        Ok(average_heads(&probs))
    }
}

/// Elementwise mean of per-head probability buffers.
fn average_heads<T: Scalar>(probs: &[Vec<T>]) -> Vec<f64> {
    let n = probs.len() as f64;
    (0..probs[0].len()).map(|i| probs.iter().map(|p| p[i].as_f64()).sum::<f64>() / n).collect()
}

/// Weighted sum of per-head mean cross-entropies. `labels` are class ids in `1..=c`.
pub fn compute_loss<T: Scalar>(g: &mut Graph<T>, heads: &[NodeId], weights: &[f64], labels: &[usize]) -> Result<NodeId> {
    if heads.len() != weights.len() || heads.is_empty() {
        return Err(Error::Graph(format!("{} heads but {} loss weights", heads.len(), weights.len())));
    }
    let c = g.value(heads[0]).dims()[1];
    let mut zero_based = Vec::with_capacity(labels.len());
    for &l in labels {
        if l == 0 || l > c {
            return Err(Error::Data(format!("label {l} outside 1..={c} (0 marks unlabeled pixels)")));
        }
        zero_based.push(l - 1);
    }
    let mut terms = Vec::with_capacity(heads.len());
    for (&h, &w) in heads.iter().zip(weights) {
        terms.push((g.softmax_cross_entropy(h, &zero_based)?, w));
    }
    g.scale_sum(&terms)
}

/// Mean of the head distributions and its argmax (1-based, ties to the lowest id).
pub fn predict(heads: &[&[f64]]) -> (usize, Vec<f64>) {
    let c = heads[0].len();
    let mean: Vec<f64> = (0..c).map(|j| heads.iter().map(|h| h[j]).sum::<f64>() / heads.len() as f64).collect();
    (argmax(&mean) + 1, mean)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Test samples scored after each epoch; 0 scores all.
    pub eval_subsample: usize,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { lr: 1e-3, epochs: 50, batch_size: 64, seed: 0, eval_subsample: 0, eval_batch: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_oa: f64,
    pub test_oa: Option<f64>,
}

fn check_set<T: Scalar>(model: &Model<T>, set: &PatchSet) -> Result<()> {
    let want = model.config.variant.input_form();
    if set.cube.form != want {
        return Err(Error::Config(format!(
            "{} expects {} input, got {}",
            model.config.variant,
            want.name(),
            set.cube.form.name()
        )));
    }
    if set.num_classes != model.config.classes {
        return Err(Error::Data(format!("dataset has {} classes, model {}", set.num_classes, model.config.classes)));
    }
    if set.size != model.config.patch_size {
        return Err(Error::Data(format!("patch size {} differs from model {}", set.size, model.config.patch_size)));
    }
    Ok(())
}

/// Mini-batch Adam training with a seeded shuffle per epoch. A trailing batch of a
/// single sample is skipped since batch norm needs two. `on_epoch` sees each record
/// as it is produced.
pub fn train(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    train: &PatchSet,
    test: Option<&PatchSet>,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    check_set(model, train)?;
    if let Some(t) = test {
        check_set(model, t)?;
    }
    if train.len() < 2 {
        return Err(Error::Data(format!("training set has {} samples; at least 2 are needed", train.len())));
    }
    if opts.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let weights = model.loss_weights();
    let c = model.config.classes;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(opts.seed, &format!("shuffle/{epoch}"))));
        let (mut loss_sum, mut seen, mut hits) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label as usize).collect();
            let mut g = Graph::new(Mode::Train, derive_seed(opts.seed, &format!("dropout/{epoch}/{b}")));
            let x = g.input(model.prepare_input(&train.batch(chunk))?);
            let heads = model.forward(&mut g, x)?;
            let loss = compute_loss(&mut g, &heads, &weights, &labels)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {value} at epoch {epoch}, batch {}", b + 1)));
            }
            let probs: Vec<Vec<f32>> = heads.iter().map(|&h| softmax_rows(g.value(h).data(), c)).collect();
            let avg = average_heads(&probs);
            hits += avg.chunks_exact(c).zip(&labels).filter(|(p, &l)| argmax(p) + 1 == l).count();
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
            g.backward(loss, &mut model.store)?;
            g.commit_stat_updates(&mut model.store);
            adam.lr = opts.lr;
            adam.step(&mut model.store)?;
        }
        let test_oa = match test {
            Some(t) => {
                let idx = subsample(t.len(), opts.eval_subsample);
                let preds = predict_set(model, t, &idx, opts.eval_batch)?;
                let ok = preds.iter().zip(&idx).filter(|(p, &i)| p.class == t.samples[i].label as usize).count();
                Some(ok as f64 / idx.len() as f64)
            }
            None => None,
        };
        let rec = EpochRecord { epoch, loss: loss_sum / seen as f64, train_oa: hits as f64 / seen as f64, test_oa };
        log::info!(
            "epoch {epoch}: loss {:.5} train OA {:.4}{}",
            rec.loss,
            rec.train_oa,
            rec.test_oa.map(|v| format!(" test OA {v:.4}")).unwrap_or_default()
        );
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Evenly spaced indices; `k == 0` or `k >= n` keeps everything.
fn subsample(n: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= n {
        (0..n).collect()
    } else {
        (0..k).map(|i| i * n / k).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Class id in `1..=c`.
    pub class: usize,
    pub probs: Vec<f64>,
}

fn predict_centers(model: &Model<f32>, cube: &ChannelCube, centers: &[(usize, usize)], batch: usize) -> Result<Vec<Prediction>> {
    let c = model.config.classes;
    let parts: Vec<Result<Vec<Prediction>>> = centers
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let probs = model.predict_probs(&patch_batch(cube, chunk, model.config.patch_size))?;
            Ok(probs.chunks_exact(c).map(|p| Prediction { class: argmax(p) + 1, probs: p.to_vec() }).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(centers.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Predictions for the listed samples, batched and parallel over batches.
pub fn predict_set(model: &Model<f32>, set: &PatchSet, indices: &[usize], batch: usize) -> Result<Vec<Prediction>> {
    check_set(model, set)?;
    let centers: Vec<(usize, usize)> = indices.iter().map(|&i| (set.samples[i].row, set.samples[i].col)).collect();
    predict_centers(model, &set.cube, &centers, batch)
}

/// Confusion matrix and per-sample predicted class ids over the whole set.
pub fn evaluate(model: &Model<f32>, set: &PatchSet, batch: usize) -> Result<(ConfusionMatrix, Vec<usize>)> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let preds = predict_set(model, set, &idx, batch)?;
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for (p, s) in preds.iter().zip(&set.samples) {
        cm.accumulate(s.label as usize, p.class)?;
    }
    Ok((cm, preds.into_iter().map(|p| p.class).collect()))
}

/// Per-pixel class ids (row-major) and averaged probabilities `[H * W * c]` for
/// every pixel of the cube.
pub fn classify_map(model: &Model<f32>, cube: &ChannelCube, batch: usize) -> Result<(Vec<u16>, Vec<f32>)> {
    if cube.form != model.config.variant.input_form() || cube.channels != 9 {
        return Err(Error::Config(format!(
            "{} expects a 9-channel {} cube",
            model.config.variant,
            model.config.variant.input_form().name()
        )));
    }
    let centers: Vec<(usize, usize)> = (0..cube.height).flat_map(|r| (0..cube.width).map(move |c| (r, c))).collect();
    let preds = predict_centers(model, cube, &centers, batch)?;
    let labels = preds.iter().map(|p| p.class as u16).collect();
    let probs = preds.iter().flat_map(|p| p.probs.iter().map(|&v| v as f32)).collect();
    Ok((labels, probs))
}
