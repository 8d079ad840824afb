//! Network building blocks: vanilla and depthwise separable convolution, batch norm,
//! the Conv-Dropout-BN-ReLU composite, dense fusion block, fully connected layer and
//! the trainable weighted sum.
//!
//! Layers own [`ParamId`]s into a [`ParamStore`] and append ops to a [`Graph`].
//! Parameter names are slash-separated paths, e.g. `amp_branch/block1/conv1/kernel`.
//! Initial values depend only on `(seed, parameter name)`.

use crate::autodiff::{Graph, Mode, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, FillSpec, Scalar, Tensor};

/// Fan-in scaled Gaussian (He) initialization.
fn he_init<T: Scalar>(dims: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::create(dims, FillSpec::Gaussian { mean: 0.0, std, seed: derive_seed(seed, name) })
        .expect("layer dimensions are positive")
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}/{leaf}")
    }
}

/// SAME-padded stride-1 convolution with bias. Kernel layout `[Kout, Kin, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution size {size} must be odd for SAME padding")));
        }
        let kname = join(prefix, "kernel");
        let kernel = store.add(
            &kname,
            he_init(&[out_channels, in_channels, size, size], in_channels * size * size, seed, &kname),
            true,
        )?;
        let bias = store.add(&join(prefix, "bias"), Tensor::zeros(&[out_channels]), true)?;
        Ok(Conv2d { kernel, bias, in_channels, out_channels, size })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        g.conv2d(x, k, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.size * self.size + self.out_channels
    }
}

/// Depthwise 3x3 filtering (multiplier 1) followed by a 1x1 pointwise convolution with bias.
#[derive(Debug, Clone)]
pub struct DepthwiseSeparableConv {
    pub depthwise: ParamId,
    pub pointwise: Conv2d,
    pub in_channels: usize,
    pub size: usize,
}

impl DepthwiseSeparableConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution size {size} must be odd for SAME padding")));
        }
        let dname = join(prefix, "depthwise/kernel");
        let depthwise = store.add(&dname, he_init(&[in_channels, size, size], size * size, seed, &dname), true)?;
        let pointwise = Conv2d::new(store, &join(prefix, "pointwise"), in_channels, out_channels, 1, seed)?;
        Ok(DepthwiseSeparableConv { depthwise, pointwise, in_channels, size })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let dk = g.param(store, self.depthwise);
        let spatial = g.depthwise_conv2d(x, dk)?;
        self.pointwise.forward(g, store, spatial)
    }

    /// Kernel weights only: `k*k*c + c*K` (the pointwise bias is excluded).
    pub fn kernel_count(&self) -> usize {
        self.size * self.size * self.in_channels + self.in_channels * self.pointwise.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.kernel_count() + self.pointwise.out_channels
    }
}

/// Kernel-weight count of a vanilla `k x k` convolution from `c` to `out` channels.
pub fn vanilla_kernel_count(c: usize, out: usize, k: usize) -> usize {
    k * k * c * out
}

/// Kernel-weight count of the depthwise separable replacement.
pub fn separable_kernel_count(c: usize, out: usize, k: usize) -> usize {
    k * k * c + c * out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Vanilla,
    DepthwiseSeparable,
}

#[derive(Debug, Clone)]
pub enum AnyConv {
    Vanilla(Conv2d),
    Separable(DepthwiseSeparableConv),
}

impl AnyConv {
    pub fn new<T: Scalar>(
        kind: ConvKind,
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            ConvKind::Vanilla => AnyConv::Vanilla(Conv2d::new(store, prefix, in_channels, out_channels, 3, seed)?),
            ConvKind::DepthwiseSeparable => {
                AnyConv::Separable(DepthwiseSeparableConv::new(store, prefix, in_channels, out_channels, 3, seed)?)
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        match self {
            AnyConv::Vanilla(c) => c.forward(g, store, x),
            AnyConv::Separable(c) => c.forward(g, store, x),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            AnyConv::Vanilla(c) => c.out_channels,
            AnyConv::Separable(c) => c.pointwise.out_channels,
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Weight of the current batch in the running averages.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            scale: store.add(&join(prefix, "scale"), Tensor::full(&[channels], T::one()), true)?,
            shift: store.add(&join(prefix, "shift"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(&join(prefix, "running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(&join(prefix, "running_var"), Tensor::full(&[channels], T::one()), false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalizes with batch statistics and records running-stat updates on
    /// the graph; eval mode uses the stored running statistics.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let scale = g.param(store, self.scale);
        let shift = g.param(store, self.shift);
        match g.mode() {
            Mode::Eval => {
                let rm = &store.get(self.running_mean).value;
                let rv = &store.get(self.running_var).value;
                Ok(g.batch_norm(x, scale, shift, Some((rm, rv)), self.eps)?.0)
            }
            Mode::Train => {
                let (y, mean, var) = g.batch_norm(x, scale, shift, None, self.eps)?;
                let d = g.value(x).dims();
                let m = (g.value(x).len() / d[1]) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let mom = T::from_f64(self.momentum);
                let keep = T::one() - mom;
                let old_m = store.get(self.running_mean).value.data();
                let old_v = store.get(self.running_var).value.data();
                let new_m: Vec<T> = old_m.iter().zip(&mean).map(|(&o, &b)| keep * o + mom * b).collect();
                let new_v: Vec<T> = old_v.iter().zip(&var).map(|(&o, &b)| keep * o + mom * b * T::from_f64(unbias)).collect();
                let c = mean.len();
                g.record_stat_update(self.running_mean, Tensor::new(&[c], new_m)?);
                g.record_stat_update(self.running_var, Tensor::new(&[c], new_v)?);
                Ok(y)
            }
        }
    }
}

/// Fully connected layer, weight layout `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        seed: u64,
    ) -> Result<Self> {
        let wname = join(prefix, "weight");
        let weight = store.add(&wname, he_init(&[out_features, in_features], in_features, seed, &wname), true)?;
        let bias = store.add(&join(prefix, "bias"), Tensor::zeros(&[out_features]), true)?;
        Ok(Linear { weight, bias, in_features, out_features })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Conv -> Dropout -> BN -> ReLU. `drop` is the drop probability; `None` omits dropout.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: AnyConv,
    pub drop: Option<f64>,
    pub bn: BatchNorm,
}

impl ConvUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        drop: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        let conv = AnyConv::new(kind, store, &join(prefix, "conv"), in_channels, out_channels, seed)?;
        let bn = BatchNorm::new(store, &join(prefix, "bn"), out_channels)?;
        Ok(ConvUnit { conv, drop: drop.filter(|&p| p > 0.0), bn })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = self.conv.forward(g, store, x)?;
        if let Some(p) = self.drop {
            h = g.dropout(h, p)?;
        }
        let h = self.bn.forward(g, store, h)?;
        Ok(g.relu(h))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }
}

/// Densely connected block: layer `l` consumes the channel concatenation of the block
/// input and every earlier layer's output; the block returns the concatenation of all.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub units: Vec<ConvUnit>,
    pub in_channels: usize,
    pub growth: usize,
    pub first_width: usize,
}

impl DenseBlock {
    /// `first_multiplier * growth` channels from the first layer, `growth` from each
    /// of the remaining `layers - 1`. Dropout is omitted on the last layer.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        first_multiplier: usize,
        drop: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        if layers == 0 || growth == 0 || first_multiplier == 0 {
            return Err(Error::Config("dense block needs positive layers, growth and multiplier".into()));
        }
        let first_width = first_multiplier * growth;
        let mut units = Vec::with_capacity(layers);
        let mut channels = in_channels;
        for l in 0..layers {
            let width = if l == 0 { first_width } else { growth };
            let d = if l + 1 == layers { None } else { drop };
            units.push(ConvUnit::new(
                store,
                &join(prefix, &format!("layer{}", l + 1)),
                ConvKind::Vanilla,
                channels,
                width,
                d,
                seed,
            )?);
            channels += width;
        }
        Ok(DenseBlock { units, in_channels, growth, first_width })
    }

    pub fn out_channels(&self) -> usize {
        dense_block_channels(self.in_channels, self.units.len(), self.growth, self.first_width / self.growth)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut features = vec![x];
        for unit in &self.units {
            let input = if features.len() == 1 { x } else { g.concat_channels(&features)? };
            features.push(unit.forward(g, store, input)?);
        }
        g.concat_channels(&features)
    }
}

/// Output channels of a dense block: `C + m*g + (L-1)*g`.
pub fn dense_block_channels(in_channels: usize, layers: usize, growth: usize, first_multiplier: usize) -> usize {
    in_channels + first_multiplier * growth + (layers - 1) * growth
}

/// Trainable weighted sum of equally shaped feature vectors, weights initialized to `1/n`.
#[derive(Debug, Clone)]
pub struct WeightedSum {
    pub weights: ParamId,
    pub arity: usize,
}

impl WeightedSum {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, arity: usize) -> Result<Self> {
        let w = Tensor::full(&[arity], T::from_f64(1.0 / arity as f64));
        Ok(WeightedSum { weights: store.add(&join(prefix, "weights"), w, true)?, arity })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != self.arity {
            return Err(Error::Graph(format!("weighted sum expects {} inputs, got {}", self.arity, inputs.len())));
        }
        let w = g.param(store, self.weights);
        g.weighted_sum(inputs, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheckOptions};

    fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(dims, FillSpec::Gaussian { mean: 0.0, std: 1.0, seed }).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 0).unwrap();
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        store.get_mut(conv.kernel).value = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        let x = Tensor::<f32>::create(&[2, 1, 5, 6], FillSpec::Uniform { lo: -3.0, hi: 3.0, seed: 1 }).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(x.clone());
        let y = conv.forward(&mut g, &store, xi).unwrap();
        assert_eq!(g.value(y).to_bytes(), x.to_bytes());
    }

    #[test]
    fn box_kernel_sums_interior() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 0).unwrap();
        store.get_mut(conv.kernel).value = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(Tensor::full(&[1, 1, 5, 5], 1.0));
        let y = conv.forward(&mut g, &store, xi).unwrap();
        let out = g.value(y).data();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(out[i * 5 + j], 9.0);
            }
        }
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 6.0);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, 3, 0).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(conv.forward(&mut g, &store, xi), Err(Error::ShapeMismatch { .. })));
        let sep = DepthwiseSeparableConv::new(&mut store, "s", 3, 4, 3, 0).unwrap();
        assert!(sep.forward(&mut g, &store, xi).is_err());
    }

    #[test]
    fn separable_double_identity() {
        let mut store = ParamStore::<f32>::new();
        let c = 3;
        let sep = DepthwiseSeparableConv::new(&mut store, "s", c, c, 3, 0).unwrap();
        let mut dk = vec![0.0f32; c * 9];
        for ch in 0..c {
            dk[ch * 9 + 4] = 1.0;
        }
        store.get_mut(sep.depthwise).value = Tensor::new(&[c, 3, 3], dk).unwrap();
        let mut pk = vec![0.0f32; c * c];
        for ch in 0..c {
            pk[ch * c + ch] = 1.0;
        }
        store.get_mut(sep.pointwise.kernel).value = Tensor::new(&[c, c, 1, 1], pk).unwrap();
        let x = Tensor::<f32>::create(&[2, c, 4, 5], FillSpec::Uniform { lo: -1.0, hi: 1.0, seed: 2 }).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(x.clone());
        let y = sep.forward(&mut g, &store, xi).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn separable_parameter_formula() {
        assert_eq!(separable_kernel_count(9, 32, 3), 369);
        assert_eq!(vanilla_kernel_count(9, 32, 3), 2592);
        let mut store = ParamStore::<f32>::new();
        let sep = DepthwiseSeparableConv::new(&mut store, "s", 9, 32, 3, 0).unwrap();
        assert_eq!(sep.kernel_count(), 369);
        assert_eq!(store.trainable_count("s/") - 32, 369);
    }

    #[test]
    fn first_conv_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 6, 32, 3, 0).unwrap();
        assert_eq!(conv.param_count(), 1760);
        assert_eq!(store.trainable_count("c/"), 1760);
    }

    #[test]
    fn max_pool_cases() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let c = g.input(Tensor::full(&[1, 2, 4, 4], 2.5));
        let y = g.max_pool2(c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
        let p = g.input(Tensor::zeros(&[1, 1, 14, 14]));
        let a = g.max_pool2(p).unwrap();
        let b = g.max_pool2(a).unwrap();
        assert_eq!(g.value(a).dims(), &[1, 1, 7, 7]);
        assert_eq!(g.value(b).dims(), &[1, 1, 3, 3]);
    }

    #[test]
    fn batch_norm_training_standardizes() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
        let x = Tensor::<f64>::create(&[4, 3, 5, 5], FillSpec::Gaussian { mean: 2.0, std: 3.0, seed: 5 }).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let xi = g.input(x);
        let y = bn.forward(&mut g, &store, xi).unwrap();
        let (mean, var) = crate::kernels::channel_stats(g.value(y).data(), crate::kernels::Dims4 { n: 4, c: 3, h: 5, w: 5 });
        for ch in 0..3 {
            assert!(mean[ch].abs() < 1e-5);
            assert!((var[ch] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_affine_and_inference() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        store.get_mut(bn.scale).value = Tensor::full(&[1], 2.0);
        store.get_mut(bn.shift).value = Tensor::full(&[1], 3.0);
        let x = Tensor::<f64>::create(&[8, 1, 4, 4], FillSpec::Gaussian { mean: -1.0, std: 0.5, seed: 6 }).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let xi = g.input(x);
        let y = bn.forward(&mut g, &store, xi).unwrap();
        let (m, v) = crate::kernels::channel_stats(g.value(y).data(), crate::kernels::Dims4 { n: 8, c: 1, h: 4, w: 4 });
        assert!((m[0] - 3.0).abs() < 1e-6);
        assert!((v[0].sqrt() - 2.0).abs() < 1e-3);

        store.get_mut(bn.running_mean).value = Tensor::full(&[1], 0.75);
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(Tensor::full(&[1, 1, 3, 3], 0.75));
        let y = bn.forward(&mut g, &store, xi).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 4).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let xi = g.input(Tensor::zeros(&[1, 4]));
        assert!(bn.forward(&mut g, &store, xi).is_err());
    }

    #[test]
    fn running_stats_are_committed() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let xi = g.input(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut g, &store, xi).unwrap();
        g.commit_stat_updates(&mut store);
        assert!((store.get(bn.running_mean).value.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 2.0: 0.9 * 1 + 0.1 * 2
        assert!((store.get(bn.running_var).value.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f64>::full(&[1000], 1.0);
        let mut g = Graph::new(Mode::Eval, 3);
        let xi = g.input(x.clone());
        let y = g.dropout(xi, 0.5).unwrap();
        assert_eq!(g.value(y), &x);
        let mut g = Graph::new(Mode::Train, 3);
        let xi = g.input(x);
        let y = g.dropout(xi, 0.2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        for p in [0.2, 0.5] {
            let x = Tensor::<f64>::create(&[100_000], FillSpec::Uniform { lo: 0.5, hi: 1.5, seed: 8 }).unwrap();
            let mean_in: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
            let mut g = Graph::new(Mode::Train, 11);
            let xi = g.input(x);
            let y = g.dropout(xi, p).unwrap();
            let mean_out: f64 = g.value(y).data().iter().sum::<f64>() / 100_000.0;
            assert!((mean_out / mean_in - 1.0).abs() < 0.02, "p={p}: {mean_out} vs {mean_in}");
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 3, 3, 0).unwrap();
        store.get_mut(fc.weight).value = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = randn(&[4, 3], 1);
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(x.clone());
        let y = fc.forward(&mut g, &store, xi).unwrap();
        assert_eq!(g.value(y), &x);

        store.get_mut(fc.weight).value = Tensor::zeros(&[3, 3]);
        store.get_mut(fc.bias).value = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(x);
        let y = fc.forward(&mut g, &store, xi).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn linear_matches_matmul_oracle() {
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 7, 4, 3).unwrap();
        store.get_mut(fc.bias).value = randn(&[4], 2);
        let x = randn(&[5, 7], 4);
        let mut g = Graph::new(Mode::Eval, 0);
        let xi = g.input(x.clone());
        let y = fc.forward(&mut g, &store, xi).unwrap();
        let w = &store.get(fc.weight).value;
        let b = store.get(fc.bias).value.data();
        for i in 0..5 {
            for (o, &bias) in b.iter().enumerate() {
                let mut s = bias;
                for k in 0..7 {
                    s += x.data()[i * 7 + k] * w.data()[o * 7 + k];
                }
                assert!((g.value(y).data()[i * 4 + o] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let a = g.input(Tensor::new(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(a).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.input(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let s = g.softmax(b).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
        let x = randn(&[3, 5], 7);
        let shifted = x.map(|v| v + 123.0);
        let (xa, xb) = (g.input(x), g.input(shifted));
        let (sa, sb) = (g.softmax(xa).unwrap(), g.softmax(xb).unwrap());
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn dense_block_channels_and_reuse() {
        assert_eq!(dense_block_channels(128, 5, 16, 4), 256);
        assert_eq!(dense_block_channels(48, 5, 12, 2), 120);
        let mut store = ParamStore::<f32>::new();
        let block = DenseBlock::new(&mut store, "dense", 6, 5, 4, 2, Some(0.2), 1).unwrap();
        assert_eq!(block.out_channels(), 6 + 8 + 16);
        let x = Tensor::<f32>::create(&[2, 6, 3, 3], FillSpec::Gaussian { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let mut g = Graph::new(Mode::Train, 5);
        let xi = g.input(x.clone());
        let y = block.forward(&mut g, &store, xi).unwrap();
        assert_eq!(g.value(y).dims(), &[2, 30, 3, 3]);
        let out = g.value(y).data();
        for s in 0..2 {
            assert_eq!(&out[s * 270..s * 270 + 54], &x.data()[s * 54..(s + 1) * 54]);
        }
        assert!(block.units.last().unwrap().drop.is_none());
    }

    #[test]
    fn weighted_sum_selector_and_average() {
        let mut store = ParamStore::<f64>::new();
        let ws = WeightedSum::new(&mut store, "ws", 3).unwrap();
        let (v1, v2, v3) = (randn(&[2, 4], 1), randn(&[2, 4], 2), randn(&[2, 4], 3));
        let mut g = Graph::new(Mode::Eval, 0);
        let ids = [g.input(v1.clone()), g.input(v2.clone()), g.input(v3)];
        store.get_mut(ws.weights).value = Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = ws.forward(&mut g, &store, &ids).unwrap();
        assert_eq!(g.value(y), &v1);

        store.get_mut(ws.weights).value = Tensor::full(&[3], 1.0 / 3.0);
        let same = [g.input(v2.clone()), g.input(v2.clone()), g.input(v2.clone())];
        let y = ws.forward(&mut g, &store, &same).unwrap();
        for (a, b) in g.value(y).data().iter().zip(v2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ws.forward(&mut g, &store, &same[..2]).is_err());
    }

    #[test]
    fn weighted_sum_weight_gradient_is_input() {
        // d(out)/d(w_i) == v_i, checked numerically by the harness
        let mut store = ParamStore::<f64>::new();
        let ws = WeightedSum::new(&mut store, "ws", 3).unwrap();
        let inputs = [randn(&[2, 4], 1), randn(&[2, 4], 2), randn(&[2, 4], 3)];
        let report = gradient_check(|g, s, ids| ws.forward(g, s, ids), &inputs, &mut store, GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
