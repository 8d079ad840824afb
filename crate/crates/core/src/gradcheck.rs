//! Finite-difference gradient suite over every layer op, in double precision.

use crate::autodiff::{gradient_check, GradCheckOptions, GradCheckReport, Graph, Mode, NodeId, ParamStore};
use crate::error::Result;
use crate::layers::{BatchNorm, Conv2d, DenseBlock, DepthwiseSeparableConv, Linear, WeightedSum};
use crate::tensor::{derive_seed, FillSpec, Tensor};

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub op: &'static str,
    pub shape: String,
    pub report: GradCheckReport,
}

fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(dims, FillSpec::Gaussian { mean: 0.0, std: 1.0, seed }).expect("positive dims")
}

fn run<F>(
    op: &'static str,
    shape: String,
    inputs: &[Tensor<f64>],
    store: &mut ParamStore<f64>,
    mode: Mode,
    seed: u64,
    build: F,
) -> Result<SuiteCase>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId>,
{
    let opts = GradCheckOptions { mode, seed, samples: 6, ..GradCheckOptions::default() };
    let report = gradient_check(build, inputs, store, opts)?;
    Ok(SuiteCase { op, shape, report })
}

/// Checks conv2d, depthwise separable conv, max pool, batch norm, dropout (eval),
/// fully connected, softmax cross-entropy, dense block and weighted sum, three
/// random shapes each.
pub fn layer_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    let s = |k: u64| derive_seed(seed, &format!("gradcheck/{k}"));

    for (i, &(n, c, h, w, k)) in [(2, 1, 5, 5, 1), (1, 3, 6, 4, 2), (2, 2, 3, 3, 4)].iter().enumerate() {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", c, k, 3, s(i as u64))?;
        let x = randn(&[n, c, h, w], s(100 + i as u64));
        cases.push(run(
            "conv2d",
            format!("{n}x{c}x{h}x{w} -> {k}"),
            &[x],
            &mut store,
            Mode::Train,
            s(i as u64),
            |g, st, ids| conv.forward(g, st, ids[0]),
        )?);
    }

    for (i, &(n, c, h, w, k)) in [(2, 1, 4, 4, 3), (1, 3, 5, 6, 2), (2, 4, 3, 3, 1)].iter().enumerate() {
        let mut store = ParamStore::new();
        let conv = DepthwiseSeparableConv::new(&mut store, "sep", c, k, 3, s(10 + i as u64))?;
        let x = randn(&[n, c, h, w], s(110 + i as u64));
        cases.push(run(
            "depthwise_separable",
            format!("{n}x{c}x{h}x{w} -> {k}"),
            &[x],
            &mut store,
            Mode::Train,
            s(i as u64),
            |g, st, ids| conv.forward(g, st, ids[0]),
        )?);
    }

    for (i, dims) in [[2, 2, 4, 4], [1, 3, 5, 6], [2, 1, 6, 6]].iter().enumerate() {
        let mut store = ParamStore::new();
        let x = randn(dims, s(120 + i as u64));
        cases.push(run("max_pool", format!("{dims:?}"), &[x], &mut store, Mode::Train, s(i as u64), |g, _, ids| {
            g.max_pool2(ids[0])
        })?);
    }

    for (i, dims) in [[3, 2, 3, 3], [2, 4, 2, 2], [4, 1, 3, 5]].iter().enumerate() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", dims[1])?;
        let x = randn(dims, s(130 + i as u64));
        cases.push(run("batch_norm", format!("{dims:?}"), &[x], &mut store, Mode::Train, s(i as u64), |g, st, ids| {
            bn.forward(g, st, ids[0])
        })?);
    }

    for (i, dims) in [vec![2, 5], vec![1, 3, 4, 4], vec![3, 2, 2, 3]].iter().enumerate() {
        let mut store = ParamStore::new();
        let x = randn(dims, s(140 + i as u64));
        cases.push(run("dropout_eval", format!("{dims:?}"), &[x], &mut store, Mode::Eval, s(i as u64), |g, _, ids| {
            g.dropout(ids[0], 0.5)
        })?);
    }

    for (i, &(n, d, o)) in [(2, 3, 4), (5, 7, 2), (1, 10, 3)].iter().enumerate() {
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, "fc", d, o, s(20 + i as u64))?;
        let x = randn(&[n, d], s(150 + i as u64));
        cases.push(run(
            "fully_connected",
            format!("{n}x{d} -> {o}"),
            &[x],
            &mut store,
            Mode::Train,
            s(i as u64),
            |g, st, ids| fc.forward(g, st, ids[0]),
        )?);
    }

    for (i, &(n, c)) in [(2, 3), (4, 5), (1, 15)].iter().enumerate() {
        let mut store = ParamStore::new();
        let x = randn(&[n, c], s(160 + i as u64));
        let labels: Vec<usize> = (0..n).map(|j| (j * 7 + i) % c).collect();
        cases.push(run("softmax_cross_entropy", format!("{n}x{c}"), &[x], &mut store, Mode::Train, s(i as u64), |g, _, ids| {
            g.softmax_cross_entropy(ids[0], &labels)
        })?);
    }

    for (i, &(dims, layers, growth, mult)) in
        [([2, 3, 3, 3], 3, 2, 2), ([2, 2, 4, 4], 2, 1, 3), ([3, 4, 2, 2], 5, 2, 1)].iter().enumerate()
    {
        let mut store = ParamStore::new();
        let block = DenseBlock::new(&mut store, "dense", dims[1], layers, growth, mult, Some(0.2), s(30 + i as u64))?;
        let x = randn(&dims, s(170 + i as u64));
        cases.push(run(
            "dense_block",
            format!("{dims:?} L={layers} g={growth} m={mult}"),
            &[x],
            &mut store,
            Mode::Train,
            s(i as u64),
            |g, st, ids| block.forward(g, st, ids[0]),
        )?);
    }

    for (i, &(n, d)) in [(2, 3), (1, 5), (4, 2)].iter().enumerate() {
        let mut store = ParamStore::new();
        let ws = WeightedSum::new(&mut store, "ws", 3)?;
        let id = store.id("ws/weights").unwrap();
        store.get_mut(id).value = randn(&[3], s(40 + i as u64));
        let xs: Vec<Tensor<f64>> = (0..3).map(|j| randn(&[n, d], s(180 + 3 * i as u64 + j))).collect();
        cases.push(run("weighted_sum", format!("3 x {n}x{d}"), &xs, &mut store, Mode::Train, s(i as u64), |g, st, ids| {
            ws.forward(g, st, ids)
        })?);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_op_passes() {
        let cases = layer_suite(1).unwrap();
        assert_eq!(cases.len(), 27);
        for c in &cases {
            assert!(c.report.passed(), "{} {}: {:?}", c.op, c.shape, c.report.max_rel_error());
        }
    }
}
