use std::sync::Arc;

use rand::Rng;

use super::graph::{log_sum_exp, sigmoid, Graph, NodeId};
use super::params::{ParamId, ParameterSet, Partition};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Initialization range for weight matrices.
pub const INIT_SCALE: f64 = 0.05;

/// LSTM cell with a fused `[4H, in + H]` weight; gate order is input, forget,
/// candidate, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<R: Rng>(
        params: &mut ParameterSet,
        name: &str,
        input: usize,
        hidden: usize,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        let w = params.add_uniform(format!("{name}.w"), 4 * hidden, input + hidden, INIT_SCALE, partition, rng);
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = params.add(format!("{name}.b"), bias, partition);
        LstmLayer { w, b, input, hidden }
    }

    /// Looks the layer up by name in a loaded parameter set.
    pub fn bind(params: &ParameterSet, name: &str) -> Result<Self> {
        let w = lookup(params, &format!("{name}.w"))?;
        let b = lookup(params, &format!("{name}.b"))?;
        let hidden = params.get(w).rows() / 4;
        let input = params.get(w).cols() - hidden;
        Ok(LstmLayer { w, b, input, hidden })
    }

    /// One step on a batch: `x` is `[R, input]`, `h`, `c` are `[R, hidden]`.
    pub fn step(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if g.value(x).cols() != self.input {
            return Err(Error::shape(format!("lstm input width {} != {}", g.value(x).cols(), self.input)));
        }
        if g.value(h).cols() != self.hidden || g.value(c).cols() != self.hidden {
            return Err(Error::shape("lstm state width mismatch"));
        }
        let hd = self.hidden;
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let xh = g.concat(&[x, h])?;
        let z = g.matmul_t(xh, w)?;
        let z = g.add_bias(z, b)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, hd)?;
        let u = g.slice_cols(z, 2 * hd, hd)?;
        let o = g.slice_cols(z, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let u = g.tanh(u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let iu = g.mul(i, u)?;
        let c2 = g.add(fc, iu)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

/// `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new<R: Rng>(
        params: &mut ParameterSet,
        name: &str,
        input: usize,
        output: usize,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        let w = params.add_uniform(format!("{name}.w"), output, input, INIT_SCALE, partition, rng);
        let b = params.add(format!("{name}.b"), Tensor::zeros(1, output), partition);
        Affine { w, b }
    }

    /// All-zero weights and bias.
    pub fn zeroed(params: &mut ParameterSet, name: &str, input: usize, output: usize, partition: Partition) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::zeros(output, input), partition);
        let b = params.add(format!("{name}.b"), Tensor::zeros(1, output), partition);
        Affine { w, b }
    }

    pub fn bind(params: &ParameterSet, name: &str) -> Result<Self> {
        Ok(Affine { w: lookup(params, &format!("{name}.w"))?, b: lookup(params, &format!("{name}.b"))? })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let y = g.matmul_t(x, w)?;
        g.add_bias(y, b)
    }
}

fn lookup(params: &ParameterSet, name: &str) -> Result<ParamId> {
    params.id(name).ok_or_else(|| Error::format(format!("missing parameter {name}")))
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - rate;
    let data = (0..rows * cols).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Applies inverted dropout in training mode; identity otherwise.
pub fn dropout<R: Rng>(g: &mut Graph, x: NodeId, rate: f64, training: bool, rng: &mut R) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let mask = dropout_mask(r, c, rate, rng);
    g.mul_const(x, Arc::new(mask))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

pub fn sigmoid_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}
