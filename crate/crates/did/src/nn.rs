//! Parameter containers with Kaiming-uniform initialization.
//!
//! Containers own the persistent tensors. Each step registers them on a fresh
//! graph via `register`, which also records `(name, NodeId)` pairs so the
//! optimizer and checkpoint code can address parameters by name.

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha12Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub type Ledger = Vec<(String, NodeId)>;

fn kaiming_uniform(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data)
}

#[derive(Clone)]
pub struct ConvParams {
    pub weight: Tensor, // [out, in, kh, kw]
    pub bias: Tensor,   // [out]
}

impl ConvParams {
    pub fn new(rng: &mut ChaCha12Rng, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Self {
        ConvParams {
            weight: kaiming_uniform(rng, &[out_c, in_c, kh, kw], in_c * kh * kw),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn register(&self, g: &mut Graph, prefix: &str, ledger: &mut Ledger) -> ConvNodes {
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        ledger.push((format!("{prefix}/weight"), w));
        ledger.push((format!("{prefix}/bias"), b));
        ConvNodes { w, b }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}/weight"), &self.weight));
        out.push((format!("{prefix}/bias"), &self.bias));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}/weight"), &mut self.weight));
        out.push((format!("{prefix}/bias"), &mut self.bias));
    }
}

/// NodeIds of a registered weight/bias pair.
#[derive(Clone, Copy)]
pub struct ConvNodes {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Clone)]
pub struct DwConvParams {
    pub weight: Tensor, // [c, kh, kw]
    pub bias: Tensor,   // [c]
}

impl DwConvParams {
    pub fn new(rng: &mut ChaCha12Rng, c: usize, kh: usize, kw: usize) -> Self {
        DwConvParams {
            weight: kaiming_uniform(rng, &[c, kh, kw], kh * kw),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn register(&self, g: &mut Graph, prefix: &str, ledger: &mut Ledger) -> ConvNodes {
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        ledger.push((format!("{prefix}/weight"), w));
        ledger.push((format!("{prefix}/bias"), b));
        ConvNodes { w, b }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}/weight"), &self.weight));
        out.push((format!("{prefix}/bias"), &self.bias));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}/weight"), &mut self.weight));
        out.push((format!("{prefix}/bias"), &mut self.bias));
    }
}

#[derive(Clone)]
pub struct LinearParams {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
}

impl LinearParams {
    pub fn new(rng: &mut ChaCha12Rng, out_d: usize, in_d: usize) -> Self {
        LinearParams {
            weight: kaiming_uniform(rng, &[out_d, in_d], in_d),
            bias: Tensor::zeros(&[out_d]),
        }
    }

    pub fn register(&self, g: &mut Graph, prefix: &str, ledger: &mut Ledger) -> ConvNodes {
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        ledger.push((format!("{prefix}/weight"), w));
        ledger.push((format!("{prefix}/bias"), b));
        ConvNodes { w, b }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}/weight"), &self.weight));
        out.push((format!("{prefix}/bias"), &self.bias));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}/weight"), &mut self.weight));
        out.push((format!("{prefix}/bias"), &mut self.bias));
    }
}

#[derive(Clone)]
pub struct PReluParams {
    pub alpha: Tensor, // [c]
}

impl PReluParams {
    pub fn new(c: usize) -> Self {
        PReluParams {
            alpha: Tensor::from_vec(&[c], vec![0.25; c]),
        }
    }

    pub fn register(&self, g: &mut Graph, prefix: &str, ledger: &mut Ledger) -> NodeId {
        let a = g.leaf(self.alpha.clone());
        ledger.push((format!("{prefix}/alpha"), a));
        a
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}/alpha"), &self.alpha));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}/alpha"), &mut self.alpha));
    }
}
