//! Fully connected ReLU networks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{gemm, RealTensor};
use rand::Rng;

/// Hidden widths shared by all three networks.
pub const HIDDEN: [usize; 3] = [128, 512, 128];

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: RealTensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: RealTensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Layer widths of the three networks for an `M`-point alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub m: usize,
}

impl NetConfig {
    pub fn new(m: usize) -> Self {
        Self { m }
    }

    /// SNR (1) → logits (M).
    pub fn nn1_widths(&self) -> Vec<usize> {
        widths(1, self.m)
    }

    /// One-hot (M) → (Re, Im).
    pub fn nn2_widths(&self) -> Vec<usize> {
        widths(self.m, 2)
    }

    /// (Re, Im) → logits (M).
    pub fn nn3_widths(&self) -> Vec<usize> {
        widths(2, self.m)
    }
}

fn widths(input: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(HIDDEN);
    w.push(output);
    w
}

/// MLP with ReLU on hidden layers and a linear output layer. Parameters are
/// stored flat as `[W0, b0, W1, b1, ...]`, `W` being `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub params: Vec<Param>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Param::new(
                format!("{prefix}.w{l}"),
                RealTensor::new(vec![fan_in, fan_out], w).expect("shape"),
            ));
            params.push(Param::new(
                format!("{prefix}.b{l}"),
                RealTensor::zeros(&[fan_out]),
            ));
        }
        Self { params }
    }

    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        if params.is_empty() || !params.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "MLP needs weight/bias pairs, got {} tensors",
                params.len()
            )));
        }
        for pair in params.chunks_exact(2) {
            let ws = pair[0].value.shape();
            if ws.len() != 2 || pair[1].value.len() != ws[1] {
                return Err(Error::Dimension(format!(
                    "layer {}: weight {:?} / bias {:?}",
                    pair[0].name,
                    ws,
                    pair[1].value.shape()
                )));
            }
        }
        Ok(Self { params })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.params[0].value.shape()[0]];
        w.extend(self.params.chunks_exact(2).map(|p| p[0].value.shape()[1]));
        w
    }

    pub fn input_width(&self) -> usize {
        self.params[0].value.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.params[self.params.len() - 1].value.len()
    }

    /// Register parameters on `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Graph forward with already-bound parameter handles. Returns logits.
    pub fn forward(g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let layers = vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = g.affine(h, vars[2 * l], vars[2 * l + 1])?;
            if l + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Graph-free forward for evaluation paths.
    pub fn infer(&self, x: &RealTensor) -> Result<RealTensor> {
        let (rows, mut width) = x.dims2();
        if width != self.input_width() {
            return Err(Error::Dimension(format!(
                "MLP input width {width}, expected {}",
                self.input_width()
            )));
        }
        let mut h = x.data().to_vec();
        let layers = self.params.len() / 2;
        for l in 0..layers {
            let w = &self.params[2 * l].value;
            let b = self.params[2 * l + 1].value.data();
            let out_w = w.shape()[1];
            let mut out = vec![0.0; rows * out_w];
            for row in out.chunks_exact_mut(out_w) {
                row.copy_from_slice(b);
            }
            gemm(rows, width, out_w, &h, false, w.data(), false, &mut out, true);
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            h = out;
            width = out_w;
        }
        RealTensor::new(vec![rows, width], h)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
