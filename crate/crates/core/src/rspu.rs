//! Rain-streak prototype unit.
//!
//! Given an encoding `x` of shape `[H, W, C]` (K = H·W encoding vectors), a bank
//! of M attention heads scores every vector, each head's scores are
//! normalised over the K positions and used to average the encoding vectors
//! into one prototype. Every encoding vector then queries the prototypes
//! (softmax over dot products) and the retrieved mixture is added back onto
//! the encoding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, mismatch, Result};
use crate::numerics::{Graph, Tensor, Var};

/// M per-pixel affine heads `R^C -> R`, followed by a sigmoid.
///
/// Stored column-wise: `weights[c, m]` is channel `c` of head `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBank {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl AttentionBank {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (ws, bs) = (weights.shape(), bias.shape());
        if ws.len() != 2 || bs.len() != 1 || ws[1] != bs[0] || ws[1] == 0 {
            return Err(mismatch("attention_bank", ws, bs));
        }
        Ok(Self { weights, bias })
    }

    /// Zero-mean normal weights with variance 1/C and zero biases.
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, libm::sqrt(1.0 / channels as f64)).expect("positive std");
        let data = (0..channels * heads).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::new(&[channels, heads], data).expect("finite init"),
            bias: Tensor::zeros(&[heads]),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Weight vector and bias of head `m`.
    pub fn head(&self, m: usize) -> (alloc::vec::Vec<f64>, f64) {
        let heads = self.heads();
        let w = self.weights.data().iter().skip(m).step_by(heads).copied().collect();
        (w, self.bias.data()[m])
    }

    pub fn bind(&self, g: &mut Graph) -> BankVars {
        BankVars {
            weights: g.param(self.weights.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

/// An [`AttentionBank`] recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub weights: Var,
    pub bias: Var,
}

/// Everything the unit produces for one encoding.
#[derive(Debug, Clone, Copy)]
pub struct RspuOutput {
    /// `x + x̂`, `[H, W, C]`.
    pub fused: Var,
    /// Attention weights `w^{k,m}`, `[H, W, M]`.
    pub weights: Var,
    /// Prototype rows `p^m`, `[M, C]`.
    pub prototypes: Var,
    /// Relevance scores `α^{k,m}`, `[K, M]`.
    pub relevance: Var,
    /// Retrieved encoding `x̂`, `[H, W, C]`.
    pub readout: Var,
}

fn spatial(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(invalid(op, alloc::format!("expected an H x W x C encoding, got {:?}", s))),
    }
}

/// `w^{k,m} = sigmoid(a_m · x^k + b_m)`, shape `[H, W, M]`.
pub fn attention_weights(g: &mut Graph, x: Var, bank: BankVars) -> Result<Var> {
    const OP: &str = "attention_weights";
    let (h, w, c) = spatial(g, x, OP)?;
    let ws = g.shape(bank.weights);
    if ws.len() != 2 || ws[0] != c {
        return Err(mismatch(OP, &[c, 0], ws));
    }
    let m = ws[1];
    let k = h * w;
    let flat = g.reshape(x, &[k, c])?;
    let logits = g.matmul(flat, bank.weights)?;
    let bias = g.broadcast_rows(bank.bias, k)?;
    let logits = g.add(logits, bias)?;
    let probs = g.sigmoid(logits)?;
    g.reshape(probs, &[h, w, m])
}

/// `p^m = Σ_k (w^{k,m} / Σ_k' w^{k',m}) x^k`, shape `[M, C]`.
pub fn form_prototypes(g: &mut Graph, x: Var, weights: Var) -> Result<Var> {
    const OP: &str = "form_prototypes";
    let (h, w, c) = spatial(g, x, OP)?;
    let ws = g.shape(weights);
    if ws.len() != 3 || ws[0] != h || ws[1] != w {
        return Err(mismatch(OP, &[h, w, 0], ws));
    }
    let m = ws[2];
    let k = h * w;
    let flat_x = g.reshape(x, &[k, c])?;
    let flat_w = g.reshape(weights, &[k, m])?;
    let totals = g.reduce(flat_w, crate::numerics::Reduction::Sum, &[0])?;
    if let Some(col) = g.value(totals).data().iter().position(|&s| s.is_nan() || s <= 0.0) {
        return Err(invalid(OP, alloc::format!("attention column {} has no positive weight", col)));
    }
    let totals = g.broadcast_rows(totals, k)?;
    let normalized = g.div(flat_w, totals)?;
    let by_head = g.transpose(normalized)?;
    g.matmul(by_head, flat_x)
}

/// `α^{k,m} = softmax_m(x^k · p^m)`, shape `[K, M]`.
pub fn relevance_scores(g: &mut Graph, x: Var, prototypes: Var) -> Result<Var> {
    const OP: &str = "relevance_scores";
    let (h, w, c) = spatial(g, x, OP)?;
    let ps = g.shape(prototypes);
    if ps.len() != 2 || ps[1] != c || ps[0] == 0 {
        return Err(mismatch(OP, &[0, c], ps));
    }
    let flat = g.reshape(x, &[h * w, c])?;
    let pt = g.transpose(prototypes)?;
    let logits = g.matmul(flat, pt)?;
    g.softmax_axis(logits, 1)
}

/// `x̂^k = Σ_m α^{k,m} p^m`, reshaped to `[H, W, C]`.
pub fn readout(g: &mut Graph, relevance: Var, prototypes: Var, height: usize, width: usize) -> Result<Var> {
    const OP: &str = "readout";
    let (rs, ps) = (g.shape(relevance), g.shape(prototypes));
    if rs.len() != 2 || ps.len() != 2 || rs[1] != ps[0] || rs[0] != height * width {
        return Err(mismatch(OP, rs, ps));
    }
    let c = ps[1];
    let flat = g.matmul(relevance, prototypes)?;
    g.reshape(flat, &[height, width, c])
}

/// Residual fusion `x + x̂`.
pub fn fuse(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(mismatch("fuse", g.shape(x), g.shape(x_hat)));
    }
    g.add(x, x_hat)
}

pub fn rspu_forward(g: &mut Graph, x: Var, bank: BankVars) -> Result<RspuOutput> {
    let (h, w, _) = spatial(g, x, "rspu_forward")?;
    let weights = attention_weights(g, x, bank)?;
    let prototypes = form_prototypes(g, x, weights)?;
    let relevance = relevance_scores(g, x, prototypes)?;
    let x_hat = readout(g, relevance, prototypes, h, w)?;
    let fused = fuse(g, x, x_hat)?;
    Ok(RspuOutput {
        fused,
        weights,
        prototypes,
        relevance,
        readout: x_hat,
    })
}
