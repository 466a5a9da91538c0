//! Building blocks shared by the encoder, decoder and modality adaptor.
//!
//! Each block reads its parameters from the session by a dotted prefix and has
//! a matching `init_*` function that creates them.

use rand::Rng;

use crate::error::Error;
use crate::numerics::{Tensor, Var};
use crate::params::{ParamStore, Session};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.init_weight(rng, &format!("{prefix}.w"), fan_in, fan_out);
    store.init_zeros(&format!("{prefix}.b"), &[fan_out]);
}

/// Linear layer whose weight and bias start at zero, so a residual branch
/// ending in it is the identity at initialization.
pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.init_zeros(&format!("{prefix}.w"), &[fan_in, fan_out]);
    store.init_zeros(&format!("{prefix}.b"), &[fan_out]);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.init_ones(&format!("{prefix}.g"), &[dim]);
    store.init_zeros(&format!("{prefix}.b"), &[dim]);
}

/// `x · W + b`.
pub fn linear(s: &mut Session, x: Var, prefix: &str) -> Result<Var, Error> {
    let w = s.p(&format!("{prefix}.w"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    let xw = s.g.matmul(x, w)?;
    Ok(s.g.add_row(xw, b)?)
}

pub fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var, Error> {
    let gain = s.p(&format!("{prefix}.g"))?;
    let bias = s.p(&format!("{prefix}.b"))?;
    let n = s.g.layer_norm_rows(x, LN_EPS)?;
    let scaled = s.g.mul_row(n, gain)?;
    Ok(s.g.add_row(scaled, bias)?)
}

pub fn init_feed_forward(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize, hidden: usize, zero_out: bool) {
    init_layer_norm(store, &format!("{prefix}.ln"), dim);
    init_linear(store, rng, &format!("{prefix}.ff1"), dim, hidden);
    if zero_out {
        init_linear_zero(store, &format!("{prefix}.ff2"), hidden, dim);
    } else {
        init_linear(store, rng, &format!("{prefix}.ff2"), hidden, dim);
    }
}

/// Pre-norm feed-forward branch `W₂ silu(W₁ LN(x))` (no residual).
pub fn feed_forward(s: &mut Session, x: Var, prefix: &str) -> Result<Var, Error> {
    let n = layer_norm(s, x, &format!("{prefix}.ln"))?;
    let h = linear(s, n, &format!("{prefix}.ff1"))?;
    let h = s.g.silu(h);
    linear(s, h, &format!("{prefix}.ff2"))
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize, zero_out: bool) {
    init_layer_norm(store, &format!("{prefix}.ln"), dim);
    for part in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), dim, dim);
    }
    if zero_out {
        init_linear_zero(store, &format!("{prefix}.o"), dim, dim);
    } else {
        init_linear(store, rng, &format!("{prefix}.o"), dim, dim);
    }
}

/// Strictly causal additive mask: position `i` sees positions `0..=i`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = MASKED;
        }
    }
    m
}

/// Pre-norm multi-head self-attention branch (no residual).
pub fn attention(s: &mut Session, x: Var, prefix: &str, heads: usize, causal: bool) -> Result<Var, Error> {
    let n = layer_norm(s, x, &format!("{prefix}.ln"))?;
    let q = linear(s, n, &format!("{prefix}.q"))?;
    let k = linear(s, n, &format!("{prefix}.k"))?;
    let v = linear(s, n, &format!("{prefix}.v"))?;
    let shape = s.value(x).shape().to_vec();
    let (len, dim) = (shape[0], shape[1]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dimension {dim} is not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let mask = causal.then(|| s.constant(causal_mask(len)));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.g.slice_cols(q, h * dh, dh)?;
        let kh = s.g.slice_cols(k, h * dh, dh)?;
        let vh = s.g.slice_cols(v, h * dh, dh)?;
        let kt = s.g.transpose(kh)?;
        let scores = s.g.matmul(qh, kt)?;
        let mut scores = s.g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = s.g.add(scores, m)?;
        }
        let probs = s.g.softmax_rows(scores)?;
        outs.push(s.g.matmul(probs, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { s.g.concat_cols(&outs)? };
    linear(s, merged, &format!("{prefix}.o"))
}

pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize, kernel: usize, zero_out: bool) {
    init_layer_norm(store, &format!("{prefix}.ln"), dim);
    store.init_normal(rng, &format!("{prefix}.dw"), &[kernel, dim], 1.0 / (kernel as f64).sqrt());
    if zero_out {
        init_linear_zero(store, &format!("{prefix}.pw"), dim, dim);
    } else {
        init_linear(store, rng, &format!("{prefix}.pw"), dim, dim);
    }
}

/// Pre-norm depthwise-convolution branch `W silu(dwconv(LN(x)))` (no residual).
pub fn conv_module(s: &mut Session, x: Var, prefix: &str) -> Result<Var, Error> {
    let n = layer_norm(s, x, &format!("{prefix}.ln"))?;
    let w = s.p(&format!("{prefix}.dw"))?;
    let c = s.g.depthwise_conv(n, w)?;
    let c = s.g.silu(c);
    linear(s, c, &format!("{prefix}.pw"))
}

/// `x + branch`.
pub fn residual(s: &mut Session, x: Var, branch: Var) -> Result<Var, Error> {
    Ok(s.g.add(x, branch)?)
}
