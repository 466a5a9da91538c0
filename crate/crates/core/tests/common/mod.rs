//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use cjst::compressor::{CompressionConfig, CompressionMode, EmptyPolicy};
use cjst::ctc::{collapse, PosteriorGrid};
use cjst::model::{AsrModel, ModelConfig};
use cjst::numerics::{logsumexp, Tensor, Var};
use cjst::params::{ParamStore, Session};
use cjst::Error;
use rand::Rng;

/// Log-probability grid from logits drawn uniformly from [−2, 2].
pub fn random_grid(rng: &mut impl Rng, frames: usize, classes: usize) -> PosteriorGrid {
    let data = (0..frames * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
    PosteriorGrid::from_logits(&Tensor::matrix(frames, classes, data).unwrap()).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Every label sequence of length `len` over `classes` symbols, in
/// lexicographic order.
pub fn all_sequences(len: usize, classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..classes).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

/// `−log Σ_π p(π)` over every frame-level path that collapses to `y`.
pub fn brute_force_ctc(grid: &PosteriorGrid, y: &[usize]) -> f64 {
    let scores: Vec<f64> = all_sequences(grid.frames(), grid.vocab_size() + 1)
        .into_iter()
        .filter(|path| collapse(path, grid.blank()) == y)
        .map(|path| path.iter().enumerate().map(|(t, &k)| grid.logp(t, k)).sum())
        .collect();
    -logsumexp(&scores)
}

/// A model small enough for finite differences.
pub fn tiny_model(vocab: usize, mode: CompressionMode) -> AsrModel {
    let cfg = ModelConfig {
        vocab_size: vocab,
        feat_dim: 3,
        reduction: 2,
        enc_dim: 6,
        enc_layers: 1,
        enc_ff: 8,
        conv_kernel: 3,
        dec_dim: 4,
        dec_layers: 1,
        dec_heads: 2,
        dec_ff: 8,
        max_positions: 32,
        tie_embeddings: false,
    };
    let threshold = mode.uses_threshold().then_some(0.95);
    let comp = CompressionConfig::new(mode, threshold, EmptyPolicy::Fallback).unwrap();
    AsrModel::new(cfg, comp).unwrap()
}

/// Adds N(0, std²)-ish uniform noise to every parameter so that no entry sits
/// at a special initial value (zeros, identity).
pub fn jitter(params: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

#[derive(Debug, Default)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub entries: usize,
    /// Largest analytic gradient magnitude seen, to rule out a vacuous pass.
    pub max_grad: f64,
}

/// Central-difference check of the gradient of `loss` with respect to every
/// parameter whose name starts with one of `prefixes` (at most `per_param`
/// evenly strided entries each).
pub fn check_param_gradients(
    params: &ParamStore,
    prefixes: &[&str],
    per_param: usize,
    loss: impl Fn(&mut Session) -> Result<Var, Error>,
) -> ParamCheck {
    const EPS: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;
    let mut s = Session::training(params);
    let l = loss(&mut s).unwrap();
    let grads = s.param_grads(l).unwrap();
    let eval = |store: &ParamStore| {
        let mut s = Session::inference(store);
        let l = loss(&mut s).unwrap();
        s.value(l).item()
    };
    let mut work = params.clone();
    let mut report = ParamCheck::default();
    let names: Vec<String> = params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    assert!(!names.is_empty(), "no parameters match {prefixes:?}");
    for name in names {
        let n = params.get(&name).unwrap().len();
        let zeros = Tensor::zeros(params.get(&name).unwrap().shape());
        let analytic = grads.get(&name).unwrap_or(&zeros);
        for i in (0..n).step_by(n.div_ceil(per_param).max(1)) {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + EPS;
            let plus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - EPS;
            let minus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_grad = report.max_grad.max(a.abs());
            report.entries += 1;
        }
    }
    report
}
