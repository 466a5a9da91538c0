//! Finite-difference checks for every differentiable primitive and for the
//! model's building blocks.

mod common;

use cjst::compressor::CompressionMode;
use cjst::ctc::{ctc_loss_node, CtcError, LabelSequence};
use cjst::data::derive_rng;
use cjst::model::layers;
use cjst::numerics::gradcheck::{check_gradients, GradCheckOptions};
use cjst::numerics::{Graph, NumericsError, Tensor, Var};
use common::*;

const TOL: f64 = 1e-4;

/// Reduces `out` to a scalar with fixed pseudo-random weights so that every
/// output entry matters.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var, NumericsError> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>) {
    let report = check_gradients(inputs, GradCheckOptions::default(), |g, v| {
        let out = f(g, v)?;
        weighted_sum(g, out)
    })
    .unwrap();
    assert!(report.entries_checked > 0);
    assert!(report.max_rel_error <= TOL, "{name}: relative error {:.3e}", report.max_rel_error);
}

#[test]
fn primitives_match_finite_differences() {
    let mut rng = derive_rng(&[11]);
    let mut m = |r, c| random_matrix(&mut rng, r, c);
    let (a, b, c, row, col) = (m(3, 4), m(4, 5), m(3, 4), m(1, 4), m(3, 1));
    let (seq, kernel) = (m(7, 4), m(3, 4));
    let vec4 = Tensor::vector(row.data().to_vec());

    check("matmul", &[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    check("transpose", &[a.clone()], |g, v| g.transpose(v[0]));
    check("add", &[a.clone(), c.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), c.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]));
    check("mul self", &[a.clone()], |g, v| g.mul(v[0], v[0]));
    check("add_row", &[a.clone(), vec4.clone()], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", &[a.clone(), vec4.clone()], |g, v| g.mul_row(v[0], v[1]));
    check("scale", &[a.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
    check("silu", &[a.clone()], |g, v| Ok(g.silu(v[0])));
    check("softmax_rows", &[a.clone()], |g, v| g.softmax_rows(v[0]));
    check("log_softmax_rows", &[a.clone()], |g, v| g.log_softmax_rows(v[0]));
    check("layer_norm_rows", &[a.clone()], |g, v| g.layer_norm_rows(v[0], 1e-5));
    check("sum", &[a.clone()], |g, v| Ok(g.sum(v[0])));
    check("mean", &[a.clone()], |g, v| g.mean(v[0]));
    check("gather_rows", &[a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
    check("concat_rows", &[a.clone(), row.clone()], |g, v| g.concat_rows(&[v[1], v[0], v[1]]));
    check("slice_cols", &[a.clone()], |g, v| g.slice_cols(v[0], 1, 2));
    check("concat_cols", &[a.clone(), col.clone()], |g, v| g.concat_cols(&[v[1], v[0]]));
    check("segment_mean", &[seq.clone()], |g, v| g.segment_mean(v[0], &[vec![0, 1, 2], vec![4], vec![5, 6]]));
    check("depthwise_conv", &[seq.clone(), kernel.clone()], |g, v| g.depthwise_conv(v[0], v[1]));
    check("stack_frames", &[seq.clone()], |g, v| g.stack_frames(v[0], 2));
    check("pick", &[a.clone()], |g, v| g.pick(v[0], &[3, 0, 1]));
}

#[test]
fn ctc_loss_gradient_wrt_logits() {
    let mut rng = derive_rng(&[12]);
    for (frames, y) in [(4usize, vec![0usize]), (6, vec![1, 1]), (8, vec![0, 2, 1]), (5, vec![2, 0, 2])] {
        let y = LabelSequence::new(y, 3).unwrap();
        let logits = random_matrix(&mut rng, frames, 4);
        let report = check_gradients(&[logits], GradCheckOptions::default(), |g, v| {
            let logp = g.log_softmax_rows(v[0])?;
            ctc_loss_node(g, logp, &y).map_err(|e| match e {
                CtcError::Numerics(n) => n,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(report.max_rel_error <= TOL, "{y:?}: {:.3e}", report.max_rel_error);
    }
}

#[test]
fn model_blocks_match_finite_differences() {
    let mut rng = derive_rng(&[13]);
    let model = tiny_model(3, CompressionMode::Combined);
    let mut params = model.init_params(&mut rng);
    jitter(&mut params, &mut rng, 0.3);
    let x = random_matrix(&mut rng, 5, 4);

    let attention = check_param_gradients(&params, &["decoder.l0.att."], 8, |s| {
        let xv = s.constant(x.clone());
        let y = layers::attention(s, xv, "decoder.l0.att", 2, true)?;
        Ok(weighted_sum(&mut s.g, y)?)
    });
    assert!(attention.max_rel_error <= TOL, "attention {:.3e}", attention.max_rel_error);
    assert!(attention.max_grad > 1e-3);

    let conv = check_param_gradients(&params, &["encoder.l0.conv."], 8, |s| {
        let xv = s.constant(random_matrix(&mut derive_rng(&[1]), 5, 6));
        let y = layers::conv_module(s, xv, "encoder.l0.conv")?;
        Ok(weighted_sum(&mut s.g, y)?)
    });
    assert!(conv.max_rel_error <= TOL, "conv {:.3e}", conv.max_rel_error);
    assert!(conv.max_grad > 1e-3);
}
