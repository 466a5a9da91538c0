//! Central finite-difference verification of analytic gradients.

use super::{Graph, NumericsError, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size for `(f(x + ε) − f(x − ε)) / 2ε`.
    pub eps: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on an absolute scale.
    pub floor: f64,
    /// Upper bound on the number of entries probed per input (evenly strided).
    pub max_entries_per_input: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-3,
            max_entries_per_input: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
}

/// Compares the tape's gradient of the scalar built by `f` against central
/// differences, for every input in `inputs`.
///
/// `f` receives a fresh graph and one leaf per input. The analytic pass binds
/// the inputs as parameters; the numeric passes bind them as constants.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let stride = n.div_ceil(opts.max_entries_per_input.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
