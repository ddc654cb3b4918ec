//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements probed per input tensor; smaller tensors are probed fully.
    pub max_probes: usize,
    pub seed: u64,
    /// When set, a probe whose forward and backward one-sided differences
    /// differ by more than this relative amount is retried at a tenth and a
    /// hundredth of the step; if they still differ the probe straddles a
    /// kink (ReLU, PReLU) and is counted in `skipped` instead of compared.
    /// Near a kink the central difference is off by about half the
    /// one-sided disagreement.
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes: 64,
            seed: 0,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes left out by the kink screen.
    pub skipped: usize,
    pub worst: Option<Probe>,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Builds the graph with `inputs` as differentiable leaves, reduces the
/// output to a scalar with fixed random weights, and compares the analytic
/// gradient of every probed input element against central differences.
pub fn grad_check<B>(inputs: &[Tensor<f64>], build: B, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights: Option<Vec<f64>> = None;

    let mut eval = |vals: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if !g.value(out).is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" });
        }
        let root = if g.value(out).numel() == 1 {
            out
        } else {
            let n = g.value(out).numel();
            let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            g.weighted_sum(out, w.clone())?
        };
        let f = g.value(root).data()[0];
        if !want_grad {
            return Ok((f, Vec::new()));
        }
        let mut grads = g.backward(root)?;
        Ok((f, vars.iter().map(|&v| grads.take(v)).collect()))
    };

    let (f0, analytic) = eval(inputs, true)?;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        skipped: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let grad = analytic[ti].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "grad_check" });
        }
        let indices: Vec<usize> = if t.numel() <= opts.max_probes {
            (0..t.numel()).collect()
        } else {
            let mut v = sample(&mut probe_rng, t.numel(), opts.max_probes).into_vec();
            v.sort_unstable();
            v
        };
        for idx in indices {
            let orig = t.data()[idx];
            let mut diff = |h: f64| -> Result<(f64, f64, f64)> {
                work[ti].data_mut()[idx] = orig + h;
                let (fp, _) = eval(&work, false)?;
                work[ti].data_mut()[idx] = orig - h;
                let (fm, _) = eval(&work, false)?;
                work[ti].data_mut()[idx] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                if !numeric.is_finite() {
                    return Err(AutodiffError::NonFinite { op: "grad_check" });
                }
                Ok((numeric, (fp - f0) / h, (f0 - fm) / h))
            };
            let numeric = match opts.kink_tol {
                None => diff(opts.step)?.0,
                Some(tol) => {
                    let mut smooth = None;
                    for h in [opts.step, opts.step / 10.0, opts.step / 100.0] {
                        let (c, ahead, behind) = diff(h)?;
                        if relative_error(ahead, behind) <= tol {
                            smooth = Some(c);
                            break;
                        }
                    }
                    match smooth {
                        Some(c) => c,
                        None => {
                            report.skipped += 1;
                            continue;
                        }
                    }
                }
            };
            let err = relative_error(grad[idx], numeric);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Probe {
                    input: ti,
                    index: idx,
                    analytic: grad[idx],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
