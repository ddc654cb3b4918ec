//! Negative scale-invariant SNR and its permutation-invariant form.

use tasnet_autodiff::{CustomBackward, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Stabilizer added to the error energy.
pub const SI_SNR_EPS: f64 = 1e-8;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn centred<F: Scalar>(x: &[F]) -> Vec<f64> {
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v.as_f64() - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Target projection and residual of a mean-removed estimate.
struct Parts {
    target: Vec<f64>,
    error: Vec<f64>,
    target_energy: f64,
    error_energy: f64,
}

fn decompose<F: Scalar>(estimate: &[F], reference: &[F]) -> Result<Parts> {
    if estimate.len() != reference.len() {
        return Err(Error::Data(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let s = centred(reference);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::Data("reference is zero after mean removal".into()));
    }
    let a = centred(estimate);
    let alpha = dot(&a, &s) / ss;
    let target: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let error: Vec<f64> = a.iter().zip(&target).map(|(x, t)| x - t).collect();
    Ok(Parts {
        target_energy: dot(&target, &target),
        error_energy: dot(&error, &error),
        target,
        error,
    })
}

/// `-10 log10(|s_t|^2 / (|e|^2 + eps))` on plain slices.
pub fn si_snr_loss_value<F: Scalar>(estimate: &[F], reference: &[F]) -> Result<f64> {
    let p = decompose(estimate, reference)?;
    Ok(-DB * (p.target_energy.ln() - (p.error_energy + SI_SNR_EPS).ln()))
}

struct SiSnrBackward {
    target: Vec<f64>,
    error: Vec<f64>,
    target_energy: f64,
    error_energy: f64,
}

impl<F: Scalar> CustomBackward<F> for SiSnrBackward {
    fn name(&self) -> &'static str {
        "si_snr_loss"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>> {
        let gout = grad[0].as_f64();
        let (a, b) = (2.0 / self.target_energy, 2.0 / (self.error_energy + SI_SNR_EPS));
        let mut g: Vec<f64> = self
            .target
            .iter()
            .zip(&self.error)
            .map(|(t, e)| -DB * gout * (a * t - b * e))
            .collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        g.iter_mut().for_each(|v| *v -= mean);
        vec![Some(g.into_iter().map(F::from_f64).collect())]
    }
}

/// Differentiable loss of a `[1, T]` estimate against a fixed reference.
pub fn si_snr_loss<F: Scalar>(g: &mut Graph<F>, estimate: Var, reference: &[F]) -> Result<Var> {
    let p = decompose(g.value(estimate).data(), reference)?;
    let value = -DB * (p.target_energy.ln() - (p.error_energy + SI_SNR_EPS).ln());
    if !value.is_finite() {
        return Err(Error::Diverged(format!("si-snr loss is {value}")));
    }
    let rule = SiSnrBackward {
        target: p.target,
        error: p.error,
        target_energy: p.target_energy,
        error_energy: p.error_energy,
    };
    let out = Tensor::new(vec![1], vec![F::from_f64(value)])?;
    Ok(g.custom(&[estimate], out, Box::new(rule))?)
}

/// Assignment of estimates to references: `perm[i]` is the reference for estimate `i`.
pub type Permutation = [usize; 2];

pub const IDENTITY: Permutation = [0, 1];
pub const SWAPPED: Permutation = [1, 0];

/// Mean loss over both assignments; the smaller wins, ties go to the identity.
pub fn pit_loss_value<F: Scalar>(estimates: &[&[F]], references: &[&[F]]) -> Result<(f64, Permutation)> {
    if estimates.len() != 2 || references.len() != 2 {
        return Err(Error::Data(format!(
            "permutation-invariant loss needs 2 estimates and 2 references, got {} and {}",
            estimates.len(),
            references.len()
        )));
    }
    let l = |i: usize, j: usize| si_snr_loss_value(estimates[i], references[j]);
    let ident = 0.5 * (l(0, 0)? + l(1, 1)?);
    let swap = 0.5 * (l(0, 1)? + l(1, 0)?);
    Ok(if swap < ident { (swap, SWAPPED) } else { (ident, IDENTITY) })
}

/// Graph form of [`pit_loss_value`]; only the winning assignment is recorded.
pub fn pit_loss<F: Scalar>(g: &mut Graph<F>, estimates: &[Var], references: &[&[F]]) -> Result<(Var, Permutation)> {
    let values: Vec<Vec<F>> = estimates.iter().map(|&e| g.value(e).data().to_vec()).collect();
    let refs: Vec<&[F]> = values.iter().map(|v| v.as_slice()).collect();
    let (_, perm) = pit_loss_value(&refs, references)?;
    let a = si_snr_loss(g, estimates[0], references[perm[0]])?;
    let b = si_snr_loss(g, estimates[1], references[perm[1]])?;
    let sum = g.add(a, b)?;
    let mean = g.weighted_sum(sum, vec![F::from_f64(0.5)])?;
    Ok((mean, perm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tasnet_autodiff::{grad_check, GradCheckOptions};

    #[test]
    fn closed_form_three_sample_case() {
        // After mean removal s = [0, 0], so use three samples to keep s nonzero:
        // est [1, 0, 0] -> a = [2/3, -1/3, -1/3]; ref [1, 1, 0] -> s = [1/3, 1/3, -2/3].
        // <a,s> = 1/3, |s|^2 = 2/3, alpha = 1/2, s_t = [1/6, 1/6, -1/3], |s_t|^2 = 1/6,
        // e = [1/2, -1/2, 0], |e|^2 = 1/2.
        let want = -10.0 * ((1.0 / 6.0) / (0.5 + SI_SNR_EPS)).log10();
        let got = si_snr_loss_value(&[1.0f64, 0.0, 0.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn two_sample_pair_is_degenerate_after_mean_removal() {
        assert!(si_snr_loss_value(&[1.0f64, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn perfect_estimate_is_capped_by_eps() {
        let s = [0.3f64, -0.2, 0.5, 0.1, -0.7];
        let c = centred(&s);
        let want = -10.0 * (dot(&c, &c) / SI_SNR_EPS).log10();
        let got = si_snr_loss_value(&s, &s).unwrap();
        assert!((got - want).abs() < 1e-9);
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let got2 = si_snr_loss_value(&doubled, &s).unwrap();
        // The projection absorbs the scale; only the eps cap sees |s_t| grow.
        assert!((got2 - (got - 10.0 * 4f64.log10())).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let reference: Vec<f64> = (0..40).map(|i| ((i * 7 + seed as usize) as f64 * 0.37).sin()).collect();
            let est: Vec<f64> = (0..40).map(|i| ((i * 3 + 1) as f64 * 0.11 + seed as f64).cos()).collect();
            let r = reference.clone();
            let report = grad_check(
                &[Tensor::signal(est)],
                |g, v| si_snr_loss(g, v[0], &r).map_err(|_| tasnet_autodiff::AutodiffError::NonFinite { op: "loss" }),
                &GradCheckOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        }
    }

    #[test]
    fn pit_identity_and_swap() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.71).cos()).collect();
        let (l_id, p_id) = pit_loss_value(&[&a, &b], &[&a, &b]).unwrap();
        assert_eq!(p_id, IDENTITY);
        let (l_sw, p_sw) = pit_loss_value(&[&b, &a], &[&a, &b]).unwrap();
        assert_eq!(p_sw, SWAPPED);
        assert_eq!(l_id, l_sw);
        assert!(pit_loss_value(&[&a], &[&a, &b]).is_err());
    }
}
