//! Global and cumulative layer normalization over `[C, K]` feature maps.
//!
//! Statistics are accumulated in `f64` for both element types so that the
//! cumulative variant stays accurate over long utterances.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Mean and variance over every entry of the utterance.
    Global,
    /// Frame `k` uses the entries of frames `0..=k` (all channels).
    Cumulative,
}

/// Variance floor inside the square root.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    /// One value for [`NormKind::Global`], one per frame otherwise.
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

impl NormStats {
    fn frame(&self, k: usize) -> (f64, f64) {
        if self.mean.len() == 1 {
            (self.mean[0], self.rstd[0])
        } else {
            (self.mean[k], self.rstd[k])
        }
    }
}

pub(crate) fn norm_forward<F: Scalar>(
    kind: NormKind,
    x: &[F],
    channels: usize,
    frames: usize,
    gain: &[F],
    bias: &[F],
) -> (Vec<F>, NormStats) {
    let stats = match kind {
        NormKind::Global => {
            let mut s = 0.0f64;
            let mut q = 0.0f64;
            for &v in x {
                let v = v.as_f64();
                s += v;
                q += v * v;
            }
            let n = x.len() as f64;
            let mean = s / n;
            let var = (q / n - mean * mean).max(0.0);
            NormStats {
                mean: vec![mean],
                rstd: vec![1.0 / (var + NORM_EPS).sqrt()],
            }
        }
        NormKind::Cumulative => {
            let mut mean = Vec::with_capacity(frames);
            let mut rstd = Vec::with_capacity(frames);
            let mut s = 0.0f64;
            let mut q = 0.0f64;
            for k in 0..frames {
                for c in 0..channels {
                    let v = x[c * frames + k].as_f64();
                    s += v;
                    q += v * v;
                }
                let n = ((k + 1) * channels) as f64;
                let m = s / n;
                let var = (q / n - m * m).max(0.0);
                mean.push(m);
                rstd.push(1.0 / (var + NORM_EPS).sqrt());
            }
            NormStats { mean, rstd }
        }
    };
    let mut out = vec![F::zero(); x.len()];
    for c in 0..channels {
        let (g, b) = (gain[c].as_f64(), bias[c].as_f64());
        for k in 0..frames {
            let (m, r) = stats.frame(k);
            let i = c * frames + k;
            out[i] = F::from_f64(g * (x[i].as_f64() - m) * r + b);
        }
    }
    (out, stats)
}

pub(crate) struct NormGrads<F> {
    pub input: Vec<F>,
    pub gain: Vec<F>,
    pub bias: Vec<F>,
}

/// `detach_stats` drops the gradient path through the mean and variance,
/// leaving only the per-entry affine term.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward<F: Scalar>(
    kind: NormKind,
    x: &[F],
    channels: usize,
    frames: usize,
    gain: &[F],
    stats: &NormStats,
    gout: &[F],
    detach_stats: bool,
) -> NormGrads<F> {
    let mut dgain = vec![0.0f64; channels];
    let mut dbias = vec![0.0f64; channels];
    // g = dy * gamma, xhat = (x - mean) * rstd
    let mut g = vec![0.0f64; x.len()];
    for c in 0..channels {
        let gc = gain[c].as_f64();
        for k in 0..frames {
            let i = c * frames + k;
            let (m, r) = stats.frame(k);
            let dy = gout[i].as_f64();
            let xhat = (x[i].as_f64() - m) * r;
            dgain[c] += dy * xhat;
            dbias[c] += dy;
            g[i] = dy * gc;
        }
    }
    let mut dx = vec![F::zero(); x.len()];
    if detach_stats {
        for c in 0..channels {
            for k in 0..frames {
                let i = c * frames + k;
                dx[i] = F::from_f64(g[i] * stats.frame(k).1);
            }
        }
    } else {
        match kind {
            NormKind::Global => {
                let (m, r) = stats.frame(0);
                let n = x.len() as f64;
                let mut mean_g = 0.0;
                let mut mean_gx = 0.0;
                for (i, &gi) in g.iter().enumerate() {
                    mean_g += gi;
                    mean_gx += gi * (x[i].as_f64() - m) * r;
                }
                mean_g /= n;
                mean_gx /= n;
                for (i, d) in dx.iter_mut().enumerate() {
                    let xhat = (x[i].as_f64() - m) * r;
                    *d = F::from_f64(r * (g[i] - mean_g - xhat * mean_gx));
                }
            }
            NormKind::Cumulative => {
                // Per frame k: dL/dvar_k and total dL/dmean_k, then suffix sums
                // over k >= j of their contributions divided by the count n_k.
                let mut suffix_mean = vec![0.0f64; frames + 1];
                let mut suffix_sq = vec![0.0f64; frames + 1];
                for k in (0..frames).rev() {
                    let (m, r) = stats.frame(k);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for c in 0..channels {
                        let i = c * frames + k;
                        a += g[i];
                        b += g[i] * (x[i].as_f64() - m);
                    }
                    let dvar = -0.5 * r * r * r * b;
                    let dmean = -r * a - 2.0 * m * dvar;
                    let n = ((k + 1) * channels) as f64;
                    suffix_mean[k] = suffix_mean[k + 1] + dmean / n;
                    suffix_sq[k] = suffix_sq[k + 1] + dvar / n;
                }
                for c in 0..channels {
                    for k in 0..frames {
                        let i = c * frames + k;
                        let r = stats.frame(k).1;
                        let xv = x[i].as_f64();
                        dx[i] = F::from_f64(g[i] * r + suffix_mean[k] + 2.0 * xv * suffix_sq[k]);
                    }
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gain: dgain.into_iter().map(F::from_f64).collect(),
        bias: dbias.into_iter().map(F::from_f64).collect(),
    }
}
