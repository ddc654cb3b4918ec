//! Spectral helpers shared by the noise generator, STOI and the overlap study.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub type C64 = Complex<f64>;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `hanning(n)` without the zero end points: `0.5 - 0.5 cos(2 pi k / (n + 1))`, k = 1..n.
pub fn hann_interior(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Forward FFT of a fixed size, reused across frames.
pub struct RealFft {
    size: usize,
    plan: Arc<dyn Fft<f64>>,
}

impl RealFft {
    pub fn new(size: usize) -> Self {
        let plan = FftPlanner::new().plan_fft_forward(size);
        Self { size, plan }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// One-sided spectrum (`size / 2 + 1` bins) of `frame`, zero-padded
    /// or truncated to the FFT size.
    pub fn spectrum(&self, frame: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = (0..self.size)
            .map(|i| C64::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.plan.process(&mut buf);
        buf.truncate(self.size / 2 + 1);
        buf
    }
}

/// Number of frames for a signal of `len` samples: frames start every `hop`
/// samples and must fit entirely. Signals shorter than one window give one
/// zero-padded frame.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        1
    } else {
        (len - window) / hop + 1
    }
}

/// One-sided STFT, `frames x (dft_size / 2 + 1)`.
pub fn stft(x: &[f64], window: &[f64], hop: usize, dft_size: usize) -> Vec<Vec<C64>> {
    assert!(hop > 0 && dft_size >= window.len());
    let fft = RealFft::new(dft_size);
    let w = window.len();
    let mut frame = vec![0.0; w];
    (0..frame_count(x.len(), w, hop))
        .map(|k| {
            for (i, f) in frame.iter_mut().enumerate() {
                *f = x.get(k * hop + i).copied().unwrap_or(0.0) * window[i];
            }
            fft.spectrum(&frame)
        })
        .collect()
}

/// Welch power spectral density estimate: Hann-windowed `nfft`-sample
/// segments with 50 % overlap, averaged periodograms. Units are power per
/// bin (not per Hz); only relative shape matters to callers.
pub fn welch(x: &[f64], nfft: usize) -> Vec<f64> {
    let win = hann(nfft);
    let norm: f64 = win.iter().map(|w| w * w).sum();
    let frames = stft(x, &win, nfft / 2, nfft);
    let mut psd = vec![0.0; nfft / 2 + 1];
    for f in &frames {
        for (p, c) in psd.iter_mut().zip(f) {
            *p += c.norm_sqr();
        }
    }
    let scale = 1.0 / (norm * frames.len() as f64);
    psd.iter_mut().for_each(|p| *p *= scale);
    psd
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `bands + 1` edge frequencies evenly spaced on the mel scale.
pub fn mel_band_edges(bands: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..=bands)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / bands as f64))
        .collect()
}

/// Mean PSD inside each band `[edges[b], edges[b+1])`, in dB. A band that
/// contains no bin uses the bin nearest its centre.
pub fn band_levels_db(psd: &[f64], sample_rate: u32, edges: &[f64]) -> Vec<f64> {
    let nfft = (psd.len() - 1) * 2;
    let bin_hz = sample_rate as f64 / nfft as f64;
    edges
        .windows(2)
        .map(|e| {
            let vals: Vec<f64> = psd
                .iter()
                .enumerate()
                .filter(|(i, _)| {
                    let f = *i as f64 * bin_hz;
                    f >= e[0] && f < e[1]
                })
                .map(|(_, &p)| p)
                .collect();
            let mean = if vals.is_empty() {
                let centre = ((e[0] + e[1]) / 2.0 / bin_hz).round() as usize;
                psd[centre.min(psd.len() - 1)]
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            10.0 * mean.max(1e-300).log10()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_of_bin_centred_sine_is_a_single_bin() {
        let n = 64;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / n as f64).cos())
            .collect();
        let s = RealFft::new(n).spectrum(&x);
        for (k, c) in s.iter().enumerate() {
            let expect = if k == 5 { n as f64 / 2.0 } else { 0.0 };
            assert!((c.norm() - expect).abs() < 1e-9, "bin {k}: {}", c.norm());
        }
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(32000, 16, 8), 3999);
        assert_eq!(frame_count(10, 16, 8), 1);
        assert_eq!(frame_count(16, 16, 8), 1);
    }

    #[test]
    fn welch_of_white_noise_is_flat() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let psd = welch(&x, 256);
        // A unit-variance white sequence has power 1 per bin under this scaling.
        for &p in &psd[2..127] {
            assert!((p - 1.0).abs() < 0.15, "{p}");
        }
    }

    #[test]
    fn mel_edges_are_increasing_and_span_range() {
        let e = mel_band_edges(32, 50.0, 4000.0);
        assert_eq!(e.len(), 33);
        assert!((e[0] - 50.0).abs() < 1e-9 && (e[32] - 4000.0).abs() < 1e-9);
        assert!(e.windows(2).all(|w| w[1] > w[0]));
    }
}
