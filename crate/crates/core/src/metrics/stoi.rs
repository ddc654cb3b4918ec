//! Short-time objective intelligibility, following the reference
//! implementation's constants and frame bookkeeping.

use crate::audio::bessel_i0;
use crate::dsp::{hann_interior, RealFft};
use crate::error::{Error, Result};

pub const STOI_RATE: u32 = 10_000;
/// Analysis window length in samples at 10 kHz.
pub const FRAME: usize = 256;
pub const NFFT: usize = 512;
pub const BANDS: usize = 15;
/// Centre of the lowest one-third-octave band.
pub const MIN_FREQ: f64 = 150.0;
/// Frames per intermediate-intelligibility segment (384 ms).
pub const SEGMENT: usize = 30;
/// Lower signal-to-distortion bound of the clipping step.
pub const BETA_DB: f64 = -15.0;
/// Frames more than this far below the loudest clean frame are dropped.
pub const DYN_RANGE_DB: f64 = 40.0;

const EPS: f64 = f64::EPSILON;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc lowpass as designed by Octave's `resample`, normalized to unit sum.
fn resample_filter(up: usize, down: usize) -> Vec<f64> {
    let cutoff = 1.0 / (2 * up.max(down)) as f64;
    let roll_off = cutoff / 10.0;
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * half) as f64;
    let h: Vec<f64> = (-half..=half)
        .map(|t| {
            let x = 2.0 * cutoff * t as f64;
            let sinc = if t == 0 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
            let r = 2.0 * (t + half) as f64 / m - 1.0;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            2.0 * up as f64 * cutoff * sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.into_iter().map(|v| v / sum).collect()
}

/// Polyphase rational resampling with zero extension at the edges.
fn resample_poly(x: &[f64], up: usize, down: usize, h: &[f64]) -> Vec<f64> {
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|m| {
            let centre = (m * down + half) as i64;
            // Input k contributes tap centre - k*up when that index is inside the filter.
            let k_lo = ((centre - h.len() as i64 + 1).max(0) as usize).div_ceil(up) as i64;
            let k_hi = (centre / up as i64).min(x.len() as i64 - 1);
            (k_lo..=k_hi)
                .map(|k| x[k as usize] * up as f64 * h[(centre - k * up as i64) as usize])
                .sum()
        })
        .collect()
}

/// Resampling to the STOI rate.
pub fn to_stoi_rate(x: &[f64], rate: u32) -> Vec<f64> {
    if rate == STOI_RATE {
        return x.to_vec();
    }
    let g = gcd(STOI_RATE as usize, rate as usize);
    let (up, down) = (STOI_RATE as usize / g, rate as usize / g);
    resample_poly(x, up, down, &resample_filter(up, down))
}

/// Frame starts used by the reference: the last full frame is never included.
fn frame_starts(len: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(hop)
}

/// Drops windowed frames whose clean-signal energy is more than the dynamic
/// range below the loudest one and overlap-adds the rest.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann_interior(FRAME);
    let hop = FRAME / 2;
    let frames = |s: &[f64]| -> Vec<Vec<f64>> {
        frame_starts(x.len(), hop)
            .map(|i| w.iter().zip(&s[i..i + FRAME]).map(|(a, b)| a * b).collect())
            .collect()
    };
    let (xf, yf) = (frames(x), frames(y));
    let energy: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..energy.len()).filter(|&i| max - DYN_RANGE_DB - energy[i] < 0.0).collect();
    let ola = |fr: &[Vec<f64>]| {
        if keep.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (keep.len() - 1) * hop + FRAME];
        for (j, &i) in keep.iter().enumerate() {
            for (o, v) in out[j * hop..j * hop + FRAME].iter_mut().zip(&fr[i]) {
                *o += v;
            }
        }
        out
    };
    (ola(&xf), ola(&yf))
}

/// One-third-octave band index ranges `[lo, hi)` over the FFT bins.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = NFFT / 2 + 1;
    let freq = |b: usize| b as f64 * STOI_RATE as f64 / NFFT as f64;
    let nearest = |f: f64| {
        (0..bins)
            .min_by(|&a, &b| (freq(a) - f).powi(2).partial_cmp(&(freq(b) - f).powi(2)).unwrap())
            .unwrap()
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[band][frame]`.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)], fft: &RealFft) -> Vec<Vec<f64>> {
    let w = hann_interior(FRAME);
    let spectra: Vec<Vec<f64>> = frame_starts(x.len(), FRAME / 2)
        .map(|i| {
            let frame: Vec<f64> = w.iter().zip(&x[i..i + FRAME]).map(|(a, b)| a * b).collect();
            fft.spectrum(&frame).iter().map(|c| c.norm_sqr()).collect()
        })
        .collect();
    bands
        .iter()
        .map(|&(lo, hi)| spectra.iter().map(|s| s[lo..hi].iter().sum::<f64>().sqrt()).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Intelligibility of `estimate` relative to the clean `reference`, in (0, 1] for typical inputs.
pub fn stoi(estimate: &[f64], reference: &[f64], sample_rate: u32) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Metric(format!(
            "stoi inputs differ in length ({} vs {})",
            estimate.len(),
            reference.len()
        )));
    }
    let x = to_stoi_rate(reference, sample_rate);
    let y = to_stoi_rate(estimate, sample_rate);
    let (x, y) = remove_silent_frames(&x, &y);
    let fft = RealFft::new(NFFT);
    let bands = third_octave_bands();
    let xe = band_envelopes(&x, &bands, &fft);
    let ye = band_envelopes(&y, &bands, &fft);
    let frames = xe[0].len();
    if frames < SEGMENT {
        return Err(Error::Metric(format!(
            "only {frames} active frames after silence removal; stoi needs {SEGMENT}"
        )));
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let segments = frames - SEGMENT + 1;
    for m in SEGMENT..=frames {
        for b in 0..BANDS {
            let xs = &xe[b][m - SEGMENT..m];
            let ys = &ye[b][m - SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + EPS);
            let yp: Vec<f64> = ys.iter().zip(xs).map(|(yv, xv)| (yv * scale).min(xv * clip)).collect();
            let centre = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| a - mean).collect::<Vec<f64>>()
            };
            let (yc, xc) = (centre(&yp), centre(xs));
            let (ny, nx) = (norm(&yc) + EPS, norm(&xc) + EPS);
            total += yc.iter().zip(&xc).map(|(a, c)| (a / ny) * (c / nx)).sum::<f64>();
        }
    }
    Ok(total / (segments * BANDS) as f64)
}
