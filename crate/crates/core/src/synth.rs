//! Source-filter pseudo-speech and simple noise types, used to build an
//! open stand-in corpus when no recorded speech is at hand.
//!
//! Each speaker gets a fixed pitch range, vocal-tract scale and spectral
//! tilt; utterances are strings of syllables (optional fricative onset,
//! voiced nucleus with moving formants) separated by short pauses, padded
//! with near-silence so the VAD stage has something to trim.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{write_wav, Waveform};
use crate::dataset::Gender;
use crate::error::{Error, Result};
use crate::rng::item_seed;

/// Rate the stand-in corpus is written at (resampled to 8 kHz by `prepare`).
pub const SYNTH_RATE: u32 = 16000;

/// Adult male vowel formants (Hz), F1..F3.
const VOWELS: [[f64; 3]; 7] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 110.0, 160.0];

#[derive(Clone, Debug)]
pub struct Voice {
    pub gender: Gender,
    pub f0: f64,
    pub formant_scale: f64,
    /// Harmonic amplitude roll-off exponent.
    pub tilt: f64,
    pub syllable_rate: f64,
}

impl Voice {
    pub fn random(gender: Gender, rng: &mut impl Rng) -> Self {
        let (f0, scale) = match gender {
            Gender::M => (rng.gen_range(85.0..155.0), rng.gen_range(0.95..1.05)),
            Gender::F => (rng.gen_range(165.0..255.0), rng.gen_range(1.12..1.22)),
        };
        Self {
            gender,
            f0,
            formant_scale: scale,
            tilt: rng.gen_range(0.9..1.4),
            syllable_rate: rng.gen_range(3.5..5.5),
        }
    }
}

fn formant_gain(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .enumerate()
        .map(|(j, (&fc, bw))| {
            let d = (f - fc) / bw;
            (1.0 / (1.0 + d * d)) / (1.0 + j as f64)
        })
        .sum()
}

fn raised_cosine_env(i: usize, n: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(n / 2).max(1);
    if i < ramp {
        0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
    } else if i >= n - ramp {
        0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// One-pole high-pass on white noise, giving a hiss-like fricative.
fn fricative(n: usize, rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let a = (-2.0 * PI * 2500.0 / rate as f64).exp();
    let mut lp = 0.0;
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            lp = a * lp + (1.0 - a) * w;
            w - lp
        })
        .collect()
}

/// A pseudo-speech utterance of roughly `seconds` of active signal.
pub fn synth_utterance(voice: &Voice, seconds: f64, rate: u32, rng: &mut impl Rng) -> Waveform {
    let fs = rate as f64;
    let lead = (rng.gen_range(0.15..0.4) * fs) as usize;
    let tail = (rng.gen_range(0.15..0.4) * fs) as usize;
    let mut out = vec![0.0; lead];
    let active = (seconds * fs) as usize;
    let max_harm = 60;
    let mut phases = vec![0.0f64; max_harm];
    let mut prev_formants = VOWELS[rng.gen_range(0..VOWELS.len())];
    let mut spoken = 0;
    while spoken < active {
        let syl = ((rng.gen_range(0.7..1.3) / voice.syllable_rate) * fs) as usize;
        let level = 10f64.powf(rng.gen_range(-6.0..3.0) / 20.0);
        if rng.gen_bool(0.35) {
            let n = (rng.gen_range(0.03..0.09) * fs) as usize;
            let amp = 0.08 * level;
            let noise = fricative(n, rate, rng);
            out.extend(noise.iter().enumerate().map(|(i, &v)| v * amp * raised_cosine_env(i, n, n / 4)));
            spoken += n;
        }
        let mut target = VOWELS[rng.gen_range(0..VOWELS.len())];
        for f in &mut target {
            *f *= voice.formant_scale * rng.gen_range(0.92..1.08);
        }
        let f0_start = voice.f0 * rng.gen_range(0.85..1.15);
        let f0_end = f0_start * rng.gen_range(0.8..1.1);
        let vib = rng.gen_range(4.0..6.0);
        for i in 0..syl {
            let t = i as f64 / syl as f64;
            let glide = (t * 3.0).min(1.0);
            let mut formants = [0.0; 3];
            for j in 0..3 {
                formants[j] = prev_formants[j] + (target[j] - prev_formants[j]) * glide;
            }
            let f0 = (f0_start + (f0_end - f0_start) * t) * (1.0 + 0.01 * (2.0 * PI * vib * i as f64 / fs).sin());
            let mut s = 0.0;
            for (h, ph) in phases.iter_mut().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f > 0.45 * fs {
                    break;
                }
                *ph += 2.0 * PI * f / fs;
                if *ph > 2.0 * PI {
                    *ph -= 2.0 * PI;
                }
                s += ph.sin() * formant_gain(f, &formants) / ((h + 1) as f64).powf(voice.tilt * 0.5);
            }
            let jitter: f64 = StandardNormal.sample(rng);
            out.push((s + 0.002 * jitter) * 0.15 * level * raised_cosine_env(i, syl, (0.02 * fs) as usize));
        }
        prev_formants = target;
        spoken += syl;
        if rng.gen_bool(0.3) {
            let gap = (rng.gen_range(0.05..0.25) * fs) as usize;
            out.extend(std::iter::repeat(0.0).take(gap));
            spoken += gap;
        }
    }
    out.extend(std::iter::repeat(0.0).take(tail));
    // A -75 dB floor keeps silent stretches from being exactly zero.
    for v in &mut out {
        let w: f64 = StandardNormal.sample(rng);
        *v += 2e-5 * w;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.95 {
        out.iter_mut().for_each(|v| *v *= 0.95 / peak);
    }
    Waveform::new(out, rate)
}

/// Low-frequency rumble with engine-like harmonics, standing in for
/// vehicle noise.
pub fn lowpass_noise(seconds: f64, rate: u32, rng: &mut impl Rng) -> Waveform {
    let fs = rate as f64;
    let n = (seconds * fs) as usize;
    let a = (-2.0 * PI * 150.0 / fs).exp();
    let hum = rng.gen_range(25.0..45.0);
    let mut lp = 0.0;
    let mut lp2 = 0.0;
    let samples = (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(rng);
            lp = a * lp + (1.0 - a) * w;
            lp2 = a * lp2 + (1.0 - a) * lp;
            let t = i as f64 / fs;
            let engine: f64 = (1..4).map(|k| (2.0 * PI * hum * k as f64 * t).sin() / k as f64).sum();
            lp2 * 8.0 + 0.02 * engine
        })
        .collect();
    Waveform::new(samples, rate)
}

/// Sum of `talkers` independent pseudo-speakers.
pub fn babble(seconds: f64, talkers: usize, rate: u32, rng: &mut impl Rng) -> Waveform {
    let n = (seconds * rate as f64) as usize;
    let mut acc = vec![0.0; n];
    for t in 0..talkers {
        let gender = if t % 2 == 0 { Gender::M } else { Gender::F };
        let voice = Voice::random(gender, rng);
        let mut filled = 0;
        while filled < n {
            let u = synth_utterance(&voice, 3.0, rate, rng);
            for (a, v) in acc[filled..].iter_mut().zip(&u.samples) {
                *a += v;
            }
            filled += u.len();
        }
    }
    Waveform::new(acc, rate)
}

#[derive(Clone, Debug)]
pub struct SynthCorpusOptions {
    pub speakers_per_gender: usize,
    pub utterances_per_speaker: usize,
    pub noise_seconds: f64,
    pub seed: u64,
}

impl Default for SynthCorpusOptions {
    fn default() -> Self {
        Self {
            speakers_per_gender: 12,
            utterances_per_speaker: 10,
            noise_seconds: 60.0,
            seed: 0,
        }
    }
}

/// Writes `<dir>/<speaker>/<speaker>_<n>.wav`, `<dir>/speakers.txt` and
/// `<dir>/noise/{babble,lowpass}.wav`. Returns the written speech paths.
pub fn write_synth_corpus(dir: &Path, opts: &SynthCorpusOptions) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("noise")).map_err(|e| Error::io(dir, e))?;
    let mut listing = String::from("# speaker gender\n");
    let mut paths = Vec::new();
    for s in 0..2 * opts.speakers_per_gender {
        let gender = if s % 2 == 0 { Gender::M } else { Gender::F };
        let spk = format!("{}{:03}", gender.as_str().to_lowercase(), s / 2);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(opts.seed, "synth-speaker", s as u64));
        let voice = Voice::random(gender, &mut rng);
        listing.push_str(&format!("{spk} {}\n", gender.as_str()));
        let spk_dir = dir.join(&spk);
        fs::create_dir_all(&spk_dir).map_err(|e| Error::io(&spk_dir, e))?;
        for u in 0..opts.utterances_per_speaker {
            let secs = rng.gen_range(3.0..5.0);
            let w = synth_utterance(&voice, secs, SYNTH_RATE, &mut rng);
            let p = spk_dir.join(format!("{spk}_{u:03}.wav"));
            write_wav(&p, &w)?;
            paths.push(p);
        }
    }
    let list_path = dir.join("speakers.txt");
    fs::write(&list_path, listing).map_err(|e| Error::io(&list_path, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(opts.seed, "synth-noise", 0));
    write_wav(dir.join("noise/babble.wav"), &normalize(babble(opts.noise_seconds, 6, SYNTH_RATE, &mut rng)))?;
    write_wav(dir.join("noise/lowpass.wav"), &normalize(lowpass_noise(opts.noise_seconds, SYNTH_RATE, &mut rng)))?;
    Ok(paths)
}

fn normalize(mut w: Waveform) -> Waveform {
    let peak = w.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        w.samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    w
}
