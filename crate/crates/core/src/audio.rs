//! Wav I/O and the preprocessing chain applied to every utterance:
//! resampling, energy-based voice-activity trimming and length fixing.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Sample rate every model operates at.
pub const MODEL_RATE: u32 = 8000;
/// Utterance duration after preprocessing, in seconds.
pub const UTTERANCE_SECONDS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: cannot read: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot write: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed wav: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}: unsupported encoding: {msg}")]
    Unsupported { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, AudioError>;

/// Mono signal with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| s * s).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Reads channel 0 of a PCM-16 or IEEE-float-32 RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    parse_wav(&bytes).map_err(|e| match e {
        ParseError::Malformed(msg) => AudioError::Malformed {
            path: path.to_path_buf(),
            msg,
        },
        ParseError::Unsupported(msg) => AudioError::Unsupported {
            path: path.to_path_buf(),
            msg,
        },
    })
}

enum ParseError {
    Malformed(String),
    Unsupported(String),
}

struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

fn parse_wav(b: &[u8]) -> std::result::Result<Waveform, ParseError> {
    let mal = |m: &str| ParseError::Malformed(m.to_string());
    if b.len() < 12 || &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err(mal("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<Format> = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let size = u32_at(b, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > b.len() {
                    return Err(mal("short fmt chunk"));
                }
                let mut tag = u16_at(b, body);
                if tag == 0xFFFE && size >= 26 && body + 26 <= b.len() {
                    // WAVE_FORMAT_EXTENSIBLE: the sub-format GUID starts with the tag.
                    tag = u16_at(b, body + 24);
                }
                fmt = Some(Format {
                    tag,
                    channels: u16_at(b, body + 2),
                    rate: u32_at(b, body + 4),
                    bits: u16_at(b, body + 14),
                });
            }
            b"data" => {
                let f = fmt.ok_or_else(|| mal("data chunk before fmt chunk"))?;
                let end = body.saturating_add(size).min(b.len());
                return decode(&b[body..end], &f);
            }
            _ => {}
        }
        pos = body.saturating_add(size).saturating_add(size & 1);
    }
    Err(mal("no data chunk"))
}

fn decode(data: &[u8], f: &Format) -> std::result::Result<Waveform, ParseError> {
    if f.channels == 0 || f.rate == 0 {
        return Err(ParseError::Malformed("zero channels or sample rate".into()));
    }
    let ch = f.channels as usize;
    let samples = match (f.tag, f.bits) {
        (1, 16) => data
            .chunks_exact(2 * ch)
            .map(|fr| i16::from_le_bytes([fr[0], fr[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4 * ch)
            .map(|fr| f32::from_le_bytes([fr[0], fr[1], fr[2], fr[3]]) as f64)
            .collect(),
        (tag, bits) => {
            return Err(ParseError::Unsupported(format!(
                "format tag {tag} with {bits} bits per sample (need PCM-16 or float-32)"
            )))
        }
    };
    Ok(Waveform::new(samples, f.rate))
}

fn encode(w: &Waveform, enc: WavEncoding) -> Vec<u8> {
    let (tag, bits): (u16, u16) = match enc {
        WavEncoding::Pcm16 => (1, 16),
        WavEncoding::Float32 => (3, 32),
    };
    let bps = (bits / 8) as u32;
    let data_len = w.samples.len() as u32 * bps;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * bps).to_le_bytes());
    out.extend_from_slice(&(bps as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        match enc {
            WavEncoding::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            WavEncoding::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    out
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    write_wav_as(path, w, WavEncoding::Pcm16)
}

pub fn write_wav_as(path: impl AsRef<Path>, w: &Waveform, enc: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(w, enc)).map_err(|source| AudioError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const RESAMPLE_HALF_TAPS: i64 = 32;
const RESAMPLE_KAISER_BETA: f64 = 8.6;
const RESAMPLE_CUTOFF: f64 = 0.45;

/// Kaiser-windowed sinc taps for fractional offset `frac` in `[0, 1)`,
/// normalized to unit DC gain. Tap `j` weights input `i0 - 31 + j`.
fn resample_taps(frac: f64, cutoff: f64) -> [f64; 64] {
    let mut taps = [0.0; 64];
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);
    let mut sum = 0.0;
    for (j, tap) in taps.iter_mut().enumerate() {
        let tau = frac + (RESAMPLE_HALF_TAPS - 1 - j as i64) as f64;
        let u = tau / RESAMPLE_HALF_TAPS as f64;
        let win = if u.abs() <= 1.0 {
            bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
        } else {
            0.0
        };
        let arg = 2.0 * cutoff * tau;
        let sinc = if arg.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
        };
        *tap = 2.0 * cutoff * sinc * win;
        sum += *tap;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Band-limited rate conversion with a 64-tap Kaiser-windowed sinc whose
/// cutoff is 0.45 of the lower of the two rates.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(AudioError::Invalid("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let (src, dst) = (w.sample_rate as u64, target_rate as u64);
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    let out_len = ((w.len() as u128 * dst as u128 + src as u128 / 2) / src as u128) as usize;
    let cutoff = RESAMPLE_CUTOFF * src.min(dst) as f64 / src as f64;
    let table: Option<Vec<[f64; 64]>> =
        (up <= 4096).then(|| (0..up).map(|ph| resample_taps(ph as f64 / up as f64, cutoff)).collect());
    let x = &w.samples;
    let n_in = x.len() as i64;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let num = n * down;
        let i0 = (num / up) as i64;
        let phase = num % up;
        let owned;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = resample_taps(phase as f64 / up as f64, cutoff);
                &owned
            }
        };
        let mut acc = 0.0f64;
        for (j, &h) in taps.iter().enumerate() {
            let k = i0 - (RESAMPLE_HALF_TAPS - 1) + j as i64;
            if (0..n_in).contains(&k) {
                acc += h * x[k as usize];
            }
        }
        out.push(acc);
    }
    Ok(Waveform::new(out, target_rate))
}

/// Drops every `segment_ms` segment whose energy is more than `floor_db`
/// below the most energetic segment. A trailing partial segment is judged
/// like the others. An all-zero input yields an empty waveform.
pub fn vad_trim(w: &Waveform, segment_ms: f64, floor_db: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(AudioError::Invalid("vad_trim on empty waveform".into()));
    }
    if segment_ms <= 0.0 {
        return Err(AudioError::Invalid("segment length must be positive".into()));
    }
    let seg = ((w.sample_rate as f64 * segment_ms / 1000.0).round() as usize).max(1);
    let energies: Vec<f64> = w
        .samples
        .chunks(seg)
        .map(|c| c.iter().map(|&s| s * s).sum())
        .collect();
    let max = energies.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Waveform::new(Vec::new(), w.sample_rate));
    }
    let floor = 10.0 * max.log10() - floor_db;
    let mut out = Vec::with_capacity(w.len());
    for (chunk, &e) in w.samples.chunks(seg).zip(&energies) {
        if e > 0.0 && 10.0 * e.log10() >= floor {
            out.extend_from_slice(chunk);
        }
    }
    Ok(Waveform::new(out, w.sample_rate))
}

/// Truncates to, or tiles from the start up to, `target_s` seconds.
pub fn fix_length(w: &Waveform, target_s: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(AudioError::Invalid("cannot tile an empty waveform".into()));
    }
    let target = (target_s * w.sample_rate as f64).round() as usize;
    let samples = w.samples.iter().copied().cycle().take(target).collect();
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Resample to the model rate, trim silence and fix the length.
pub fn preprocess(w: &Waveform) -> Result<Waveform> {
    let w = resample(w, MODEL_RATE)?;
    let w = vad_trim(&w, 25.0, 40.0)?;
    fix_length(&w, UTTERANCE_SECONDS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(rate: u32, freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() * 0.5)
                .collect(),
            rate,
        )
    }

    #[test]
    fn pcm16_scaling_and_empty_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &Waveform::new(vec![0.5, -0.25], 8000)).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(i16::from_le_bytes([bytes[44], bytes[45]]), 16384);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.5, -0.25]);
        write_wav(&p, &Waveform::new(vec![], 8000)).unwrap();
        assert_eq!(read_wav(&p).unwrap().len(), 0);
    }

    #[test]
    fn read_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(AudioError::Unreadable { .. })));
        let p = dir.path().join("junk.wav");
        fs::write(&p, b"not a wav file").unwrap();
        assert!(matches!(read_wav(&p), Err(AudioError::Malformed { .. })));
        // 8-bit PCM is rejected as unsupported.
        let mut bytes = encode(&Waveform::new(vec![0.0; 4], 8000), WavEncoding::Pcm16);
        bytes[34] = 8;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_wav(&p), Err(AudioError::Unsupported { .. })));
    }

    #[test]
    fn resample_identity_and_length() {
        let w = sine(16000, 1000.0, 32000);
        assert_eq!(resample(&w, 16000).unwrap(), w);
        assert_eq!(resample(&w, 8000).unwrap().len(), 16000);
        assert_eq!(resample(&Waveform::new(vec![0.0; 101], 8000), 10000).unwrap().len(), 126);
    }

    #[test]
    fn resample_sine_matches_analytic() {
        let w = sine(16000, 1000.0, 32000);
        let r = resample(&w, 8000).unwrap();
        let expect = sine(8000, 1000.0, 16000);
        let trim = 64;
        let err = r.samples[trim..r.len() - trim]
            .iter()
            .zip(&expect.samples[trim..expect.len() - trim])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-3, "max error {err}");
        // upsampling 8k -> 10k
        let r = resample(&expect, 10000).unwrap();
        let up = sine(10000, 1000.0, 20000);
        let err = r.samples[trim..r.len() - trim]
            .iter()
            .zip(&up.samples[trim..up.len() - trim])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn resample_rejects_aliasing_tone() {
        // 7 kHz at 16 kHz lies above the 3.6 kHz cutoff for 8 kHz output.
        let w = sine(16000, 7000.0, 16000);
        let r = resample(&w, 8000).unwrap();
        let rms = (r.samples[100..7900].iter().map(|&s| s * s).sum::<f64>() / 7800.0).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn vad_examples() {
        let seg = 200; // 25 ms at 8 kHz
        let flat = Waveform::new(vec![0.3; 1000], 8000);
        assert_eq!(vad_trim(&flat, 25.0, 40.0).unwrap(), flat);

        let mut s = vec![1.0f64; seg];
        s.extend(vec![0.001f64; seg]);
        let out = vad_trim(&Waveform::new(s, 8000), 25.0, 40.0).unwrap();
        assert_eq!(out.samples, vec![1.0f64; seg]);

        let mut s = vec![1.0f64; seg];
        s.extend(vec![0.1f64; seg]);
        let w = Waveform::new(s, 8000);
        assert_eq!(vad_trim(&w, 25.0, 40.0).unwrap(), w);

        assert!(vad_trim(&Waveform::new(vec![0.0; 500], 8000), 25.0, 40.0).unwrap().is_empty());
        assert!(vad_trim(&Waveform::new(vec![], 8000), 25.0, 40.0).is_err());
    }

    #[test]
    fn vad_keeps_loud_partial_tail() {
        let mut s = vec![0.5f64; 200];
        s.extend(vec![0.5f64; 50]);
        let out = vad_trim(&Waveform::new(s, 8000), 25.0, 40.0).unwrap();
        assert_eq!(out.len(), 250);
    }

    #[test]
    fn fix_length_examples() {
        let w = Waveform::new((0..32000).map(|i| i as f64).collect(), 8000);
        assert_eq!(fix_length(&w, 4.0).unwrap(), w);
        let long = Waveform::new((0..48000).map(|i| i as f64).collect(), 8000);
        assert_eq!(fix_length(&long, 4.0).unwrap().samples, w.samples);
        let short = Waveform::new((0..12000).map(|i| i as f64).collect(), 8000);
        let f = fix_length(&short, 4.0).unwrap();
        assert_eq!(f.len(), 32000);
        assert_eq!(f.samples[12000..24000], f.samples[0..12000]);
        assert!(fix_length(&Waveform::new(vec![], 8000), 4.0).is_err());
    }
}
