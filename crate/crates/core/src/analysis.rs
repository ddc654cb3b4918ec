//! Inner-domain overlap between a target and an interferer, for a learned
//! encoder and an STFT baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{hann, stft};
use crate::error::{Error, Result};
use crate::models::SeparationModel;

/// Non-negative `[rows, frames]` coefficient matrix, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerRepresentation {
    pub rows: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub source: String,
    pub representation: String,
    pub window: usize,
    pub hop: usize,
}

impl InnerRepresentation {
    pub fn new(rows: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || frames == 0 || data.len() != rows * frames {
            return Err(Error::Data(format!(
                "representation of {} values cannot be {rows} x {frames}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Data(format!("representation has a negative or NaN entry {v}")));
        }
        Ok(Self {
            rows,
            frames,
            data,
            source: String::new(),
            representation: String::new(),
            window: 0,
            hop: 0,
        })
    }

    pub fn at(&self, row: usize, frame: usize) -> f64 {
        self.data[row * self.frames + frame]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    fn labelled(mut self, source: &str, representation: &str, window: usize, hop: usize) -> Self {
        self.source = source.to_string();
        self.representation = representation.to_string();
        self.window = window;
        self.hop = hop;
        self
    }
}

/// Label of the learned representation, naming the encoder mode it was taken after.
pub fn encoder_label(model: &dyn SeparationModel) -> String {
    let mode = model
        .config()
        .get("encoder")
        .and_then(|v| v.as_str())
        .unwrap_or("linear")
        .to_string();
    format!("encoder-{mode}")
}

/// Absolute values of the encoder output for `x`.
pub fn inner_representation(model: &dyn SeparationModel, x: &[f64]) -> Result<InnerRepresentation> {
    let y: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let enc = model.encode(&y)?;
    let (rows, frames) = (enc.dim(0), enc.dim(1));
    let data = enc.data().iter().map(|v| v.abs() as f64).collect();
    let cfg = model.config();
    let get = |k: &str| cfg.get(k).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    Ok(InnerRepresentation::new(rows, frames, data)?.labelled("", &encoder_label(model), get("window"), get("hop")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub dft_size: usize,
    pub kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window: 256,
            hop: 8,
            dft_size: 256,
            kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 {
            return Err(Error::Config("stft window and hop must be positive".into()));
        }
        if self.dft_size < self.window {
            return Err(Error::Config(format!(
                "dft size {} is smaller than the window {}",
                self.dft_size, self.window
            )));
        }
        Ok(())
    }
}

/// Magnitude STFT with one-sided bins as rows.
pub fn stft_magnitude(x: &[f64], cfg: &StftConfig) -> Result<InnerRepresentation> {
    cfg.validate()?;
    let w = match cfg.kind {
        WindowKind::Hann => hann(cfg.window),
        WindowKind::Rectangular => vec![1.0; cfg.window],
    };
    let spec = stft(x, &w, cfg.hop, cfg.dft_size);
    let (frames, rows) = (spec.len(), cfg.dft_size / 2 + 1);
    let mut data = vec![0.0; rows * frames];
    for (k, col) in spec.iter().enumerate() {
        for (n, c) in col.iter().enumerate() {
            data[n * frames + k] = c.norm();
        }
    }
    Ok(InnerRepresentation::new(rows, frames, data)?.labelled("", "stft", cfg.window, cfg.hop))
}

/// A way of turning a waveform into a coefficient matrix.
pub trait Representation: Send + Sync {
    fn label(&self) -> String;
    fn compute(&self, x: &[f64]) -> Result<InnerRepresentation>;
}

pub struct LearnedEncoder<'a>(pub &'a dyn SeparationModel);

impl Representation for LearnedEncoder<'_> {
    fn label(&self) -> String {
        encoder_label(self.0)
    }

    fn compute(&self, x: &[f64]) -> Result<InnerRepresentation> {
        inner_representation(self.0, x)
    }
}

pub struct Stft(pub StftConfig);

impl Representation for Stft {
    fn label(&self) -> String {
        "stft".into()
    }

    fn compute(&self, x: &[f64]) -> Result<InnerRepresentation> {
        stft_magnitude(x, &self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapCurve {
    pub thresholds: Vec<f64>,
    /// Significant-in-both count over all coefficients.
    pub overlap: Vec<f64>,
    /// Significant-in-both count over significant-in-either.
    pub overlap_union: Vec<f64>,
    pub target_id: String,
    pub noise_id: String,
    pub representation: String,
}

fn significant(rep: &InnerRepresentation, threshold_db: f64) -> impl Iterator<Item = bool> + '_ {
    let level = rep.max() * 10f64.powf(threshold_db / 20.0);
    rep.data.iter().map(move |&v| v > level)
}

/// Fraction of coefficients significant in both representations, per threshold
/// (dB relative to each representation's own maximum).
pub fn overlap_curve(rep_x: &InnerRepresentation, rep_v: &InnerRepresentation, thresholds: &[f64]) -> Result<OverlapCurve> {
    if (rep_x.rows, rep_x.frames) != (rep_v.rows, rep_v.frames) {
        return Err(Error::Data(format!(
            "representation shapes differ: {}x{} vs {}x{}",
            rep_x.rows, rep_x.frames, rep_v.rows, rep_v.frames
        )));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t <= 0.0)) {
        return Err(Error::Config(format!("threshold {t} dB is above the maximum")));
    }
    let total = rep_x.data.len() as f64;
    let mut overlap = Vec::with_capacity(thresholds.len());
    let mut overlap_union = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (mut both, mut either) = (0usize, 0usize);
        for (a, b) in significant(rep_x, t).zip(significant(rep_v, t)) {
            both += (a && b) as usize;
            either += (a || b) as usize;
        }
        overlap.push(both as f64 / total);
        overlap_union.push(if either == 0 { 0.0 } else { both as f64 / either as f64 });
    }
    Ok(OverlapCurve {
        thresholds: thresholds.to_vec(),
        overlap,
        overlap_union,
        target_id: rep_x.source.clone(),
        noise_id: rep_v.source.clone(),
        representation: rep_x.representation.clone(),
    })
}

/// Thresholds from 0 down to `lowest` dB in `step` dB decrements.
pub fn threshold_sweep(lowest: f64, step: f64) -> Vec<f64> {
    let n = (-lowest / step).round() as usize;
    (0..=n).map(|i| 0.0 - i as f64 * step).collect()
}

/// One target/interferer pair of the study.
pub struct StudyPair<'a> {
    pub target_id: String,
    pub noise_id: String,
    /// Interferer category used for the grouped means.
    pub noise_type: String,
    pub target: &'a [f64],
    pub noise: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanCurve {
    pub noise_type: String,
    pub representation: String,
    pub thresholds: Vec<f64>,
    pub overlap: Vec<f64>,
    pub overlap_union: Vec<f64>,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapStudy {
    pub curves: Vec<OverlapCurve>,
    pub means: Vec<MeanCurve>,
}

pub const STUDY_HEADER: &str = "representation,target_id,noise_id,threshold_db,overlap_total,overlap_union";
pub const MEANS_HEADER: &str = "noise_type,representation,threshold_db,overlap_total,overlap_union,pairs";

/// Curves for every pair under every representation, plus per-noise-type means.
pub fn run_overlap_study(pairs: &[StudyPair], reps: &[&dyn Representation], thresholds: &[f64]) -> Result<OverlapStudy> {
    let per_pair = pairs
        .par_iter()
        .map(|p| {
            if p.target.len() != p.noise.len() {
                return Err(Error::Data(format!(
                    "{} and {} differ in length",
                    p.target_id, p.noise_id
                )));
            }
            reps.iter()
                .map(|r| {
                    let mut x = r.compute(p.target)?;
                    let mut v = r.compute(p.noise)?;
                    x.source = p.target_id.clone();
                    v.source = p.noise_id.clone();
                    overlap_curve(&x, &v, thresholds)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (p, curves) in pairs.iter().zip(&per_pair) {
        for c in curves {
            let e = groups
                .entry((p.noise_type.clone(), c.representation.clone()))
                .or_insert_with(|| (vec![0.0; thresholds.len()], vec![0.0; thresholds.len()], 0));
            e.0.iter_mut().zip(&c.overlap).for_each(|(s, v)| *s += v);
            e.1.iter_mut().zip(&c.overlap_union).for_each(|(s, v)| *s += v);
            e.2 += 1;
        }
    }
    let means = groups
        .into_iter()
        .map(|((noise_type, representation), (t, u, n))| MeanCurve {
            noise_type,
            representation,
            thresholds: thresholds.to_vec(),
            overlap: t.iter().map(|v| v / n as f64).collect(),
            overlap_union: u.iter().map(|v| v / n as f64).collect(),
            pairs: n,
        })
        .collect();
    Ok(OverlapStudy {
        curves: per_pair.into_iter().flatten().collect(),
        means,
    })
}

impl OverlapStudy {
    pub fn mean(&self, noise_type: &str, representation: &str) -> Option<&MeanCurve> {
        self.means
            .iter()
            .find(|m| m.noise_type == noise_type && m.representation == representation)
    }

    pub fn curves_csv(&self) -> String {
        let mut s = format!("{STUDY_HEADER}\n");
        for c in &self.curves {
            for i in 0..c.thresholds.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.representation, c.target_id, c.noise_id, c.thresholds[i], c.overlap[i], c.overlap_union[i]
                );
            }
        }
        s
    }

    pub fn means_csv(&self) -> String {
        let mut s = format!("{MEANS_HEADER}\n");
        for m in &self.means {
            for i in 0..m.thresholds.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    m.noise_type, m.representation, m.thresholds[i], m.overlap[i], m.overlap_union[i], m.pairs
                );
            }
        }
        s
    }

    pub fn write(&self, curves: &Path, means: &Path) -> Result<()> {
        std::fs::write(curves, self.curves_csv()).map_err(|e| Error::io(curves, e))?;
        std::fs::write(means, self.means_csv()).map_err(|e| Error::io(means, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(rows: usize, frames: usize, data: Vec<f64>) -> InnerRepresentation {
        InnerRepresentation::new(rows, frames, data).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let x = rep(2, 2, vec![1.0, 0.1, 0.0, 0.0]);
        let v = rep(2, 2, vec![1.0, 0.0, 0.1, 0.0]);
        let c = overlap_curve(&x, &v, &[-6.0]).unwrap();
        assert_eq!(c.overlap, vec![0.25]);
        assert_eq!(c.overlap_union, vec![1.0]);
    }

    #[test]
    fn silent_noise_never_overlaps() {
        let x = rep(2, 3, vec![1.0, 0.5, 0.2, 0.9, 0.0, 0.3]);
        let v = rep(2, 3, vec![0.0; 6]);
        let c = overlap_curve(&x, &v, &threshold_sweep(-60.0, 10.0)).unwrap();
        assert!(c.overlap.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(InnerRepresentation::new(2, 2, vec![1.0, -0.1, 0.0, 0.0]).is_err());
        assert!(InnerRepresentation::new(2, 2, vec![1.0]).is_err());
        let a = rep(1, 2, vec![1.0, 1.0]);
        let b = rep(2, 1, vec![1.0, 1.0]);
        assert!(overlap_curve(&a, &b, &[-3.0]).is_err());
        assert!(overlap_curve(&a, &a, &[3.0]).is_err());
    }

    #[test]
    fn sweep_endpoints() {
        assert_eq!(threshold_sweep(-40.0, 10.0), vec![0.0, -10.0, -20.0, -30.0, -40.0]);
    }
}
