//! Objective scores and test-set evaluation.

mod stoi;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::MODEL_RATE;
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::models::{infer, ForwardOptions, SeparationModel};

pub use stoi::{stoi, to_stoi_rate, BANDS, BETA_DB, DYN_RANGE_DB, FRAME, MIN_FREQ, NFFT, SEGMENT, STOI_RATE};

/// Scale-invariant SDR in dB. An exactly zero residual gives `+inf`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Metric(format!(
            "si-sdr inputs differ in length ({} vs {})",
            estimate.len(),
            reference.len()
        )));
    }
    let centre = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|v| v - m).collect::<Vec<f64>>()
    };
    let (a, s) = (centre(estimate), centre(reference));
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let aa: f64 = a.iter().map(|v| v * v).sum();
    if ss == 0.0 || aa == 0.0 {
        return Err(Error::Metric("si-sdr of a zero signal is undefined".into()));
    }
    let alpha = a.iter().zip(&s).map(|(x, y)| x * y).sum::<f64>() / ss;
    let target = alpha * alpha * ss;
    let err: f64 = a.iter().zip(&s).map(|(x, y)| (x - alpha * y).powi(2)).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / err).log10())
}

/// Scores of one test file. For two sources each value is the mean over
/// the permutation-matched pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileScore {
    pub file_id: String,
    pub noisy_stoi: f64,
    pub proc_stoi: f64,
    pub noisy_sisdr: f64,
    pub proc_sisdr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub files: usize,
    pub noisy_stoi: f64,
    pub proc_stoi: f64,
    /// Means over files with a finite value.
    pub noisy_sisdr: f64,
    pub proc_sisdr: f64,
    /// Files left out of the SI-SDR means because the value was `+inf`.
    pub noisy_sisdr_excluded: usize,
    pub proc_sisdr_excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<FileScore>,
    pub summary: Summary,
}

fn finite_mean(vals: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in vals {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            skipped += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, skipped)
}

impl Report {
    pub fn new(rows: Vec<FileScore>) -> Self {
        let n = rows.len().max(1) as f64;
        let (noisy_sisdr, noisy_ex) = finite_mean(rows.iter().map(|r| r.noisy_sisdr));
        let (proc_sisdr, proc_ex) = finite_mean(rows.iter().map(|r| r.proc_sisdr));
        let summary = Summary {
            files: rows.len(),
            noisy_stoi: rows.iter().map(|r| r.noisy_stoi).sum::<f64>() / n,
            proc_stoi: rows.iter().map(|r| r.proc_stoi).sum::<f64>() / n,
            noisy_sisdr,
            proc_sisdr,
            noisy_sisdr_excluded: noisy_ex,
            proc_sisdr_excluded: proc_ex,
        };
        Self { rows, summary }
    }

    pub const CSV_HEADER: &'static str = "file_id,noisy_stoi,proc_stoi,noisy_sisdr,proc_sisdr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.file_id, r.noisy_stoi, r.proc_stoi, r.noisy_sisdr, r.proc_sisdr);
        }
        let m = &self.summary;
        let _ = writeln!(s, "mean,{},{},{},{}", m.noisy_stoi, m.proc_stoi, m.noisy_sisdr, m.proc_sisdr);
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let text = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::json("report summary", e))?;
        std::fs::write(json, text + "\n").map_err(|e| Error::io(json, e))
    }
}

/// Scores one example given the processed outputs.
pub fn score_example(file_id: &str, ex: &Example, outputs: &[Vec<f64>]) -> Result<FileScore> {
    let rate = ex.mixture.sample_rate;
    let srcs: Vec<&[f64]> = ex.sources.iter().map(|s| s.samples.as_slice()).collect();
    if outputs.len() != srcs.len() {
        return Err(Error::Data(format!(
            "{file_id}: {} outputs for {} sources",
            outputs.len(),
            srcs.len()
        )));
    }
    let y = &ex.mixture.samples;
    let k = srcs.len() as f64;
    let mut noisy_stoi = 0.0;
    let mut noisy_sisdr = 0.0;
    for s in &srcs {
        noisy_stoi += stoi(y, s, rate)? / k;
        noisy_sisdr += si_sdr(y, s)? / k;
    }
    // Output order that maximizes the mean SI-SDR against the true sources.
    let perm: Vec<usize> = if srcs.len() == 2 {
        let ident = si_sdr(&outputs[0], srcs[0])? + si_sdr(&outputs[1], srcs[1])?;
        let swap = si_sdr(&outputs[1], srcs[0])? + si_sdr(&outputs[0], srcs[1])?;
        if swap > ident {
            vec![1, 0]
        } else {
            vec![0, 1]
        }
    } else {
        (0..srcs.len()).collect()
    };
    let mut proc_stoi = 0.0;
    let mut proc_sisdr = 0.0;
    for (i, s) in srcs.iter().enumerate() {
        let o = &outputs[perm[i]];
        proc_stoi += stoi(o, s, rate)? / k;
        proc_sisdr += si_sdr(o, s)? / k;
    }
    Ok(FileScore {
        file_id: file_id.to_string(),
        noisy_stoi,
        proc_stoi,
        noisy_sisdr,
        proc_sisdr,
    })
}

/// Scores every example after passing its mixture through `process`.
pub fn evaluate_with<P>(ids: &[String], examples: &[Example], process: P) -> Result<Report>
where
    P: Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Sync,
{
    if ids.len() != examples.len() {
        return Err(Error::Data(format!("{} ids for {} examples", ids.len(), examples.len())));
    }
    let rows = ids
        .par_iter()
        .zip(examples)
        .map(|(id, ex)| {
            if ex.mixture.sample_rate != MODEL_RATE {
                return Err(Error::Data(format!("{id}: expected {MODEL_RATE} Hz, got {}", ex.mixture.sample_rate)));
            }
            let outs = process(&ex.mixture.samples)?;
            score_example(id, ex, &outs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report::new(rows))
}

pub fn evaluate(model: &dyn SeparationModel, ids: &[String], examples: &[Example]) -> Result<Report> {
    if let Some(ex) = examples.iter().find(|e| e.sources.len() != model.num_outputs()) {
        return Err(Error::Data(format!(
            "model estimates {} sources but test examples have {}",
            model.num_outputs(),
            ex.sources.len()
        )));
    }
    evaluate_with(ids, examples, |y| infer(model, y, &ForwardOptions::default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_negated_estimates_are_infinite() {
        let s = [0.1, -0.4, 0.3, 0.8, -0.2];
        assert_eq!(si_sdr(&s, &s).unwrap(), f64::INFINITY);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(si_sdr(&neg, &s).unwrap(), f64::INFINITY);
    }

    #[test]
    fn orthogonal_equal_power_noise_is_zero_db() {
        let n = 8000;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 50.0 * i as f64 / n as f64).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 73.0 * i as f64 / n as f64).sin()).collect();
        let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&y, &x).unwrap().abs() < 1e-9);
    }

    #[test]
    fn zero_signals_are_errors() {
        assert!(si_sdr(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(si_sdr(&[1.0, 2.0, 3.0, 4.0], &[2.0; 4]).is_err());
        assert!(si_sdr(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_means_and_exclusions() {
        let row = |id: &str, p: f64| FileScore {
            file_id: id.into(),
            noisy_stoi: 0.5,
            proc_stoi: 0.75,
            noisy_sisdr: 0.0,
            proc_sisdr: p,
        };
        let r = Report::new(vec![row("a", 10.0), row("b", f64::INFINITY), row("c", 20.0)]);
        assert_eq!(r.summary.proc_sisdr, 15.0);
        assert_eq!(r.summary.proc_sisdr_excluded, 1);
        assert_eq!(r.summary.noisy_sisdr_excluded, 0);
        let csv = r.to_csv();
        assert!(csv.starts_with("file_id,noisy_stoi,proc_stoi,noisy_sisdr,proc_sisdr\n"));
        assert!(csv.contains("\nb,0.5,0.75,0,inf\n"));
        assert!(csv.ends_with("mean,0.5,0.75,0,15\n"));
    }
}
