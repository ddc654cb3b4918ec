//! Command implementations behind the `tasnet` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasnet_core::analysis::{run_overlap_study, LearnedEncoder, OverlapStudy, Representation, Stft, StftConfig, StudyPair};
use tasnet_core::audio::{read_wav, write_wav_as, WavEncoding, Waveform, MODEL_RATE};
use tasnet_core::dataset::resolve;
use tasnet_core::metrics::{evaluate, evaluate_with, Report};
use tasnet_core::models::{
    infer, load_checkpoint, save_checkpoint, ForwardOptions, ModelRegistry, RfReport, SeparationModel, TasNet, TasNetConfig,
    UNet, UNetConfig,
};
use tasnet_core::pipeline::DataRoot;
use tasnet_core::training::{train, write_log, TrainConfig, TrainOutcome};
use tasnet_core::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Contents of a `train` config file. Spec paths are relative to the data root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_specs: String,
    pub val_specs: String,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Flags that override keys of the config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub window_ms: Option<f64>,
    pub hop_ms: Option<f64>,
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if self.window_ms.is_some() || self.hop_ms.is_some() {
            if cfg.model.kind != TasNet::KIND {
                return Err(Error::Config(format!(
                    "--window-ms/--hop-ms apply to tasnet models, not {:?}",
                    cfg.model.kind
                )));
            }
            let t = TasNetConfig::from_json(&cfg.model.config)?;
            let w = self.window_ms.unwrap_or(t.window as f64 / 8.0);
            let h = self.hop_ms.unwrap_or(t.hop as f64 / 8.0);
            let t = t.with_window_hop_ms(w, h)?;
            cfg.model.config = serde_json::to_value(&t).map_err(|e| Error::json("tasnet config", e))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.max_epochs {
            cfg.max_epochs = Some(m);
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()
    }
}

/// Trains from a config, writing `model.ckpt` (best epoch) and `train_log.csv` to `out`.
pub fn cmd_train(config: &Path, data_root: &Path, out: &Path, overrides: &TrainOverrides) -> Result<TrainOutcome> {
    let mut run = RunConfig::read(config)?;
    overrides.apply(&mut run.train)?;
    let data = DataRoot::open(data_root)?;
    let (_, _, train_set) = data.examples(&resolve(data_root, &run.train_specs))?;
    let (_, _, val_set) = data.examples(&resolve(data_root, &run.val_specs))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let registry = ModelRegistry::standard();
    let mut rows = Vec::new();
    let outcome = train(&run.train, &registry, &train_set, &val_set, &mut |row, model, improved| {
        rows.push(row.clone());
        write_log(&out.join(LOG_FILE), &rows)?;
        if improved {
            save_checkpoint(&ckpt, model, serde_json::json!({ "epoch": row.epoch, "val_loss": row.val_loss }))?;
        }
        Ok(())
    })?;
    let meta = serde_json::json!({
        "epoch": outcome.best_epoch,
        "val_loss": outcome.best_val_loss,
        "train": run.train,
        "steps": outcome.steps,
        "clipped_steps": outcome.clipped_steps,
    });
    save_checkpoint(&ckpt, outcome.model.as_ref(), meta)?;
    write_log(&out.join(LOG_FILE), &outcome.log)?;
    Ok(outcome)
}

pub fn load_model(checkpoint: &Path) -> Result<Box<dyn SeparationModel>> {
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", checkpoint.display())));
    }
    Ok(load_checkpoint(checkpoint, &ModelRegistry::standard())?.0)
}

fn read_model_rate(path: &Path) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate != MODEL_RATE {
        return Err(Error::Data(format!(
            "{}: models run at {MODEL_RATE} Hz, input is {} Hz",
            path.display(),
            w.sample_rate
        )));
    }
    Ok(w)
}

/// Runs a checkpoint on one wav and writes one file per estimated source.
/// `mask_identity` replaces every mask by one (analysis-synthesis passthrough).
pub fn cmd_process(checkpoint: &Path, input: &Path, outputs: &[PathBuf], mask_identity: bool) -> Result<()> {
    let model = load_model(checkpoint)?;
    if model.num_outputs() != outputs.len() {
        return Err(Error::Model(format!(
            "checkpoint estimates {} source(s); this command writes {}",
            model.num_outputs(),
            outputs.len()
        )));
    }
    let y = read_model_rate(input)?;
    let opts = ForwardOptions {
        mask_override: mask_identity.then_some(1.0),
        ..Default::default()
    };
    let est = infer(model.as_ref(), &y.samples, &opts)?;
    for (x, p) in est.into_iter().zip(outputs) {
        write_wav_as(p, &Waveform::new(x, MODEL_RATE), WavEncoding::Float32)?;
    }
    Ok(())
}

/// Scores a checkpoint (or the unprocessed mixture when `checkpoint` is
/// `None`) on a spec file and writes `<stem>.csv` and `<stem>.json`.
pub fn cmd_evaluate(checkpoint: Option<&Path>, specs: &Path, data_root: &Path, out_stem: &Path) -> Result<Report> {
    let data = DataRoot::open(data_root)?;
    let (ids, _, examples) = data.examples(&resolve(data_root, &specs.to_string_lossy()))?;
    let report = match checkpoint {
        Some(c) => evaluate(load_model(c)?.as_ref(), &ids, &examples)?,
        None => {
            let k = examples.first().map_or(1, |e| e.sources.len());
            evaluate_with(&ids, &examples, |y| Ok(vec![y.to_vec(); k]))?
        }
    };
    if let Some(dir) = out_stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.write(&out_stem.with_extension("csv"), &out_stem.with_extension("json"))?;
    Ok(report)
}

/// One line of a pair list: `target.wav noise.wav noise_type`, paths
/// relative to the list's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLine {
    pub target: PathBuf,
    pub noise: PathBuf,
    pub noise_type: String,
}

pub fn read_pair_list(path: &Path) -> Result<Vec<PairLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [t, v, kind] = parts[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected `target.wav noise.wav noise_type`",
                path.display(),
                n + 1
            )));
        };
        out.push(PairLine {
            target: resolve(base, t),
            noise: resolve(base, v),
            noise_type: kind.to_string(),
        });
    }
    Ok(out)
}

fn file_id(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Overlap curves for every listed pair under the checkpoint's encoder and
/// an STFT; writes `<stem>.csv` and `<stem>_means.csv`.
pub fn cmd_analyze(
    checkpoint: &Path,
    pairs: &Path,
    stft: &StftConfig,
    thresholds: &[f64],
    out_stem: &Path,
) -> Result<OverlapStudy> {
    let model = load_model(checkpoint)?;
    let lines = read_pair_list(pairs)?;
    let audio: Vec<(Waveform, Waveform)> = lines
        .iter()
        .map(|l| Ok((read_model_rate(&l.target)?, read_model_rate(&l.noise)?)))
        .collect::<Result<_>>()?;
    let study_pairs: Vec<StudyPair> = lines
        .iter()
        .zip(&audio)
        .map(|(l, (x, v))| StudyPair {
            target_id: file_id(&l.target),
            noise_id: file_id(&l.noise),
            noise_type: l.noise_type.clone(),
            target: &x.samples,
            noise: &v.samples,
        })
        .collect();
    let enc = LearnedEncoder(model.as_ref());
    let stft = Stft(stft.clone());
    let reps: [&dyn Representation; 2] = [&enc, &stft];
    let study = run_overlap_study(&study_pairs, &reps, thresholds)?;
    let stem = out_stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    study.write(&out_stem.with_extension("csv"), &out_stem.with_file_name(format!("{stem}_means.csv")))?;
    Ok(study)
}

/// Parameter count and receptive-field report of a model.
pub fn describe(model: &dyn SeparationModel) -> String {
    format!(
        "{} with {} parameters ({} estimated source(s))\n{}",
        model.kind(),
        model.param_count(),
        model.num_outputs(),
        RfReport::of(model)
    )
}

/// Builds the default configuration of a registered model kind.
pub fn default_model(kind: &str) -> Result<Box<dyn SeparationModel>> {
    let cfg = match kind {
        k if k == TasNet::KIND => serde_json::to_value(TasNetConfig::default()),
        k if k == UNet::KIND => serde_json::to_value(UNetConfig::default()),
        k => return Err(Error::Config(format!("unknown model kind {k:?}"))),
    }
    .map_err(|e| Error::json("default config", e))?;
    ModelRegistry::standard().build(kind, &cfg, 0)
}
