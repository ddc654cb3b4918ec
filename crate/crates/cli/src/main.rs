use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tasnet_cli::{cmd_analyze, cmd_evaluate, cmd_process, cmd_train, default_model, describe, load_model, TrainOverrides};
use tasnet_core::analysis::{threshold_sweep, StftConfig, WindowKind};
use tasnet_core::dataset::SnrDraw;
use tasnet_core::pipeline::{prepare, Condition, PrepareOptions, DATA_ROOT_VAR};
use tasnet_core::synth::{write_synth_corpus, SynthCorpusOptions};
use tasnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tasnet", version, about = "Time-domain speech enhancement and separation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataRootArg {
    /// Prepared data directory.
    #[arg(long, env = DATA_ROOT_VAR, default_value = "data")]
    data_root: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic speech corpus with a speaker listing and noise recordings.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        speakers_per_gender: usize,
        #[arg(long, default_value_t = 10)]
        utterances: usize,
        #[arg(long, default_value_t = 60.0)]
        noise_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Preprocess a corpus and write the manifest, noise banks and mixture specs.
    Prepare {
        /// Corpus with `<speaker>/*.wav` and `speakers.txt`.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        root: DataRootArg,
        /// ssn, wsjf, mix, 2bal or 2mix; repeatable.
        #[arg(long = "condition", required = true)]
        conditions: Vec<String>,
        /// Examples per split; --train-count etc. override it per split.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long, default_value = "-10:10", allow_hyphen_values = true)]
        snr_train: String,
        #[arg(long, default_value = "0", allow_hyphen_values = true)]
        snr_test: String,
        /// Noise recordings appended to the ssn bank for the mix condition.
        #[arg(long = "noise")]
        noise_files: Vec<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        ssn_seconds: f64,
        /// Speaker fractions train:val:test.
        #[arg(long, default_value = "8:1:1")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        root: DataRootArg,
        #[arg(long)]
        out: PathBuf,
        /// Encoder window in ms (tasnet), L = 8 * ms.
        #[arg(long)]
        window_ms: Option<f64>,
        /// Encoder hop in ms (tasnet), K = 8 * ms.
        #[arg(long)]
        hop_ms: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Enhance one 8 kHz wav with a single-output checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Force every mask to one (encoder-decoder passthrough).
        #[arg(long)]
        mask_identity: bool,
    },
    /// Separate one 8 kHz wav into two files with a two-output checkpoint.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output path; give it twice.
        #[arg(long = "output", required = true)]
        outputs: Vec<PathBuf>,
        #[arg(long)]
        mask_identity: bool,
    },
    /// Score a checkpoint on a spec file.
    Evaluate {
        /// Omit with --identity to score the unprocessed mixtures.
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        /// Spec file, relative to the data root unless absolute.
        #[arg(long)]
        specs: PathBuf,
        #[command(flatten)]
        root: DataRootArg,
        /// Output stem; writes <stem>.csv and <stem>.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inner-domain overlap of target/noise pairs, learned encoder vs STFT.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lines of `target.wav noise.wav noise_type`.
        #[arg(long)]
        pairs: PathBuf,
        /// Output stem; writes <stem>.csv and <stem>_means.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        stft_window: usize,
        #[arg(long, default_value_t = 8)]
        stft_hop: usize,
        #[arg(long, default_value_t = 256)]
        stft_dft: usize,
        #[arg(long, default_value_t = -60.0, allow_hyphen_values = true)]
        lowest_db: f64,
        #[arg(long, default_value_t = 1.0)]
        step_db: f64,
    },
    /// Parameter count and receptive field of a checkpoint or a default model.
    Inspect {
        #[arg(long, conflicts_with = "kind")]
        checkpoint: Option<PathBuf>,
        /// tasnet or unet (default configuration).
        #[arg(long)]
        kind: Option<String>,
    },
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad split {s:?}, expected train:val:test")))?;
    match parts[..] {
        [a, b, c] if a > 0.0 && b >= 0.0 && c >= 0.0 => Ok((a, b, c)),
        _ => Err(Error::Config(format!("bad split {s:?}, expected train:val:test"))),
    }
}

fn out_paths(p: &Path) -> String {
    p.display().to_string()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthCorpus {
            out,
            speakers_per_gender,
            utterances,
            noise_seconds,
            seed,
        } => {
            let opts = SynthCorpusOptions {
                speakers_per_gender,
                utterances_per_speaker: utterances,
                noise_seconds,
                seed,
            };
            let paths = write_synth_corpus(&out, &opts)?;
            println!("wrote {} utterances to {}", paths.len(), out_paths(&out));
        }
        Cmd::Prepare {
            corpus,
            root,
            conditions,
            count,
            train_count,
            val_count,
            test_count,
            snr_train,
            snr_test,
            noise_files,
            ssn_seconds,
            split,
            seed,
        } => {
            let mut opts = PrepareOptions::new(corpus, root.data_root);
            opts.conditions = conditions.iter().map(|c| Condition::parse(c)).collect::<Result<_>>()?;
            if let Some(c) = count {
                opts.counts = [c; 3];
            }
            for (i, c) in [train_count, val_count, test_count].into_iter().enumerate() {
                if let Some(c) = c {
                    opts.counts[i] = c;
                }
            }
            opts.snr_train = SnrDraw::parse(&snr_train)?;
            opts.snr_test = SnrDraw::parse(&snr_test)?;
            opts.noise_files = noise_files;
            opts.ssn_seconds = ssn_seconds;
            opts.fractions = parse_fractions(&split)?;
            opts.seed = seed;
            let p = prepare(&opts)?;
            println!("manifest: {}", out_paths(&p.manifest));
            for (c, s, path) in p.specs {
                println!("{c}/{s}: {}", out_paths(&path));
            }
        }
        Cmd::Train {
            config,
            root,
            out,
            window_ms,
            hop_ms,
            seed,
            max_epochs,
            batch_size,
        } => {
            let o = TrainOverrides {
                window_ms,
                hop_ms,
                seed,
                max_epochs,
                batch_size,
            };
            let r = cmd_train(&config, &root.data_root, &out, &o)?;
            println!(
                "best epoch {} of {}, validation loss {:.4}; checkpoint in {}",
                r.best_epoch,
                r.log.len(),
                r.best_val_loss,
                out_paths(&out)
            );
        }
        Cmd::Enhance {
            checkpoint,
            input,
            output,
            mask_identity,
        } => cmd_process(&checkpoint, &input, &[output], mask_identity)?,
        Cmd::Separate {
            checkpoint,
            input,
            outputs,
            mask_identity,
        } => {
            if outputs.len() != 2 {
                return Err(Error::Config(format!("separate writes 2 files, got {} --output", outputs.len())));
            }
            cmd_process(&checkpoint, &input, &outputs, mask_identity)?
        }
        Cmd::Evaluate {
            checkpoint,
            identity: _,
            specs,
            root,
            out,
        } => {
            let r = cmd_evaluate(checkpoint.as_deref(), &specs, &root.data_root, &out)?;
            let s = &r.summary;
            println!(
                "{} files: STOI {:.3} -> {:.3}, SI-SDR {:.2} -> {:.2} dB",
                s.files, s.noisy_stoi, s.proc_stoi, s.noisy_sisdr, s.proc_sisdr
            );
        }
        Cmd::Analyze {
            checkpoint,
            pairs,
            out,
            stft_window,
            stft_hop,
            stft_dft,
            lowest_db,
            step_db,
        } => {
            if !(step_db > 0.0 && lowest_db <= 0.0) {
                return Err(Error::Config("need --step-db > 0 and --lowest-db <= 0".into()));
            }
            let stft = StftConfig {
                window: stft_window,
                hop: stft_hop,
                dft_size: stft_dft,
                kind: WindowKind::Hann,
            };
            let study = cmd_analyze(&checkpoint, &pairs, &stft, &threshold_sweep(lowest_db, step_db), &out)?;
            println!("{} curves written to {}", study.curves.len(), out_paths(&out));
        }
        Cmd::Inspect { checkpoint, kind } => {
            let model = match (checkpoint, kind) {
                (Some(c), _) => load_model(&c)?,
                (None, Some(k)) => default_model(&k)?,
                (None, None) => return Err(Error::Config("give --checkpoint or --kind".into())),
            };
            println!("{}", describe(model.as_ref()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[config]: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
