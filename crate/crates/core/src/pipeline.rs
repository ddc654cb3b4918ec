//! Corpus preparation on disk and loading of prepared data.
//!
//! A prepared data root holds
//! `manifest.jsonl`, `audio/<speaker>/<id>.wav`, `noise/<name>.wav` and
//! `specs/<condition>/<split>.jsonl`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::{preprocess, read_wav, resample, write_wav_as, WavEncoding, Waveform, MODEL_RATE};
use crate::dataset::{
    assign_splits, build_pairs, enhancement_specs, long_term_spectrum, read_specs, render_all, speech_shaped_noise,
    write_specs, Corpus, Example, Gender, GenderMix, Manifest, ManifestEntry, MixtureSpec, NoiseBank, NoiseRegistry,
    SnrDraw, Split,
};
use crate::error::{Error, Result};
use crate::rng::{item_seed, substream_seed, DATASET};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEAKER_LISTING: &str = "speakers.txt";
/// Environment variable overriding the data root.
pub const DATA_ROOT_VAR: &str = "TASNET_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Ssn,
    Wsjf,
    Mix,
    TwoBal,
    TwoMix,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Ssn,
        Condition::Wsjf,
        Condition::Mix,
        Condition::TwoBal,
        Condition::TwoMix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Ssn => "ssn",
            Condition::Wsjf => "wsjf",
            Condition::Mix => "mix",
            Condition::TwoBal => "2bal",
            Condition::TwoMix => "2mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?} (ssn, wsjf, mix, 2bal, 2mix)")))
    }

    pub fn two_talker(self) -> bool {
        matches!(self, Condition::TwoBal | Condition::TwoMix)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub conditions: Vec<Condition>,
    /// Examples per split (train, val, test).
    pub counts: [usize; 3],
    pub snr_train: SnrDraw,
    pub snr_test: SnrDraw,
    /// Speaker fractions (train, val, test).
    pub fractions: (f64, f64, f64),
    /// Recordings concatenated with the ssn bank for the mix condition.
    pub noise_files: Vec<PathBuf>,
    pub ssn_seconds: f64,
    pub seed: u64,
}

impl PrepareOptions {
    pub fn new(corpus: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            out: out.into(),
            conditions: vec![Condition::Ssn],
            counts: [20000, 2000, 3000],
            snr_train: SnrDraw::Uniform(-10.0, 10.0),
            snr_test: SnrDraw::Fixed(0.0),
            fractions: (0.8, 0.1, 0.1),
            noise_files: Vec::new(),
            ssn_seconds: 60.0,
            seed: 0,
        }
    }
}

/// Speaker genders from a `speaker gender` listing; `#` starts a comment.
pub fn read_speaker_listing(path: &Path) -> Result<BTreeMap<String, Gender>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(spk), Some(g), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!("{}:{}: expected `speaker gender`", path.display(), n + 1)));
        };
        if out.insert(spk.to_string(), Gender::parse(g)?).is_some() {
            return Err(Error::Data(format!("{}: speaker {spk:?} listed twice", path.display())));
        }
    }
    Ok(out)
}

fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub manifest: PathBuf,
    /// Written spec files by condition and split.
    pub specs: Vec<(Condition, Split, PathBuf)>,
}

pub fn spec_path(root: &Path, condition: Condition, split: Split) -> PathBuf {
    root.join("specs").join(condition.as_str()).join(format!("{split}.jsonl"))
}

/// Preprocesses the corpus, writes the manifest, noise banks and specs.
pub fn prepare(opts: &PrepareOptions) -> Result<Prepared> {
    let listing = opts.corpus.join(SPEAKER_LISTING);
    if !listing.exists() {
        return Err(Error::Data(format!(
            "{} is missing; speaker genders are needed to split speakers and build mixtures",
            listing.display()
        )));
    }
    let speakers = read_speaker_listing(&listing)?;
    let splits = assign_splits(&speakers, opts.fractions, substream_seed(opts.seed, DATASET));

    let mut jobs = Vec::new();
    for (spk, &gender) in &speakers {
        for p in sorted_wavs(&opts.corpus.join(spk))? {
            let id = stem(&p);
            let entry = ManifestEntry {
                path: format!("audio/{spk}/{id}.wav"),
                id,
                speaker: spk.clone(),
                gender,
                split: splits[spk],
            };
            jobs.push((p, entry));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Data(format!("no wav files under {}", opts.corpus.display())));
    }
    for spk in speakers.keys() {
        create_dir(&opts.out.join("audio").join(spk))?;
    }
    let processed: Vec<(String, Waveform)> = jobs
        .par_iter()
        .map(|(src, e)| {
            let w = preprocess(&read_wav(src)?)?;
            // Stored as float so the rendered mixtures see the exact processed samples.
            write_wav_as(opts.out.join(&e.path), &w, WavEncoding::Float32)?;
            Ok((e.id.clone(), read_wav(opts.out.join(&e.path))?))
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(jobs.into_iter().map(|(_, e)| e).collect())?;
    let manifest_path = opts.out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    let corpus = Corpus::from_audio(manifest, processed.into_iter().collect())?;

    let needs_ssn = opts.conditions.iter().any(|c| matches!(c, Condition::Ssn | Condition::Mix));
    if needs_ssn {
        create_dir(&opts.out.join("noise"))?;
        let train: Vec<&Waveform> = corpus
            .manifest()
            .split(Split::Train)
            .map(|e| corpus.audio(&e.id))
            .collect::<Result<_>>()?;
        let ltas = long_term_spectrum(train)?;
        let mut rng = crate::rng::substream(opts.seed, "ssn");
        let len = (opts.ssn_seconds * MODEL_RATE as f64) as usize;
        let ssn = Waveform::new(speech_shaped_noise(&ltas, len, &mut rng), MODEL_RATE);
        write_wav_as(opts.out.join("noise/ssn.wav"), &ssn, WavEncoding::Float32)?;
        if opts.conditions.contains(&Condition::Mix) {
            let mut samples = ssn.samples.clone();
            for p in &opts.noise_files {
                samples.extend(resample(&read_wav(p)?, MODEL_RATE)?.samples);
            }
            write_wav_as(opts.out.join("noise/mix.wav"), &Waveform::new(samples, MODEL_RATE), WavEncoding::Float32)?;
        }
    }
    let noises = noise_registry(&opts.out)?;

    let mut written = Vec::new();
    for &cond in &opts.conditions {
        create_dir(&opts.out.join("specs").join(cond.as_str()))?;
        for (i, split) in Split::ALL.into_iter().enumerate() {
            let seed = item_seed(opts.seed, &format!("specs/{cond}"), i as u64);
            let count = opts.counts[i];
            let snr = if split == Split::Train { opts.snr_train } else { opts.snr_test };
            let specs = match cond {
                Condition::TwoBal => build_pairs(corpus.manifest(), split, count, GenderMix::BALANCED, seed)?,
                Condition::TwoMix => build_pairs(corpus.manifest(), split, count, GenderMix::WSJ0_2MIX, seed)?,
                _ => enhancement_specs(corpus.manifest(), split, noises.get(cond.as_str())?, count, snr, seed)?,
            };
            let p = spec_path(&opts.out, cond, split);
            write_specs(&p, &specs)?;
            written.push((cond, split, p));
        }
    }
    Ok(Prepared {
        manifest: manifest_path,
        specs: written,
    })
}

/// Built-in noise sources plus one bank per `noise/*.wav` under `root`.
pub fn noise_registry(root: &Path) -> Result<NoiseRegistry> {
    let mut r = NoiseRegistry::with_builtin();
    let dir = root.join("noise");
    if dir.is_dir() {
        for p in sorted_wavs(&dir)? {
            let w = resample(&read_wav(&p)?, MODEL_RATE)?;
            r.register(Box::new(NoiseBank::new(stem(&p), w.samples)?));
        }
    }
    Ok(r)
}

/// Prepared data: corpus audio and noise sources.
pub struct DataRoot {
    pub root: PathBuf,
    pub corpus: Corpus,
    pub noises: NoiseRegistry,
}

impl DataRoot {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            corpus: Corpus::load(manifest, root)?,
            noises: noise_registry(root)?,
        })
    }

    /// Renders a spec file; ids are the zero-padded spec indices.
    pub fn examples(&self, specs: &Path) -> Result<(Vec<String>, Vec<MixtureSpec>, Vec<Example>)> {
        let specs = read_specs(specs)?;
        let examples = render_all(&specs, &self.corpus, &self.noises)?;
        let ids = (0..specs.len()).map(|i| format!("{i:05}")).collect();
        Ok((ids, specs, examples))
    }
}
