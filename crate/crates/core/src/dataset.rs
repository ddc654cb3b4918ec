//! Corpus manifests, mixture recipes and their rendering into
//! noisy-speech and two-talker examples.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, Waveform, MODEL_RATE, UTTERANCE_SECONDS};
use crate::dsp::{welch, C64};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" => Ok(Gender::M),
            "F" | "f" => Ok(Gender::F),
            other => Err(Error::Data(format!("unknown gender {other:?} (expected M or F)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub speaker: String,
    pub gender: Gender,
    pub split: Split,
}

/// Utterance index. Ids are unique and no speaker appears in two splits.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut speaker_split: HashMap<&str, Split> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate utterance id {:?}", e.id)));
            }
            match speaker_split.get(e.speaker.as_str()) {
                Some(&s) if s != e.split => {
                    return Err(Error::Data(format!(
                        "speaker {:?} appears in both {s} and {}",
                        e.speaker, e.split
                    )))
                }
                _ => {
                    speaker_split.insert(&e.speaker, e.split);
                }
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&ManifestEntry> {
        self.index
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Data(format!("utterance {id:?} not in manifest")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Speakers of one gender in one split, each with its utterances.
    pub fn speakers(&self, split: Split, gender: Gender) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in self.split(split).filter(|e| e.gender == gender) {
            out.entry(e.speaker.as_str()).or_default().push(e);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }
}

/// Recipe for one example. One target means noisy speech at `snr_db`;
/// two targets mean a two-talker mixture at power ratio `ratio_db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub targets: Vec<String>,
    pub noise: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_db: Option<f64>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn num_sources(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("spec {:?}: {m}", self.targets)));
        match (self.targets.len(), self.snr_db, self.ratio_db) {
            (1, Some(s), None) if s.is_finite() => Ok(()),
            (2, None, Some(r)) if r.is_finite() => {
                if self.targets[0] == self.targets[1] {
                    bad("the two targets must be distinct utterances".into())
                } else if self.noise != NO_NOISE {
                    bad(format!("two-talker mixtures take no noise, got {:?}", self.noise))
                } else {
                    Ok(())
                }
            }
            (1, _, _) => bad("one target needs a finite snr_db and no ratio_db".into()),
            (2, _, _) => bad("two targets need a finite ratio_db and no snr_db".into()),
            (n, _, _) => bad(format!("{n} targets (expected 1 or 2)")),
        }
    }
}

pub fn read_specs(path: &Path) -> Result<Vec<MixtureSpec>> {
    let specs: Vec<MixtureSpec> = read_jsonl(path)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn write_specs(path: &Path, specs: &[MixtureSpec]) -> Result<()> {
    write_jsonl(path, specs)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|e| Error::json(path.display().to_string(), e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Manifest plus the preprocessed audio of every entry.
pub struct Corpus {
    manifest: Manifest,
    audio: HashMap<String, Arc<Waveform>>,
}

impl Corpus {
    pub fn from_audio(manifest: Manifest, audio: HashMap<String, Waveform>) -> Result<Self> {
        for e in manifest.entries() {
            if !audio.contains_key(&e.id) {
                return Err(Error::Data(format!("no audio for utterance {:?}", e.id)));
            }
        }
        let audio = audio.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        Ok(Self { manifest, audio })
    }

    /// Loads every entry, resolving relative paths against `root`. The audio
    /// must already be at the model rate and utterance length.
    pub fn load(manifest: Manifest, root: &Path) -> Result<Self> {
        let expect = (UTTERANCE_SECONDS * MODEL_RATE as f64) as usize;
        let loaded: Vec<(String, Waveform)> = manifest
            .entries()
            .par_iter()
            .map(|e| {
                let p = resolve(root, &e.path);
                let w = read_wav(&p)?;
                if w.sample_rate != MODEL_RATE || w.len() != expect {
                    return Err(Error::Data(format!(
                        "{}: expected {expect} samples at {MODEL_RATE} Hz, got {} at {} Hz (run prepare first)",
                        p.display(),
                        w.len(),
                        w.sample_rate
                    )));
                }
                Ok((e.id.clone(), w))
            })
            .collect::<Result<_>>()?;
        Self::from_audio(manifest, loaded.into_iter().collect())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn audio(&self, id: &str) -> Result<&Waveform> {
        self.audio
            .get(id)
            .map(|a| a.as_ref())
            .ok_or_else(|| Error::Data(format!("no audio for utterance {id:?}")))
    }
}

pub fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(sum x^2 / sum v^2)`.
pub fn measured_snr(x: &[f64], v: &[f64]) -> f64 {
    10.0 * (energy(x) / energy(v)).log10()
}

/// Scales `v` so that the energy ratio of `x` over the result is `snr_db`.
pub fn scale_to_snr(x: &Waveform, v: &Waveform, snr_db: f64) -> Result<Waveform> {
    if x.len() != v.len() {
        return Err(Error::Data(format!("length mismatch: {} vs {}", x.len(), v.len())));
    }
    let (ex, ev) = (x.energy(), v.energy());
    if ex == 0.0 || ev == 0.0 {
        return Err(Error::Data("cannot set the SNR of a zero-energy signal".into()));
    }
    let g = (ex / ev * 10f64.powf(-snr_db / 10.0)).sqrt();
    Ok(Waveform::new(v.samples.iter().map(|s| g * s).collect(), v.sample_rate))
}

/// A rendered example: the mixture, its clean sources in target order and
/// the scaled additive noise if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
}

pub const NO_NOISE: &str = "none";

/// A kind of additive interference for single-target examples.
pub trait NoiseSource: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `target` may be paired with this noise. Competing-speaker
    /// noise only takes male targets so that the two talkers stay
    /// distinguishable without permutation handling.
    fn accepts_target(&self, _target: &ManifestEntry) -> bool {
        true
    }

    /// `len` noise samples for `target`, or `None` for a clean example.
    fn draw(
        &self,
        target: &ManifestEntry,
        len: usize,
        corpus: &Corpus,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Vec<f64>>>;
}

/// Long noise recording from which random slices are cut.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    name: String,
    samples: Vec<f64>,
    tiling: bool,
}

impl NoiseBank {
    pub fn new(name: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty noise bank".into()));
        }
        Ok(Self {
            name: name.into(),
            samples,
            tiling: true,
        })
    }

    /// Disallow wrapping past the end of the bank.
    pub fn without_tiling(mut self) -> Self {
        self.tiling = false;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Slice of `len` samples at a uniform random offset, wrapping around
    /// the end of the bank when tiling is allowed.
    pub fn slice(&self, len: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let n = self.samples.len();
        if self.tiling {
            let start = rng.gen_range(0..n);
            Ok((0..len).map(|i| self.samples[(start + i) % n]).collect())
        } else if n < len {
            Err(Error::Data(format!(
                "noise bank {:?} has {n} samples, {len} needed and tiling is disabled",
                self.name
            )))
        } else {
            let start = rng.gen_range(0..=n - len);
            Ok(self.samples[start..start + len].to_vec())
        }
    }
}

impl NoiseSource for NoiseBank {
    fn name(&self) -> &str {
        &self.name
    }

    fn draw(&self, _: &ManifestEntry, len: usize, _: &Corpus, rng: &mut ChaCha8Rng) -> Result<Option<Vec<f64>>> {
        self.slice(len, rng).map(Some)
    }
}

/// A female utterance from another speaker of the same split.
pub struct CompetingSpeaker;

impl NoiseSource for CompetingSpeaker {
    fn name(&self) -> &str {
        "wsjf"
    }

    fn accepts_target(&self, target: &ManifestEntry) -> bool {
        target.gender == Gender::M
    }

    fn draw(
        &self,
        target: &ManifestEntry,
        len: usize,
        corpus: &Corpus,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Vec<f64>>> {
        let pool: Vec<&ManifestEntry> = corpus
            .manifest()
            .split(target.split)
            .filter(|e| e.gender == Gender::F && e.speaker != target.speaker)
            .collect();
        let pick = pool.choose(rng).ok_or_else(|| {
            Error::Data(format!("no female interferer available in the {} split", target.split))
        })?;
        let w = corpus.audio(&pick.id)?;
        if w.is_empty() {
            return Err(Error::Data(format!("interferer {:?} is empty", pick.id)));
        }
        Ok(Some(w.samples.iter().copied().cycle().take(len).collect()))
    }
}

pub struct Silence;

impl NoiseSource for Silence {
    fn name(&self) -> &str {
        NO_NOISE
    }

    fn draw(&self, _: &ManifestEntry, _: usize, _: &Corpus, _: &mut ChaCha8Rng) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Noise sources by name.
#[derive(Default)]
pub struct NoiseRegistry {
    sources: BTreeMap<String, Box<dyn NoiseSource>>,
}

impl NoiseRegistry {
    /// Registry holding the sources that need no audio of their own.
    pub fn with_builtin() -> Self {
        let mut r = Self::default();
        r.register(Box::new(Silence));
        r.register(Box::new(CompetingSpeaker));
        r
    }

    pub fn register(&mut self, source: Box<dyn NoiseSource>) {
        self.sources.insert(source.name().to_string(), source);
    }

    pub fn get(&self, name: &str) -> Result<&dyn NoiseSource> {
        self.sources.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Data(format!(
                "unknown noise source {name:?} (registered: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.sources.keys().map(|s| s.as_str()).collect()
    }
}

/// Target plus scaled noise. The noise draw is seeded by `spec.seed`.
pub fn make_enhancement_example(spec: &MixtureSpec, corpus: &Corpus, noise: &dyn NoiseSource) -> Result<Example> {
    spec.validate()?;
    if spec.num_sources() != 1 {
        return Err(Error::Data("enhancement examples take exactly one target".into()));
    }
    if spec.noise != noise.name() {
        return Err(Error::Data(format!("spec asks for noise {:?}, got {:?}", spec.noise, noise.name())));
    }
    let entry = corpus.manifest().get(&spec.targets[0])?;
    let x = corpus.audio(&entry.id)?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match noise.draw(entry, x.len(), corpus, &mut rng)? {
        None => Ok(Example {
            mixture: x.clone(),
            sources: vec![x],
            noise: None,
        }),
        Some(v) => {
            let v = scale_to_snr(&x, &Waveform::new(v, x.sample_rate), spec.snr_db.unwrap_or_default())?;
            let y = x.samples.iter().zip(&v.samples).map(|(a, b)| a + b).collect();
            Ok(Example {
                mixture: Waveform::new(y, x.sample_rate),
                sources: vec![x],
                noise: Some(v),
            })
        }
    }
}

/// `x1 + g x2` with `g` set by the spec's power ratio; no additive noise.
pub fn make_two_speaker_example(spec: &MixtureSpec, corpus: &Corpus) -> Result<Example> {
    spec.validate()?;
    if spec.num_sources() != 2 {
        return Err(Error::Data("two-talker examples take exactly two targets".into()));
    }
    let x1 = corpus.audio(&spec.targets[0])?.clone();
    let x2 = corpus.audio(&spec.targets[1])?;
    let x2 = scale_to_snr(&x1, x2, spec.ratio_db.unwrap_or_default())?;
    let y = x1.samples.iter().zip(&x2.samples).map(|(a, b)| a + b).collect();
    Ok(Example {
        mixture: Waveform::new(y, x1.sample_rate),
        sources: vec![x1, x2],
        noise: None,
    })
}

pub fn render(spec: &MixtureSpec, corpus: &Corpus, noises: &NoiseRegistry) -> Result<Example> {
    if spec.num_sources() == 2 {
        make_two_speaker_example(spec, corpus)
    } else {
        make_enhancement_example(spec, corpus, noises.get(&spec.noise)?)
    }
}

/// Renders specs in parallel; output order follows input order.
pub fn render_all(specs: &[MixtureSpec], corpus: &Corpus, noises: &NoiseRegistry) -> Result<Vec<Example>> {
    specs.par_iter().map(|s| render(s, corpus, noises)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrDraw {
    Fixed(f64),
    Uniform(f64, f64),
}

impl SnrDraw {
    /// Parses `"0"` or `"-10:10"`.
    pub fn parse(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad SNR value {t:?}")))
        };
        match s.split_once(':') {
            None => Ok(SnrDraw::Fixed(num(s)?)),
            Some((a, b)) => {
                let (lo, hi) = (num(a)?, num(b)?);
                if lo > hi {
                    return Err(Error::Config(format!("empty SNR range {s:?}")));
                }
                Ok(SnrDraw::Uniform(lo, hi))
            }
        }
    }

    fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            SnrDraw::Fixed(v) => v,
            SnrDraw::Uniform(lo, hi) if lo == hi => lo,
            SnrDraw::Uniform(lo, hi) => rng.gen_range(lo..=hi),
        }
    }
}

/// `count` single-target specs on `split`, targets drawn uniformly from
/// the entries the noise source accepts.
pub fn enhancement_specs(
    manifest: &Manifest,
    split: Split,
    noise: &dyn NoiseSource,
    count: usize,
    snr: SnrDraw,
    seed: u64,
) -> Result<Vec<MixtureSpec>> {
    let pool: Vec<&ManifestEntry> = manifest.split(split).filter(|e| noise.accepts_target(e)).collect();
    if pool.is_empty() && count > 0 {
        return Err(Error::Data(format!(
            "no {split} utterances usable as targets for noise {:?}",
            noise.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let t = pool[rng.gen_range(0..pool.len())];
            MixtureSpec {
                targets: vec![t.id.clone()],
                noise: noise.name().to_string(),
                snr_db: Some(snr.sample(&mut rng)),
                ratio_db: None,
                seed: rng.gen(),
            }
        })
        .collect())
}

/// Fractions of female-female and male-male pairs; the rest are mixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenderMix {
    pub ff: f64,
    pub mm: f64,
}

impl GenderMix {
    pub const BALANCED: GenderMix = GenderMix { ff: 0.25, mm: 0.25 };
    /// Proportions of the standard two-talker benchmark.
    pub const WSJ0_2MIX: GenderMix = GenderMix { ff: 0.177, mm: 0.289 };

    /// (FF, MM, FM) counts for `count` pairs.
    pub fn counts(self, count: usize) -> (usize, usize, usize) {
        let ff = (count as f64 * self.ff).round() as usize;
        let mm = ((count as f64 * self.mm).round() as usize).min(count - ff.min(count));
        let ff = ff.min(count);
        (ff, mm, count - ff - mm)
    }
}

pub const RATIO_RANGE_DB: f64 = 2.5;

/// Two-talker specs on `split` with the given gender proportions. The
/// talkers of a pair are distinct speakers; the power ratio is uniform in
/// +-2.5 dB.
pub fn build_pairs(manifest: &Manifest, split: Split, count: usize, mix: GenderMix, seed: u64) -> Result<Vec<MixtureSpec>> {
    let female = manifest.speakers(split, Gender::F);
    let male = manifest.speakers(split, Gender::M);
    if female.len() < 2 || male.len() < 2 {
        return Err(Error::Data(format!(
            "pairing needs at least two speakers of each gender in the {split} split (have {} F, {} M)",
            female.len(),
            male.len()
        )));
    }
    let f: Vec<_> = female.values().collect();
    let m: Vec<_> = male.values().collect();
    let (nff, nmm, nfm) = mix.counts(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<(Gender, Gender)> = std::iter::repeat((Gender::F, Gender::F))
        .take(nff)
        .chain(std::iter::repeat((Gender::M, Gender::M)).take(nmm))
        .chain(std::iter::repeat((Gender::F, Gender::M)).take(nfm))
        .collect();
    kinds.shuffle(&mut rng);
    let mut specs = Vec::with_capacity(count);
    for (g1, g2) in kinds {
        let pool = |g| if g == Gender::F { &f } else { &m };
        let (a, b) = if g1 == g2 {
            let idx = rand::seq::index::sample(&mut rng, pool(g1).len(), 2);
            (pool(g1)[idx.index(0)], pool(g1)[idx.index(1)])
        } else {
            let a = pool(g1)[rng.gen_range(0..pool(g1).len())];
            let b = pool(g2)[rng.gen_range(0..pool(g2).len())];
            if rng.gen_bool(0.5) {
                (a, b)
            } else {
                (b, a)
            }
        };
        let u1 = a.choose(&mut rng).expect("speaker has utterances");
        let u2 = b.choose(&mut rng).expect("speaker has utterances");
        specs.push(MixtureSpec {
            targets: vec![u1.id.clone(), u2.id.clone()],
            noise: NO_NOISE.to_string(),
            snr_db: None,
            ratio_db: Some(rng.gen_range(-RATIO_RANGE_DB..=RATIO_RANGE_DB)),
            seed: rng.gen(),
        });
    }
    Ok(specs)
}

/// 25 % female-female, 25 % male-male, 50 % mixed-gender pairs.
pub fn build_balanced_pairs(manifest: &Manifest, split: Split, count: usize, seed: u64) -> Result<Vec<MixtureSpec>> {
    build_pairs(manifest, split, count, GenderMix::BALANCED, seed)
}

/// Concatenates noise recordings, resampled to the model rate, into one bank.
pub fn build_mix_noise_bank(name: &str, paths: &[PathBuf]) -> Result<NoiseBank> {
    if paths.is_empty() {
        return Err(Error::Data("no noise files given".into()));
    }
    let mut samples = Vec::new();
    for p in paths {
        let w = resample(&read_wav(p)?, MODEL_RATE)?;
        samples.extend_from_slice(&w.samples);
    }
    NoiseBank::new(name, samples)
}

pub const LTAS_FFT: usize = 512;

/// Long-term average power spectrum over a set of utterances (Welch,
/// weighted by length).
pub fn long_term_spectrum<'a>(waves: impl IntoIterator<Item = &'a Waveform>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; LTAS_FFT / 2 + 1];
    let mut total = 0usize;
    for w in waves {
        if w.len() < LTAS_FFT {
            continue;
        }
        let psd = welch(&w.samples, LTAS_FFT);
        for (a, p) in acc.iter_mut().zip(&psd) {
            *a += p * w.len() as f64;
        }
        total += w.len();
    }
    if total == 0 {
        return Err(Error::Data("no utterance long enough for a spectrum estimate".into()));
    }
    acc.iter_mut().for_each(|a| *a /= total as f64);
    Ok(acc)
}

/// Speech-shaped noise: white Gaussian noise shaped in the frequency
/// domain by the square root of `ltas` (linearly interpolated across
/// bins), scaled to unit RMS.
pub fn speech_shaped_noise(ltas: &[f64], len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = len.max(2).next_power_of_two();
    let ltas_bins = ltas.len() - 1;
    let mut buf: Vec<C64> = (0..n)
        .map(|_| C64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if k <= n / 2 { k } else { n - k };
        let pos = kk as f64 / (n / 2) as f64 * ltas_bins as f64;
        let i = (pos.floor() as usize).min(ltas_bins - 1);
        let t = pos - i as f64;
        let p = ltas[i] * (1.0 - t) + ltas[i + 1] * t;
        *c *= p.max(0.0).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf[..len].iter().map(|c| c.re).collect();
    let rms = (energy(&out) / len as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Assigns whole speakers to splits, per gender, in proportion to
/// `fractions` (train, val, test). Every split gets at least one speaker
/// of a gender when that gender has three or more.
pub fn assign_splits(
    speakers: &BTreeMap<String, Gender>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> BTreeMap<String, Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let total = fractions.0 + fractions.1 + fractions.2;
    for g in [Gender::M, Gender::F] {
        let mut ids: Vec<&String> = speakers.iter().filter(|(_, &sg)| sg == g).map(|(s, _)| s).collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let mut n_val = (n as f64 * fractions.1 / total).round() as usize;
        let mut n_test = (n as f64 * fractions.2 / total).round() as usize;
        if n >= 3 {
            n_val = n_val.max(1);
            n_test = n_test.max(1);
        }
        while n_val + n_test > n.saturating_sub(1) && n_val + n_test > 0 {
            if n_val >= n_test && n_val > 0 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        for (i, s) in ids.into_iter().enumerate() {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            out.insert(s.clone(), split);
        }
    }
    out
}
