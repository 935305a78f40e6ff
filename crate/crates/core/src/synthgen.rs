//! Synthetic corpora with known identity signatures and shape drift.
//!
//! Each speaker owns a small bank of sinusoidal latents at fixed frequencies
//! and a private linear map from those latents to the 103 dynamics channels.
//! Every utterance redraws only the phases, the length and the noise. Shape
//! statistics are emitted as ground truth per (speaker, session), and an
//! optional leakage term adds a projection of the session's shape offset into
//! the dynamics.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::canonical_hash;
use crate::seqdata::{
    read_manifest, write_manifest, write_sequence, DynSequence, Group, Manifest, ShapeStatsRow,
    Split, UtteranceRecord, EXPRESSION_DIM, FEATURE_DIM,
};

/// Length of the static shape vector.
pub const SHAPE_DIM: usize = 300;

const JAW_SCALE: f64 = 0.2;
const FREQ_RANGE: (f64, f64) = (0.2, 3.0);
const SIGMA_RANGE: (f64, f64) = (0.03, 0.09);
/// Standard deviation of the leakage projection entries.
const LEAKAGE_GAIN: f64 = 0.2;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SHAPE_STATS_FILE: &str = "shape_stats.jsonl";
pub const CONFIG_FILE: &str = "synth_config.json";
pub const STRATA_FILE: &str = "strata.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub sessions_per_speaker: usize,
    /// Inclusive `[min, max]` frame count, sampled uniformly per utterance.
    pub frames_per_utterance: [usize; 2],
    pub signature_dim: usize,
    pub noise_std: f64,
    pub shape_drift_scale: f64,
    /// Per-speaker drift multipliers are log-uniform in `[1/spread, spread]`.
    pub drift_spread: f64,
    pub leakage_strength: f64,
    /// Leading fraction of speakers recorded in a single session (GA).
    pub ga_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Training utterances per speaker, cycled over speakers. Overrides the
    /// train share of `utterances_per_speaker`; val and test counts stay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_utterances: Option<Vec<usize>>,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            utterances_per_speaker: 50,
            sessions_per_speaker: 2,
            frames_per_utterance: [120, 360],
            signature_dim: 8,
            noise_std: 0.1,
            shape_drift_scale: 1.0,
            drift_spread: 3.0,
            leakage_strength: 0.0,
            ga_fraction: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.2,
            train_utterances: None,
            fps: 30.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_speakers < 2 {
            return bad(format!(
                "num_speakers must be at least 2, got {}",
                self.num_speakers
            ));
        }
        if self.sessions_per_speaker == 0 {
            return bad("sessions_per_speaker must be positive".into());
        }
        if self.num_ga() < self.num_speakers && self.sessions_per_speaker < 2 {
            return bad("cross-session speakers need sessions_per_speaker >= 2".into());
        }
        let [lo, hi] = self.frames_per_utterance;
        if lo == 0 || lo > hi {
            return bad(format!(
                "frames_per_utterance [{lo}, {hi}] is not a valid range"
            ));
        }
        if self.signature_dim == 0 {
            return bad("signature_dim must be positive".into());
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("shape_drift_scale", self.shape_drift_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative"));
            }
        }
        if !(self.drift_spread.is_finite() && self.drift_spread >= 1.0) {
            return bad("drift_spread must be at least 1".into());
        }
        for (name, v) in [
            ("leakage_strength", self.leakage_strength),
            ("ga_fraction", self.ga_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if let Some(list) = &self.train_utterances {
            if list.is_empty() || list.contains(&0) {
                return bad("train_utterances must be a nonempty list of positive counts".into());
            }
        }
        for i in 0..self
            .num_speakers
            .min(self.train_utterances.as_ref().map_or(1, Vec::len))
        {
            if self.split_counts(i).0 == 0 {
                return bad("every speaker needs at least one training utterance".into());
            }
        }
        Ok(())
    }

    pub fn num_ga(&self) -> usize {
        (self.ga_fraction * self.num_speakers as f64).round() as usize
    }

    /// `(train, val, test)` utterance counts for speaker `index`.
    pub fn split_counts(&self, index: usize) -> (usize, usize, usize) {
        let u = self.utterances_per_speaker;
        let val = (u as f64 * self.val_fraction).round() as usize;
        let test = (u as f64 * self.test_fraction).round() as usize;
        let train = match &self.train_utterances {
            Some(list) => list[index % list.len()],
            None => u.saturating_sub(val + test),
        };
        (train, val, test)
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

pub fn session_id(index: usize) -> String {
    format!("sess{index}")
}

/// Ground-truth generative parameters of one speaker.
#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub index: usize,
    pub group: Group,
    /// Latent oscillator frequencies in Hz.
    pub frequencies: Vec<f64>,
    /// `103 x signature_dim`
    pub mixing: Array2<f64>,
    pub shape_base: Array1<f64>,
    pub drift_multiplier: f64,
    pub session_means: Vec<Array1<f64>>,
    pub session_stds: Vec<Array1<f64>>,
}

impl SpeakerProfile {
    fn sample(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.signature_dim;
        let frequencies = (0..k)
            .map(|_| rng.random_range(FREQ_RANGE.0..FREQ_RANGE.1))
            .collect();
        let a_std = (1.0 / k as f64).sqrt();
        let mut mixing = Array2::from_shape_fn((FEATURE_DIM, k), |_| a_std * normal(rng));
        mixing
            .slice_mut(s![EXPRESSION_DIM.., ..])
            .mapv_inplace(|v| v * JAW_SCALE);
        let shape_base = Array1::from_shape_fn(SHAPE_DIM, |_| normal(rng));
        let spread = cfg.drift_spread.ln();
        let drift_multiplier = if spread > 0.0 {
            rng.random_range(-spread..=spread).exp()
        } else {
            1.0
        };
        let u_std = (1.0 / SHAPE_DIM as f64).sqrt();
        let mut session_means = Vec::with_capacity(cfg.sessions_per_speaker);
        let mut session_stds = Vec::with_capacity(cfg.sessions_per_speaker);
        let (lo, hi) = (SIGMA_RANGE.0.ln(), SIGMA_RANGE.1.ln());
        for _ in 0..cfg.sessions_per_speaker {
            let scale = cfg.shape_drift_scale * drift_multiplier * u_std;
            session_means.push(Array1::from_shape_fn(SHAPE_DIM, |i| {
                shape_base[i] + scale * normal(rng)
            }));
            session_stds.push(Array1::from_shape_fn(SHAPE_DIM, |_| {
                rng.random_range(lo..hi).exp()
            }));
        }
        Self {
            speaker_id: speaker_id(index),
            index,
            group: if index < cfg.num_ga() {
                Group::Ga
            } else {
                Group::Gb
            },
            frequencies,
            mixing,
            shape_base,
            drift_multiplier,
            session_means,
            session_stds,
        }
    }

    /// Per-session dynamics offset before scaling by the leakage strength.
    pub fn leakage_offset(&self, session: usize, projection: &Array2<f64>) -> Array1<f64> {
        projection.dot(&(&self.session_means[session] - &self.shape_base))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn speaker_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Shared `103 x 300` map from shape offsets into dynamics channels.
pub fn leakage_projection(cfg: &SynthConfig) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let mut p = Array2::from_shape_fn((FEATURE_DIM, SHAPE_DIM), |_| {
        LEAKAGE_GAIN * normal(&mut rng)
    });
    p.slice_mut(s![EXPRESSION_DIM.., ..])
        .mapv_inplace(|v| v * JAW_SCALE);
    p
}

pub fn speaker_profiles(cfg: &SynthConfig) -> Vec<SpeakerProfile> {
    (0..cfg.num_speakers)
        .map(|i| SpeakerProfile::sample(cfg, i, &mut speaker_rng(cfg.seed, i)))
        .collect()
}

fn session_for(cfg: &SynthConfig, group: Group, split: Split, train_pos: usize) -> usize {
    match (group, split) {
        (Group::Gb, Split::Train) => train_pos % (cfg.sessions_per_speaker - 1),
        (Group::Gb, _) => cfg.sessions_per_speaker - 1,
        _ => 0,
    }
}

fn synth_utterance(
    cfg: &SynthConfig,
    profile: &SpeakerProfile,
    offset: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let [lo, hi] = cfg.frames_per_utterance;
    let t_len = rng.random_range(lo..=hi);
    let phases: Vec<f64> = (0..cfg.signature_dim)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let latents = Array2::from_shape_fn((t_len, cfg.signature_dim), |(t, k)| {
        (std::f64::consts::TAU * profile.frequencies[k] * t as f64 / cfg.fps + phases[k]).sin()
    });
    let mut x = latents.dot(&profile.mixing.t());
    for mut row in x.rows_mut() {
        for (v, o) in row.iter_mut().zip(offset) {
            *v += cfg.noise_std * normal(rng) + o;
        }
    }
    x.mapv(|v| v as f32)
}

/// Speaker-to-stratum assignment written by [`inject_leakage`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumRow {
    pub speaker_id: String,
    pub stratum: usize,
    pub leakage_strength: f64,
}

/// A generated corpus on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub config: SynthConfig,
    pub manifest: Manifest,
    pub shape_stats: Vec<ShapeStatsRow>,
    pub strata: Option<Vec<StratumRow>>,
}

impl Corpus {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn shape_stats_path(&self) -> PathBuf {
        self.dir.join(SHAPE_STATS_FILE)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = read_json::<SynthConfig>(&dir.join(CONFIG_FILE))?;
        let manifest = read_manifest(dir.join(MANIFEST_FILE))?;
        let shape_stats = crate::seqdata::read_shape_stats(dir.join(SHAPE_STATS_FILE))?;
        let strata_path = dir.join(STRATA_FILE);
        let strata = if strata_path.is_file() {
            Some(read_jsonl(&strata_path)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
            shape_stats,
            strata,
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes sequences, manifest, shape statistics and the config echo into
/// `out_dir`.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    cfg.validate()?;
    let strengths = vec![cfg.leakage_strength; cfg.num_speakers];
    write_corpus(cfg, &strengths, out_dir.as_ref(), None)
}

/// Regenerates the dynamics of the corpus in `corpus_dir` with speakers split
/// into `strengths.len()` strata (speaker `i` goes to stratum
/// `i % strengths.len()`). Shape statistics are unchanged.
pub fn inject_leakage(corpus_dir: impl AsRef<Path>, strengths: &[f64]) -> Result<Corpus> {
    let dir = corpus_dir.as_ref();
    if strengths.is_empty() {
        return Err(Error::Argument(
            "at least one leakage strength is required".into(),
        ));
    }
    if let Some(s) = strengths.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Argument(format!(
            "leakage strength {s} outside [0, 1]"
        )));
    }
    let cfg: SynthConfig = read_json(&dir.join(CONFIG_FILE))?;
    cfg.validate()?;
    if cfg.sessions_per_speaker < 2 {
        return Err(Error::Argument(
            "leakage strata need at least 2 sessions per speaker".into(),
        ));
    }
    let per_speaker: Vec<f64> = (0..cfg.num_speakers)
        .map(|i| strengths[i % strengths.len()])
        .collect();
    let strata: Vec<StratumRow> = (0..cfg.num_speakers)
        .map(|i| StratumRow {
            speaker_id: speaker_id(i),
            stratum: i % strengths.len(),
            leakage_strength: per_speaker[i],
        })
        .collect();
    write_corpus(&cfg, &per_speaker, dir, Some(strata))
}

fn write_corpus(
    cfg: &SynthConfig,
    strengths: &[f64],
    dir: &Path,
    strata: Option<Vec<StratumRow>>,
) -> Result<Corpus> {
    let seq_dir = dir.join("sequences");
    fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
    let hash = cfg.hash();
    let projection = leakage_projection(cfg);
    let mut records = Vec::new();
    let mut stats = Vec::new();

    for index in 0..cfg.num_speakers {
        let mut rng = speaker_rng(cfg.seed, index);
        let profile = SpeakerProfile::sample(cfg, index, &mut rng);
        for s in 0..cfg.sessions_per_speaker {
            stats.push(ShapeStatsRow {
                speaker_id: profile.speaker_id.clone(),
                session_id: session_id(s),
                mean: profile.session_means[s].to_vec(),
                std: profile.session_stds[s].to_vec(),
                seed: Some(cfg.seed),
                config_hash: Some(hash.clone()),
            });
        }
        let offsets: Vec<Array1<f64>> = (0..cfg.sessions_per_speaker)
            .map(|s| profile.leakage_offset(s, &projection) * strengths[index])
            .collect();
        let (n_train, n_val, n_test) = cfg.split_counts(index);
        let splits = std::iter::repeat_n(Split::Train, n_train)
            .chain(std::iter::repeat_n(Split::Val, n_val))
            .chain(std::iter::repeat_n(Split::Test, n_test));
        for (u, split) in splits.enumerate() {
            let session = session_for(cfg, profile.group, split, u);
            let frames = synth_utterance(cfg, &profile, &offsets[session], &mut rng);
            let utterance_id = format!("{}-u{u:03}", profile.speaker_id);
            let rel = PathBuf::from("sequences").join(format!("{utterance_id}.fdyn"));
            let num_frames = frames.nrows();
            write_sequence(dir.join(&rel), &DynSequence::new(frames, cfg.fps)?)?;
            records.push(UtteranceRecord {
                utterance_id,
                speaker_id: profile.speaker_id.clone(),
                session_id: session_id(session),
                split,
                group: profile.group,
                path: rel,
                num_frames,
                fps: cfg.fps,
            });
        }
        log::debug!(
            "generated {} ({} utterances)",
            profile.speaker_id,
            n_train + n_val + n_test
        );
    }

    write_manifest(dir.join(MANIFEST_FILE), &records)?;
    crate::seqdata::write_shape_stats(dir.join(SHAPE_STATS_FILE), &stats)?;
    let cfg_path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json("synth config", e))?;
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let strata_path = dir.join(STRATA_FILE);
    match &strata {
        Some(rows) => write_jsonl(&strata_path, rows)?,
        None if strata_path.exists() => {
            fs::remove_file(&strata_path).map_err(|e| Error::io(&strata_path, e))?
        }
        None => {}
    }
    Ok(Corpus {
        dir: dir.to_path_buf(),
        config: cfg.clone(),
        manifest: Manifest::new(dir, records),
        shape_stats: stats,
        strata,
    })
}
