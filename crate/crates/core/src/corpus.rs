//! Corpus handling: tab-separated manifests, train/valid splits, labeled
//! trial generation, and a resonant source-filter synthesizer that produces
//! separable artificial speakers so the whole pipeline runs without any
//! licensed audio.
//!
//! A speaker is a fixed set of resonant frequencies plus a pitch base and
//! spectral tilt, derived only from (corpus seed, speaker index). Utterances
//! vary by excitation seed. Two excitation styles stand in for a domain gap:
//! `Tonal` (clean, slow amplitude envelope) and `Breathy` (noisier
//! excitation, faster envelope, telephone-style bandpass).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, Waveform};
use crate::score::{Trial, TrialLabel, TrialList};

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("corpus config error: {0}")]
    Config(String),
    #[error("split error: {0}")]
    Split(String),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Score(#[from] crate::score::ScoreError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Valid,
    Enroll,
    Test,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Valid => "valid",
            Subset::Enroll => "enroll",
            Subset::Test => "test",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s {
            "train" => Ok(Subset::Train),
            "valid" => Ok(Subset::Valid),
            "enroll" => Ok(Subset::Enroll),
            "test" => Ok(Subset::Test),
            other => Err(CorpusError::Manifest(format!("unknown subset {other:?}"))),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub speaker_id: String,
    pub subset: Subset,
}

/// Ordered utterance list; `utt_id`s are unique within a manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.utt_id.clone()) {
                return Err(CorpusError::Manifest(format!(
                    "duplicate utt_id {}",
                    e.utt_id
                )));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<String> = self
            .entries
            .iter()
            .map(|e| e.speaker_id.clone())
            .collect();
        set.into_iter().collect()
    }

    pub fn filter_subset(&self, subset: Subset) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.subset == subset)
                .cloned()
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(CorpusError::Manifest(format!(
                    "{}:{}: expected 4 tab-separated fields, got {}",
                    path.display(),
                    ln + 1,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                utt_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                speaker_id: fields[2].to_string(),
                subset: fields[3].parse()?,
            });
        }
        Manifest::new(entries)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        use std::fmt::Write;
        let mut out = String::new();
        for e in &self.entries {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.utt_id,
                e.path.display(),
                e.speaker_id,
                e.subset
            )
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Concatenate manifests, re-checking utt_id uniqueness.
    pub fn merged(manifests: &[&Manifest]) -> Result<Manifest, CorpusError> {
        let mut entries = Vec::new();
        for m in manifests {
            entries.extend(m.entries.iter().cloned());
        }
        Manifest::new(entries)
    }
}

/// Hold out roughly `valid_fraction` of each speaker's utterances. Every
/// speaker keeps at least one training utterance.
pub fn split_manifest(
    m: &Manifest,
    valid_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest), CorpusError> {
    if !(0.0 < valid_fraction && valid_fraction < 1.0) {
        return Err(CorpusError::Split(format!(
            "valid_fraction {valid_fraction} outside (0, 1)"
        )));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in m.entries.iter().enumerate() {
        by_speaker.entry(&e.speaker_id).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (spk, mut indices) in by_speaker {
        let n = indices.len();
        let n_valid = (n as f64 * valid_fraction).floor() as usize;
        if n_valid >= n {
            return Err(CorpusError::Split(format!(
                "speaker {spk} would keep no training utterances"
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ hash_str(spk).wrapping_mul(0x9e3779b97f4a7c15));
        // Fisher-Yates shuffle.
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        for (k, &idx) in indices.iter().enumerate() {
            let mut e = m.entries[idx].clone();
            if k < n_valid {
                e.subset = Subset::Valid;
                valid.push(e);
            } else {
                e.subset = Subset::Train;
                train.push(e);
            }
        }
    }
    train.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    valid.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok((Manifest::new(train)?, Manifest::new(valid)?))
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a, fixed so splits are stable across platforms and versions.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Labeled trial list with exact class counts sampled from all candidate
/// pairs (target ⇔ same speaker). When both manifests cover the same
/// utterance set, pairs are unordered and self-pairs are excluded.
pub fn make_trials(
    enroll: &Manifest,
    test: &Manifest,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList, CorpusError> {
    let same_pool = {
        let a: std::collections::BTreeSet<&str> =
            enroll.entries.iter().map(|e| e.utt_id.as_str()).collect();
        let b: std::collections::BTreeSet<&str> =
            test.entries.iter().map(|e| e.utt_id.as_str()).collect();
        a == b
    };
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (i, e) in enroll.entries.iter().enumerate() {
        for (j, t) in test.entries.iter().enumerate() {
            if e.utt_id == t.utt_id {
                continue;
            }
            if same_pool && i >= j {
                continue;
            }
            if e.speaker_id == t.speaker_id {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if targets.len() < n_target {
        return Err(CorpusError::Config(format!(
            "requested {n_target} target trials but only {} candidate pairs exist",
            targets.len()
        )));
    }
    if nontargets.len() < n_nontarget {
        return Err(CorpusError::Config(format!(
            "requested {n_nontarget} nontarget trials but only {} candidate pairs exist",
            nontargets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |pool: &mut Vec<(usize, usize)>, n: usize, rng: &mut ChaCha8Rng| {
        for i in 0..n {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool[..n].to_vec()
    };
    let chosen_t = pick(&mut targets, n_target, &mut rng);
    let chosen_n = pick(&mut nontargets, n_nontarget, &mut rng);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for (i, j) in chosen_t {
        trials.push(Trial {
            enroll_id: enroll.entries[i].utt_id.clone(),
            test_id: test.entries[j].utt_id.clone(),
            label: Some(TrialLabel::Target),
        });
    }
    for (i, j) in chosen_n {
        trials.push(Trial {
            enroll_id: enroll.entries[i].utt_id.clone(),
            test_id: test.entries[j].utt_id.clone(),
            label: Some(TrialLabel::NonTarget),
        });
    }
    Ok(TrialList::new(trials)?)
}

pub const SYNTH_SAMPLE_RATE: u32 = 8000;

/// Excitation style; stands in for a recording-domain difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthDomain {
    Tonal,
    Breathy,
}

impl SynthDomain {
    pub fn tag(&self) -> char {
        match self {
            SynthDomain::Tonal => 'a',
            SynthDomain::Breathy => 'b',
        }
    }
}

/// Per-speaker voice: resonant frequencies with bandwidths and gains, pitch
/// base and spectral tilt. Depends only on (seed, speaker index).
#[derive(Clone, Debug)]
pub struct SpeakerVoice {
    pub resonances_hz: Vec<f64>,
    pub bandwidths_hz: Vec<f64>,
    pub gains: Vec<f64>,
    pub pitch_hz: f64,
    pub tilt: f64,
}

pub fn speaker_voice(seed: u64, speaker_idx: usize) -> SpeakerVoice {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (speaker_idx as u64).wrapping_mul(0xd1342543de82ef95) ^ 0x5eed_5eed,
    );
    let n_res = rng.gen_range(3..=5usize);
    let bands: [(f64, f64); 5] = [
        (260.0, 820.0),
        (900.0, 2100.0),
        (2200.0, 3000.0),
        (3000.0, 3400.0),
        (3400.0, 3650.0),
    ];
    let mut resonances = Vec::with_capacity(n_res);
    let mut bandwidths = Vec::with_capacity(n_res);
    let mut gains = Vec::with_capacity(n_res);
    for band in bands.iter().take(n_res) {
        resonances.push(rng.gen_range(band.0..band.1));
        bandwidths.push(rng.gen_range(60.0..160.0));
        gains.push(rng.gen_range(0.5..1.0));
    }
    SpeakerVoice {
        resonances_hz: resonances,
        bandwidths_hz: bandwidths,
        gains,
        pitch_hz: rng.gen_range(80.0..290.0),
        tilt: rng.gen_range(0.25..0.9),
    }
}

/// All-pole resonator cascade applied in place.
fn apply_resonators(samples: &mut [f64], voice: &SpeakerVoice) {
    let fs = SYNTH_SAMPLE_RATE as f64;
    for ((&f0, &bw), &g) in voice
        .resonances_hz
        .iter()
        .zip(&voice.bandwidths_hz)
        .zip(&voice.gains)
    {
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let c = 2.0 * r * (2.0 * std::f64::consts::PI * f0 / fs).cos();
        let r2 = r * r;
        // Normalize for roughly unit peak gain.
        let norm = (1.0 - r) * (1.0 - r2).max(0.1);
        let mut y1 = 0.0;
        let mut y2 = 0.0;
        for v in samples.iter_mut() {
            let y = g * norm * *v + c * y1 - r2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// Synthesize one utterance of `duration_s` seconds for a voice.
pub fn synth_utterance(
    voice: &SpeakerVoice,
    domain: SynthDomain,
    utt_seed: u64,
    duration_s: f64,
) -> Waveform {
    let fs = SYNTH_SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    let (noise_level, env_rate_hz, env_depth, bandpass) = match domain {
        SynthDomain::Tonal => (0.02, rng.gen_range(2.0..3.5), 0.35, false),
        SynthDomain::Breathy => (0.14, rng.gen_range(4.5..6.5), 0.5, true),
    };
    let vibrato_hz = rng.gen_range(4.0..7.0);
    let vibrato_depth = rng.gen_range(0.01..0.05);
    let drift = rng.gen_range(-0.06..0.06f64);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // Excitation: impulse train at the (slowly wandering) pitch plus noise.
    let mut x = vec![0.0; n];
    let mut phase = 0.0f64;
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let f0 = voice.pitch_hz
            * (1.0
                + vibrato_depth * (std::f64::consts::TAU * vibrato_hz * t).sin()
                + drift * t / duration_s.max(1e-9));
        phase += f0 / fs;
        if phase >= 1.0 {
            phase -= 1.0;
            *v += 1.0;
        }
        *v += noise_level * rng.gen_range(-1.0..1.0);
    }
    apply_resonators(&mut x, voice);
    // Spectral tilt: one-pole lowpass mixed by the tilt coefficient.
    let tilt = voice.tilt;
    let mut prev = 0.0;
    for v in x.iter_mut() {
        prev = (1.0 - tilt) * *v + tilt * prev;
        *v = prev;
    }
    if bandpass {
        // First-order highpass around 250 Hz for a telephone-ish character.
        let rc = 1.0 / (std::f64::consts::TAU * 250.0);
        let alpha = rc / (rc + 1.0 / fs);
        let mut y_prev = 0.0;
        let mut x_prev = 0.0;
        for v in x.iter_mut() {
            let y = alpha * (y_prev + *v - x_prev);
            x_prev = *v;
            y_prev = y;
            *v = y;
        }
    }
    // Syllabic amplitude envelope plus lead-in/out silence.
    let silence = (0.12 * fs) as usize;
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let env = 1.0
            - env_depth
                * (0.5 + 0.5 * (std::f64::consts::TAU * env_rate_hz * t + env_phase).sin());
        let edge = if i < silence || i + silence >= n {
            0.0
        } else {
            1.0
        };
        *v *= env * edge;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let target = 0.45;
        for v in &mut x {
            *v *= target / peak;
        }
    }
    Waveform::new(x, SYNTH_SAMPLE_RATE).expect("finite synthesis")
}

/// One batch of synthetic corpus generation.
#[derive(Clone, Debug)]
pub struct SynthRequest {
    /// Base seed: fixes voices (with speaker index) and excitations.
    pub seed: u64,
    pub speaker_indices: Vec<usize>,
    /// Utterance indices generated per speaker; disjoint ranges give
    /// disjoint utterances for the same voices.
    pub utt_range: std::ops::Range<usize>,
    pub duration_s: f64,
    pub domain: SynthDomain,
    pub subset: Subset,
}

pub fn utt_id(speaker_idx: usize, domain: SynthDomain, utt_idx: usize) -> String {
    format!("spk{speaker_idx:03}_{}{utt_idx:03}", domain.tag())
}

pub fn speaker_id(speaker_idx: usize) -> String {
    format!("spk{speaker_idx:03}")
}

/// Generate WAVs under `out_dir` and return their manifest. Deterministic
/// per (seed, speaker index, domain, utterance index).
pub fn synthesize_corpus(req: &SynthRequest, out_dir: &Path) -> Result<Manifest, CorpusError> {
    if req.speaker_indices.len() < 2 {
        return Err(CorpusError::Config(
            "need at least two speakers".into(),
        ));
    }
    if req.utt_range.is_empty() {
        return Err(CorpusError::Config("empty utterance range".into()));
    }
    if req.duration_s <= 0.5 {
        return Err(CorpusError::Config(
            "utterances must be longer than 0.5 s".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let jobs: Vec<(usize, usize)> = req
        .speaker_indices
        .iter()
        .flat_map(|&s| req.utt_range.clone().map(move |u| (s, u)))
        .collect();
    let entries: Vec<Result<ManifestEntry, CorpusError>> = jobs
        .par_iter()
        .map(|&(spk, utt)| {
            let voice = speaker_voice(req.seed, spk);
            let utt_seed = req.seed
                ^ (spk as u64).wrapping_mul(0xa076_1d64_78bd_642f)
                ^ ((utt as u64 + 1).wrapping_mul(0xe703_7ed1_a0b4_28db))
                ^ ((req.domain.tag() as u64) << 56);
            let wave = synth_utterance(&voice, req.domain, utt_seed, req.duration_s);
            let id = utt_id(spk, req.domain, utt);
            let path = out_dir.join(format!("{id}.wav"));
            write_wav(&path, &wave)?;
            Ok(ManifestEntry {
                utt_id: id,
                path,
                speaker_id: speaker_id(spk),
                subset: req.subset,
            })
        })
        .collect();
    let mut list = Vec::with_capacity(entries.len());
    for e in entries {
        list.push(e?);
    }
    list.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Manifest::new(list)
}

/// Seeded colored-noise sources for the noise augmentation.
pub fn synth_noise_sources(count: usize, duration_s: f64, seed: u64) -> Vec<Waveform> {
    let fs = SYNTH_SAMPLE_RATE as f64;
    let n = (duration_s * fs) as usize;
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) * 0x9e37));
            let smooth = rng.gen_range(0.3..0.95);
            let mut prev = 0.0;
            let samples: Vec<f64> = (0..n)
                .map(|_| {
                    let w: f64 = rng.gen_range(-1.0..1.0);
                    prev = smooth * prev + (1.0 - smooth) * w;
                    prev * 4.0
                })
                .map(|v: f64| v.clamp(-0.9, 0.9))
                .collect();
            Waveform::new(samples, SYNTH_SAMPLE_RATE).expect("finite")
        })
        .collect()
}

/// Seeded harmonic pads standing in for music sources.
pub fn synth_music_sources(count: usize, duration_s: f64, seed: u64) -> Vec<Waveform> {
    let fs = SYNTH_SAMPLE_RATE as f64;
    let n = (duration_s * fs) as usize;
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) * 0x517cc1));
            let root = rng.gen_range(70.0..220.0f64);
            let harmonics: Vec<(f64, f64, f64)> = (1..=5)
                .map(|h| {
                    (
                        root * h as f64 * rng.gen_range(0.99..1.01),
                        rng.gen_range(0.1..0.5) / h as f64,
                        rng.gen_range(0.05..0.4),
                    )
                })
                .collect();
            let samples: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let mut v = 0.0;
                    for &(freq, amp, lfo) in &harmonics {
                        let env = 0.6 + 0.4 * (std::f64::consts::TAU * lfo * t).sin();
                        v += amp * env * (std::f64::consts::TAU * freq * t).sin();
                    }
                    (v * 0.5).clamp(-0.9, 0.9)
                })
                .collect();
            Waveform::new(samples, SYNTH_SAMPLE_RATE).expect("finite")
        })
        .collect()
}

/// Seeded parametric room impulse responses.
pub fn synth_rir_sources(count: usize, seed: u64) -> Vec<Waveform> {
    let cfg = crate::augment::SynthRirConfig::default();
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) * 0x52_52));
            crate::augment::synth_rir(&cfg, SYNTH_SAMPLE_RATE, &mut rng)
        })
        .collect()
}

/// Synthetic talkers (disjoint seed space) as babble sources.
pub fn synth_babble_sources(count: usize, duration_s: f64, seed: u64) -> Vec<Waveform> {
    (0..count)
        .map(|k| {
            let voice = speaker_voice(seed ^ 0xbabb1e, 1_000_000 + k);
            synth_utterance(
                &voice,
                SynthDomain::Tonal,
                seed ^ ((k as u64 + 7) * 0xc0ffee),
                duration_s,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(utt: &str, spk: &str, subset: Subset) -> ManifestEntry {
        ManifestEntry {
            utt_id: utt.into(),
            path: PathBuf::from(format!("{utt}.wav")),
            speaker_id: spk.into(),
            subset,
        }
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let e = vec![
            entry("u1", "s1", Subset::Train),
            entry("u1", "s2", Subset::Train),
        ];
        assert!(Manifest::new(e).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = Manifest::new(vec![
            entry("u1", "s1", Subset::Train),
            entry("u2", "s1", Subset::Valid),
            entry("u3", "s2", Subset::Test),
        ])
        .unwrap();
        m.write(&path).unwrap();
        assert_eq!(Manifest::read(&path).unwrap(), m);
    }

    #[test]
    fn split_holds_out_one_of_five_and_partitions() {
        let mut entries = Vec::new();
        for s in 0..4 {
            for u in 0..5 {
                entries.push(entry(&format!("s{s}u{u}"), &format!("s{s}"), Subset::Train));
            }
        }
        let m = Manifest::new(entries).unwrap();
        let (train, valid) = split_manifest(&m, 0.2, 7).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(valid.len(), 4);
        // Disjoint union equals the original id set.
        let mut ids: Vec<String> = train
            .entries
            .iter()
            .chain(&valid.entries)
            .map(|e| e.utt_id.clone())
            .collect();
        ids.sort();
        let mut orig: Vec<String> = m.entries.iter().map(|e| e.utt_id.clone()).collect();
        orig.sort();
        assert_eq!(ids, orig);
        // Determinism.
        let (t2, v2) = split_manifest(&m, 0.2, 7).unwrap();
        assert_eq!(t2, train);
        assert_eq!(v2, valid);
        // Every speaker keeps a training utterance.
        for s in train.speakers() {
            assert!(train.entries.iter().any(|e| e.speaker_id == s));
        }
    }

    #[test]
    fn split_rejects_emptying_a_speaker() {
        let m = Manifest::new(vec![entry("only", "s0", Subset::Train), entry("x", "s1", Subset::Train)]).unwrap();
        // fraction 0.9 floors to 0 held-out for single-utterance speakers, fine;
        // a fraction >= 1 is rejected outright.
        assert!(split_manifest(&m, 1.0, 1).is_err());
        assert!(split_manifest(&m, 0.9, 1).is_ok());
    }

    #[test]
    fn trials_have_requested_counts_and_consistent_labels() {
        let mut entries = Vec::new();
        for s in 0..5 {
            for u in 0..4 {
                entries.push(entry(&format!("s{s}u{u}"), &format!("s{s}"), Subset::Test));
            }
        }
        let m = Manifest::new(entries).unwrap();
        let trials = make_trials(&m, &m, 20, 50, 3).unwrap();
        assert_eq!(trials.len(), 70);
        let by_spk: std::collections::HashMap<&str, &str> = m
            .entries
            .iter()
            .map(|e| (e.utt_id.as_str(), e.speaker_id.as_str()))
            .collect();
        let mut n_t = 0;
        let mut n_n = 0;
        for t in &trials.trials {
            let same = by_spk[t.enroll_id.as_str()] == by_spk[t.test_id.as_str()];
            match t.label.unwrap() {
                TrialLabel::Target => {
                    assert!(same);
                    n_t += 1;
                }
                TrialLabel::NonTarget => {
                    assert!(!same);
                    n_n += 1;
                }
            }
        }
        assert_eq!((n_t, n_n), (20, 50));
    }

    #[test]
    fn all_target_request_yields_only_targets() {
        let m = Manifest::new(vec![
            entry("a0", "s0", Subset::Test),
            entry("a1", "s0", Subset::Test),
            entry("b0", "s1", Subset::Test),
        ])
        .unwrap();
        let trials = make_trials(&m, &m, 1, 0, 1).unwrap();
        assert_eq!(trials.len(), 1);
        assert_eq!(trials.trials[0].label, Some(TrialLabel::Target));
    }

    #[test]
    fn unsatisfiable_trial_counts_rejected() {
        let m = Manifest::new(vec![
            entry("a0", "s0", Subset::Test),
            entry("b0", "s1", Subset::Test),
        ])
        .unwrap();
        assert!(make_trials(&m, &m, 1, 0, 1).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_to_the_byte() {
        let dir = tempfile::tempdir().unwrap();
        let req = SynthRequest {
            seed: 99,
            speaker_indices: vec![0, 1],
            utt_range: 0..2,
            duration_s: 1.0,
            domain: SynthDomain::Tonal,
            subset: Subset::Train,
        };
        let m1 = synthesize_corpus(&req, &dir.path().join("a")).unwrap();
        let m2 = synthesize_corpus(&req, &dir.path().join("b")).unwrap();
        assert_eq!(m1.len(), 4);
        for (e1, e2) in m1.entries.iter().zip(&m2.entries) {
            assert_eq!(e1.utt_id, e2.utt_id);
            let b1 = std::fs::read(&e1.path).unwrap();
            let b2 = std::fs::read(&e2.path).unwrap();
            assert_eq!(b1, b2, "{}", e1.utt_id);
        }
    }

    #[test]
    fn corpus_counts_and_unique_ids() {
        let dir = tempfile::tempdir().unwrap();
        let req = SynthRequest {
            seed: 5,
            speaker_indices: (0..20).collect(),
            utt_range: 0..10,
            duration_s: 0.8,
            domain: SynthDomain::Tonal,
            subset: Subset::Train,
        };
        let m = synthesize_corpus(&req, dir.path()).unwrap();
        assert_eq!(m.len(), 200);
        assert_eq!(m.speakers().len(), 20);
    }

    #[test]
    fn same_speaker_voice_across_domains() {
        let v1 = speaker_voice(11, 3);
        let v2 = speaker_voice(11, 3);
        assert_eq!(v1.resonances_hz, v2.resonances_hz);
        assert!(v1
            .resonances_hz
            .iter()
            .all(|&f| (100.0..=3700.0).contains(&f)));
    }

    #[test]
    fn aug_sources_are_nonempty_and_bounded() {
        for w in synth_noise_sources(2, 0.5, 1)
            .iter()
            .chain(&synth_music_sources(2, 0.5, 2))
            .chain(&synth_babble_sources(2, 0.8, 3))
        {
            assert!(!w.is_empty());
            assert!(w.samples().iter().all(|v| v.abs() <= 1.0));
            assert!(w.samples().iter().any(|v| v.abs() > 1e-4));
        }
    }
}
