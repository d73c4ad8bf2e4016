//! Embedding extraction and cosine trial scoring.
//!
//! Trial lists are whitespace-separated text lines
//! `enroll_id test_id [target|nontarget]`; score files are
//! `enroll_id test_id score` with six decimal places.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::audio::{extract_features, CmnConfig, FrontendConfig, VadConfig, Waveform};
use crate::ckpt::{CkptError, Container};
use crate::grad::{GradError, Tape, Tensor};
use crate::nets::{BackboneModel, Mode, NetError};

#[derive(Error, Debug)]
pub enum ScoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trial format error: {0}")]
    Format(String),
    #[error("unknown utterance id {0:?} in trial list")]
    MissingId(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("utterance skipped: {0}")]
    Skip(String),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    NonTarget,
}

impl TrialLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::NonTarget => "nontarget",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<TrialLabel>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self, ScoreError> {
        let mut seen = std::collections::HashSet::new();
        for t in &trials {
            if !seen.insert((t.enroll_id.clone(), t.test_id.clone())) {
                return Err(ScoreError::Format(format!(
                    "duplicate trial pair {} {}",
                    t.enroll_id, t.test_id
                )));
            }
        }
        Ok(TrialList { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self, ScoreError> {
        let text = std::fs::read_to_string(path)?;
        let mut trials = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let label = match fields.as_slice() {
                [_, _] => None,
                [_, _, "target"] => Some(TrialLabel::Target),
                [_, _, "nontarget"] => Some(TrialLabel::NonTarget),
                _ => {
                    return Err(ScoreError::Format(format!(
                        "{}:{}: expected `enroll test [target|nontarget]`",
                        path.display(),
                        ln + 1
                    )))
                }
            };
            trials.push(Trial {
                enroll_id: fields[0].to_string(),
                test_id: fields[1].to_string(),
                label,
            });
        }
        TrialList::new(trials)
    }

    pub fn write(&self, path: &Path) -> Result<(), ScoreError> {
        let mut out = String::new();
        for t in &self.trials {
            match t.label {
                Some(l) => writeln!(out, "{} {} {}", t.enroll_id, t.test_id, l.as_str()),
                None => writeln!(out, "{} {}", t.enroll_id, t.test_id),
            }
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Scores aligned one-to-one with a trial list.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub trials: Vec<Trial>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(trials: Vec<Trial>, scores: Vec<f64>) -> Result<Self, ScoreError> {
        if trials.len() != scores.len() {
            return Err(ScoreError::Format(format!(
                "{} trials but {} scores",
                trials.len(),
                scores.len()
            )));
        }
        Ok(ScoreSet { trials, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Split scores by label; errors when any label is missing.
    pub fn partition_by_label(&self) -> Result<(Vec<f64>, Vec<f64>), ScoreError> {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (t, &s) in self.trials.iter().zip(&self.scores) {
            match t.label {
                Some(TrialLabel::Target) => tar.push(s),
                Some(TrialLabel::NonTarget) => non.push(s),
                None => {
                    return Err(ScoreError::Format(format!(
                        "trial {} {} has no label",
                        t.enroll_id, t.test_id
                    )))
                }
            }
        }
        Ok((tar, non))
    }

    /// Attach labels from a trial list with identical pair order.
    pub fn with_labels_from(&self, labels: &TrialList) -> Result<ScoreSet, ScoreError> {
        if labels.trials.len() != self.trials.len() {
            return Err(ScoreError::Format(format!(
                "trial list has {} entries, scores have {}",
                labels.trials.len(),
                self.trials.len()
            )));
        }
        let mut trials = Vec::with_capacity(self.trials.len());
        for (mine, theirs) in self.trials.iter().zip(&labels.trials) {
            if mine.enroll_id != theirs.enroll_id || mine.test_id != theirs.test_id {
                return Err(ScoreError::Format(format!(
                    "trial mismatch: {} {} vs {} {}",
                    mine.enroll_id, mine.test_id, theirs.enroll_id, theirs.test_id
                )));
            }
            trials.push(Trial {
                enroll_id: mine.enroll_id.clone(),
                test_id: mine.test_id.clone(),
                label: theirs.label,
            });
        }
        ScoreSet::new(trials, self.scores.clone())
    }

    pub fn read(path: &Path) -> Result<Self, ScoreError> {
        let text = std::fs::read_to_string(path)?;
        let mut trials = Vec::new();
        let mut scores = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(ScoreError::Format(format!(
                    "{}:{}: expected `enroll test score`",
                    path.display(),
                    ln + 1
                )));
            }
            let score: f64 = fields[2].parse().map_err(|_| {
                ScoreError::Format(format!(
                    "{}:{}: bad score {:?}",
                    path.display(),
                    ln + 1,
                    fields[2]
                ))
            })?;
            trials.push(Trial {
                enroll_id: fields[0].to_string(),
                test_id: fields[1].to_string(),
                label: None,
            });
            scores.push(score);
        }
        ScoreSet::new(trials, scores)
    }

    pub fn write(&self, path: &Path) -> Result<(), ScoreError> {
        let mut out = String::new();
        for (t, s) in self.trials.iter().zip(&self.scores) {
            writeln!(out, "{} {} {:.6}", t.enroll_id, t.test_id, s).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Unit-norm speaker vector for one utterance (or one enrollment model).
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub utt_id: String,
    pub vector: Vec<f64>,
}

/// In-memory collection of embeddings keyed by id. Inserting several
/// embeddings under one id averages them and re-normalizes (multi-utterance
/// enrollment).
#[derive(Default)]
pub struct EmbeddingStore {
    raw: BTreeMap<String, (Vec<f64>, usize)>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, emb: Embedding) -> Result<(), ScoreError> {
        match self.raw.get_mut(&emb.utt_id) {
            Some((acc, count)) => {
                if acc.len() != emb.vector.len() {
                    return Err(ScoreError::DimMismatch(acc.len(), emb.vector.len()));
                }
                for (a, v) in acc.iter_mut().zip(&emb.vector) {
                    *a += v;
                }
                *count += 1;
            }
            None => {
                self.raw.insert(emb.utt_id, (emb.vector, 1));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.raw.keys()
    }

    /// Averaged, re-normalized vector for an id.
    pub fn get(&self, id: &str) -> Option<Vec<f64>> {
        self.raw.get(id).map(|(acc, count)| {
            let mut v: Vec<f64> = acc.iter().map(|a| a / *count as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            v
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        let mut c = Container::new(json!({"kind": "embeddings"}));
        for (id, _) in self.raw.iter() {
            let v = self.get(id).expect("key exists");
            let dim = v.len();
            c.tensors.insert(
                id.clone(),
                Tensor::from_vec(&[dim], v).expect("length matches"),
            );
        }
        c.write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let c = Container::read(path)?;
        let mut store = EmbeddingStore::new();
        for (id, t) in c.tensors {
            store.insert(Embedding {
                utt_id: id,
                vector: t.into_data(),
            })?;
        }
        Ok(store)
    }
}

/// Frontend settings used when turning waveforms into network input.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub frontend: FrontendConfig,
    pub vad: VadConfig,
    pub cmn: CmnConfig,
}

/// Full-utterance embedding: frontend features → eval-mode forward →
/// statistics pooling → head → length normalization.
pub fn extract_embedding(
    model: &mut BackboneModel,
    wave: &Waveform,
    utt_id: &str,
    cfg: &ExtractorConfig,
) -> Result<Embedding, ScoreError> {
    let feats = extract_features(wave, &cfg.frontend, &cfg.vad, &cfg.cmn).map_err(|e| match e {
        crate::audio::AudioError::EmptyAfterVad => {
            ScoreError::Skip(format!("{utt_id}: no voiced frames"))
        }
        other => ScoreError::Audio(other),
    })?;
    let t = feats.num_frames();
    if t < model.min_frames() {
        return Err(ScoreError::Skip(format!(
            "{utt_id}: only {t} voiced frames, below the stride minimum {}",
            model.min_frames()
        )));
    }
    let dim = feats.dim();
    // [1, 1, F, T] with frequency as the image row axis.
    let mut input = Tensor::zeros(&[1, 1, dim, t]);
    for ti in 0..t {
        let row = feats.row(ti);
        for (d, &v) in row.iter().enumerate() {
            input.data_mut()[d * t + ti] = v;
        }
    }
    model.set_mode(Mode::Eval);
    let mut tape = Tape::new();
    let out = model.forward_embeddings(&mut tape, &input)?;
    let emb = tape.l2_normalize_rows(out.embeddings, 1e-12)?;
    Ok(Embedding {
        utt_id: utt_id.to_string(),
        vector: tape.value(emb).data().to_vec(),
    })
}

/// Extract embeddings for many (id, waveform) pairs in parallel.
/// Utterances that do not survive VAD are skipped and reported by id.
pub fn extract_batch(
    model: &BackboneModel,
    utts: &[(String, Waveform)],
    cfg: &ExtractorConfig,
) -> Result<(EmbeddingStore, Vec<String>), ScoreError> {
    let results: Vec<Result<Embedding, ScoreError>> = utts
        .par_iter()
        .map_init(
            || model.clone(),
            |m, (id, wave)| extract_embedding(m, wave, id, cfg),
        )
        .collect();
    let mut store = EmbeddingStore::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(emb) => store.insert(emb)?,
            Err(ScoreError::Skip(msg)) => skipped.push(msg),
            Err(e) => return Err(e),
        }
    }
    Ok((store, skipped))
}

/// Cosine similarity of two unit vectors.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, ScoreError> {
    if a.len() != b.len() {
        return Err(ScoreError::DimMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// One cosine score per trial, order preserved.
pub fn score_trials(trials: &TrialList, store: &EmbeddingStore) -> Result<ScoreSet, ScoreError> {
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let e = store
            .get(&t.enroll_id)
            .ok_or_else(|| ScoreError::MissingId(t.enroll_id.clone()))?;
        let s = store
            .get(&t.test_id)
            .ok_or_else(|| ScoreError::MissingId(t.test_id.clone()))?;
        scores.push(cosine_score(&e, &s)?);
    }
    ScoreSet::new(trials.trials.clone(), scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_hand_values() {
        assert_eq!(cosine_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_score(&[0.6, 0.8], &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(cosine_score(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn score_trials_matches_pairwise_recomputation() {
        let mut store = EmbeddingStore::new();
        let vectors = vec![
            ("a", unit(vec![1.0, 2.0, 0.5])),
            ("b", unit(vec![-0.3, 1.0, 0.2])),
            ("c", unit(vec![0.9, -0.1, 0.4])),
        ];
        for (id, v) in &vectors {
            store
                .insert(Embedding {
                    utt_id: id.to_string(),
                    vector: v.clone(),
                })
                .unwrap();
        }
        let trials = TrialList::new(vec![
            Trial {
                enroll_id: "a".into(),
                test_id: "b".into(),
                label: None,
            },
            Trial {
                enroll_id: "b".into(),
                test_id: "c".into(),
                label: None,
            },
            Trial {
                enroll_id: "a".into(),
                test_id: "c".into(),
                label: None,
            },
        ])
        .unwrap();
        let out = score_trials(&trials, &store).unwrap();
        let expect = [
            cosine_score(&vectors[0].1, &vectors[1].1).unwrap(),
            cosine_score(&vectors[1].1, &vectors[2].1).unwrap(),
            cosine_score(&vectors[0].1, &vectors[2].1).unwrap(),
        ];
        for (got, want) in out.scores.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        // Symmetry.
        let ab = cosine_score(&vectors[0].1, &vectors[1].1).unwrap();
        let ba = cosine_score(&vectors[1].1, &vectors[0].1).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn empty_trial_list_gives_empty_scores() {
        let store = EmbeddingStore::new();
        let out = score_trials(&TrialList::default(), &store).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn self_trial_scores_one() {
        let mut store = EmbeddingStore::new();
        store
            .insert(Embedding {
                utt_id: "x".into(),
                vector: unit(vec![0.2, -0.7, 1.1]),
            })
            .unwrap();
        let trials = TrialList::new(vec![Trial {
            enroll_id: "x".into(),
            test_id: "x".into(),
            label: None,
        }])
        .unwrap();
        let out = score_trials(&trials, &store).unwrap();
        assert!((out.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_id_is_named_in_error() {
        let store = EmbeddingStore::new();
        let trials = TrialList::new(vec![Trial {
            enroll_id: "ghost".into(),
            test_id: "ghost2".into(),
            label: None,
        }])
        .unwrap();
        match score_trials(&trials, &store) {
            Err(ScoreError::MissingId(id)) => assert_eq!(id, "ghost"),
            other => panic!("expected MissingId, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn duplicate_embeddings_average_and_renormalize() {
        let mut store = EmbeddingStore::new();
        store
            .insert(Embedding {
                utt_id: "m".into(),
                vector: vec![1.0, 0.0],
            })
            .unwrap();
        store
            .insert(Embedding {
                utt_id: "m".into(),
                vector: vec![0.0, 1.0],
            })
            .unwrap();
        let v = store.get("m").unwrap();
        let inv = 1.0 / 2f64.sqrt();
        assert!((v[0] - inv).abs() < 1e-12 && (v[1] - inv).abs() < 1e-12);
    }

    #[test]
    fn trial_and_score_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tpath = dir.path().join("trials.txt");
        let spath = dir.path().join("scores.txt");
        let trials = TrialList::new(vec![
            Trial {
                enroll_id: "u1".into(),
                test_id: "u2".into(),
                label: Some(TrialLabel::Target),
            },
            Trial {
                enroll_id: "u1".into(),
                test_id: "u3".into(),
                label: Some(TrialLabel::NonTarget),
            },
        ])
        .unwrap();
        trials.write(&tpath).unwrap();
        let back = TrialList::read(&tpath).unwrap();
        assert_eq!(back, trials);

        let scores = ScoreSet::new(back.trials.clone(), vec![0.912345678, -0.25]).unwrap();
        scores.write(&spath).unwrap();
        let sback = ScoreSet::read(&spath).unwrap();
        assert_eq!(sback.scores.len(), 2);
        assert!((sback.scores[0] - 0.912346).abs() < 1e-9); // six decimals
        let labeled = sback.with_labels_from(&trials).unwrap();
        let (tar, non) = labeled.partition_by_label().unwrap();
        assert_eq!((tar.len(), non.len()), (1, 1));
    }

    #[test]
    fn duplicate_trial_pairs_rejected() {
        let dup = vec![
            Trial {
                enroll_id: "a".into(),
                test_id: "b".into(),
                label: None,
            },
            Trial {
                enroll_id: "a".into(),
                test_id: "b".into(),
                label: None,
            },
        ];
        assert!(TrialList::new(dup).is_err());
    }
}
