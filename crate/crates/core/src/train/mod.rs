//! Two-stage training: pre-train on the full corpus, then refine on an
//! in-domain subset with the classifier rebuilt from the matching rows of
//! the pre-trained head.

mod optim;
mod sampler;

pub use optim::{PlateauDecision, PlateauScheduler, PlateauState, SgdMomentum};
pub use sampler::{build_batch, center_chunk, sample_chunk, Batch, BatchLoader};

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::FeatureMatrix;
use crate::ckpt::{CkptError, Container};
use crate::corpus::{CorpusError, Manifest};
use crate::grad::{GradError, Tape, Tensor};
use crate::loss::{CombinedMarginHead, LossError, MarginSchedule};
use crate::nets::{reparameterize, BackboneModel, Mode, NetConfig, NetError};
use crate::score::ExtractorConfig;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("loss became non-finite at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
    #[error("speaker {0:?} is not in the base label space")]
    UnknownSpeaker(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

/// One training stage. The paper-scale presets are kept verbatim; the
/// desk-scale runs shrink batch, chunk and validation cadence.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub chunk_frames: usize,
    pub lr: f64,
    pub max_iters: u64,
    pub validate_every: u64,
    pub patience: u32,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub eps_improve: f64,
    pub margin_angle: MarginSchedule,
    pub margin_cos: MarginSchedule,
    pub scale: f64,
    pub seed: u64,
    pub log_every: u64,
    pub workers: usize,
}

impl StageConfig {
    /// Stage-1 pre-training at the published operating point: batch 320,
    /// 4 s chunks, validation every 8000 iterations, margins ramping from
    /// zero to (0.2, 0.1).
    pub fn paper_stage1() -> Self {
        let max_iters = 100_000;
        StageConfig {
            stage: 1,
            batch_size: 320,
            chunk_frames: 400,
            lr: 0.05,
            max_iters,
            validate_every: 8000,
            patience: 2,
            lr_factor: 0.5,
            min_lr: 1e-6,
            eps_improve: 1e-4,
            margin_angle: MarginSchedule::Linear {
                start: 0.0,
                end: 0.2,
                duration_iters: max_iters / 4,
            },
            margin_cos: MarginSchedule::Linear {
                start: 0.0,
                end: 0.1,
                duration_iters: max_iters / 4,
            },
            scale: 32.0,
            seed: 1,
            log_every: 100,
            workers: 1,
        }
    }

    /// Stage-2 refinement: batch 160, 10 s chunks, validation every 2000
    /// iterations, cosine margin off and the angular margin rising
    /// exponentially from 0.2 to 0.8 over 4000 iterations.
    pub fn paper_stage2() -> Self {
        StageConfig {
            stage: 2,
            batch_size: 160,
            chunk_frames: 1000,
            lr: 0.01,
            max_iters: 20_000,
            validate_every: 2000,
            patience: 2,
            lr_factor: 0.5,
            min_lr: 1e-6,
            eps_improve: 1e-4,
            margin_angle: MarginSchedule::Exponential {
                start: 0.2,
                end: 0.8,
                duration_iters: 4000,
            },
            margin_cos: MarginSchedule::constant(0.0),
            scale: 32.0,
            seed: 2,
            log_every: 100,
            workers: 1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-stage1" => Some(Self::paper_stage1()),
            "paper-stage2" => Some(Self::paper_stage2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.chunk_frames == 0 {
            return Err(TrainError::Config("chunk_frames must be >= 1".into()));
        }
        if self.validate_every == 0 {
            return Err(TrainError::Config("validate_every must be >= 1".into()));
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(TrainError::Config("lr_factor must be in (0, 1)".into()));
        }
        if self.lr < self.min_lr {
            return Err(TrainError::Config(format!(
                "initial lr {} below min_lr {}",
                self.lr, self.min_lr
            )));
        }
        self.margin_angle
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.margin_cos
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Feature-cached corpus ready for training: utterances, labels, and the
/// train/valid partition over one shared speaker label space.
pub struct TrainData {
    pub feats: Vec<FeatureMatrix>,
    pub utt_speaker: Vec<usize>,
    pub speakers: Vec<String>,
    pub train_utts: Vec<usize>,
    pub valid_utts: Vec<usize>,
    pub speaker_train_utts: Vec<Vec<usize>>,
    pub feat_dim: usize,
}

impl TrainData {
    /// Extract (or load cached) features for the train and valid manifests.
    /// Utterances with no voiced frames are dropped and reported.
    pub fn prepare(
        train: &Manifest,
        valid: &Manifest,
        extractor: &ExtractorConfig,
        cache_dir: Option<&Path>,
    ) -> Result<(Self, Vec<String>), TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        if let Some(dir) = cache_dir {
            std::fs::create_dir_all(dir)?;
        }
        let speakers: Vec<String> = train
            .entries
            .iter()
            .chain(&valid.entries)
            .map(|e| e.speaker_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let speaker_index: HashMap<&str, usize> = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        let jobs: Vec<(usize, bool)> = (0..train.len())
            .map(|i| (i, true))
            .chain((0..valid.len()).map(|i| (i, false)))
            .collect();
        let results: Vec<Result<Option<(bool, String, usize, FeatureMatrix)>, TrainError>> = jobs
            .par_iter()
            .map(|&(i, is_train)| {
                let entry = if is_train {
                    &train.entries[i]
                } else {
                    &valid.entries[i]
                };
                let feats = load_or_extract(entry, extractor, cache_dir)?;
                let Some(feats) = feats else {
                    return Ok(None);
                };
                let spk = speaker_index[entry.speaker_id.as_str()];
                Ok(Some((is_train, entry.utt_id.clone(), spk, feats)))
            })
            .collect();

        let mut feats = Vec::new();
        let mut utt_speaker = Vec::new();
        let mut train_utts = Vec::new();
        let mut valid_utts = Vec::new();
        let mut skipped = Vec::new();
        let mut feat_dim = 0;
        for (job, r) in jobs.iter().zip(results) {
            match r? {
                Some((is_train, _id, spk, f)) => {
                    feat_dim = f.dim();
                    let idx = feats.len();
                    feats.push(f);
                    utt_speaker.push(spk);
                    if is_train {
                        train_utts.push(idx);
                    } else {
                        valid_utts.push(idx);
                    }
                }
                None => {
                    let entry = if job.1 {
                        &train.entries[job.0]
                    } else {
                        &valid.entries[job.0]
                    };
                    skipped.push(entry.utt_id.clone());
                }
            }
        }
        if train_utts.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut speaker_train_utts = vec![Vec::new(); speakers.len()];
        for &u in &train_utts {
            speaker_train_utts[utt_speaker[u]].push(u);
        }
        Ok((
            TrainData {
                feats,
                utt_speaker,
                speakers,
                train_utts,
                valid_utts,
                speaker_train_utts,
                feat_dim,
            },
            skipped,
        ))
    }

    /// Assemble directly from in-memory features (tests and tools).
    pub fn from_features(
        feats: Vec<FeatureMatrix>,
        utt_speaker: Vec<usize>,
        speakers: Vec<String>,
        valid_utts: Vec<usize>,
    ) -> Result<Self, TrainError> {
        if feats.len() != utt_speaker.len() {
            return Err(TrainError::Config(
                "feature and label counts differ".into(),
            ));
        }
        let valid_set: std::collections::HashSet<usize> = valid_utts.iter().cloned().collect();
        let train_utts: Vec<usize> =
            (0..feats.len()).filter(|i| !valid_set.contains(i)).collect();
        if train_utts.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let feat_dim = feats[0].dim();
        let mut speaker_train_utts = vec![Vec::new(); speakers.len()];
        for &u in &train_utts {
            speaker_train_utts[utt_speaker[u]].push(u);
        }
        Ok(TrainData {
            feats,
            utt_speaker,
            speakers,
            train_utts,
            valid_utts,
            speaker_train_utts,
            feat_dim,
        })
    }
}

fn load_or_extract(
    entry: &crate::corpus::ManifestEntry,
    extractor: &ExtractorConfig,
    cache_dir: Option<&Path>,
) -> Result<Option<FeatureMatrix>, TrainError> {
    if let Some(dir) = cache_dir {
        let cached = dir.join(format!("{}.feat", entry.utt_id));
        if cached.exists() {
            return Ok(Some(crate::audio::read_feature_matrix(&cached)?));
        }
    }
    let wave = crate::audio::read_wav(&entry.path)?;
    let feats = match crate::audio::extract_features(
        &wave,
        &extractor.frontend,
        &extractor.vad,
        &extractor.cmn,
    ) {
        Ok(f) => f,
        Err(crate::audio::AudioError::EmptyAfterVad) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = cache_dir {
        crate::audio::write_feature_matrix(&dir.join(format!("{}.feat", entry.utt_id)), &feats)?;
    }
    Ok(Some(feats))
}

/// Checkpoint metadata block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub stage: u8,
    pub iteration: u64,
    pub speakers: Vec<String>,
    pub scale: f64,
    pub lr: f64,
    pub scheduler: PlateauState,
    pub fused: bool,
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut BackboneModel,
    head: &CombinedMarginHead,
    opt: Option<&SgdMomentum>,
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    let mut c = Container::new(serde_json::to_value(meta).map_err(CkptError::Meta)?);
    model.for_each_param(&mut |name, t| {
        c.tensors.insert(format!("model.{name}"), t.clone());
    });
    model.for_each_buffer(&mut |name, t| {
        c.tensors.insert(format!("model.{name}"), t.clone());
    });
    c.tensors
        .insert("classifier.weight".into(), head.weight.clone());
    if let Some(opt) = opt {
        for (name, v) in opt.velocities() {
            c.tensors.insert(format!("opt.{name}"), v.clone());
        }
    }
    c.write(path)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: BackboneModel,
    pub head: CombinedMarginHead,
    pub meta: CheckpointMeta,
    pub velocities: BTreeMap<String, Tensor>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let c = Container::read(path)?;
    let meta: CheckpointMeta = c.meta_as().map_err(TrainError::Ckpt)?;
    let mut model = BackboneModel::build(&meta.net, 0)?;
    if meta.fused {
        model.set_mode(Mode::Eval);
        model = reparameterize(&model)?;
    }
    let mut state = BTreeMap::new();
    let mut velocities = BTreeMap::new();
    for (name, t) in &c.tensors {
        if let Some(stripped) = name.strip_prefix("model.") {
            state.insert(stripped.to_string(), t.clone());
        } else if let Some(stripped) = name.strip_prefix("opt.") {
            velocities.insert(stripped.to_string(), t.clone());
        }
    }
    model.load_state(&state)?;
    let weight = c
        .tensors
        .get("classifier.weight")
        .cloned()
        .ok_or_else(|| CkptError::Format("missing classifier.weight".into()))?;
    let head = CombinedMarginHead::from_weight(weight, meta.scale)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    model.set_mode(Mode::Eval);
    Ok(LoadedCheckpoint {
        model,
        head,
        meta,
        velocities,
    })
}

/// Rebuild a classifier head for a speaker subset by selecting the matching
/// rows of the base head, in subset order.
pub fn transplant_classifier(
    base: &CombinedMarginHead,
    base_speakers: &[String],
    subset_speakers: &[String],
) -> Result<CombinedMarginHead, TrainError> {
    if base_speakers.len() != base.num_classes {
        return Err(TrainError::Config(format!(
            "base head has {} classes but {} speaker names were given",
            base.num_classes,
            base_speakers.len()
        )));
    }
    let index: HashMap<&str, usize> = base_speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let dim = base.dim;
    let mut weight = Tensor::zeros(&[subset_speakers.len(), dim]);
    for (row, spk) in subset_speakers.iter().enumerate() {
        let Some(&src) = index.get(spk.as_str()) else {
            return Err(TrainError::UnknownSpeaker(spk.clone()));
        };
        weight.data_mut()[row * dim..(row + 1) * dim]
            .copy_from_slice(&base.weight.data()[src * dim..(src + 1) * dim]);
    }
    CombinedMarginHead::from_weight(weight, base.scale)
        .map_err(|e| TrainError::Config(e.to_string()))
}

pub struct StageReport {
    pub iterations_run: u64,
    pub final_train_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_lr: f64,
}

/// Mean margin loss over the validation utterances with frozen margins,
/// computed in eval mode on deterministic center chunks.
pub fn validation_loss(
    model: &mut BackboneModel,
    head: &CombinedMarginHead,
    data: &TrainData,
    cfg: &StageConfig,
    margin_angle: f64,
    margin_cos: f64,
) -> Result<f64, TrainError> {
    if data.valid_utts.is_empty() {
        return Err(TrainError::Config(
            "validation requested but the valid split is empty".into(),
        ));
    }
    model.set_mode(Mode::Eval);
    let dim = data.feat_dim;
    let chunk = cfg.chunk_frames;
    let plane = dim * chunk;
    let mut total = 0.0;
    let mut count = 0usize;
    for group in data.valid_utts.chunks(cfg.batch_size.max(1)) {
        let mut input = Tensor::zeros(&[group.len(), 1, dim, chunk]);
        let mut labels = Vec::with_capacity(group.len());
        for (b, &u) in group.iter().enumerate() {
            let c = center_chunk(&data.feats[u], chunk)
                .ok_or_else(|| TrainError::Config("empty validation utterance".into()))?;
            let dst = &mut input.data_mut()[b * plane..(b + 1) * plane];
            for t in 0..chunk {
                for (d, &v) in c.row(t).iter().enumerate() {
                    dst[d * chunk + t] = v;
                }
            }
            labels.push(data.utt_speaker[u]);
        }
        let mut tape = Tape::new();
        let fwd = model.forward_embeddings(&mut tape, &input)?;
        let wv = tape.leaf(head.weight.clone(), false)?;
        let lv = tape.combined_margin_loss(
            fwd.embeddings,
            wv,
            &labels,
            head.scale,
            margin_angle,
            margin_cos,
        )?;
        total += tape.value(lv).as_scalar().expect("scalar") * group.len() as f64;
        count += group.len();
    }
    Ok(total / count as f64)
}

/// One full stage: sample batch → forward → margin loss with the scheduled
/// margins → backward → SGD step, validating and checkpointing on the
/// configured cadence and reducing the learning rate on plateaus.
pub fn run_stage(
    cfg: &StageConfig,
    data: &Arc<TrainData>,
    model: &mut BackboneModel,
    head: &mut CombinedMarginHead,
    ckpt_dir: &Path,
    log: &mut dyn Write,
) -> Result<StageReport, TrainError> {
    cfg.validate()?;
    if data.train_utts.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if head.num_classes != data.speakers.len() {
        return Err(TrainError::Config(format!(
            "head has {} classes but the corpus has {} speakers",
            head.num_classes,
            data.speakers.len()
        )));
    }
    if head.dim != model.embedding_dim() {
        return Err(TrainError::Config(format!(
            "head dimension {} does not match embedding dimension {}",
            head.dim,
            model.embedding_dim()
        )));
    }
    if cfg.chunk_frames < model.min_frames() {
        return Err(TrainError::Config(format!(
            "chunk of {} frames is below the backbone minimum {}",
            cfg.chunk_frames,
            model.min_frames()
        )));
    }
    if data.valid_utts.is_empty() && cfg.max_iters >= cfg.validate_every {
        return Err(TrainError::Config(
            "validation split is empty; lower valid_fraction floors to zero held-out \
             utterances per speaker"
                .into(),
        ));
    }
    std::fs::create_dir_all(ckpt_dir)?;

    let mut opt = SgdMomentum::new(cfg.lr, 0.9);
    let mut sched =
        PlateauScheduler::new(cfg.patience, cfg.lr_factor, cfg.min_lr, cfg.eps_improve);
    let mut loader = BatchLoader::spawn(
        Arc::clone(data),
        cfg.batch_size,
        cfg.chunk_frames,
        cfg.seed,
        0..cfg.max_iters,
        cfg.workers,
    );
    let mut best: Option<(f64, PathBuf)> = None;
    let mut last_loss = None;
    let mut iterations_run = 0;
    model.set_mode(Mode::Train);

    for iter in 0..cfg.max_iters {
        let m1 = cfg.margin_angle.value_at(iter);
        let m2 = cfg.margin_cos.value_at(iter);
        let batch = loader.next_batch()?;
        let mut tape = Tape::new();
        let step = (|| -> Result<f64, TrainError> {
            let fwd = model.forward_embeddings(&mut tape, &batch.input)?;
            let wv = tape.leaf(head.weight.clone(), true)?;
            let lv = tape.combined_margin_loss(
                fwd.embeddings,
                wv,
                &batch.labels,
                head.scale,
                m1,
                m2,
            )?;
            let loss = tape.value(lv).as_scalar().expect("scalar");
            let mut grads = tape.backward(lv)?;
            let mut grad_map: HashMap<String, Tensor> = HashMap::new();
            for (name, var) in fwd.params {
                if let Some(g) = grads.take(var) {
                    grad_map.insert(name, g);
                }
            }
            let mut step_err = None;
            model.for_each_param(&mut |name, t| {
                if step_err.is_some() {
                    return;
                }
                if let Some(g) = grad_map.remove(&name) {
                    if let Err(e) = opt.step(&name, t, &g) {
                        step_err = Some(e);
                    }
                }
            });
            if let Some(e) = step_err {
                return Err(e);
            }
            if let Some(gw) = grads.take(wv) {
                opt.step("classifier.weight", &mut head.weight, &gw)?;
            }
            Ok(loss)
        })();
        let loss = match step {
            Ok(l) => l,
            Err(TrainError::Grad(GradError::NonFinite(op))) => {
                writeln!(log, "iter={iter} abort=non-finite op={op}")?;
                return Err(TrainError::NonFiniteLoss { iter });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter });
        }
        last_loss = Some(loss);
        iterations_run = iter + 1;
        if iter % cfg.log_every == 0 {
            writeln!(
                log,
                "iter={iter} loss={loss:.6} lr={:.6e} m1={m1:.6} m2={m2:.6}",
                opt.lr
            )?;
        }
        if (iter + 1) % cfg.validate_every == 0 && !data.valid_utts.is_empty() {
            let vloss = validation_loss(model, head, data, cfg, m1, m2)?;
            let decision = sched.observe(vloss, opt.lr);
            opt.lr = decision.lr;
            writeln!(
                log,
                "iter={} val_loss={vloss:.6} lr={:.6e} m1={m1:.6} m2={m2:.6}",
                iter + 1,
                opt.lr
            )?;
            let path = ckpt_dir.join(format!("stage{}-iter{:07}.ckpt", cfg.stage, iter + 1));
            let meta = CheckpointMeta {
                net: model.config.clone(),
                stage: cfg.stage,
                iteration: iter + 1,
                speakers: data.speakers.clone(),
                scale: head.scale,
                lr: opt.lr,
                scheduler: sched.state.clone(),
                fused: false,
            };
            save_checkpoint(&path, model, head, Some(&opt), &meta)?;
            if best.as_ref().map(|(b, _)| vloss < *b).unwrap_or(true) {
                let best_path = ckpt_dir.join(format!("stage{}-best.ckpt", cfg.stage));
                std::fs::copy(&path, &best_path)?;
                best = Some((vloss, best_path));
            }
            model.set_mode(Mode::Train);
            if decision.exhausted {
                writeln!(log, "iter={} stop=lr-floor-plateau", iter + 1)?;
                break;
            }
        }
    }

    // Always leave a loadable final checkpoint, even for zero-iteration runs.
    let final_path = ckpt_dir.join(format!("stage{}-final.ckpt", cfg.stage));
    let meta = CheckpointMeta {
        net: model.config.clone(),
        stage: cfg.stage,
        iteration: iterations_run,
        speakers: data.speakers.clone(),
        scale: head.scale,
        lr: opt.lr,
        scheduler: sched.state.clone(),
        fused: false,
    };
    save_checkpoint(&final_path, model, head, Some(&opt), &meta)?;
    let best_ckpt = best
        .as_ref()
        .map(|(_, p)| p.clone())
        .unwrap_or(final_path);
    Ok(StageReport {
        iterations_run,
        final_train_loss: last_loss,
        best_val_loss: best.as_ref().map(|(v, _)| *v),
        best_checkpoint: Some(best_ckpt),
        final_lr: opt.lr,
    })
}
