//! Subcommand implementations. Each reads the run config, writes its
//! artifacts into the workdir, and prints a short summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Result};

use svkit_core::augment::{augment_utterance, AugmentKind, AugmentSources, AugmentSpec};
use svkit_core::backend::{
    calibrate_fit, compute_act_dcf, compute_eer, compute_min_dcf, format_report, fuse, ReportRow,
};
use svkit_core::corpus::{
    make_trials, split_manifest, synth_babble_sources, synth_music_sources, synth_noise_sources,
    synth_rir_sources, synthesize_corpus, Manifest, ManifestEntry, Subset, SynthDomain,
    SynthRequest,
};
use svkit_core::loss::CombinedMarginHead;
use svkit_core::nets::{reparameterize, BackboneModel, Mode};
use svkit_core::score::{extract_batch, score_trials, EmbeddingStore, ScoreSet, TrialList};
use svkit_core::train::{
    load_checkpoint, run_stage, save_checkpoint, transplant_classifier, TrainData,
};

use crate::config::RunConfig;

fn ensure_workdir_layout(cfg: &RunConfig) -> Result<()> {
    for sub in ["manifests", "corpus", "feats", "ckpt", "emb", "scores", "reports"] {
        std::fs::create_dir_all(cfg.workdir().join(sub))?;
    }
    Ok(())
}

/// Generate the synthetic corpora, manifests and trial list.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    cfg.record_resolved()?;
    let s = &cfg.synth;
    let corpus_a = cfg.workdir().join("corpus").join("a");
    let corpus_b = cfg.workdir().join("corpus").join("b");

    // Pre-training corpus: all speakers, first domain.
    let base = synthesize_corpus(
        &SynthRequest {
            seed: s.seed,
            speaker_indices: (0..s.n_speakers).collect(),
            utt_range: 0..s.utts_per_speaker,
            duration_s: s.duration_s,
            domain: SynthDomain::Tonal,
            subset: Subset::Train,
        },
        &corpus_a,
    )?;
    let (train, valid) = split_manifest(&base, s.valid_fraction, s.seed ^ 0x51)?;
    train.write(&cfg.manifest_path("train.tsv"))?;
    valid.write(&cfg.manifest_path("valid.tsv"))?;

    // Refinement corpus: a speaker subset rendered in the second domain.
    let stage2 = synthesize_corpus(
        &SynthRequest {
            seed: s.seed,
            speaker_indices: (0..s.stage2_speakers).collect(),
            utt_range: 0..s.stage2_utts_per_speaker,
            duration_s: s.duration_s,
            domain: SynthDomain::Breathy,
            subset: Subset::Train,
        },
        &corpus_b,
    )?;
    let (s2_train, s2_valid) = split_manifest(&stage2, s.stage2_valid_fraction, s.seed ^ 0x52)?;
    s2_train.write(&cfg.manifest_path("stage2_train.tsv"))?;
    s2_valid.write(&cfg.manifest_path("stage2_valid.tsv"))?;

    // Evaluation split: disjoint second-domain utterances of the same
    // speakers.
    let eval = synthesize_corpus(
        &SynthRequest {
            seed: s.seed,
            speaker_indices: (0..s.stage2_speakers).collect(),
            utt_range: s.stage2_utts_per_speaker
                ..s.stage2_utts_per_speaker + s.eval_utts_per_speaker,
            duration_s: s.duration_s,
            domain: SynthDomain::Breathy,
            subset: Subset::Test,
        },
        &corpus_b,
    )?;
    eval.write(&cfg.manifest_path("eval.tsv"))?;

    let trials = make_trials(
        &eval,
        &eval,
        cfg.trials.n_target,
        cfg.trials.n_nontarget,
        cfg.trials.seed,
    )?;
    trials.write(&cfg.manifest_path("trials.txt"))?;

    println!(
        "synth: {} train + {} valid utts, {} stage-2 train + {} valid, {} eval utts, {} trials",
        train.len(),
        valid.len(),
        s2_train.len(),
        s2_valid.len(),
        eval.len(),
        trials.len()
    );
    Ok(())
}

fn load_wav_dir(dir: &Path) -> Result<Vec<svkit_core::audio::Waveform>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .wav files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| svkit_core::audio::read_wav(p).map_err(anyhow::Error::from))
        .collect()
}

fn augment_sources(cfg: &RunConfig) -> Result<AugmentSources> {
    let seed = cfg.augment.seed;
    Ok(AugmentSources {
        rirs: match &cfg.augment.rir_dir {
            Some(d) => load_wav_dir(d)?,
            None => synth_rir_sources(8, seed ^ 0xA1),
        },
        music: match &cfg.augment.music_dir {
            Some(d) => load_wav_dir(d)?,
            None => synth_music_sources(6, 5.0, seed ^ 0xA2),
        },
        noise: match &cfg.augment.noise_dir {
            Some(d) => load_wav_dir(d)?,
            None => synth_noise_sources(6, 4.0, seed ^ 0xA3),
        },
        speech: match &cfg.augment.speech_dir {
            Some(d) => load_wav_dir(d)?,
            None => synth_babble_sources(10, 5.0, seed ^ 0xA4),
        },
    })
}

fn hash_id(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Produce augmented copies of the training corpus, an augmented manifest,
/// and a provenance map with `utt_id kind seed` lines.
pub fn cmd_augment(cfg: &RunConfig) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    cfg.record_resolved()?;
    let train_path = cfg.manifest_path("train.tsv");
    if !train_path.exists() {
        bail!(
            "training manifest {} not found; run `svkit synth` first",
            train_path.display()
        );
    }
    let train = Manifest::read(&train_path)?;
    let sources = augment_sources(cfg)?;
    let kinds: Vec<AugmentKind> = cfg
        .augment
        .kinds
        .iter()
        .map(|k| k.parse())
        .collect::<Result<_, _>>()?;
    if kinds.is_empty() {
        bail!("augment.kinds is empty");
    }
    let out_dir = cfg.workdir().join("corpus").join("aug");
    std::fs::create_dir_all(&out_dir)?;

    let jobs: Vec<(usize, usize)> = (0..train.len())
        .flat_map(|i| (0..cfg.augment.copies_per_utterance).map(move |c| (i, c)))
        .collect();
    let results: Vec<Result<(ManifestEntry, String)>> = jobs
        .iter()
        .map(|&(i, c)| {
            let entry = &train.entries[i];
            let kind = kinds[(i + c) % kinds.len()];
            let seed = cfg.augment.seed
                ^ hash_id(&entry.utt_id)
                ^ ((c as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
            let wave = svkit_core::audio::read_wav(&entry.path)?;
            let spec = AugmentSpec::for_kind(kind, seed);
            let out = augment_utterance(&wave, &sources, &spec)?;
            let new_id = format!("{}-{}{}", entry.utt_id, kind.as_str(), c);
            let path = out_dir.join(format!("{new_id}.wav"));
            svkit_core::audio::write_wav(&path, &out)?;
            let map_line = format!("{} {} {}", entry.utt_id, kind.as_str(), seed);
            Ok((
                ManifestEntry {
                    utt_id: new_id,
                    path,
                    speaker_id: entry.speaker_id.clone(),
                    subset: Subset::Train,
                },
                map_line,
            ))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut map_lines = Vec::with_capacity(results.len());
    for r in results {
        let (e, line) = r?;
        entries.push(e);
        map_lines.push(line);
    }
    entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    map_lines.sort();
    Manifest::new(entries.clone())?.write(&cfg.manifest_path("train_aug.tsv"))?;
    std::fs::write(
        cfg.manifest_path("augment.map"),
        map_lines.join("\n") + "\n",
    )?;
    println!(
        "augment: wrote {} augmented utterances to {}",
        entries.len(),
        out_dir.display()
    );
    Ok(())
}

fn prepare_data(
    cfg: &RunConfig,
    train_manifests: &[&Path],
    valid_manifest: &Path,
) -> Result<Arc<TrainData>> {
    let mut manifests = Vec::new();
    for p in train_manifests {
        if !p.exists() {
            bail!("manifest {} not found; run `svkit synth` first", p.display());
        }
        manifests.push(Manifest::read(p)?);
    }
    let refs: Vec<&Manifest> = manifests.iter().collect();
    let train = Manifest::merged(&refs)?;
    let valid = Manifest::read(valid_manifest)?;
    let cache = cfg.cache_features.then(|| cfg.workdir().join("feats"));
    let (data, skipped) = TrainData::prepare(&train, &valid, &cfg.extractor, cache.as_deref())?;
    if !skipped.is_empty() {
        println!("prepare: skipped {} unvoiced utterances", skipped.len());
    }
    Ok(Arc::new(data))
}

/// Run one training stage.
pub fn cmd_train(cfg: &RunConfig, stage: u8, workers: Option<usize>) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    cfg.record_resolved()?;
    let ckpt_dir = cfg.workdir().join("ckpt");
    let (mut stage_cfg, use_augmented) = match stage {
        1 => cfg.stage1.resolve(1)?,
        2 => cfg.stage2.resolve(2)?,
        other => bail!("unknown stage {other}; expected 1 or 2"),
    };
    if let Some(w) = workers {
        stage_cfg.workers = w;
    }

    let (mut model, mut head, data) = match stage {
        1 => {
            let mut train_manifests: Vec<PathBuf> = vec![cfg.manifest_path("train.tsv")];
            if use_augmented {
                let aug = cfg.manifest_path("train_aug.tsv");
                if !aug.exists() {
                    bail!(
                        "stage1.use_augmented is set but {} does not exist; run `svkit augment`",
                        aug.display()
                    );
                }
                train_manifests.push(aug);
            }
            let refs: Vec<&Path> = train_manifests.iter().map(|p| p.as_path()).collect();
            let data = prepare_data(cfg, &refs, &cfg.manifest_path("valid.tsv"))?;
            let model = BackboneModel::build(&cfg.net, cfg.model_seed)
                .map_err(anyhow::Error::from)?;
            let head = CombinedMarginHead::new(
                data.speakers.len(),
                cfg.net.embedding_dim(),
                stage_cfg.scale,
                cfg.model_seed ^ 0xC1A55,
            )?;
            (model, head, data)
        }
        2 => {
            let base_path = ckpt_dir.join("stage1-best.ckpt");
            if !base_path.exists() {
                bail!(
                    "stage-2 refinement needs the stage-1 checkpoint at {}; run `svkit train --stage 1` first",
                    base_path.display()
                );
            }
            let base = load_checkpoint(&base_path)?;
            let data = prepare_data(
                cfg,
                &[&cfg.manifest_path("stage2_train.tsv")],
                &cfg.manifest_path("stage2_valid.tsv"),
            )?;
            let head =
                transplant_classifier(&base.head, &base.meta.speakers, &data.speakers)?;
            let mut model = base.model;
            model.set_mode(Mode::Train);
            (model, head, data)
        }
        _ => unreachable!(),
    };

    let log_path = cfg.workdir().join(format!("train-stage{stage}.log"));
    let mut log = std::fs::File::create(&log_path)?;
    let report = run_stage(&stage_cfg, &data, &mut model, &mut head, &ckpt_dir, &mut log)?;
    println!(
        "train stage {stage}: {} iterations, final loss {:?}, best val loss {:?}, lr {:.2e}",
        report.iterations_run, report.final_train_loss, report.best_val_loss, report.final_lr
    );
    println!(
        "train stage {stage}: best checkpoint {}",
        report
            .best_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    println!("train stage {stage}: log at {}", log_path.display());
    Ok(())
}

fn default_ckpt(cfg: &RunConfig) -> Result<PathBuf> {
    let ckpt_dir = cfg.workdir().join("ckpt");
    for name in ["stage2-best.ckpt", "stage2-final.ckpt", "stage1-best.ckpt", "stage1-final.ckpt"] {
        let p = ckpt_dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!(
        "no checkpoint found under {}; run `svkit train` first",
        ckpt_dir.display()
    )
}

/// Fuse the multi-branch blocks of a RepVGG checkpoint into single
/// convolutions, rewriting the checkpoint (in place by default).
pub fn cmd_reparam(cfg: &RunConfig, ckpt: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let path = match ckpt {
        Some(p) => p,
        None => default_ckpt(cfg)?,
    };
    let loaded = load_checkpoint(&path)?;
    if loaded.meta.fused {
        bail!("checkpoint {} is already fused", path.display());
    }
    let mut model = loaded.model;
    model.set_mode(Mode::Eval);
    let mut fused = reparameterize(&model).map_err(anyhow::Error::from)?;
    let out = out.unwrap_or_else(|| path.clone());
    let mut meta = loaded.meta.clone();
    meta.fused = true;
    save_checkpoint(&out, &mut fused, &loaded.head, None, &meta)?;
    println!(
        "reparam: fused {} -> {} ({} -> {} parameters)",
        path.display(),
        out.display(),
        model.num_params(),
        fused.num_params()
    );
    Ok(())
}

/// Extract embeddings for every utterance in a manifest.
pub fn cmd_extract(
    cfg: &RunConfig,
    ckpt: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    let ckpt_path = match ckpt {
        Some(p) => p,
        None => default_ckpt(cfg)?,
    };
    let manifest_path = manifest.unwrap_or_else(|| cfg.manifest_path("eval.tsv"));
    let out_path = out.unwrap_or_else(|| cfg.workdir().join("emb").join("eval.bin"));
    let loaded = load_checkpoint(&ckpt_path)?;
    let mut model = loaded.model;
    model.set_mode(Mode::Eval);
    let m = Manifest::read(&manifest_path)?;
    let utts: Vec<(String, svkit_core::audio::Waveform)> = m
        .entries
        .iter()
        .map(|e| {
            svkit_core::audio::read_wav(&e.path)
                .map(|w| (e.utt_id.clone(), w))
                .map_err(anyhow::Error::from)
        })
        .collect::<Result<_>>()?;
    let (store, skipped) = extract_batch(&model, &utts, &cfg.extractor)?;
    store.save(&out_path)?;
    println!(
        "extract: {} embeddings -> {} ({} skipped)",
        store.len(),
        out_path.display(),
        skipped.len()
    );
    for s in &skipped {
        println!("extract: skipped {s}");
    }
    Ok(())
}

/// Score a trial list against an embedding store.
pub fn cmd_score(
    cfg: &RunConfig,
    trials: Option<PathBuf>,
    emb: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    let trials_path = trials.unwrap_or_else(|| cfg.manifest_path("trials.txt"));
    let emb_path = emb.unwrap_or_else(|| cfg.workdir().join("emb").join("eval.bin"));
    let out_path = out.unwrap_or_else(|| cfg.workdir().join("scores").join("raw.txt"));
    let trials = TrialList::read(&trials_path)?;
    let store = EmbeddingStore::load(&emb_path)?;
    let scores = score_trials(&trials, &store)?;
    scores.write(&out_path)?;
    println!("score: {} trials -> {}", scores.len(), out_path.display());
    Ok(())
}

/// Fit an affine score→LLR calibration on labeled dev scores and apply it.
pub fn cmd_calibrate(
    cfg: &RunConfig,
    scores: Option<PathBuf>,
    trials: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    let scores_path = scores.unwrap_or_else(|| cfg.workdir().join("scores").join("raw.txt"));
    let trials_path = trials.unwrap_or_else(|| cfg.manifest_path("trials.txt"));
    let out_path = out.unwrap_or_else(|| cfg.workdir().join("scores").join("calibrated.txt"));
    let raw = ScoreSet::read(&scores_path)?;
    let labeled = raw.with_labels_from(&TrialList::read(&trials_path)?)?;
    let model = calibrate_fit(&labeled, cfg.calibration.prior)?;
    let calibrated = model.apply(&raw);
    calibrated.write(&out_path)?;
    let model_path = cfg.workdir().join("scores").join("calibration.toml");
    std::fs::write(
        &model_path,
        format!("a = {:.12}\nb = {:.12}\n", model.a, model.b),
    )?;
    println!(
        "calibrate: a = {:.6}, b = {:.6} (prior {}); calibrated scores -> {}",
        model.a,
        model.b,
        cfg.calibration.prior,
        out_path.display()
    );
    Ok(())
}

/// Equal-weight fusion of score files over identical trial lists.
pub fn cmd_fuse(out: PathBuf, inputs: Vec<PathBuf>) -> Result<()> {
    if inputs.is_empty() {
        bail!("fuse needs at least one score file");
    }
    let sets: Vec<ScoreSet> = inputs
        .iter()
        .map(|p| ScoreSet::read(p).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let fused = fuse(&sets)?;
    fused.write(&out)?;
    println!("fuse: {} systems -> {}", inputs.len(), out.display());
    Ok(())
}

/// EER / minDCF / actDCF report over one or more score files.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    scores: Vec<PathBuf>,
    trials: Option<PathBuf>,
) -> Result<()> {
    ensure_workdir_layout(cfg)?;
    let trials_path = trials.unwrap_or_else(|| cfg.manifest_path("trials.txt"));
    let score_paths = if scores.is_empty() {
        vec![cfg.workdir().join("scores").join("raw.txt")]
    } else {
        scores
    };
    let labels = TrialList::read(&trials_path)?;
    let mut rows = Vec::new();
    for p in &score_paths {
        let labeled = ScoreSet::read(p)?.with_labels_from(&labels)?;
        let eer = compute_eer(&labeled)?;
        let min_dcf = compute_min_dcf(&labeled, &cfg.dcf)?;
        let act_dcf = compute_act_dcf(&labeled, &cfg.dcf)?;
        rows.push(ReportRow {
            system: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string()),
            eer,
            min_dcf,
            act_dcf: Some(act_dcf),
        });
    }
    let report = format_report(&rows, &cfg.dcf);
    print!("{report}");
    let report_path = cfg.workdir().join("reports").join("evaluation.txt");
    std::fs::write(&report_path, report)?;
    println!("evaluate: report -> {}", report_path.display());
    Ok(())
}
