//! Run configuration: one TOML file covering every pipeline step, with
//! CLI `--set key=value` overrides applied before deserialization. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use svkit_core::backend::DcfParams;
use svkit_core::loss::MarginSchedule;
use svkit_core::nets::{NetConfig, ResNetConfig};
use svkit_core::score::ExtractorConfig;
use svkit_core::train::StageConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub valid_fraction: f64,
    pub stage2_speakers: usize,
    pub stage2_utts_per_speaker: usize,
    pub stage2_valid_fraction: f64,
    pub eval_utts_per_speaker: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_speakers: 20,
            utts_per_speaker: 10,
            duration_s: 6.0,
            valid_fraction: 0.1,
            stage2_speakers: 10,
            stage2_utts_per_speaker: 8,
            stage2_valid_fraction: 0.125,
            eval_utts_per_speaker: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub seed: u64,
    pub kinds: Vec<String>,
    pub copies_per_utterance: usize,
    /// Optional directories of WAV source material; synthetic sources are
    /// generated when a directory is absent.
    pub rir_dir: Option<PathBuf>,
    pub music_dir: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
    pub speech_dir: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            seed: 7,
            kinds: vec![
                "reverb".into(),
                "music".into(),
                "noise".into(),
                "babble".into(),
            ],
            copies_per_utterance: 1,
            rir_dir: None,
            music_dir: None,
            noise_dir: None,
            speech_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialsConfig {
    pub seed: u64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl Default for TrialsConfig {
    fn default() -> Self {
        TrialsConfig {
            seed: 99,
            n_target: 500,
            n_nontarget: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub prior: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { prior: 0.01 }
    }
}

/// Per-stage overrides on top of a preset or the desk-scale defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePatch {
    pub preset: Option<String>,
    pub batch_size: Option<usize>,
    pub chunk_frames: Option<usize>,
    pub lr: Option<f64>,
    pub max_iters: Option<u64>,
    pub validate_every: Option<u64>,
    pub patience: Option<u32>,
    pub lr_factor: Option<f64>,
    pub min_lr: Option<f64>,
    pub eps_improve: Option<f64>,
    pub margin_angle: Option<MarginSchedule>,
    pub margin_cos: Option<MarginSchedule>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub log_every: Option<u64>,
    pub workers: Option<usize>,
    pub use_augmented: Option<bool>,
}

/// Desk-scale stage-1 defaults sized for the synthetic corpus.
pub fn desk_stage1() -> StageConfig {
    StageConfig {
        stage: 1,
        batch_size: 12,
        chunk_frames: 200,
        lr: 0.04,
        max_iters: 1200,
        validate_every: 150,
        patience: 2,
        lr_factor: 0.5,
        min_lr: 1e-6,
        eps_improve: 1e-4,
        margin_angle: MarginSchedule::Linear {
            start: 0.0,
            end: 0.2,
            duration_iters: 300,
        },
        margin_cos: MarginSchedule::Linear {
            start: 0.0,
            end: 0.1,
            duration_iters: 300,
        },
        scale: 32.0,
        seed: 101,
        log_every: 25,
        workers: 1,
    }
}

/// Desk-scale stage-2 defaults.
pub fn desk_stage2() -> StageConfig {
    StageConfig {
        stage: 2,
        batch_size: 12,
        chunk_frames: 300,
        lr: 0.004,
        max_iters: 300,
        validate_every: 75,
        patience: 2,
        lr_factor: 0.5,
        min_lr: 1e-6,
        eps_improve: 1e-4,
        margin_angle: MarginSchedule::Exponential {
            start: 0.2,
            end: 0.8,
            duration_iters: 300,
        },
        margin_cos: MarginSchedule::constant(0.0),
        scale: 32.0,
        seed: 202,
        log_every: 25,
        workers: 1,
    }
}

impl StagePatch {
    pub fn resolve(&self, stage: u8) -> Result<(StageConfig, bool)> {
        let mut cfg = match &self.preset {
            Some(name) => StageConfig::preset(name)
                .with_context(|| format!("unknown stage preset {name:?}"))?,
            None if stage == 1 => desk_stage1(),
            None => desk_stage2(),
        };
        cfg.stage = stage;
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.chunk_frames {
            cfg.chunk_frames = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.validate_every {
            cfg.validate_every = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.lr_factor {
            cfg.lr_factor = v;
        }
        if let Some(v) = self.min_lr {
            cfg.min_lr = v;
        }
        if let Some(v) = self.eps_improve {
            cfg.eps_improve = v;
        }
        if let Some(v) = &self.margin_angle {
            cfg.margin_angle = v.clone();
        }
        if let Some(v) = &self.margin_cos {
            cfg.margin_cos = v.clone();
        }
        if let Some(v) = self.scale {
            cfg.scale = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.log_every {
            cfg.log_every = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        Ok((cfg, self.use_augmented.unwrap_or(false)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub extractor: ExtractorConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub net: NetConfig,
    pub stage1: StagePatch,
    pub stage2: StagePatch,
    pub trials: TrialsConfig,
    pub dcf: DcfParams,
    pub calibration: CalibrationConfig,
    /// Cache extracted features under `<workdir>/feats/`.
    pub cache_features: bool,
    /// Model-build seed (parameter initialization).
    pub model_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            extractor: ExtractorConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
            net: NetConfig::Resnet(ResNetConfig {
                base_channels: 8,
                block_counts: [1, 1, 1, 1],
                embedding_dim: 128,
                in_freq_bins: 64,
            }),
            stage1: StagePatch::default(),
            stage2: StagePatch::default(),
            trials: TrialsConfig::default(),
            dcf: DcfParams::default(),
            calibration: CalibrationConfig::default(),
            cache_features: true,
            model_seed: 12345,
        }
    }
}

impl RunConfig {
    /// Load a TOML config, apply `--set a.b.c=value` overrides, validate.
    pub fn load(path: &Path, sets: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text, sets).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, sets: &[String]) -> Result<Self> {
        let mut value: toml::Value = text.parse::<toml::Value>()?;
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let cfg: RunConfig = value.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate().map_err(anyhow::Error::from)?;
        self.dcf.validate().map_err(anyhow::Error::from)?;
        if self.synth.n_speakers < 2 {
            bail!("synth.n_speakers must be at least 2");
        }
        if self.synth.stage2_speakers > self.synth.n_speakers {
            bail!(
                "synth.stage2_speakers ({}) exceeds synth.n_speakers ({})",
                self.synth.stage2_speakers,
                self.synth.n_speakers
            );
        }
        if !(0.0 < self.calibration.prior && self.calibration.prior < 1.0) {
            bail!("calibration.prior must be in (0, 1)");
        }
        for k in &self.augment.kinds {
            k.parse::<svkit_core::augment::AugmentKind>()
                .map_err(anyhow::Error::from)?;
        }
        // Resolve both stages so preset and schedule errors surface early.
        let (s1, _) = self.stage1.resolve(1)?;
        s1.validate().map_err(anyhow::Error::from)?;
        let (s2, _) = self.stage2.resolve(2)?;
        s2.validate().map_err(anyhow::Error::from)?;
        Ok(())
    }

    pub fn workdir(&self) -> &Path {
        &self.paths.workdir
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.workdir().join("manifests").join(name)
    }

    pub fn record_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(self.workdir())?;
        let text = toml::to_string_pretty(self)?;
        std::fs::write(self.workdir().join("resolved-config.toml"), text)?;
        Ok(())
    }
}

/// Apply one `dotted.path=value` override onto a TOML tree.
fn apply_set(root: &mut toml::Value, setting: &str) -> Result<()> {
    let Some((path, raw)) = setting.split_once('=') else {
        bail!("--set expects KEY=VALUE, got {setting:?}");
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("--set key {path:?} has an empty segment");
    }
    // Parse the value as TOML; fall back to a plain string.
    let parsed: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("--set {path}: {k} is not a table"))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("--set {path}: parent is not a table"))?;
    table.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg.synth.n_speakers, 20);
        assert_eq!(cfg.dcf.p_targets, vec![0.01, 0.005]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::parse("[synth]\nbogus_key = 3\n", &[]).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("bogus_key"), "{msg}");
    }

    #[test]
    fn set_overrides_apply_before_validation() {
        let cfg = RunConfig::parse(
            "",
            &[
                "synth.n_speakers=6".into(),
                "synth.stage2_speakers=3".into(),
                "stage1.max_iters=5".into(),
                "paths.workdir=\"/tmp/x\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.synth.n_speakers, 6);
        assert_eq!(cfg.stage1.max_iters, Some(5));
        assert_eq!(cfg.paths.workdir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn stage_presets_resolve() {
        let cfg = RunConfig::parse("[stage1]\npreset = \"paper-stage1\"\n", &[]).unwrap();
        let (s1, _) = cfg.stage1.resolve(1).unwrap();
        assert_eq!(s1.batch_size, 320);
        assert_eq!(s1.validate_every, 8000);
    }

    #[test]
    fn bad_preset_name_fails_validation() {
        assert!(RunConfig::parse("[stage2]\npreset = \"nope\"\n", &[]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(back.synth.n_speakers, cfg.synth.n_speakers);
        assert_eq!(back.net, cfg.net);
    }
}
