//! Audio frontend: 8 kHz waveforms to VAD-filtered, mean-normalized log-mel
//! feature matrices.
//!
//! The recipe is the telephone-speech standard: 25 ms frames every 10 ms
//! (snip-edges), Hamming window, 256-point FFT, 64 triangular mel filters
//! over 20–3700 Hz, log with a configurable floor, an energy-rule voice
//! activity detector, and a 3 s sliding mean normalization. Pipeline order:
//! log-mel → VAD mask from frame energies → sliding CMN on the full matrix →
//! drop unvoiced rows.

mod cmn;
mod fbank;
mod featio;
mod vad;
mod wav;

pub use cmn::sliding_cmn;
pub use fbank::{compute_logmel, hz_to_mel, mel_to_hz, Frontend, LogMelOutput};
pub use featio::{read_feature_matrix, write_feature_matrix};
pub use vad::{energy_vad, vad_from_energies};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REQUIRED_SAMPLE_RATE: u32 = 8000;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no voiced frames left after VAD")]
    EmptyAfterVad,
}

/// Mono waveform with its sample rate. Samples are finite reals, nominally
/// in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::Format("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Row-major T×dim feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, AudioError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(AudioError::Format(format!(
                "feature data length {} is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-frame voicing decisions; always the same length as the feature
/// matrix it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct VadMask {
    pub voiced: Vec<bool>,
}

impl VadMask {
    pub fn num_voiced(&self) -> usize {
        self.voiced.iter().filter(|v| **v).count()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub num_mel_bins: usize,
    pub low_freq_hz: f64,
    pub high_freq_hz: f64,
    pub fft_size: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub log_floor: f64,
    pub preemphasis: f64,
    pub remove_dc_offset: bool,
    pub window: WindowKind,
    /// Samples are rescaled by this factor before framing so energy-domain
    /// defaults behave as they do on 16-bit integer waveforms.
    pub sample_scale: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            num_mel_bins: 64,
            low_freq_hz: 20.0,
            high_freq_hz: 3700.0,
            fft_size: 256,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            log_floor: 1e-10,
            preemphasis: 0.97,
            remove_dc_offset: true,
            window: WindowKind::Hamming,
            sample_scale: 32768.0,
        }
    }
}

impl FrontendConfig {
    pub fn frame_length_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
    Povey,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub energy_threshold: f64,
    pub energy_mean_scale: f64,
    pub frames_context: usize,
    pub proportion_threshold: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            energy_threshold: 5.0,
            energy_mean_scale: 0.5,
            frames_context: 2,
            proportion_threshold: 0.6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmnConfig {
    pub window_frames: usize,
}

impl Default for CmnConfig {
    fn default() -> Self {
        CmnConfig { window_frames: 300 }
    }
}

/// Snip-edges frame count: floor((n - frame_len)/shift) + 1.
pub fn num_frames(
    n_samples: usize,
    frame_len: usize,
    frame_shift: usize,
) -> Result<usize, AudioError> {
    if n_samples < frame_len {
        return Err(AudioError::TooShort {
            needed: frame_len,
            got: n_samples,
        });
    }
    Ok((n_samples - frame_len) / frame_shift + 1)
}

/// Drop rows whose mask entry is false, preserving order.
pub fn apply_vad(feats: &FeatureMatrix, mask: &VadMask) -> Result<FeatureMatrix, AudioError> {
    if mask.voiced.len() != feats.num_frames() {
        return Err(AudioError::LengthMismatch(format!(
            "mask has {} entries but features have {} frames",
            mask.voiced.len(),
            feats.num_frames()
        )));
    }
    if !mask.voiced.iter().any(|v| *v) {
        return Err(AudioError::EmptyAfterVad);
    }
    let dim = feats.dim();
    let mut data = Vec::with_capacity(mask.num_voiced() * dim);
    for (t, keep) in mask.voiced.iter().enumerate() {
        if *keep {
            data.extend_from_slice(feats.row(t));
        }
    }
    FeatureMatrix::new(dim, data)
}

/// Full frontend: log-mel → VAD from frame energies → sliding CMN → drop
/// unvoiced rows.
pub fn extract_features(
    wave: &Waveform,
    frontend: &FrontendConfig,
    vad: &VadConfig,
    cmn: &CmnConfig,
) -> Result<FeatureMatrix, AudioError> {
    let out = compute_logmel(wave, frontend)?;
    let mask = vad_from_energies(&out.log_energy, vad);
    let normed = sliding_cmn(&out.feats, cmn.window_frames);
    apply_vad(&normed, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_vad_all_true_is_identity() {
        let feats = FeatureMatrix::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = VadMask {
            voiced: vec![true, true],
        };
        assert_eq!(apply_vad(&feats, &mask).unwrap(), feats);
    }

    #[test]
    fn apply_vad_all_false_is_error() {
        let feats = FeatureMatrix::new(2, vec![1.0, 2.0]).unwrap();
        let mask = VadMask {
            voiced: vec![false],
        };
        assert!(matches!(
            apply_vad(&feats, &mask),
            Err(AudioError::EmptyAfterVad)
        ));
    }

    #[test]
    fn apply_vad_keeps_even_rows_in_order() {
        let feats =
            FeatureMatrix::new(1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mask = VadMask {
            voiced: vec![true, false, true, false, true, false],
        };
        let out = apply_vad(&feats, &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(num_frames(8000, 200, 80).unwrap(), 98);
        assert_eq!(num_frames(200, 200, 80).unwrap(), 1);
        assert!(num_frames(199, 200, 80).is_err());
    }
}
