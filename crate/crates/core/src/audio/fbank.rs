//! Log-mel filterbank extraction.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::{
    num_frames, AudioError, FeatureMatrix, FrontendConfig, Waveform, WindowKind,
    REQUIRED_SAMPLE_RATE,
};

pub struct LogMelOutput {
    pub feats: FeatureMatrix,
    /// Per-frame log energy of the raw (pre-window) frame, for the VAD.
    pub log_energy: Vec<f64>,
}

/// Precomputed mel filterbank, window and FFT plan for one configuration.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    /// Per mel bin: (first FFT bin, triangle weights).
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
    frame_len: usize,
    frame_shift: usize,
}

pub fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

impl Frontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self, AudioError> {
        let frame_len = cfg.frame_length_samples(REQUIRED_SAMPLE_RATE);
        let frame_shift = cfg.frame_shift_samples(REQUIRED_SAMPLE_RATE);
        if cfg.fft_size < frame_len {
            return Err(AudioError::Format(format!(
                "fft_size {} smaller than frame length {}",
                cfg.fft_size, frame_len
            )));
        }
        if !(0.0 <= cfg.low_freq_hz
            && cfg.low_freq_hz < cfg.high_freq_hz
            && cfg.high_freq_hz <= REQUIRED_SAMPLE_RATE as f64 / 2.0)
        {
            return Err(AudioError::Format(format!(
                "mel band [{}, {}] invalid for 8 kHz input",
                cfg.low_freq_hz, cfg.high_freq_hz
            )));
        }
        let n = frame_len as f64 - 1.0;
        let window: Vec<f64> = (0..frame_len)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n;
                match cfg.window {
                    WindowKind::Hamming => 0.54 - 0.46 * a.cos(),
                    WindowKind::Hann => 0.5 - 0.5 * a.cos(),
                    WindowKind::Povey => (0.5 - 0.5 * a.cos()).powf(0.85),
                }
            })
            .collect();
        let filters = build_mel_filters(cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Frontend {
            cfg: cfg.clone(),
            window,
            filters,
            fft,
            frame_len,
            frame_shift,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    pub fn compute(&self, wave: &Waveform) -> Result<LogMelOutput, AudioError> {
        if wave.sample_rate() != REQUIRED_SAMPLE_RATE {
            return Err(AudioError::Format(format!(
                "expected {} Hz input, got {} Hz",
                REQUIRED_SAMPLE_RATE,
                wave.sample_rate()
            )));
        }
        let t = num_frames(wave.len(), self.frame_len, self.frame_shift)?;
        let dim = self.cfg.num_mel_bins;
        let mut data = vec![0.0; t * dim];
        let mut log_energy = vec![0.0; t];
        let mut frame = vec![0.0; self.frame_len];
        let mut spec = vec![Complex64::default(); self.cfg.fft_size];
        let floor = self.cfg.log_floor;
        for ti in 0..t {
            let start = ti * self.frame_shift;
            for (dst, src) in frame
                .iter_mut()
                .zip(&wave.samples()[start..start + self.frame_len])
            {
                *dst = src * self.cfg.sample_scale;
            }
            if self.cfg.remove_dc_offset {
                let mean = frame.iter().sum::<f64>() / self.frame_len as f64;
                for v in &mut frame {
                    *v -= mean;
                }
            }
            // Raw frame energy (before pre-emphasis and windowing) drives the VAD.
            let energy: f64 = frame.iter().map(|v| v * v).sum();
            log_energy[ti] = energy.max(floor).ln();
            if self.cfg.preemphasis > 0.0 {
                let p = self.cfg.preemphasis;
                for k in (1..self.frame_len).rev() {
                    frame[k] -= p * frame[k - 1];
                }
                frame[0] -= p * frame[0];
            }
            for (s, (v, w)) in spec.iter_mut().zip(frame.iter().zip(&self.window)) {
                *s = Complex64::new(v * w, 0.0);
            }
            for s in spec.iter_mut().skip(self.frame_len) {
                *s = Complex64::default();
            }
            self.fft.process(&mut spec);
            let half = self.cfg.fft_size / 2;
            let row = &mut data[ti * dim..(ti + 1) * dim];
            for (m, (first, weights)) in self.filters.iter().enumerate() {
                let mut e = 0.0;
                for (off, w) in weights.iter().enumerate() {
                    let k = first + off;
                    let p = if k <= half {
                        spec[k].norm_sqr()
                    } else {
                        0.0
                    };
                    e += w * p;
                }
                row[m] = e.max(floor).ln();
            }
        }
        Ok(LogMelOutput {
            feats: FeatureMatrix::new(dim, data)?,
            log_energy,
        })
    }
}

fn build_mel_filters(cfg: &FrontendConfig) -> Vec<(usize, Vec<f64>)> {
    let half = cfg.fft_size / 2;
    let bin_hz = REQUIRED_SAMPLE_RATE as f64 / cfg.fft_size as f64;
    let mel_lo = hz_to_mel(cfg.low_freq_hz);
    let mel_hi = hz_to_mel(cfg.high_freq_hz);
    let step = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
    let mut filters = Vec::with_capacity(cfg.num_mel_bins);
    for m in 0..cfg.num_mel_bins {
        let left = mel_lo + m as f64 * step;
        let center = left + step;
        let right = center + step;
        let mut first = None;
        let mut weights = Vec::new();
        for k in 0..=half {
            let mel_k = hz_to_mel(k as f64 * bin_hz);
            let w = if mel_k <= left || mel_k >= right {
                0.0
            } else if mel_k <= center {
                (mel_k - left) / step
            } else {
                (right - mel_k) / step
            };
            if w > 0.0 {
                if first.is_none() {
                    first = Some(k);
                }
                weights.push(w);
            } else if first.is_some() {
                break;
            }
        }
        filters.push((first.unwrap_or(0), weights));
    }
    filters
}

/// One-shot log-mel extraction; builds a [`Frontend`] internally.
pub fn compute_logmel(
    wave: &Waveform,
    cfg: &FrontendConfig,
) -> Result<LogMelOutput, AudioError> {
    Frontend::new(cfg)?.compute(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silence(seconds: f64) -> Waveform {
        Waveform::new(vec![0.0; (seconds * 8000.0) as usize], 8000).unwrap()
    }

    fn sine(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * 8000.0) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin())
            .collect();
        Waveform::new(samples, 8000).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let out = compute_logmel(&silence(1.0), &FrontendConfig::default()).unwrap();
        assert_eq!(out.feats.num_frames(), 98);
        assert_eq!(out.feats.dim(), 64);
    }

    #[test]
    fn all_zero_input_hits_log_floor_everywhere() {
        let cfg = FrontendConfig::default();
        let out = compute_logmel(&silence(1.0), &cfg).unwrap();
        let expect = cfg.log_floor.ln();
        for v in out.feats.data() {
            assert_eq!(*v, expect);
        }
        for e in &out.log_energy {
            assert_eq!(*e, expect);
        }
    }

    #[test]
    fn wrong_sample_rate_rejected() {
        let wave = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert!(matches!(
            compute_logmel(&wave, &FrontendConfig::default()),
            Err(AudioError::Format(_))
        ));
    }

    #[test]
    fn too_short_input_rejected() {
        let wave = Waveform::new(vec![0.0; 150], 8000).unwrap();
        assert!(matches!(
            compute_logmel(&wave, &FrontendConfig::default()),
            Err(AudioError::TooShort { .. })
        ));
    }

    #[test]
    fn deterministic_bit_identical() {
        let wave = sine(440.0, 1.2, 0.7);
        let cfg = FrontendConfig::default();
        let a = compute_logmel(&wave, &cfg).unwrap();
        let b = compute_logmel(&wave, &cfg).unwrap();
        assert_eq!(a.feats.data(), b.feats.data());
        assert_eq!(a.log_energy, b.log_energy);
    }

    #[test]
    fn one_khz_sine_peaks_in_the_mel_bin_containing_one_khz() {
        // Independent oracle: rebuild the mel grid from its definition and
        // pick the filter whose center is nearest 1 kHz.
        let cfg = FrontendConfig::default();
        let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
        let lo = mel(cfg.low_freq_hz);
        let hi = mel(cfg.high_freq_hz);
        let step = (hi - lo) / (cfg.num_mel_bins + 1) as f64;
        let target = mel(1000.0);
        let expected = (0..cfg.num_mel_bins)
            .min_by(|&a, &b| {
                let ca = (lo + (a + 1) as f64 * step - target).abs();
                let cb = (lo + (b + 1) as f64 * step - target).abs();
                ca.partial_cmp(&cb).unwrap()
            })
            .unwrap();
        let out = compute_logmel(&sine(1000.0, 1.0, 0.9), &cfg).unwrap();
        for t in 0..out.feats.num_frames() {
            let row = out.feats.row(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, expected, "frame {}", t);
        }
    }
}
