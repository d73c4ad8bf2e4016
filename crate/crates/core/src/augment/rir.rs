//! Room impulse responses: synthetic generation and convolution.

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::audio::Waveform;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRirConfig {
    /// Reverberation-time range in seconds (time for the tail to fall 60 dB).
    pub rt60_range_s: (f64, f64),
    /// Direct-path delay range in milliseconds.
    pub delay_range_ms: (f64, f64),
    /// Tail level relative to the direct path.
    pub tail_level: f64,
}

impl Default for SynthRirConfig {
    fn default() -> Self {
        SynthRirConfig {
            rt60_range_s: (0.15, 0.6),
            delay_range_ms: (1.0, 8.0),
            tail_level: 0.4,
        }
    }
}

/// Parametric room impulse response: a unit direct path followed by an
/// exponentially decaying noise tail with the drawn RT60.
pub fn synth_rir<R: Rng>(cfg: &SynthRirConfig, sample_rate: u32, rng: &mut R) -> Waveform {
    let fs = sample_rate as f64;
    let rt60 = rng.gen_range(cfg.rt60_range_s.0..=cfg.rt60_range_s.1);
    let delay_ms = rng.gen_range(cfg.delay_range_ms.0..=cfg.delay_range_ms.1);
    let n0 = (delay_ms * fs / 1000.0).round() as usize;
    let tail = (rt60 * fs).round() as usize;
    let mut h = vec![0.0; n0 + tail + 1];
    h[n0] = 1.0;
    // ln(1000) decay constant puts the envelope at -60 dB after rt60.
    let k = (1000.0f64).ln() / (rt60 * fs);
    for (i, v) in h.iter_mut().enumerate().skip(n0 + 1) {
        let g: f64 = rng.gen_range(-1.0..1.0);
        *v = cfg.tail_level * g * (-k * (i - n0) as f64).exp();
    }
    let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in &mut h {
            *v /= peak;
        }
    }
    Waveform::new(h, sample_rate).expect("finite synthesis")
}

/// Full convolution with an impulse response, truncated to the input length
/// and renormalized by the peak only when the result would clip.
pub fn convolve_rir(wave: &Waveform, rir: &Waveform) -> Result<Waveform, AugmentError> {
    if rir.is_empty() {
        return Err(AugmentError::Arg("empty impulse response".into()));
    }
    if wave.sample_rate() != rir.sample_rate() {
        return Err(AugmentError::Arg(format!(
            "sample-rate mismatch: {} vs {}",
            wave.sample_rate(),
            rir.sample_rate()
        )));
    }
    let n = wave.len();
    let k = rir.len();
    if n == 0 {
        return Ok(wave.clone());
    }
    let full = n + k - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut a: Vec<Complex64> = wave
        .samples()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::default()))
        .take(size)
        .collect();
    let mut b: Vec<Complex64> = rir
        .samples()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::default()))
        .take(size)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    ifft.process(&mut a);
    let scale = 1.0 / size as f64;
    let mut out: Vec<f64> = a[..n].iter().map(|c| c.re * scale).collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    Ok(Waveform::new(out, wave.sample_rate()).expect("finite convolution"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_wave(n: usize, amp: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-amp..amp)).collect(), 8000).unwrap()
    }

    #[test]
    fn unit_impulse_is_identity() {
        let wave = random_wave(4000, 0.8, 1);
        let rir = Waveform::new(vec![1.0], 8000).unwrap();
        let out = convolve_rir(&wave, &rir).unwrap();
        for (a, b) in out.samples().iter().zip(wave.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delayed_impulse_shifts_input() {
        let wave = random_wave(1000, 0.5, 2);
        let k = 37;
        let mut rir = vec![0.0; k + 1];
        rir[k] = 1.0;
        let out = convolve_rir(&wave, &Waveform::new(rir, 8000).unwrap()).unwrap();
        for i in 0..k {
            assert!(out.samples()[i].abs() < 1e-12);
        }
        for i in k..1000 {
            assert!((out.samples()[i] - wave.samples()[i - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn echo_kernel_matches_direct_convolution_oracle() {
        let wave = random_wave(2000, 0.4, 3);
        let mut rir = vec![0.0; 81];
        rir[0] = 1.0;
        rir[80] = 0.5;
        let rir = Waveform::new(rir, 8000).unwrap();
        let out = convolve_rir(&wave, &rir).unwrap();
        // Direct O(N*K) convolution.
        for i in 0..2000 {
            let mut acc = 0.0;
            for (j, h) in rir.samples().iter().enumerate() {
                if i >= j {
                    acc += h * wave.samples()[i - j];
                }
            }
            assert!((out.samples()[i] - acc).abs() < 1e-10, "sample {}", i);
        }
    }

    #[test]
    fn empty_rir_rejected() {
        let wave = random_wave(100, 0.5, 4);
        let rir = Waveform::new(vec![], 8000).unwrap();
        assert!(matches!(
            convolve_rir(&wave, &rir),
            Err(AugmentError::Arg(_))
        ));
    }

    #[test]
    fn synth_rir_is_seeded_and_bounded() {
        let cfg = SynthRirConfig::default();
        let a = synth_rir(&cfg, 8000, &mut ChaCha8Rng::seed_from_u64(5));
        let b = synth_rir(&cfg, 8000, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.samples().iter().all(|v| v.abs() <= 1.0));
        assert!(a.len() > 1000);
    }
}
