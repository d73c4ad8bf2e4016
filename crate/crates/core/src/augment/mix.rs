//! SNR-controlled mixing: single interferer, interval noise, and babble.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AugmentError, AugmentSpec};
use crate::audio::Waveform;

fn mean_power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64
}

/// Loop-repeat (from `offset`, wrapping) and truncate `source` to `len`.
pub fn match_length(source: &[f64], offset: usize, len: usize) -> Vec<f64> {
    let n = source.len();
    assert!(n > 0, "match_length on empty source");
    (0..len).map(|i| source[(offset + i) % n]).collect()
}

/// Gain applied to the interferer so that
/// `10*log10(P_signal / P_scaled_interferer) == snr_db`.
pub fn snr_gain(signal: &[f64], interferer: &[f64], snr_db: f64) -> Result<f64, AugmentError> {
    let p_sig = mean_power(signal);
    let p_int = mean_power(interferer);
    if p_int <= 0.0 {
        return Err(AugmentError::Arg("interferer has zero energy".into()));
    }
    Ok((p_sig / (p_int * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Add an interferer at the requested SNR. The interferer is looped or
/// trimmed to the signal length; the mixture is renormalized by its peak if
/// it would clip (which preserves the component power ratio).
pub fn mix_at_snr(
    wave: &Waveform,
    interferer: &Waveform,
    snr_db: f64,
) -> Result<Waveform, AugmentError> {
    if interferer.is_empty() {
        return Err(AugmentError::Arg("interferer is empty".into()));
    }
    let track = match_length(interferer.samples(), 0, wave.len());
    let gain = snr_gain(wave.samples(), &track, snr_db)?;
    let mut out: Vec<f64> = wave
        .samples()
        .iter()
        .zip(&track)
        .map(|(s, v)| s + gain * v)
        .collect();
    renorm_if_clipping(&mut out);
    Ok(Waveform::new(out, wave.sample_rate()).expect("finite mix"))
}

fn renorm_if_clipping(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in samples.iter_mut() {
            *v /= peak;
        }
    }
}

#[derive(Clone, Debug)]
pub struct MusicPlan {
    pub source: usize,
    pub source_offset: usize,
    pub snr_db: f64,
    pub gain: f64,
}

/// Mix one randomly chosen music track over the whole utterance.
pub fn music_mix_planned(
    wave: &Waveform,
    music: &[Waveform],
    spec: &AugmentSpec,
) -> Result<(Waveform, MusicPlan), AugmentError> {
    if music.is_empty() {
        return Err(AugmentError::Arg("no music sources available".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let source = rng.gen_range(0..music.len());
    let src = &music[source];
    if src.is_empty() {
        return Err(AugmentError::Arg("music source is empty".into()));
    }
    let source_offset = rng.gen_range(0..src.len());
    let snr_db = draw_snr(&mut rng, spec.snr_range_db);
    let track = match_length(src.samples(), source_offset, wave.len());
    let gain = snr_gain(wave.samples(), &track, snr_db)?;
    let mut out: Vec<f64> = wave
        .samples()
        .iter()
        .zip(&track)
        .map(|(s, v)| s + gain * v)
        .collect();
    renorm_if_clipping(&mut out);
    Ok((
        Waveform::new(out, wave.sample_rate()).expect("finite mix"),
        MusicPlan {
            source,
            source_offset,
            snr_db,
            gain,
        },
    ))
}

pub fn music_mix(
    wave: &Waveform,
    music: &[Waveform],
    spec: &AugmentSpec,
) -> Result<Waveform, AugmentError> {
    music_mix_planned(wave, music, spec).map(|(w, _)| w)
}

fn draw_snr<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

#[derive(Clone, Debug)]
pub struct NoisePlacement {
    pub start: usize,
    pub len: usize,
    pub source: usize,
    pub source_offset: usize,
    pub snr_db: f64,
    /// Gain relative to the local signal power of the covered span.
    pub gain: f64,
}

/// Place an independent noise segment at every `interval_s` boundary, each
/// mixed at its own drawn SNR against the local signal power.
pub fn noise_intervals_planned(
    wave: &Waveform,
    noises: &[Waveform],
    spec: &AugmentSpec,
) -> Result<(Waveform, Vec<NoisePlacement>), AugmentError> {
    if noises.is_empty() {
        return Err(AugmentError::Arg("no noise sources available".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let n = wave.len();
    let interval = (spec.interval_s * wave.sample_rate() as f64).round() as usize;
    if interval == 0 {
        return Err(AugmentError::Spec("interval shorter than one sample".into()));
    }
    let mut track = vec![0.0; n];
    let mut plan = Vec::new();
    let mut start = 0;
    while start < n {
        let len = interval.min(n - start);
        let signal_span = &wave.samples()[start..start + len];
        // Re-draw if the chosen span of noise happens to be silent.
        let mut placed = false;
        for _ in 0..8 {
            let source = rng.gen_range(0..noises.len());
            let src = &noises[source];
            if src.is_empty() {
                continue;
            }
            let source_offset = rng.gen_range(0..src.len());
            let snr_db = draw_snr(&mut rng, spec.snr_range_db);
            let seg = match_length(src.samples(), source_offset, len);
            if mean_power(&seg) <= 0.0 {
                continue;
            }
            let gain = snr_gain(signal_span, &seg, snr_db)?;
            for (t, v) in track[start..start + len].iter_mut().zip(&seg) {
                *t += gain * v;
            }
            plan.push(NoisePlacement {
                start,
                len,
                source,
                source_offset,
                snr_db,
                gain,
            });
            placed = true;
            break;
        }
        let _ = placed;
        start += interval;
    }
    let mut out: Vec<f64> = wave
        .samples()
        .iter()
        .zip(&track)
        .map(|(s, v)| s + v)
        .collect();
    renorm_if_clipping(&mut out);
    Ok((
        Waveform::new(out, wave.sample_rate()).expect("finite mix"),
        plan,
    ))
}

pub fn noise_intervals(
    wave: &Waveform,
    noises: &[Waveform],
    spec: &AugmentSpec,
) -> Result<Waveform, AugmentError> {
    noise_intervals_planned(wave, noises, spec).map(|(w, _)| w)
}

#[derive(Clone, Debug)]
pub struct BabblePlan {
    /// (source index, loop offset) per talker.
    pub sources: Vec<(usize, usize)>,
    pub snr_db: f64,
    pub gain: f64,
}

/// Sum a drawn number of speech tracks and mix the aggregate at a drawn SNR.
pub fn babble_mix_planned(
    wave: &Waveform,
    speeches: &[Waveform],
    spec: &AugmentSpec,
) -> Result<(Waveform, BabblePlan), AugmentError> {
    let (kmin, kmax) = spec.num_babble;
    if speeches.len() < kmin {
        return Err(AugmentError::Arg(format!(
            "need at least {} speech sources for babble, have {}",
            kmin,
            speeches.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let hi = kmax.min(speeches.len());
    let k = if kmin == hi {
        kmin
    } else {
        rng.gen_range(kmin..=hi)
    };
    // Distinct talkers via partial shuffle.
    let mut indices: Vec<usize> = (0..speeches.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut sources = Vec::with_capacity(k);
    let mut babble = vec![0.0; wave.len()];
    for &idx in &indices[..k] {
        let src = &speeches[idx];
        if src.is_empty() {
            return Err(AugmentError::Arg("speech source is empty".into()));
        }
        let offset = rng.gen_range(0..src.len());
        let seg = match_length(src.samples(), offset, wave.len());
        for (b, v) in babble.iter_mut().zip(&seg) {
            *b += v;
        }
        sources.push((idx, offset));
    }
    let snr_db = draw_snr(&mut rng, spec.snr_range_db);
    let gain = snr_gain(wave.samples(), &babble, snr_db)?;
    let mut out: Vec<f64> = wave
        .samples()
        .iter()
        .zip(&babble)
        .map(|(s, v)| s + gain * v)
        .collect();
    renorm_if_clipping(&mut out);
    Ok((
        Waveform::new(out, wave.sample_rate()).expect("finite mix"),
        BabblePlan {
            sources,
            snr_db,
            gain,
        },
    ))
}

pub fn babble_mix(
    wave: &Waveform,
    speeches: &[Waveform],
    spec: &AugmentSpec,
) -> Result<Waveform, AugmentError> {
    babble_mix_planned(wave, speeches, spec).map(|(w, _)| w)
}
