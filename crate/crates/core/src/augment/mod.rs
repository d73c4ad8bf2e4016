//! Corpus augmentation: simulated-reverb convolution, music and babble
//! mixing at a drawn SNR, and interval noise. Every recipe is seeded and
//! deterministic so augmented corpora can be regenerated from a manifest
//! line.

mod mix;
mod rir;

pub use mix::{
    babble_mix, babble_mix_planned, match_length, mix_at_snr, music_mix, music_mix_planned,
    noise_intervals, noise_intervals_planned, snr_gain, BabblePlan, MusicPlan, NoisePlacement,
};
pub use rir::{convolve_rir, synth_rir, SynthRirConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;

#[derive(Error, Debug)]
pub enum AugmentError {
    #[error("invalid argument: {0}")]
    Arg(String),
    #[error("invalid augment spec: {0}")]
    Spec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Reverb,
    Music,
    Noise,
    Babble,
}

impl AugmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentKind::Reverb => "reverb",
            AugmentKind::Music => "music",
            AugmentKind::Noise => "noise",
            AugmentKind::Babble => "babble",
        }
    }
}

impl std::str::FromStr for AugmentKind {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, AugmentError> {
        match s {
            "reverb" => Ok(AugmentKind::Reverb),
            "music" => Ok(AugmentKind::Music),
            "noise" => Ok(AugmentKind::Noise),
            "babble" => Ok(AugmentKind::Babble),
            other => Err(AugmentError::Spec(format!("unknown augment kind {:?}", other))),
        }
    }
}

/// One augmentation recipe: which effect, its SNR range, the noise interval
/// length, the babble talker-count range, and the seed that pins every draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub snr_range_db: (f64, f64),
    pub interval_s: f64,
    pub num_babble: (usize, usize),
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn reverb(rng_seed: u64) -> Self {
        AugmentSpec {
            kind: AugmentKind::Reverb,
            snr_range_db: (0.0, 0.0),
            interval_s: 1.0,
            num_babble: (3, 7),
            rng_seed,
        }
    }

    pub fn music(rng_seed: u64) -> Self {
        AugmentSpec {
            kind: AugmentKind::Music,
            snr_range_db: (5.0, 15.0),
            interval_s: 1.0,
            num_babble: (3, 7),
            rng_seed,
        }
    }

    pub fn noise(rng_seed: u64) -> Self {
        AugmentSpec {
            kind: AugmentKind::Noise,
            snr_range_db: (0.0, 15.0),
            interval_s: 1.0,
            num_babble: (3, 7),
            rng_seed,
        }
    }

    pub fn babble(rng_seed: u64) -> Self {
        AugmentSpec {
            kind: AugmentKind::Babble,
            snr_range_db: (13.0, 20.0),
            interval_s: 1.0,
            num_babble: (3, 7),
            rng_seed,
        }
    }

    pub fn for_kind(kind: AugmentKind, rng_seed: u64) -> Self {
        match kind {
            AugmentKind::Reverb => Self::reverb(rng_seed),
            AugmentKind::Music => Self::music(rng_seed),
            AugmentKind::Noise => Self::noise(rng_seed),
            AugmentKind::Babble => Self::babble(rng_seed),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(AugmentError::Spec(format!(
                "snr range [{}, {}] has low > high",
                self.snr_range_db.0, self.snr_range_db.1
            )));
        }
        if self.interval_s <= 0.0 {
            return Err(AugmentError::Spec("interval_s must be positive".into()));
        }
        if self.num_babble.0 == 0 || self.num_babble.0 > self.num_babble.1 {
            return Err(AugmentError::Spec(format!(
                "babble count range [{}, {}] invalid",
                self.num_babble.0, self.num_babble.1
            )));
        }
        Ok(())
    }
}

/// Source material for the four augmentation kinds.
#[derive(Default)]
pub struct AugmentSources {
    pub rirs: Vec<Waveform>,
    pub music: Vec<Waveform>,
    pub noise: Vec<Waveform>,
    pub speech: Vec<Waveform>,
}

/// Apply one augmentation recipe to an utterance.
pub fn augment_utterance(
    wave: &Waveform,
    sources: &AugmentSources,
    spec: &AugmentSpec,
) -> Result<Waveform, AugmentError> {
    spec.validate()?;
    match spec.kind {
        AugmentKind::Reverb => {
            if sources.rirs.is_empty() {
                return Err(AugmentError::Arg("no impulse responses available".into()));
            }
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.rng_seed);
            let rir = &sources.rirs[rng.gen_range(0..sources.rirs.len())];
            convolve_rir(wave, rir)
        }
        AugmentKind::Music => music_mix(wave, &sources.music, spec),
        AugmentKind::Noise => noise_intervals(wave, &sources.noise, spec),
        AugmentKind::Babble => babble_mix(wave, &sources.speech, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_rejects_inverted_range() {
        let mut spec = AugmentSpec::music(1);
        spec.snr_range_db = (10.0, 5.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn kind_round_trips_through_str() {
        for kind in [
            AugmentKind::Reverb,
            AugmentKind::Music,
            AugmentKind::Noise,
            AugmentKind::Babble,
        ] {
            assert_eq!(kind.as_str().parse::<AugmentKind>().unwrap(), kind);
        }
    }
}
