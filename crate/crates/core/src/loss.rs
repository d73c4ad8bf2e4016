//! Combined-margin softmax classification head and the margin schedules
//! used across the two training stages.
//!
//! The head scores an embedding against unit-normalized class weights; the
//! true-class logit gets an additive angular margin (inside the cosine) and
//! an additive cosine margin (outside), both scaled. See
//! [`crate::grad::Tape::combined_margin_loss`] for the exact form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor};

#[derive(Error, Debug)]
pub enum LossError {
    #[error("loss config error: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Classification head: class-weight matrix, logit scale, and class count.
/// Margins vary per iteration and are passed per call.
#[derive(Clone, Debug)]
pub struct CombinedMarginHead {
    pub weight: Tensor, // [num_classes, dim]
    pub scale: f64,
    pub num_classes: usize,
    pub dim: usize,
}

impl CombinedMarginHead {
    /// Fresh head with unit-norm random weight rows.
    pub fn new(num_classes: usize, dim: usize, scale: f64, seed: u64) -> Result<Self, LossError> {
        if num_classes == 0 || dim == 0 {
            return Err(LossError::Config(
                "head needs at least one class and one dimension".into(),
            ));
        }
        if scale <= 0.0 {
            return Err(LossError::Config("scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Tensor::randn(&[num_classes, dim], 1.0, &mut rng);
        for j in 0..num_classes {
            let row = &mut weight.data_mut()[j * dim..(j + 1) * dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row {
                *v /= norm;
            }
        }
        Ok(CombinedMarginHead {
            weight,
            scale,
            num_classes,
            dim,
        })
    }

    pub fn from_weight(weight: Tensor, scale: f64) -> Result<Self, LossError> {
        if weight.ndim() != 2 {
            return Err(LossError::Config(format!(
                "head weight must be 2-D, got shape {:?}",
                weight.shape()
            )));
        }
        if scale <= 0.0 {
            return Err(LossError::Config("scale must be positive".into()));
        }
        let num_classes = weight.shape()[0];
        let dim = weight.shape()[1];
        Ok(CombinedMarginHead {
            weight,
            scale,
            num_classes,
            dim,
        })
    }

    /// Batch-mean loss and gradients for embeddings `f: [N,dim]`.
    pub fn loss(
        &self,
        f: &Tensor,
        labels: &[usize],
        margin_angle: f64,
        margin_cos: f64,
    ) -> Result<LossOutput, LossError> {
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone(), true)?;
        let wv = tape.leaf(self.weight.clone(), true)?;
        let lv =
            tape.combined_margin_loss(fv, wv, labels, self.scale, margin_angle, margin_cos)?;
        let loss = tape.value(lv).as_scalar().expect("scalar loss");
        let mut grads = tape.backward(lv)?;
        Ok(LossOutput {
            loss,
            grad_embeddings: grads.take(fv).expect("embedding grad"),
            grad_weight: grads.take(wv).expect("weight grad"),
        })
    }

    /// Loss only (no gradients), for validation.
    pub fn loss_value(
        &self,
        f: &Tensor,
        labels: &[usize],
        margin_angle: f64,
        margin_cos: f64,
    ) -> Result<f64, LossError> {
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone(), false)?;
        let wv = tape.leaf(self.weight.clone(), false)?;
        let lv =
            tape.combined_margin_loss(fv, wv, labels, self.scale, margin_angle, margin_cos)?;
        Ok(tape.value(lv).as_scalar().expect("scalar loss"))
    }
}

pub struct LossOutput {
    pub loss: f64,
    pub grad_embeddings: Tensor,
    pub grad_weight: Tensor,
}

/// Margin warm-up schedule: linear or exponential interpolation from
/// `start` to `end` over `duration_iters`, clamped at `end` afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MarginSchedule {
    Linear {
        start: f64,
        end: f64,
        duration_iters: u64,
    },
    Exponential {
        start: f64,
        end: f64,
        duration_iters: u64,
    },
}

impl MarginSchedule {
    pub fn constant(value: f64) -> Self {
        MarginSchedule::Linear {
            start: value,
            end: value,
            duration_iters: 1,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            MarginSchedule::Linear { duration_iters, .. } => {
                if duration_iters == 0 {
                    return Err(LossError::Config("schedule duration must be >= 1".into()));
                }
            }
            MarginSchedule::Exponential {
                start,
                duration_iters,
                ..
            } => {
                if duration_iters == 0 {
                    return Err(LossError::Config("schedule duration must be >= 1".into()));
                }
                if start <= 0.0 {
                    return Err(LossError::Config(
                        "exponential schedule requires start > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn value_at(&self, iter: u64) -> f64 {
        match *self {
            MarginSchedule::Linear {
                start,
                end,
                duration_iters,
            } => {
                let frac = iter.min(duration_iters) as f64 / duration_iters as f64;
                start + (end - start) * frac
            }
            MarginSchedule::Exponential {
                start,
                end,
                duration_iters,
            } => {
                let frac = iter.min(duration_iters) as f64 / duration_iters as f64;
                start * (end / start).powf(frac)
            }
        }
    }

    pub fn end_value(&self) -> f64 {
        match *self {
            MarginSchedule::Linear { end, .. } => end,
            MarginSchedule::Exponential { end, .. } => end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedding_with_cosines(cos_target: f64, cos_other: f64) -> (Tensor, Tensor) {
        // Unit embedding [1, 0]; weight rows chosen to give exact cosines.
        let f = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(
            &[2, 2],
            vec![
                cos_target,
                (1.0 - cos_target * cos_target).sqrt(),
                cos_other,
                (1.0 - cos_other * cos_other).sqrt(),
            ],
        )
        .unwrap();
        (f, w)
    }

    #[test]
    fn frozen_hand_value_for_single_trial() {
        // Independently computed: s=32, m1=0.2, m2=0.1, cos_t=0.9, cos_o=0.1
        // -> loss = 5.3041148601906166e-9.
        let (f, w) = embedding_with_cosines(0.9, 0.1);
        let head = CombinedMarginHead::from_weight(w, 32.0).unwrap();
        let out = head.loss(&f, &[0], 0.2, 0.1).unwrap();
        let expect = 5.3041148601906166e-9;
        assert!(
            (out.loss - expect).abs() / expect < 1e-10,
            "got {}",
            out.loss
        );
    }

    #[test]
    fn zero_margins_match_plain_softmax_cross_entropy() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let c = rng.gen_range(2..8);
            let d = rng.gen_range(2..10);
            let f = Tensor::randn(&[n, d], 1.0, &mut rng);
            let w = Tensor::randn(&[c, d], 1.0, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let s = 32.0;
            let head = CombinedMarginHead::from_weight(w.clone(), s).unwrap();
            let got = head.loss_value(&f, &labels, 0.0, 0.0).unwrap();

            // Independent plain cross-entropy on s*cos logits.
            let mut expect = 0.0;
            for i in 0..n {
                let frow = &f.data()[i * d..(i + 1) * d];
                let fnorm = frow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut logits = Vec::with_capacity(c);
                for j in 0..c {
                    let wrow = &w.data()[j * d..(j + 1) * d];
                    let wnorm = wrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = frow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                    logits.push(s * dot / (fnorm * wnorm));
                }
                let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = zmax
                    + logits
                        .iter()
                        .map(|z| (z - zmax).exp())
                        .sum::<f64>()
                        .ln();
                expect += lse - logits[labels[i]];
            }
            expect /= n as f64;
            assert!(
                (got - expect).abs() <= 1e-12 * expect.max(1.0),
                "{} vs {}",
                got,
                expect
            );
        }
    }

    #[test]
    fn angular_margin_alone_matches_aam_form() {
        let (f, w) = embedding_with_cosines(0.7, 0.2);
        let head = CombinedMarginHead::from_weight(w, 24.0).unwrap();
        let got = head.loss_value(&f, &[0], 0.3, 0.0).unwrap();
        let lt: f64 = 24.0 * (0.7f64.acos() + 0.3).cos();
        let lo: f64 = 24.0 * 0.2;
        let expect = -(lt - (lt.exp() + lo.exp()).ln());
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn cosine_margin_alone_matches_am_form() {
        let (f, w) = embedding_with_cosines(0.6, -0.1);
        let head = CombinedMarginHead::from_weight(w, 30.0).unwrap();
        let got = head.loss_value(&f, &[0], 0.0, 0.25).unwrap();
        let lt: f64 = 30.0 * (0.6 - 0.25);
        let lo: f64 = 30.0 * -0.1;
        let expect = -(lt - (lt.exp() + lo.exp()).ln());
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn loss_is_scale_invariant_in_embedding_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let labels = [0, 2, 4, 1];
        let head = CombinedMarginHead::from_weight(w, 20.0).unwrap();
        let base = head.loss_value(&f, &labels, 0.15, 0.08).unwrap();
        for c in [0.1, 3.0, 42.0] {
            let scaled = Tensor::from_vec(
                &[4, 6],
                f.data().iter().map(|v| v * c).collect(),
            )
            .unwrap();
            let got = head.loss_value(&scaled, &labels, 0.15, 0.08).unwrap();
            assert!((got - base).abs() < 1e-10, "c={}: {} vs {}", c, got, base);
        }
    }

    #[test]
    fn schedules_start_correctly() {
        let lin = MarginSchedule::Linear {
            start: 0.0,
            end: 0.2,
            duration_iters: 100,
        };
        let exp = MarginSchedule::Exponential {
            start: 0.2,
            end: 0.8,
            duration_iters: 4000,
        };
        assert_eq!(lin.value_at(0), 0.0);
        assert_eq!(exp.value_at(0), 0.2);
    }

    #[test]
    fn exponential_schedule_hits_documented_points_and_clamps() {
        let exp = MarginSchedule::Exponential {
            start: 0.2,
            end: 0.8,
            duration_iters: 4000,
        };
        assert!((exp.value_at(2000) - 0.4).abs() < 1e-12);
        assert!((exp.value_at(4000) - 0.8).abs() < 1e-12);
        assert!((exp.value_at(4001) - 0.8).abs() < 1e-12);
        assert!((exp.value_at(1_000_000) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn exponential_from_zero_is_a_config_error() {
        let bad = MarginSchedule::Exponential {
            start: 0.0,
            end: 0.8,
            duration_iters: 10,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn linear_schedule_is_monotone_and_clamped() {
        let lin = MarginSchedule::Linear {
            start: 0.0,
            end: 0.2,
            duration_iters: 500,
        };
        let mut prev = -1.0;
        for it in (0..1000).step_by(25) {
            let v = lin.value_at(it);
            assert!(v >= prev);
            assert!(v <= 0.2 + 1e-15);
            prev = v;
        }
        assert_eq!(lin.value_at(500), 0.2);
        assert_eq!(lin.value_at(900), 0.2);
    }

    #[test]
    fn loss_monotone_in_margins() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = rng.gen_range(1..5);
            let c = rng.gen_range(2..7);
            let d = rng.gen_range(2..9);
            let f = Tensor::randn(&[n, d], 1.0, &mut rng);
            let w = Tensor::randn(&[c, d], 1.0, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let head = CombinedMarginHead::from_weight(w, 16.0).unwrap();
            let m1a = rng.gen_range(0.0..0.7);
            let m1b = rng.gen_range(m1a..1.4);
            let m2a = rng.gen_range(0.0..0.5);
            let m2b = rng.gen_range(m2a..0.99);
            let base = head.loss_value(&f, &labels, m1a, m2a).unwrap();
            let up1 = head.loss_value(&f, &labels, m1b, m2a).unwrap();
            let up2 = head.loss_value(&f, &labels, m1a, m2b).unwrap();
            assert!(up1 >= base - 1e-12, "m1 monotonicity: {} -> {}", base, up1);
            if m2b > m2a {
                assert!(up2 > base, "m2 strict monotonicity: {} -> {}", base, up2);
            }
            assert!(base >= 0.0 && base.is_finite());
        }
    }
}
