//! Sliding-window mean normalization.

use super::FeatureMatrix;

/// Subtract from each frame the per-dimension mean of its centered
/// `window_frames` window. Windows are shifted to stay inside the matrix at
/// the edges; utterances shorter than the window use the global mean.
pub fn sliding_cmn(feats: &FeatureMatrix, window_frames: usize) -> FeatureMatrix {
    let t = feats.num_frames();
    let dim = feats.dim();
    if t == 0 {
        return feats.clone();
    }
    let window = window_frames.max(1);
    // Prefix sums per dimension for O(1) window means.
    let mut prefix = vec![0.0; (t + 1) * dim];
    for ti in 0..t {
        let row = feats.row(ti);
        for d in 0..dim {
            prefix[(ti + 1) * dim + d] = prefix[ti * dim + d] + row[d];
        }
    }
    let mut out = vec![0.0; t * dim];
    for ti in 0..t {
        let (start, end) = if t <= window {
            (0, t)
        } else {
            let half = window / 2;
            let start = ti.saturating_sub(half).min(t - window);
            (start, start + window)
        };
        let n = (end - start) as f64;
        let row = feats.row(ti);
        for d in 0..dim {
            let mean = (prefix[end * dim + d] - prefix[start * dim + d]) / n;
            out[ti * dim + d] = row[d] - mean;
        }
    }
    FeatureMatrix::new(dim, out).expect("same geometry as input")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feats(t: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(dim, (0..t * dim).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .unwrap()
    }

    #[test]
    fn constant_input_becomes_zero() {
        let feats = FeatureMatrix::new(3, vec![7.5; 30]).unwrap();
        let out = sliding_cmn(&feats, 300);
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn short_input_columns_sum_to_zero() {
        let feats = random_feats(120, 5, 3);
        let out = sliding_cmn(&feats, 300);
        for d in 0..5 {
            let sum: f64 = (0..120).map(|t| out.row(t)[d]).sum();
            assert!(sum.abs() < 1e-10, "dim {} sums to {}", d, sum);
        }
    }

    #[test]
    fn long_input_uses_centered_window() {
        let feats = random_feats(600, 4, 4);
        let out = sliding_cmn(&feats, 300);
        // Frame 300: centered window is frames 150..450.
        for d in 0..4 {
            let mean: f64 = (150..450).map(|t| feats.row(t)[d]).sum::<f64>() / 300.0;
            let expect = feats.row(300)[d] - mean;
            assert!((out.row(300)[d] - expect).abs() < 1e-12);
        }
        // First frame: window clamps to 0..300.
        for d in 0..4 {
            let mean: f64 = (0..300).map(|t| feats.row(t)[d]).sum::<f64>() / 300.0;
            let expect = feats.row(0)[d] - mean;
            assert!((out.row(0)[d] - expect).abs() < 1e-12);
        }
        // Last frame: window clamps to 300..600.
        for d in 0..4 {
            let mean: f64 = (300..600).map(|t| feats.row(t)[d]).sum::<f64>() / 300.0;
            let expect = feats.row(599)[d] - mean;
            assert!((out.row(599)[d] - expect).abs() < 1e-12);
        }
    }
}
