//! Chunk sampling and deterministic batch construction, with an optional
//! prefetch pool. Batch content is a pure function of (seed, batch index):
//! worker count and completion order cannot change what a batch contains.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::FeatureMatrix;
use crate::grad::Tensor;

use super::{TrainData, TrainError};

/// Uniformly random contiguous slice of `chunk_frames`; shorter utterances
/// wrap around. Returns None for empty utterances (skip signal).
pub fn sample_chunk<R: Rng>(
    feats: &FeatureMatrix,
    chunk_frames: usize,
    rng: &mut R,
) -> Option<FeatureMatrix> {
    let t = feats.num_frames();
    if t == 0 || chunk_frames == 0 {
        return None;
    }
    let dim = feats.dim();
    let mut data = Vec::with_capacity(chunk_frames * dim);
    if t >= chunk_frames {
        let start = rng.gen_range(0..=t - chunk_frames);
        data.extend_from_slice(
            &feats.data()[start * dim..(start + chunk_frames) * dim],
        );
    } else {
        for i in 0..chunk_frames {
            data.extend_from_slice(feats.row(i % t));
        }
    }
    Some(FeatureMatrix::new(dim, data).expect("chunk geometry"))
}

/// Deterministic center slice used for validation batches.
pub fn center_chunk(feats: &FeatureMatrix, chunk_frames: usize) -> Option<FeatureMatrix> {
    let t = feats.num_frames();
    if t == 0 || chunk_frames == 0 {
        return None;
    }
    let dim = feats.dim();
    let mut data = Vec::with_capacity(chunk_frames * dim);
    if t >= chunk_frames {
        let start = (t - chunk_frames) / 2;
        data.extend_from_slice(
            &feats.data()[start * dim..(start + chunk_frames) * dim],
        );
    } else {
        for i in 0..chunk_frames {
            data.extend_from_slice(feats.row(i % t));
        }
    }
    Some(FeatureMatrix::new(dim, data).expect("chunk geometry"))
}

pub struct Batch {
    pub input: Tensor, // [B, 1, F, chunk]
    pub labels: Vec<usize>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Build the batch for one iteration: uniform random speakers, one random
/// utterance and chunk each. Seeded only by (stage seed, iteration).
pub fn build_batch(
    data: &TrainData,
    batch_size: usize,
    chunk_frames: usize,
    stage_seed: u64,
    iter: u64,
) -> Result<Batch, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(stage_seed ^ iter.wrapping_mul(0x9e37)));
    let dim = data.feat_dim;
    let mut input = Tensor::zeros(&[batch_size, 1, dim, chunk_frames]);
    let mut labels = Vec::with_capacity(batch_size);
    let plane = dim * chunk_frames;
    for b in 0..batch_size {
        let spk = rng.gen_range(0..data.speakers.len());
        let utts = &data.speaker_train_utts[spk];
        if utts.is_empty() {
            return Err(TrainError::Config(format!(
                "speaker {} has no training utterances",
                data.speakers[spk]
            )));
        }
        let utt = utts[rng.gen_range(0..utts.len())];
        let chunk = sample_chunk(&data.feats[utt], chunk_frames, &mut rng)
            .ok_or_else(|| TrainError::Config("empty utterance in corpus".into()))?;
        let dst = &mut input.data_mut()[b * plane..(b + 1) * plane];
        for t in 0..chunk_frames {
            for (d, &v) in chunk.row(t).iter().enumerate() {
                dst[d * chunk_frames + t] = v;
            }
        }
        labels.push(spk);
    }
    Ok(Batch { input, labels })
}

/// Prefetching batch source. Workers claim iteration indices from a shared
/// counter and build batches independently; the consumer reorders.
pub struct BatchLoader {
    rx: Option<Receiver<(u64, Result<Batch, TrainError>)>>,
    pending: BTreeMap<u64, Result<Batch, TrainError>>,
    next: u64,
    end: u64,
    handles: Vec<JoinHandle<()>>,
    // Synchronous fallback.
    sync: Option<(Arc<TrainData>, usize, usize, u64)>,
}

impl BatchLoader {
    pub fn spawn(
        data: Arc<TrainData>,
        batch_size: usize,
        chunk_frames: usize,
        stage_seed: u64,
        iters: std::ops::Range<u64>,
        workers: usize,
    ) -> Self {
        if workers == 0 || iters.is_empty() {
            return BatchLoader {
                rx: None,
                pending: BTreeMap::new(),
                next: iters.start,
                end: iters.end,
                handles: Vec::new(),
                sync: Some((data, batch_size, chunk_frames, stage_seed)),
            };
        }
        let (tx, rx) = sync_channel(workers * 2);
        let counter = Arc::new(AtomicU64::new(iters.start));
        let mut handles = Vec::with_capacity(workers);
        for _ in 0..workers {
            let tx = tx.clone();
            let counter = Arc::clone(&counter);
            let data = Arc::clone(&data);
            let end = iters.end;
            handles.push(std::thread::spawn(move || loop {
                let iter = counter.fetch_add(1, Ordering::SeqCst);
                if iter >= end {
                    break;
                }
                let batch = build_batch(&data, batch_size, chunk_frames, stage_seed, iter);
                if tx.send((iter, batch)).is_err() {
                    break;
                }
            }));
        }
        BatchLoader {
            rx: Some(rx),
            pending: BTreeMap::new(),
            next: iters.start,
            end: iters.end,
            handles,
            sync: None,
        }
    }

    /// Batch for the next iteration index, in order.
    pub fn next_batch(&mut self) -> Result<Batch, TrainError> {
        assert!(self.next < self.end, "loader exhausted");
        let iter = self.next;
        self.next += 1;
        if let Some((data, batch_size, chunk, seed)) = &self.sync {
            return build_batch(data, *batch_size, *chunk, *seed, iter);
        }
        loop {
            if let Some(b) = self.pending.remove(&iter) {
                return b;
            }
            let rx = self.rx.as_ref().expect("threaded mode");
            match rx.recv() {
                Ok((idx, batch)) => {
                    if idx == iter {
                        return batch;
                    }
                    self.pending.insert(idx, batch);
                }
                Err(_) => {
                    return Err(TrainError::Config(
                        "batch workers exited unexpectedly".into(),
                    ))
                }
            }
        }
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        // Unblock senders, then join.
        self.pending.clear();
        if let Some(rx) = self.rx.take() {
            drop(rx);
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(t: usize, dim: usize, fill: impl Fn(usize, usize) -> f64) -> FeatureMatrix {
        let mut data = Vec::with_capacity(t * dim);
        for ti in 0..t {
            for d in 0..dim {
                data.push(fill(ti, d));
            }
        }
        FeatureMatrix::new(dim, data).unwrap()
    }

    #[test]
    fn exact_length_returns_whole_utterance() {
        let f = feats(10, 3, |t, d| (t * 3 + d) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_chunk(&f, 10, &mut rng).unwrap();
        assert_eq!(c, f);
    }

    #[test]
    fn long_utterance_slices_are_seeded_deterministic() {
        let f = feats(40, 2, |t, d| (t * 2 + d) as f64);
        let a = sample_chunk(&f, 20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_chunk(&f, 20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_frames(), 20);
        // The slice is contiguous: consecutive frames differ by dim.
        let start = a.row(0)[0] as usize / 2;
        for t in 0..20 {
            assert_eq!(a.row(t)[0] as usize, (start + t) * 2);
        }
    }

    #[test]
    fn short_utterance_wraps_to_exact_length() {
        let f = feats(7, 2, |t, d| (t * 2 + d) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = sample_chunk(&f, 16, &mut rng).unwrap();
        assert_eq!(c.num_frames(), 16);
        for t in 0..16 {
            assert_eq!(c.row(t), f.row(t % 7), "frame {t}");
        }
    }

    #[test]
    fn empty_utterance_is_skip_signal() {
        let f = FeatureMatrix::new(2, vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_chunk(&f, 8, &mut rng).is_none());
    }

    #[test]
    fn center_chunk_is_centered() {
        let f = feats(30, 1, |t, _| t as f64);
        let c = center_chunk(&f, 10).unwrap();
        assert_eq!(c.row(0)[0], 10.0);
        assert_eq!(c.row(9)[0], 19.0);
    }
}
