use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cache::stack;
use super::{ChunkSampler, DataError, Result};
use crate::nn::Tensor;

/// `batch_sz` chunks stacked as `[batch, num_mels, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mels: Tensor<f32>,
    pub genre_ids: Vec<usize>,
    pub sources: Vec<(PathBuf, f64)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.genre_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genre_ids.is_empty()
    }
}

fn draw(sampler: &ChunkSampler, batch_sz: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let chunks = (0..batch_sz).map(|_| sampler.sample(rng)).collect::<Result<Vec<_>>>()?;
    let (data, shape) = stack(&chunks);
    let mels = Tensor::new(shape.to_vec(), data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(Batch {
        mels,
        genre_ids: chunks.iter().map(|c| c.genre_id).collect(),
        sources: chunks.into_iter().map(|c| (c.source, c.offset_s)).collect(),
    })
}

enum Source {
    Sync { sampler: ChunkSampler, rng: ChaCha8Rng },
    Prefetch {
        rx: Option<Receiver<Result<Batch>>>,
        stop: Arc<AtomicBool>,
        workers: Vec<JoinHandle<()>>,
    },
}

/// Endless stream of batches.
///
/// With `prefetch_depth == 0` batches are drawn on the caller's thread.
/// Otherwise `workers` producer threads fill a bounded queue holding up to
/// `prefetch_depth` batches. Producer `w` draws from ChaCha8 stream `w` of
/// `seed`, so a single producer yields the same stream as synchronous mode;
/// with several producers the interleaving depends on scheduling.
pub struct Batcher {
    source: Source,
    batch_sz: usize,
    chunks_drawn: usize,
}

impl Batcher {
    pub fn new(sampler: ChunkSampler, batch_sz: usize, seed: u64, prefetch_depth: usize, workers: usize) -> Result<Self> {
        if batch_sz == 0 {
            return Err(DataError::Invalid("batch size must be positive".into()));
        }
        let source = if prefetch_depth == 0 {
            Source::Sync {
                sampler,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }
        } else {
            let (tx, rx) = sync_channel(prefetch_depth);
            let stop = Arc::new(AtomicBool::new(false));
            let handles = (0..workers.max(1))
                .map(|w| {
                    let tx = tx.clone();
                    let sampler = sampler.clone();
                    let stop = stop.clone();
                    std::thread::spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(w as u64);
                        while !stop.load(Ordering::Relaxed) {
                            let b = draw(&sampler, batch_sz, &mut rng);
                            let failed = b.is_err();
                            if tx.send(b).is_err() || failed {
                                break;
                            }
                        }
                    })
                })
                .collect();
            Source::Prefetch {
                rx: Some(rx),
                stop,
                workers: handles,
            }
        };
        Ok(Self {
            source,
            batch_sz,
            chunks_drawn: 0,
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let b = match &mut self.source {
            Source::Sync { sampler, rng } => draw(sampler, self.batch_sz, rng)?,
            Source::Prefetch { rx, .. } => rx
                .as_ref()
                .and_then(|rx| rx.recv().ok())
                .ok_or_else(|| DataError::Invalid("batch producers stopped".into()))??,
        };
        self.chunks_drawn += b.len();
        Ok(b)
    }

    /// Chunks in all batches handed out so far.
    pub fn chunks_drawn(&self) -> usize {
        self.chunks_drawn
    }

    pub fn batch_sz(&self) -> usize {
        self.batch_sz
    }
}

impl Iterator for Batcher {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

impl Drop for Batcher {
    fn drop(&mut self) {
        if let Source::Prefetch { rx, stop, workers } = &mut self.source {
            stop.store(true, Ordering::Relaxed);
            // Unblocks producers waiting on a full queue.
            drop(rx.take());
            for w in workers.drain(..) {
                let _ = w.join();
            }
        }
    }
}
