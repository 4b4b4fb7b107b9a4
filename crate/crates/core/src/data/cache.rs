use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use log::debug;
use rand::Rng;

use super::{DataError, GenreVocab, ManifestEntry, Result};
use crate::dsp::{read_wav, resample, stft_samples, MelFilterbank, MelSpectrogram, SpectroParams};

/// One decoded song held in memory at the cache rate.
#[derive(Clone, Debug)]
pub struct CachedSong {
    pub path: PathBuf,
    pub genre_id: usize,
    pub samples: Vec<f32>,
}

/// Every song in a manifest, read from disk once and resampled.
#[derive(Debug)]
pub struct CorpusCache {
    songs: Vec<CachedSong>,
    sample_rate: u32,
    disk_reads: AtomicUsize,
}

impl CorpusCache {
    pub fn load(entries: &[ManifestEntry], vocab: &GenreVocab, target_rate: u32) -> Result<Self> {
        let cache = Self {
            songs: Vec::with_capacity(entries.len()),
            sample_rate: target_rate,
            disk_reads: AtomicUsize::new(0),
        };
        let mut songs = Vec::with_capacity(entries.len());
        for e in entries {
            let genre_id = vocab.id(&e.genre)?;
            let w = cache.read(&e.path)?;
            let w = resample(&w, target_rate).map_err(|source| DataError::Load {
                path: e.path.clone(),
                source,
            })?;
            debug!("cached {} ({} samples)", e.path.display(), w.len());
            songs.push(CachedSong {
                path: e.path.clone(),
                genre_id,
                samples: w.samples.iter().map(|&s| s as f32).collect(),
            });
        }
        Ok(Self { songs, ..cache })
    }

    fn read(&self, path: &Path) -> Result<crate::dsp::Waveform> {
        self.disk_reads.fetch_add(1, Ordering::Relaxed);
        read_wav(path).map_err(|source| DataError::Load {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Number of audio files read from disk since construction.
    pub fn disk_reads(&self) -> usize {
        self.disk_reads.load(Ordering::Relaxed)
    }

    pub fn songs(&self) -> &[CachedSong] {
        &self.songs
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn total_seconds(&self) -> f64 {
        self.songs.iter().map(|s| s.samples.len()).sum::<usize>() as f64 / self.sample_rate as f64
    }
}

/// Clip length in samples for a duration in seconds.
pub fn clip_samples_for_seconds(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round().max(0.0) as usize
}

/// Shortest clip that yields exactly `frames` STFT frames.
pub fn clip_samples_for_frames(frames: usize, params: &SpectroParams) -> usize {
    params.stft_win_sz + frames.saturating_sub(1) * params.stft_hop_sz
}

/// A fixed-length excerpt and its Mel spectrogram.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub mel: MelSpectrogram,
    pub genre_id: usize,
    pub source: PathBuf,
    pub offset_s: f64,
}

/// Draws random fixed-length chunks from a cache.
#[derive(Clone, Debug)]
pub struct ChunkSampler {
    cache: Arc<CorpusCache>,
    filterbank: Arc<MelFilterbank>,
    clip_samples: usize,
}

impl ChunkSampler {
    pub fn new(cache: Arc<CorpusCache>, params: &SpectroParams, clip_samples: usize) -> Result<Self> {
        if params.sample_rate != cache.sample_rate() {
            return Err(DataError::Invalid(format!(
                "cache holds {} Hz audio but spectrogram parameters expect {} Hz",
                cache.sample_rate(),
                params.sample_rate
            )));
        }
        if clip_samples < params.stft_win_sz {
            return Err(DataError::Invalid(format!(
                "clip of {clip_samples} samples is shorter than the {}-sample window",
                params.stft_win_sz
            )));
        }
        Ok(Self {
            cache,
            filterbank: Arc::new(MelFilterbank::new(params)?),
            clip_samples,
        })
    }

    pub fn with_seconds(cache: Arc<CorpusCache>, params: &SpectroParams, clip_seconds: f64) -> Result<Self> {
        let n = clip_samples_for_seconds(clip_seconds, params.sample_rate);
        Self::new(cache, params, n)
    }

    pub fn cache(&self) -> &Arc<CorpusCache> {
        &self.cache
    }

    pub fn params(&self) -> &SpectroParams {
        self.filterbank.params()
    }

    pub fn clip_samples(&self) -> usize {
        self.clip_samples
    }

    /// Time frames in every chunk.
    pub fn frames(&self) -> usize {
        let p = self.params();
        (self.clip_samples - p.stft_win_sz) / p.stft_hop_sz + 1
    }

    /// Uniform song, then uniform start among all full-length positions.
    /// Songs shorter than the clip start at zero and are zero-padded.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Chunk> {
        if self.cache.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let song = &self.cache.songs[rng.random_range(0..self.cache.len())];
        let n = self.clip_samples;
        let last_start = song.samples.len().saturating_sub(n);
        let start = rng.random_range(0..=last_start);
        let mut clip: Vec<f64> = song.samples[start..(start + n).min(song.samples.len())]
            .iter()
            .map(|&s| s as f64)
            .collect();
        clip.resize(n, 0.0);
        let p = self.params();
        let frames = stft_samples(&clip, p.stft_win_sz, p.stft_hop_sz)?;
        let mel = self.filterbank.apply(&frames)?;
        debug_assert_eq!(mel.n_frames(), self.frames());
        Ok(Chunk {
            mel,
            genre_id: song.genre_id,
            source: song.path.clone(),
            offset_s: start as f64 / self.cache.sample_rate() as f64,
        })
    }
}

/// Stacks chunk spectrograms into `[batch, num_mels, frames]` order.
pub(super) fn stack(chunks: &[Chunk]) -> (Vec<f32>, [usize; 3]) {
    let (m, t) = chunks[0].mel.values.dim();
    let mut out = Vec::with_capacity(chunks.len() * m * t);
    for c in chunks {
        debug_assert_eq!(c.mel.values.dim(), (m, t));
        out.extend(c.mel.values.iter().map(|&x| x as f32));
    }
    (out, [chunks.len(), m, t])
}
