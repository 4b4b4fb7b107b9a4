//! Training loops, checkpoints, generation, inversion and benchmarking.

mod bench;
mod config;
mod generate;
mod log;
mod loops;


use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmelgan::{DiscriminatorConfig, GeneratorConfig};
use crate::data::{
    clip_samples_for_frames, clip_samples_for_seconds, Batcher, ChunkSampler, CorpusCache, DataError, GenreVocab,
    ManifestEntry,
};
use crate::dsp::{frame_count, DspError, SpectroParams};
use crate::melnet::MelNetConfig;
use crate::nn::{CheckpointData, NnError, ParamStore, Real};

pub use bench::{bench, BenchReport, REFERENCE_SPEEDS_KHZ};
pub use config::{parse_value, DataConfig, TrainConfig, Value};
pub use generate::{
    generate_from_checkpoint, invert_waveform, mel_to_waveform, write_output_wav, GenerateOptions, Generated, Inversion,
};
pub use log::{rate_khz, Clock, RunLog, StepRecord, SteppedClock, SystemClock, ThroughputMeter, RUNLOG_HEADER};
pub use loops::{overfit_melnet, train_cmelgan, train_melnet, CMelGanRun, MelNetRun};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown genre `{label}`; known genres: {}", known.join(", "))]
    UnknownGenre { label: String, known: Vec<String> },
    #[error("non-finite loss or gradient at step {step}{}", last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    NumericFault { step: usize, last_good: Option<PathBuf> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("run log: {0}")]
    Log(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    MelNet,
    CMelGan,
}

impl std::str::FromStr for ModelKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "melnet" => Ok(Self::MelNet),
            "cmelgan" => Ok(Self::CMelGan),
            _ => Err(TrainError::Config {
                line: 0,
                msg: format!("unknown model `{s}`, expected melnet or cmelgan"),
            }),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MelNet => "melnet",
            Self::CMelGan => "cmelgan",
        })
    }
}

/// Run-time knobs that are not part of the model configuration.
pub struct TrainOptions {
    /// Where checkpoints and `runlog.csv` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stops after this many optimisation steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub clock: Box<dyn Clock>,
    /// Loads batches on the training thread regardless of `prefetch`.
    pub synchronous: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            max_steps: None,
            clock: Box::new(SystemClock::new()),
            synchronous: false,
        }
    }
}

/// Model description stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    MelNet {
        config: MelNetConfig,
    },
    CMelGan {
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub spectro: SpectroParams,
    /// Spectrogram frames per generated example.
    pub frames: usize,
    pub genres: Vec<String>,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

/// Writes `meta` and the union of `stores` (parameter names must not
/// collide) through a temporary file.
pub fn save_model<T: Real>(path: &Path, meta: &CheckpointMeta, stores: &[&ParamStore<T>]) -> Result<()> {
    let meta = serde_json::to_value(meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut data = CheckpointData {
        meta,
        params: Vec::new(),
    };
    for s in stores {
        data.params.extend(CheckpointData::from_store(serde_json::Value::Null, *s).params);
    }
    let bytes = data.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_meta(data: &CheckpointData) -> Result<CheckpointMeta> {
    serde_json::from_value(data.meta.clone()).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))
}

/// Copies the checkpoint tensors whose names `store` knows into it; every
/// parameter of `store` must be present.
pub fn load_into<T: Real>(data: &CheckpointData, store: &mut ParamStore<T>) -> Result<()> {
    let params = data
        .params
        .iter()
        .filter(|p| store.id(&p.name).is_some())
        .cloned()
        .collect();
    CheckpointData {
        meta: serde_json::Value::Null,
        params,
    }
    .apply(store)?;
    Ok(())
}

/// Cached corpus, analysis settings and loader for one run.
pub(crate) struct Corpus {
    pub vocab: GenreVocab,
    pub params: SpectroParams,
    pub frames: usize,
    pub clip_samples: usize,
    pub steps_per_epoch: usize,
    pub batcher: Batcher,
}

/// Frames per clip: the `win_sz` clip's frame count rounded down to a
/// multiple of `frame_multiple`.
pub fn clip_frames(data: &DataConfig, frame_multiple: usize) -> Result<usize> {
    let raw = frame_count(
        clip_samples_for_seconds(data.win_sz, data.sample_rate),
        data.stft_win_sz,
        data.stft_hop_sz,
    );
    let frames = raw / frame_multiple * frame_multiple;
    if frames == 0 {
        return Err(TrainError::Config {
            line: 0,
            msg: format!(
                "win_sz={} s yields {raw} frames, fewer than the model's multiple of {frame_multiple}",
                data.win_sz
            ),
        });
    }
    Ok(frames)
}

pub fn spectro_params(data: &DataConfig) -> SpectroParams {
    SpectroParams::new(data.sample_rate, data.stft_win_sz, data.stft_hop_sz, data.num_mels)
}

impl Corpus {
    pub fn open(cfg: &TrainConfig, entries: &[ManifestEntry], frame_multiple: usize, synchronous: bool) -> Result<Self> {
        let vocab = GenreVocab::from_manifest(entries);
        let params = spectro_params(&cfg.data);
        params.validate()?;
        let frames = clip_frames(&cfg.data, frame_multiple)?;
        let clip_samples = clip_samples_for_frames(frames, &params);
        let cache = Arc::new(CorpusCache::load(entries, &vocab, params.sample_rate)?);
        let total: usize = cache.songs().iter().map(|s| s.samples.len()).sum();
        let draws = total.div_ceil(clip_samples).max(1);
        let steps_per_epoch = draws.div_ceil(cfg.data.batch_sz);
        let sampler = ChunkSampler::new(cache, &params, clip_samples)?;
        debug_assert_eq!(sampler.frames(), frames);
        let prefetch = if synchronous { 0 } else { cfg.data.prefetch };
        let batcher = Batcher::new(sampler, cfg.data.batch_sz, cfg.seed ^ 0x5eed, prefetch, cfg.data.workers)?;
        Ok(Self {
            vocab,
            params,
            frames,
            clip_samples,
            steps_per_epoch,
            batcher,
        })
    }
}
