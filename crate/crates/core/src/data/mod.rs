//! Corpus indexing, in-memory audio caching and random chunk batching.

mod batch;
mod cache;
mod manifest;

use std::path::PathBuf;

use thiserror::Error;

use crate::dsp::DspError;

pub use batch::{Batch, Batcher};
pub use cache::{clip_samples_for_frames, clip_samples_for_seconds, CachedSong, Chunk, ChunkSampler, CorpusCache};
pub use manifest::{
    parse_manifest, read_genre_map, read_manifest, scan_corpus, write_manifest, GenreVocab, ManifestEntry, ScanSummary,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no decodable audio found")]
    EmptyCorpus,
    #[error("failed to load {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: DspError,
    },
    #[error("unknown genre `{0}`")]
    UnknownGenre(String),
    #[error("invalid manifest entry: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
