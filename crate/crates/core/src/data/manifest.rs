use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use walkdir::WalkDir;

use super::{DataError, Result};
use crate::dsp::wav_info;

const HEADER: &str = "genre,path,duration_s,sample_rate";

/// One indexed audio file.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub genre: String,
    pub path: PathBuf,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl ManifestEntry {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.genre.is_empty() {
            return Err("empty genre".into());
        }
        if self.genre.contains(',') || self.path.to_string_lossy().contains(',') {
            return Err(format!("commas are not allowed in `{}`", self.path.display()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(format!("duration must be positive, got {}", self.duration_s));
        }
        if self.sample_rate == 0 {
            return Err("sample rate must be positive".into());
        }
        Ok(())
    }
}

/// Writes the CSV form: a header then one row per entry.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for e in entries {
        e.validate().map_err(DataError::Invalid)?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.genre,
            e.path.display(),
            e.duration_s,
            e.sample_rate
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => {
            return Err(DataError::Parse {
                line: 1,
                msg: format!("expected header `{HEADER}`, found `{h}`"),
            })
        }
        None => {
            return Err(DataError::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    let mut entries = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse { line, msg };
        let cols: Vec<&str> = raw.split(',').collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let duration_s: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad duration `{}`", cols[2])))?;
        let sample_rate: u32 = cols[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad sample rate `{}`", cols[3])))?;
        let e = ManifestEntry {
            genre: cols[0].trim().to_string(),
            path: PathBuf::from(cols[1].trim()),
            duration_s,
            sample_rate,
        };
        e.validate().map_err(err)?;
        entries.push(e);
    }
    Ok(entries)
}

/// Reads a `directory,genre` CSV (no header).
pub fn read_genre_map(path: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, raw) in fs::read_to_string(path)?.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (dir, genre) = raw.split_once(',').ok_or_else(|| DataError::Parse {
            line: i + 1,
            msg: "expected `directory,genre`".into(),
        })?;
        map.insert(dir.trim().to_string(), genre.trim().to_string());
    }
    Ok(map)
}

/// Result of scanning directories for audio.
#[derive(Clone, Debug)]
pub struct ScanSummary {
    pub entries: Vec<ManifestEntry>,
    /// Files with a `.wav` extension that could not be decoded.
    pub skipped: usize,
    pub total_duration_s: f64,
}

/// Indexes every decodable WAV file under each root. A root's genre comes
/// from `genre_of_dir` (keyed by the root as given or by its final path
/// component), defaulting to that final component.
pub fn scan_corpus(roots: &[PathBuf], genre_of_dir: &HashMap<String, String>) -> Result<ScanSummary> {
    let mut entries = Vec::new();
    let mut skipped = 0;
    for root in roots {
        let base = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        let genre = genre_of_dir
            .get(&root.display().to_string())
            .or_else(|| genre_of_dir.get(&base))
            .cloned()
            .unwrap_or(base);
        for item in WalkDir::new(root).sort_by_file_name() {
            let item = match item {
                Ok(item) => item,
                Err(e) => {
                    warn!("skipping unreadable path under {}: {e}", root.display());
                    skipped += 1;
                    continue;
                }
            };
            let p = item.path();
            let is_wav = p
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("wav"));
            if !item.file_type().is_file() || !is_wav {
                continue;
            }
            match wav_info(p) {
                Ok(info) if info.frames > 0 => entries.push(ManifestEntry {
                    genre: genre.clone(),
                    path: p.to_path_buf(),
                    duration_s: info.duration_s(),
                    sample_rate: info.sample_rate,
                }),
                Ok(_) => {
                    warn!("skipping empty file {}", p.display());
                    skipped += 1;
                }
                Err(e) => {
                    warn!("skipping {}: {e}", p.display());
                    skipped += 1;
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let total_duration_s = entries.iter().map(|e| e.duration_s).sum();
    info!(
        "indexed {} files ({:.2} h), skipped {skipped}",
        entries.len(),
        total_duration_s / 3600.0
    );
    Ok(ScanSummary {
        entries,
        skipped,
        total_duration_s,
    })
}

/// Sorted distinct genre labels; a label's index is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenreVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl GenreVocab {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        let labels: Vec<String> = set.into_iter().collect();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }

    pub fn from_manifest(entries: &[ManifestEntry]) -> Self {
        Self::from_labels(entries.iter().map(|e| e.genre.clone()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| DataError::UnknownGenre(label.to_string()))
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}
