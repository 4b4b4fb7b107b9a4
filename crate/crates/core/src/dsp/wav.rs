use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{DspError, Result, Waveform};

fn wav_err(path: &Path, source: hound::Error) -> DspError {
    DspError::Wav {
        path: path.display().to_string(),
        source,
    }
}

/// Header facts of a WAV file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub frames: u32,
}

impl WavInfo {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }
}

/// Reads only the header.
pub fn wav_info(path: &Path) -> Result<WavInfo> {
    let r = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = r.spec();
    check_spec(path, &spec)?;
    Ok(WavInfo {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        frames: r.duration(),
    })
}

fn check_spec(path: &Path, spec: &WavSpec) -> Result<()> {
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::Input(format!(
            "{}: only 16-bit PCM is supported ({:?}, {} bits)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(DspError::Input(format!("{}: empty channel layout or rate", path.display())));
    }
    Ok(())
}

/// Reads 16-bit PCM, downmixing channels by averaging. Samples are scaled by
/// `1/32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = r.spec();
    check_spec(path, &spec)?;
    let ch = spec.channels as usize;
    let raw = r
        .samples::<i16>()
        .collect::<std::result::Result<Vec<i16>, _>>()
        .map_err(|e| wav_err(path, e))?;
    let samples = raw
        .chunks_exact(ch)
        .map(|f| f.iter().map(|&s| s as f64).sum::<f64>() / (ch as f64 * 32768.0))
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM. Samples outside `[-1, 1)` are clipped.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut wr = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        wr.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    wr.finalize().map_err(|e| wav_err(path, e))
}
