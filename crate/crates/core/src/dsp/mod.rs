//! Audio signal processing: resampling, STFT/ISTFT, Mel filterbanks,
//! Mel spectrograms and Griffin-Lim phase recovery.
//!
//! Everything here is a pure function of its inputs. Spectrogram grids are
//! laid out `bins × frames`.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use griffin_lim::{griffin_lim, spectral_convergence, GriffinLim};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, power_to_magnitude, MelFilterbank};
pub use resample::resample;
pub use rustfft::num_complex::Complex64;
pub use stft::{frame_count, hann_window, istft, stft};
pub(crate) use stft::stft_samples;
pub use wav::{read_wav, wav_info, write_wav, WavInfo};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::Input(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectroParams {
    pub sample_rate: u32,
    pub stft_win_sz: usize,
    pub stft_hop_sz: usize,
    pub num_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub power: f64,
}

impl Default for SpectroParams {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            stft_win_sz: 2048,
            stft_hop_sz: 800,
            num_mels: 180,
            f_min: 0.0,
            f_max: 11025.0,
            power: 2.0,
        }
    }
}

impl SpectroParams {
    /// Defaults with the given analysis settings and `f_max` at Nyquist.
    pub fn new(sample_rate: u32, stft_win_sz: usize, stft_hop_sz: usize, num_mels: usize) -> Self {
        Self {
            sample_rate,
            stft_win_sz,
            stft_hop_sz,
            num_mels,
            f_min: 0.0,
            f_max: sample_rate as f64 / 2.0,
            power: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return Err(DspError::Config("sample_rate must be positive".into()));
        }
        if self.stft_win_sz < 2 || self.stft_hop_sz == 0 || self.stft_hop_sz > self.stft_win_sz {
            return Err(DspError::Config(format!(
                "need 0 < hop ({}) <= window ({}) and window >= 2",
                self.stft_hop_sz, self.stft_win_sz
            )));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyq) {
            return Err(DspError::Config(format!(
                "need 0 <= f_min ({}) < f_max ({}) <= {nyq}",
                self.f_min, self.f_max
            )));
        }
        if self.num_mels == 0 {
            return Err(DspError::Config("num_mels must be at least 1".into()));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(DspError::Config(format!("power must be positive, got {}", self.power)));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.stft_win_sz / 2 + 1
    }

    /// Width of one STFT bin in Hz.
    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.stft_win_sz as f64
    }
}

/// One-sided STFT, `stft_win_sz/2 + 1` bins × frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: Array2<Complex64>,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }
}

/// Nonnegative Mel-band energies, `num_mels × frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub params: SpectroParams,
}

impl MelSpectrogram {
    pub fn num_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}
