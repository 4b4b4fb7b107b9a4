use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::FftPlanner;

use super::{Complex64, ComplexSpectrogram, DspError, Result, SpectroParams, Waveform};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Number of full frames in a signal of `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Short-time Fourier transform without centring: frame `t` covers samples
/// `[t·hop, t·hop + win)`.
pub fn stft(w: &Waveform, params: &SpectroParams) -> Result<ComplexSpectrogram> {
    params.validate()?;
    stft_samples(&w.samples, params.stft_win_sz, params.stft_hop_sz)
}

pub(crate) fn stft_samples(x: &[f64], win: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if x.len() < win {
        return Err(DspError::Input(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            x.len()
        )));
    }
    let n_frames = frame_count(x.len(), win, hop);
    let n_bins = win / 2 + 1;
    let window = hann_window(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut frames = Array2::<Complex64>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); win];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..n_frames {
        let seg = &x[t * hop..t * hop + win];
        for ((b, &s), &wv) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s * wv, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in buf.iter().take(n_bins).enumerate() {
            frames[[k, t]] = *v;
        }
    }
    Ok(ComplexSpectrogram { frames })
}

/// Least-squares overlap-add inverse of [`stft`].
///
/// Each frame is inverse transformed, re-windowed and overlap-added, then
/// divided by the summed squared window. Requires `hop <= win/2` so every
/// interior sample is covered by at least two frames.
pub fn istft(s: &ComplexSpectrogram, params: &SpectroParams) -> Result<Waveform> {
    params.validate()?;
    let samples = istft_samples(s, params.stft_win_sz, params.stft_hop_sz)?;
    Waveform::new(samples, params.sample_rate)
}

pub(crate) fn istft_samples(s: &ComplexSpectrogram, win: usize, hop: usize) -> Result<Vec<f64>> {
    if hop > win / 2 {
        return Err(DspError::Config(format!(
            "hop {hop} exceeds half the window {win}; overlap-add cannot be normalised"
        )));
    }
    let n_bins = win / 2 + 1;
    if s.n_bins() != n_bins {
        return Err(DspError::Input(format!(
            "spectrogram has {} bins, window {win} needs {n_bins}",
            s.n_bins()
        )));
    }
    let n_frames = s.n_frames();
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let len = (n_frames - 1) * hop + win;
    let window = hann_window(win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(win);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); win];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let scale = 1.0 / win as f64;
    for t in 0..n_frames {
        for k in 0..n_bins {
            buf[k] = s.frames[[k, t]];
        }
        for k in n_bins..win {
            buf[k] = s.frames[[win - k, t]].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let o = t * hop;
        for i in 0..win {
            out[o + i] += buf[i].re * scale * window[i];
            norm[o + i] += window[i] * window[i];
        }
    }
    for (v, n) in out.iter_mut().zip(&norm) {
        *v = if *n > 1e-10 { *v / n } else { 0.0 };
    }
    Ok(out)
}
