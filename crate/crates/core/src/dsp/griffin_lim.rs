use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stft::{istft_samples, stft_samples};
use super::{Complex64, ComplexSpectrogram, DspError, Result, SpectroParams, Waveform};

/// Output of [`griffin_lim`].
#[derive(Clone, Debug)]
pub struct GriffinLim {
    pub waveform: Waveform,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

/// `‖|S| − mag‖ / ‖mag‖` over the full two-sided spectrum (interior bins
/// of the one-sided grid count twice). Zero when `mag` is all zero.
pub fn spectral_convergence(s: &ComplexSpectrogram, mag: &Array2<f64>) -> f64 {
    let last = mag.nrows() - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for ((k, t), &m) in mag.indexed_iter() {
        let w = if k == 0 || k == last { 1.0 } else { 2.0 };
        let d = s.frames[[k, t]].norm() - m;
        num += w * d * d;
        den += w * m * m;
    }
    if den == 0.0 { 0.0 } else { (num / den).sqrt() }
}

/// Griffin-Lim phase recovery from a one-sided linear magnitude grid.
///
/// Phases start uniformly random from `seed`. Each iteration synthesises
/// with the current phase, re-analyses, and keeps the new phase. With the
/// least-squares inverse STFT the spectral convergence never increases.
pub fn griffin_lim(mag: &Array2<f64>, params: &SpectroParams, iters: usize, seed: u64) -> Result<GriffinLim> {
    params.validate()?;
    let (win, hop) = (params.stft_win_sz, params.stft_hop_sz);
    if mag.nrows() != params.n_bins() {
        return Err(DspError::Input(format!(
            "magnitude has {} bins, window {win} needs {}",
            mag.nrows(),
            params.n_bins()
        )));
    }
    if mag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(DspError::Input("magnitudes must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Array2<Complex64> = mag.mapv(|_| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)));
    let mut convergence = Vec::with_capacity(iters);
    let mut x = istft_samples(&with_phase(mag, &phase), win, hop)?;
    for _ in 0..iters {
        let s = stft_samples(&x, win, hop)?;
        convergence.push(spectral_convergence(&s, mag));
        phase = s.frames.mapv(|c| {
            let n = c.norm();
            if n > 0.0 { c / n } else { Complex64::new(1.0, 0.0) }
        });
        x = istft_samples(&with_phase(mag, &phase), win, hop)?;
    }
    Ok(GriffinLim {
        waveform: Waveform::new(x, params.sample_rate)?,
        convergence,
    })
}

fn with_phase(mag: &Array2<f64>, phase: &Array2<Complex64>) -> ComplexSpectrogram {
    let mut frames = phase.clone();
    frames.zip_mut_with(mag, |p, &m| *p *= m);
    ComplexSpectrogram { frames }
}
