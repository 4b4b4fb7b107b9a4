use nalgebra::DMatrix;
use ndarray::Array2;

use super::{stft, ComplexSpectrogram, DspError, MelSpectrogram, Result, SpectroParams, Waveform};

/// HTK Mel scale, `2595·log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(DspError::Domain(format!("frequency must be >= 0, got {f}")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> Result<f64> {
    if !(m >= 0.0) {
        return Err(DspError::Domain(format!("mel value must be >= 0, got {m}")));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Triangular Mel filterbank over one-sided STFT bins, together with its
/// Moore-Penrose pseudo-inverse.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    pinv: Array2<f64>,
    params: SpectroParams,
}

impl MelFilterbank {
    /// Corner frequencies are equally spaced on the Mel axis between `f_min`
    /// and `f_max`; weights are unnormalised triangles evaluated at the bin
    /// centre frequencies.
    pub fn new(params: &SpectroParams) -> Result<Self> {
        params.validate()?;
        let n_bins = params.n_bins();
        let n_mels = params.num_mels;
        let nyq = params.sample_rate as f64 / 2.0;
        let bin_freq: Vec<f64> = (0..n_bins).map(|k| nyq * k as f64 / (n_bins - 1) as f64).collect();
        let (m_lo, m_hi) = (hz_to_mel(params.f_min)?, hz_to_mel(params.f_max)?);
        let corners = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Array2::<f64>::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (lo, c, hi) = (corners[m], corners[m + 1], corners[m + 2]);
            for (k, &f) in bin_freq.iter().enumerate() {
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                weights[[m, k]] = up.min(down).max(0.0);
            }
            if weights.row(m).iter().all(|&w| w <= 0.0) {
                return Err(DspError::Config(format!(
                    "{n_mels} Mel bands are too many for a {}-point FFT: band {m} covers no bin",
                    params.stft_win_sz
                )));
            }
        }
        let pinv = pseudo_inverse(&weights)?;
        Ok(Self {
            weights,
            pinv,
            params: *params,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn params(&self) -> &SpectroParams {
        &self.params
    }

    /// `weights · |S|^power`
    pub fn apply(&self, s: &ComplexSpectrogram) -> Result<MelSpectrogram> {
        if s.n_bins() != self.params.n_bins() {
            return Err(DspError::Input(format!(
                "spectrogram has {} bins, filterbank expects {}",
                s.n_bins(),
                self.params.n_bins()
            )));
        }
        let p = self.params.power;
        let spec = s.frames.mapv(|c| {
            let m = c.norm();
            if p == 2.0 { m * m } else { m.powf(p) }
        });
        Ok(MelSpectrogram {
            values: self.weights.dot(&spec),
            params: self.params,
        })
    }

    /// Least-squares estimate of the linear-frequency spectrum (in the same
    /// power domain as the Mel input), clamped to be nonnegative.
    pub fn mel_to_linear(&self, m: &MelSpectrogram) -> Result<Array2<f64>> {
        if m.num_mels() != self.params.num_mels {
            return Err(DspError::Input(format!(
                "spectrogram has {} Mel bands, filterbank has {}",
                m.num_mels(),
                self.params.num_mels
            )));
        }
        Ok(self.pinv.dot(&m.values).mapv(|v| v.max(0.0)))
    }
}

fn pseudo_inverse(w: &Array2<f64>) -> Result<Array2<f64>> {
    let (r, c) = w.dim();
    let m = DMatrix::from_fn(r, c, |i, j| w[[i, j]]);
    let svd = m.svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > max * 1e-10) {
        return Err(DspError::Config(format!(
            "Mel filterbank is rank deficient (singular values {min:e}..{max:e})"
        )));
    }
    let p = svd
        .pseudo_inverse(max * 1e-12)
        .map_err(|e| DspError::Config(format!("pseudo-inverse failed: {e}")))?;
    Ok(Array2::from_shape_fn((c, r), |(i, j)| p[(i, j)]))
}

/// Mel spectrogram of a waveform, building the filterbank on the fly.
/// Prefer [`MelFilterbank::apply`] when transforming many clips.
pub fn mel_spectrogram(w: &Waveform, params: &SpectroParams) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(params)?;
    fb.apply(&stft(w, params)?)
}

/// Undo the power exponent: `x^(1/power)`.
pub fn power_to_magnitude(x: &Array2<f64>, power: f64) -> Array2<f64> {
    if power == 2.0 {
        x.mapv(f64::sqrt)
    } else {
        x.mapv(|v| v.powf(1.0 / power))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn scale_reference_points() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert_eq!(mel_to_hz(0.0).unwrap(), 0.0);
        let want = 2595.0 * 2f64.log10();
        assert!((hz_to_mel(700.0).unwrap() - want).abs() < 1e-9);
        assert!((want - 781.1728).abs() < 1e-4);
        assert!((mel_to_hz(want).unwrap() - 700.0).abs() < 1e-6);
        for f in [440.0, 1000.0] {
            let back = mel_to_hz(hz_to_mel(f).unwrap()).unwrap();
            assert!((back - f).abs() / f < 1e-9);
        }
        assert!(hz_to_mel(-1.0).is_err());
        assert!(mel_to_hz(-0.5).is_err());
    }

    proptest! {
        #[test]
        fn scale_is_increasing_and_invertible(a in 0.0f64..11025.0, b in 0.0f64..11025.0) {
            let (ma, mb) = (hz_to_mel(a).unwrap(), hz_to_mel(b).unwrap());
            if a < b { prop_assert!(ma < mb); }
            let back = mel_to_hz(ma).unwrap();
            prop_assert!((back - a).abs() <= 1e-9 * a.max(1e-300) + 1e-12);
        }
    }

    #[test]
    fn default_filterbank_shape_and_rows() {
        let fb = MelFilterbank::new(&SpectroParams::default()).unwrap();
        assert_eq!(fb.weights().dim(), (180, 1025));
        let mut last_peak = 0;
        for (m, row) in fb.weights().rows().into_iter().enumerate() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
            // Support is one contiguous run.
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "band {m}");
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if m > 0 {
                assert!(peak >= last_peak);
            }
            last_peak = peak;
        }
    }

    #[test]
    fn flat_spectrum_gives_row_sums() {
        let p = SpectroParams::new(16000, 256, 64, 20);
        let fb = MelFilterbank::new(&p).unwrap();
        let ones = Array2::<f64>::ones((p.n_bins(), 3));
        let out = fb.weights().dot(&ones);
        for m in 0..20 {
            let s: f64 = fb.weights().row(m).sum();
            assert!((out[[m, 2]] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_bands_is_a_config_error() {
        let p = SpectroParams::new(22050, 64, 16, 60);
        assert!(matches!(MelFilterbank::new(&p), Err(DspError::Config(_))));
    }

    #[test]
    fn duplicate_low_bands_are_rank_deficient() {
        // At 512 points the lowest 64-band triangles land on the same bins.
        let p = SpectroParams::new(22050, 512, 128, 64);
        let e = MelFilterbank::new(&p).unwrap_err();
        assert!(e.to_string().contains("rank deficient"), "{e}");
    }

    #[test]
    fn mel_spectrogram_of_silence_and_tone() {
        let p = SpectroParams::new(22050, 1024, 256, 40);
        let silent = Waveform::new(vec![0.0; 4096], 22050).unwrap();
        let m = mel_spectrogram(&silent, &p).unwrap();
        assert_eq!(m.values.dim(), (40, super::super::frame_count(4096, 1024, 256)));
        assert!(m.values.iter().all(|&v| v == 0.0));

        let tone: Vec<f64> = (0..22050).map(|n| (2.0 * PI * 440.0 * n as f64 / 22050.0).sin()).collect();
        let m = mel_spectrogram(&Waveform::new(tone, 22050).unwrap(), &p).unwrap();
        let fb = MelFilterbank::new(&p).unwrap();
        // Band whose triangle is highest at the bin nearest 440 Hz.
        let bin = (440.0 / p.bin_hz()).round() as usize;
        let col = fb.weights().column(bin);
        let want = (0..40).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        for t in 0..m.n_frames() {
            let c = m.values.column(t);
            let arg = (0..40).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
            assert_eq!(arg, want, "frame {t}");
        }
    }

    #[test]
    fn pseudo_inverse_recovers_random_spectra_approximately() {
        let p = SpectroParams::new(22050, 512, 128, 40);
        let fb = MelFilterbank::new(&p).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = Array2::from_shape_fn((p.n_bins(), 5), |_| r.random_range(0.0..1.0));
        let m = MelSpectrogram {
            values: fb.weights().dot(&s),
            params: p,
        };
        let back = fb.mel_to_linear(&m).unwrap();
        assert_eq!(back.dim(), s.dim());
        assert!(back.iter().all(|&v| v >= 0.0));
        let err = (&back - &s).mapv(|v| v * v).sum().sqrt() / s.mapv(|v| v * v).sum().sqrt();
        assert!(err < 0.5, "relative error {err}");

        let zero = MelSpectrogram {
            values: Array2::zeros((40, 2)),
            params: p,
        };
        assert!(fb.mel_to_linear(&zero).unwrap().iter().all(|&v| v == 0.0));
    }
}
