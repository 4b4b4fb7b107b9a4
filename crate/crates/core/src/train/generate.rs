use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_into, read_meta, ModelSpec, Result, TrainError};
use crate::cmelgan::Generator;
use crate::dsp::{
    griffin_lim, mel_spectrogram, power_to_magnitude, write_wav, MelFilterbank, MelSpectrogram, SpectroParams, Waveform,
};
use crate::melnet::{from_log_grid, multiscale_generate, MelNet, LOG_EPS, MAX_LOG_POWER};
use crate::nn::{load_checkpoint, ParamStore};

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub genre: String,
    pub seed: u64,
    pub gl_iters: usize,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub waveform: Waveform,
    /// Mel power grid `[num_mels, frames]` that was inverted.
    pub mel: Array2<f64>,
    pub convergence: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub waveform: Waveform,
    /// Spectral convergence after each Griffin-Lim iteration.
    pub convergence: Vec<f64>,
}

/// Mel power grid to audio: pseudo-inverse filterbank, power root, then
/// Griffin-Lim seeded with `seed`.
pub fn mel_to_waveform(mel: &Array2<f64>, params: &SpectroParams, iters: usize, seed: u64) -> Result<Inversion> {
    let fb = MelFilterbank::new(params)?;
    let lin = fb.mel_to_linear(&MelSpectrogram {
        values: mel.clone(),
        params: *params,
    })?;
    let mag = power_to_magnitude(&lin, params.power);
    let gl = griffin_lim(&mag, params, iters, seed)?;
    Ok(Inversion {
        waveform: gl.waveform,
        convergence: gl.convergence,
    })
}

/// Analysis followed by [`mel_to_waveform`]: the best a perfect
/// spectrogram model could do with these settings.
pub fn invert_waveform(w: &Waveform, params: &SpectroParams, iters: usize, seed: u64) -> Result<Inversion> {
    if w.sample_rate != params.sample_rate {
        return Err(TrainError::Config {
            line: 0,
            msg: format!("audio is {} Hz, analysis expects {} Hz", w.sample_rate, params.sample_rate),
        });
    }
    let mel = mel_spectrogram(w, params)?;
    mel_to_waveform(&mel.values, params, iters, seed)
}

/// Samples one spectrogram of `opts.genre` from either model kind and
/// inverts it. The same seed drives sampling and phase initialisation.
pub fn generate_from_checkpoint(path: &Path, opts: &GenerateOptions) -> Result<Generated> {
    let data = load_checkpoint(path)?;
    let meta = read_meta(&data)?;
    let genre = meta
        .genres
        .iter()
        .position(|g| *g == opts.genre)
        .ok_or_else(|| TrainError::UnknownGenre {
            label: opts.genre.clone(),
            known: meta.genres.clone(),
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f32>::new();
    // model weights are overwritten from the checkpoint; init rng is irrelevant
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let mel = match &meta.model {
        ModelSpec::MelNet { config } => {
            let model = MelNet::new(&mut store, &mut init, config)?;
            load_into(&data, &mut store)?;
            let grid = multiscale_generate(&model, &store, genre, (meta.frames, meta.spectro.num_mels), &mut rng)?;
            from_log_grid(&grid)
        }
        ModelSpec::CMelGan { generator, .. } => {
            let gen = Generator::new(&mut store, &mut init, generator)?;
            load_into(&data, &mut store)?;
            let gan_out = sample_generator(&gen, &store, genre, &mut rng)?;
            gan_out.mapv(|v| (v.min(MAX_LOG_POWER).exp() - LOG_EPS).max(0.0))
        }
    };
    let inv = mel_to_waveform(&mel, &meta.spectro, opts.gl_iters, opts.seed)?;
    Ok(Generated {
        waveform: inv.waveform,
        mel,
        convergence: inv.convergence,
    })
}

fn sample_generator(gen: &Generator, store: &ParamStore<f32>, genre: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    use rand_distr::{Distribution, StandardNormal};

    use crate::nn::{Tape, Tensor};

    let nd = gen.config.noise_dim;
    let z = Tensor::<f32>::from_fn(&[1, nd], |_| StandardNormal.sample(rng));
    let mut tape = Tape::inference(store);
    let zv = tape.constant(z)?;
    let out = gen.forward(&mut tape, zv, &[genre])?;
    let (m, t) = (gen.config.num_mels, gen.config.frames);
    let values = tape.value(out).iter().map(|&v| v as f64).collect();
    Ok(Array2::from_shape_vec((m, t), values).expect("generator output is [1, M, T]"))
}

/// Writes 16-bit PCM, scaling down only when the peak exceeds full scale.
pub fn write_output_wav(path: &Path, w: &Waveform) -> Result<()> {
    let peak = w.peak();
    if peak > 1.0 {
        let scaled = Waveform::new(w.samples.iter().map(|s| s / peak).collect(), w.sample_rate)?;
        write_wav(path, &scaled)?;
    } else {
        write_wav(path, w)?;
    }
    Ok(())
}
