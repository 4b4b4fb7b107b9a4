use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{shape_err, Adam, ParamStore, Real, Result, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Discriminator objective.
///
/// Real pairs are pushed to 1; generated pairs and real spectrograms
/// paired with a wrong genre are pushed to 0, weighted ½ / ¼ / ¼. With no
/// mismatched term (a single genre) the weights fall back to ½ / ½.
#[allow(clippy::too_many_arguments)]
pub fn d_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    d: &Discriminator,
    real: Var,
    genres: &[usize],
    fake: Var,
    fake_genres: &[usize],
    wrong: Option<&[usize]>,
) -> Result<Var> {
    let p_real = d.forward(tape, real, genres)?;
    let p_fake = d.forward(tape, fake, fake_genres)?;
    let l_real = tape.bce(p_real, &vec![T::one(); genres.len()])?;
    let l_fake = tape.bce(p_fake, &vec![T::zero(); fake_genres.len()])?;
    match wrong {
        Some(w) => {
            let p_wrong = d.forward(tape, real, w)?;
            let l_wrong = tape.bce(p_wrong, &vec![T::zero(); w.len()])?;
            let a = tape.scale(l_real, T::of(0.5))?;
            let b = tape.scale(l_fake, T::of(0.25))?;
            let c = tape.scale(l_wrong, T::of(0.25))?;
            let ab = tape.add(a, b)?;
            tape.add(ab, c)
        }
        None => {
            let s = tape.add(l_real, l_fake)?;
            tape.scale(s, T::of(0.5))
        }
    }
}

/// Generator objective: make the discriminator call `fake` real.
pub fn g_loss<T: Real>(tape: &mut Tape<'_, T>, d: &Discriminator, fake: Var, genres: &[usize]) -> Result<Var> {
    let p = d.forward(tape, fake, genres)?;
    tape.bce(p, &vec![T::one(); genres.len()])
}

/// A genre different from each of `genres`, uniform over the others.
/// `None` when there is only one genre to choose from.
pub fn wrong_genres<R: Rng + ?Sized>(genres: &[usize], count: usize, rng: &mut R) -> Option<Vec<usize>> {
    if count < 2 {
        return None;
    }
    Some(
        genres
            .iter()
            .map(|&g| {
                let w = rng.random_range(0..count - 1);
                if w >= g {
                    w + 1
                } else {
                    w
                }
            })
            .collect(),
    )
}

/// Generator, discriminator and their optimizers, each with its own store.
pub struct CMelGan<T: Real> {
    pub gen: Generator,
    pub disc: Discriminator,
    pub g_store: ParamStore<T>,
    pub d_store: ParamStore<T>,
    pub g_opt: Adam,
    pub d_opt: Adam,
}

impl<T: Real> CMelGan<T> {
    pub fn new<R: Rng + ?Sized>(g_cfg: &GeneratorConfig, d_cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if g_cfg.num_mels != d_cfg.num_mels || g_cfg.frames != d_cfg.frames || g_cfg.genre_count != d_cfg.genre_count {
            return Err(crate::nn::NnError::Config(format!(
                "generator emits {}x{} over {} genres, discriminator expects {}x{} over {}",
                g_cfg.num_mels, g_cfg.frames, g_cfg.genre_count, d_cfg.num_mels, d_cfg.frames, d_cfg.genre_count
            )));
        }
        let mut g_store = ParamStore::new();
        let mut d_store = ParamStore::new();
        let gen = Generator::new(&mut g_store, rng, g_cfg)?;
        let disc = Discriminator::new(&mut d_store, rng, d_cfg)?;
        Ok(Self {
            gen,
            disc,
            g_store,
            d_store,
            g_opt: Adam::new(1e-4, 0.5, 0.9),
            d_opt: Adam::new(1e-4, 0.5, 0.9),
        })
    }

    pub fn noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor<T> {
        Tensor::from_fn(&[batch, self.gen.config.noise_dim], |_| {
            T::of(StandardNormal.sample(rng))
        })
    }

    /// Spectrograms `[B, num_mels, frames]` for `genres`, no gradients kept.
    pub fn generate<R: Rng + ?Sized>(&self, genres: &[usize], rng: &mut R) -> Result<Tensor<T>> {
        let z = self.noise(genres.len(), rng);
        let mut tape = Tape::inference(&self.g_store);
        let z = tape.constant(z)?;
        let out = self.gen.forward(&mut tape, z, genres)?;
        Ok(tape.tensor(out))
    }

    /// One discriminator update on a real batch; generated examples share
    /// the batch's genres. Returns the loss.
    pub fn d_step<R: Rng + ?Sized>(&mut self, real: &Tensor<T>, genres: &[usize], rng: &mut R) -> Result<f64> {
        if real.shape().first() != Some(&genres.len()) {
            return Err(shape_err("d_step", format!("batch {:?} with {} genres", real.shape(), genres.len())));
        }
        let fake = self.generate(genres, rng)?;
        let wrong = wrong_genres(genres, self.disc.config.genre_count, rng);
        let (loss, grads) = {
            let mut tape = Tape::new(&self.d_store);
            let r = tape.constant(real.clone())?;
            let f = tape.constant(fake)?;
            let loss = d_loss(&mut tape, &self.disc, r, genres, f, genres, wrong.as_deref())?;
            (tape.scalar(loss)?.as_f64(), tape.backward(loss)?)
        };
        self.d_store.accumulate(&grads);
        self.d_opt.step(&mut self.d_store);
        Ok(loss)
    }

    /// One generator update through a frozen discriminator. The
    /// discriminator's gradient with respect to the generated batch seeds
    /// the generator's backward pass. Returns the loss.
    pub fn g_step<R: Rng + ?Sized>(&mut self, genres: &[usize], rng: &mut R) -> Result<f64> {
        let z = self.noise(genres.len(), rng);
        let grads = {
            let mut g_tape = Tape::new(&self.g_store);
            let zv = g_tape.constant(z)?;
            let fake = self.gen.forward(&mut g_tape, zv, genres)?;
            let (loss, seed) = {
                let mut d_tape = Tape::new(&self.d_store);
                let fv = d_tape.input(g_tape.tensor(fake))?;
                let loss = g_loss(&mut d_tape, &self.disc, fv, genres)?;
                let dg = d_tape.backward(loss)?;
                let seed = dg
                    .var(fv)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); g_tape.value(fake).len()]);
                (d_tape.scalar(loss)?.as_f64(), seed)
            };
            (loss, g_tape.backward_from(fake, &seed)?)
        };
        let (loss, grads) = grads;
        self.g_store.accumulate(&grads);
        self.g_opt.step(&mut self.g_store);
        Ok(loss)
    }
}
