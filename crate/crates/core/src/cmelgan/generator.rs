use rand::Rng;

use super::{GeneratorConfig, LEAKY_SLOPE};
use crate::nn::{
    shape_err, Conv1d, Conv2d, ConvGeom, ConvSpec, ConvTranspose2d, Embedding, Linear, Padding, ParamStore, Real, Result,
    Tape, Var,
};

/// Dilated 3x3 convolutions, each applied as `x + conv(leaky(x))` with
/// reflection padding equal to its dilation.
#[derive(Clone, Debug)]
pub struct ResBlock2d {
    pub convs: Vec<Conv2d>,
}

impl ResBlock2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        let convs = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let spec = ConvSpec::new(channels, channels, [3, 3])
                    .dilation([d, d])
                    .padding(Padding::Reflect(d, d))
                    .weight_norm(true);
                Conv2d::new(store, rng, &format!("{name}.conv{i}"), spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            let y = tape.leaky_relu(x, T::of(LEAKY_SLOPE))?;
            let y = c.forward(tape, y)?;
            x = tape.add(x, y)?;
        }
        Ok(x)
    }
}

/// 1-D counterpart of [`ResBlock2d`] over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct ResBlock1d {
    pub convs: Vec<Conv1d>,
}

impl ResBlock1d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        let convs = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv1d::new(store, rng, &format!("{name}.conv{i}"), channels, channels, 3, d, Padding::Reflect(0, d), true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            let y = tape.leaky_relu(x, T::of(LEAKY_SLOPE))?;
            let y = c.forward(tape, y)?;
            x = tape.add(x, y)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub embed: Embedding,
    pub lift: Linear,
    pub stages: Vec<(ConvTranspose2d, ResBlock2d)>,
    pub collapse: Conv2d,
    pub finetune: Vec<(Conv1d, ResBlock1d)>,
}

impl Generator {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let [c0, f0, t0] = config.seed_shape()?;
        let embed = Embedding::new(store, rng, "gen.embed", config.genre_count, config.noise_dim)?;
        let lift = Linear::new(store, rng, "gen.lift", config.noise_dim, c0 * f0 * t0, true)?;
        let mut stages = Vec::with_capacity(config.upsample.len());
        let mut ch = c0;
        for (i, u) in config.upsample.iter().enumerate() {
            let (padding, output_padding) = u.padding()?;
            let geom = ConvGeom {
                stride: u.stride,
                padding,
                ..ConvGeom::default()
            };
            let up = ConvTranspose2d::new(
                store,
                rng,
                &format!("gen.up{i}"),
                ch,
                u.out_channels,
                u.kernel,
                geom,
                output_padding,
                true,
            )?;
            let res = ResBlock2d::new(store, rng, &format!("gen.up{i}.res"), u.out_channels, &config.dilations)?;
            stages.push((up, res));
            ch = u.out_channels;
        }
        let collapse = Conv2d::new(store, rng, "gen.collapse", ConvSpec::new(ch, 1, [1, 1]).weight_norm(true))?;
        let m = config.num_mels;
        let finetune = config
            .finetune_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let conv = Conv1d::new(store, rng, &format!("gen.fine{i}"), m, m, k, 1, Padding::Reflect(0, k / 2), true)?;
                let res = ResBlock1d::new(store, rng, &format!("gen.fine{i}.res"), m, &config.dilations)?;
                Ok((conv, res))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            embed,
            lift,
            stages,
            collapse,
            finetune,
        })
    }

    /// `z ⊙ E[genre]`, row by row.
    pub fn embed_and_mix<T: Real>(&self, tape: &mut Tape<'_, T>, z: Var, genres: &[usize]) -> Result<Var> {
        let e = self.embed.forward(tape, genres)?;
        tape.mul(z, e)
    }

    /// `z[B, noise_dim]` to a log-Mel grid `[B, num_mels, frames]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, z: Var, genres: &[usize]) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.config.noise_dim || zs[0] != genres.len() {
            return Err(shape_err(
                "generator",
                format!("noise {zs:?} with {} genres, noise_dim {}", genres.len(), self.config.noise_dim),
            ));
        }
        let b = zs[0];
        let [c0, f0, t0] = self.config.seed_shape()?;
        let mixed = self.embed_and_mix(tape, z, genres)?;
        let seed = self.lift.forward(tape, mixed)?;
        let mut x = tape.reshape(seed, &[b, c0, f0, t0])?;
        let slope = T::of(LEAKY_SLOPE);
        for (up, res) in &self.stages {
            x = tape.leaky_relu(x, slope)?;
            x = up.forward(tape, x)?;
            x = self.residual(tape, res.clone(), x)?;
        }
        x = tape.leaky_relu(x, slope)?;
        x = self.collapse.forward(tape, x)?;
        let mut x = tape.reshape(x, &[b, self.config.num_mels, self.config.frames])?;
        for (conv, res) in &self.finetune {
            x = tape.leaky_relu(x, slope)?;
            x = conv.forward(tape, x)?;
            x = if self.config.checkpoint {
                let res = res.clone();
                tape.checkpoint(&[x], move |t, xs| Ok(vec![res.forward(t, xs[0])?]))?[0]
            } else {
                res.forward(tape, x)?
            };
        }
        Ok(x)
    }

    fn residual<T: Real>(&self, tape: &mut Tape<'_, T>, res: ResBlock2d, x: Var) -> Result<Var> {
        if self.config.checkpoint {
            Ok(tape.checkpoint(&[x], move |t, xs| Ok(vec![res.forward(t, xs[0])?]))?[0])
        } else {
            res.forward(tape, x)
        }
    }
}
