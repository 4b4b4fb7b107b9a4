use rand::Rng;

use super::{DiscriminatorConfig, LEAKY_SLOPE};
use crate::nn::{shape_err, Conv2d, ConvSpec, Embedding, Linear, Padding, ParamStore, Real, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub embed: Embedding,
    pub plane: Linear,
    pub convs: Vec<Conv2d>,
    pub out: Linear,
}

impl Discriminator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: &DiscriminatorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let plane_dim = config.num_mels * config.frames;
        let embed = Embedding::new(store, rng, "disc.embed", config.genre_count, config.embed_dim)?;
        let plane = Linear::new(store, rng, "disc.plane", config.embed_dim, plane_dim, true)?;
        let mut c_in = 2;
        let mut convs = Vec::with_capacity(config.convs.len());
        for (i, c) in config.convs.iter().enumerate() {
            let p = c.kernel / 2;
            let spec = ConvSpec::new(c_in, c.out_channels, [c.kernel, c.kernel])
                .stride([c.stride, c.stride])
                .groups(c.groups)
                .padding(Padding::Zeros(p, p));
            convs.push(Conv2d::new(store, rng, &format!("disc.conv{i}"), spec)?);
            c_in = c.out_channels;
        }
        let out = Linear::new(store, rng, "disc.out", config.flat_dim(), 1, true)?;
        Ok(Self {
            config: config.clone(),
            embed,
            plane,
            convs,
            out,
        })
    }

    /// Probability that each `mel[B, num_mels, frames]` is a real example
    /// of its genre, shaped `[B]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, mel: Var, genres: &[usize]) -> Result<Var> {
        let s = tape.shape(mel).to_vec();
        let (m, t) = (self.config.num_mels, self.config.frames);
        if s.len() != 3 || s[1] != m || s[2] != t || s[0] != genres.len() {
            return Err(shape_err(
                "discriminator",
                format!("mel {s:?} with {} genres, expected [B, {m}, {t}]", genres.len()),
            ));
        }
        let b = s[0];
        let e = self.embed.forward(tape, genres)?;
        let e = self.plane.forward(tape, e)?;
        let e = tape.reshape(e, &[b, 1, m, t])?;
        let x = tape.reshape(mel, &[b, 1, m, t])?;
        let mut x = tape.concat(&[x, e], 1)?;
        for c in &self.convs {
            x = c.forward(tape, x)?;
            x = tape.leaky_relu(x, T::of(LEAKY_SLOPE))?;
        }
        let x = tape.reshape(x, &[b, self.config.flat_dim()])?;
        let logit = self.out.forward(tape, x)?;
        let p = tape.sigmoid(logit)?;
        tape.reshape(p, &[b])
    }
}
