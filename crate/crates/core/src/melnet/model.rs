use rand::Rng;

use super::{MelNetConfig, MixtureParams, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::nn::{shape_err, Embedding, Gru, Linear, NnError, ParamStore, Real, Result, Tape, Tensor, Var};

/// Runs `gru` along axis 1 (time) or 2 (frequency) of `h[B, T, J, d]`,
/// treating every other position as an independent sequence.
fn scan<T: Real>(tape: &mut Tape<'_, T>, gru: &Gru, h: Var, axis: usize, reverse: bool) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let (b, t, j, d) = (s[0], s[1], s[2], s[3]);
    let (to, back, seq_shape, mid) = match axis {
        1 => ([1, 0, 2, 3], [1, 0, 2, 3], [t, b * j, d], [t, b, j, gru.hidden]),
        2 => ([2, 0, 1, 3], [1, 2, 0, 3], [j, b * t, d], [j, b, t, gru.hidden]),
        _ => return Err(shape_err("scan", format!("axis {axis}"))),
    };
    let seq = tape.permute(h, &to)?;
    let seq = tape.reshape(seq, &seq_shape)?;
    let out = gru.run(tape, seq, reverse)?;
    let out = tape.reshape(out, &mid)?;
    tape.permute(out, &back)
}

/// Time-delayed stack layer: GRUs forward in time and both ways in
/// frequency, concatenated, projected back to `d`, plus a residual.
#[derive(Clone, Debug)]
pub struct TimeLayer {
    pub along_time: Gru,
    pub freq_up: Gru,
    pub freq_down: Gru,
    pub proj: Linear,
}

impl TimeLayer {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            along_time: Gru::new(store, rng, &format!("{name}.along_time"), d, d)?,
            freq_up: Gru::new(store, rng, &format!("{name}.freq_up"), d, d)?,
            freq_down: Gru::new(store, rng, &format!("{name}.freq_down"), d, d)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), 3 * d, d, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let a = scan(tape, &self.along_time, h, 1, false)?;
        let up = scan(tape, &self.freq_up, h, 2, false)?;
        let down = scan(tape, &self.freq_down, h, 2, true)?;
        let cat = tape.concat(&[a, up, down], 3)?;
        let y = self.proj.forward(tape, cat)?;
        tape.add(y, h)
    }
}

/// Frequency-delayed stack layer: the previous frequency state and the
/// same layer's time state are concatenated, projected to `d`, scanned
/// upward in frequency, projected again and added to the previous state.
#[derive(Clone, Debug)]
pub struct FreqLayer {
    pub mix: Linear,
    pub freq_up: Gru,
    pub proj: Linear,
}

impl FreqLayer {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            mix: Linear::new(store, rng, &format!("{name}.mix"), 2 * d, d, true)?,
            freq_up: Gru::new(store, rng, &format!("{name}.freq_up"), d, d)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), d, d, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, hf: Var, ht: Var) -> Result<Var> {
        let cat = tape.concat(&[hf, ht], 3)?;
        let m = self.mix.forward(tape, cat)?;
        let s = scan(tape, &self.freq_up, m, 2, false)?;
        let y = self.proj.forward(tape, s)?;
        tape.add(y, hf)
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub time: TimeLayer,
    pub freq: FreqLayer,
}

impl Layer {
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, ht: Var, hf: Var) -> Result<(Var, Var)> {
        let ht = self.time.forward(tape, ht)?;
        let hf = self.freq.forward(tape, hf, ht)?;
        Ok((ht, hf))
    }
}

/// Feature extractor over an already generated grid: a lift to `d`
/// channels, a GRU along time (optionally bidirectional) and a projection.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub lift: Linear,
    pub forward_gru: Gru,
    pub backward_gru: Option<Gru>,
    pub proj: Linear,
}

impl Extractor {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        bidirectional: bool,
    ) -> Result<Self> {
        let lift = Linear::new(store, rng, &format!("{name}.lift"), 1, d, true)?;
        let forward_gru = Gru::new(store, rng, &format!("{name}.forward"), d, d)?;
        let backward_gru = if bidirectional {
            Some(Gru::new(store, rng, &format!("{name}.backward"), d, d)?)
        } else {
            None
        };
        let width = if bidirectional { 2 * d } else { d };
        let proj = Linear::new(store, rng, &format!("{name}.proj"), width, d, true)?;
        Ok(Self {
            lift,
            forward_gru,
            backward_gru,
            proj,
        })
    }

    /// `c[B, T, J]` to features `[B, T, J, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, c: Var) -> Result<Var> {
        let s = tape.shape(c).to_vec();
        let c = tape.reshape(c, &[s[0], s[1], s[2], 1])?;
        let h = self.lift.forward(tape, c)?;
        let mut parts = vec![scan(tape, &self.forward_gru, h, 1, false)?];
        if let Some(g) = &self.backward_gru {
            parts.push(scan(tape, g, h, 1, true)?);
        }
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 3)? };
        self.proj.forward(tape, cat)
    }
}

/// Raw mixture outputs, each `[B, T, J, K]`; `log_sigma` already clamped.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub logits: Var,
    pub mu: Var,
    pub log_sigma: Var,
}

impl MixtureVars {
    pub fn to_params<T: Real>(&self, tape: &Tape<'_, T>) -> MixtureParams {
        let s = tape.shape(self.mu);
        let shape = [s[0], s[1], s[2]];
        let k = s[3];
        let f = |v: Var| tape.value(v).iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        MixtureParams::from_raw(shape, k, &f(self.logits), &f(self.mu), &f(self.log_sigma))
    }

    /// Mean NLL of `target` (row-major over `[B, T, J]`).
    pub fn nll<T: Real>(&self, tape: &mut Tape<'_, T>, target: &[T]) -> Result<Var> {
        let s = tape.shape(self.mu).to_vec();
        let rows = s[0] * s[1] * s[2];
        let k = s[3];
        let l = tape.reshape(self.logits, &[rows, k])?;
        let m = tape.reshape(self.mu, &[rows, k])?;
        let ls = tape.reshape(self.log_sigma, &[rows, k])?;
        tape.mdn_nll(l, m, ls, target)
    }
}

/// The network for one tier.
#[derive(Clone, Debug)]
pub struct TierNet {
    pub dims: usize,
    pub mixtures: usize,
    pub w0_time: Linear,
    pub w0_freq: Linear,
    pub layers: Vec<Layer>,
    pub head: Linear,
    pub genre: Option<Embedding>,
    pub extractor: Option<Extractor>,
    pub checkpoint: bool,
}

/// What a tier is conditioned on besides its own past.
#[derive(Clone, Copy, Debug, Default)]
pub struct TierInputs<'a> {
    /// One genre id per batch element (lowest tier only).
    pub genres: Option<&'a [usize]>,
    /// Extractor features `[B, T, J, d]` (higher tiers only).
    pub features: Option<Var>,
}

impl TierNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &MelNetConfig,
        n_layers: usize,
        conditioning: Conditioning,
    ) -> Result<Self> {
        let d = cfg.dims;
        let layers = (0..n_layers)
            .map(|l| {
                Ok(Layer {
                    time: TimeLayer::new(store, rng, &format!("{name}.layer{l}.time"), d)?,
                    freq: FreqLayer::new(store, rng, &format!("{name}.layer{l}.freq"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (genre, extractor) = match conditioning {
            Conditioning::Genre(g) => (Some(Embedding::new(store, rng, &format!("{name}.genre"), g, d)?), None),
            Conditioning::Previous { bidirectional } => (
                None,
                Some(Extractor::new(store, rng, &format!("{name}.extractor"), d, bidirectional)?),
            ),
        };
        Ok(Self {
            dims: d,
            mixtures: cfg.mixtures,
            w0_time: Linear::new(store, rng, &format!("{name}.w0_time"), 1, d, false)?,
            w0_freq: Linear::new(store, rng, &format!("{name}.w0_freq"), 1, d, false)?,
            layers,
            head: Linear::new(store, rng, &format!("{name}.head"), d, 3 * cfg.mixtures, true)?,
            genre,
            extractor,
            checkpoint: cfg.checkpoint,
        })
    }

    /// Layer-0 states from the one-step delayed input,
    /// `h_t[i,j] = W_t·x[i-1,j]` and `h_f[i,j] = W_f·x[i,j-1]`.
    pub fn initial_states<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("melnet", format!("expected [B, T, J], got {s:?}")));
        }
        let x4 = tape.reshape(x, &[s[0], s[1], s[2], 1])?;
        let xt = tape.shift(x4, 1)?;
        let xf = tape.shift(x4, 2)?;
        Ok((self.w0_time.forward(tape, xt)?, self.w0_freq.forward(tape, xf)?))
    }

    /// Extractor features for a conditioning grid `c[B, T, J]`.
    pub fn condition<T: Real>(&self, tape: &mut Tape<'_, T>, c: Var) -> Result<Var> {
        self.extractor
            .as_ref()
            .ok_or_else(|| NnError::Config("this tier has no feature extractor".into()))?
            .forward(tape, c)
    }

    /// Mixture parameters for every bin of `x[B, T, J]`; the output at
    /// `(i, j)` depends only on inputs earlier in time-then-frequency order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, inputs: TierInputs<'_>) -> Result<MixtureVars> {
        let (mut ht, mut hf) = self.initial_states(tape, x)?;
        let b = tape.shape(x)[0];
        match (&self.genre, inputs.genres) {
            (Some(e), Some(ids)) => {
                if ids.len() != b {
                    return Err(shape_err("melnet", format!("{} genre ids for batch of {b}", ids.len())));
                }
                let g = e.forward(tape, ids)?;
                let g = tape.reshape(g, &[b, 1, 1, self.dims])?;
                ht = tape.add_bcast(ht, g)?;
                hf = tape.add_bcast(hf, g)?;
            }
            (Some(_), None) => return Err(NnError::Config("lowest tier needs genre ids".into())),
            _ => {}
        }
        match (&self.extractor, inputs.features) {
            (Some(_), Some(c)) => {
                ht = tape.add(ht, c)?;
                hf = tape.add(hf, c)?;
            }
            (Some(_), None) => return Err(NnError::Config("conditioned tier needs features".into())),
            _ => {}
        }
        for layer in &self.layers {
            (ht, hf) = if self.checkpoint {
                let layer = layer.clone();
                let out = tape.checkpoint(&[ht, hf], move |t, xs| {
                    let (a, b) = layer.forward(t, xs[0], xs[1])?;
                    Ok(vec![a, b])
                })?;
                (out[0], out[1])
            } else {
                layer.forward(tape, ht, hf)?
            };
        }
        self.head_forward(tape, hf)
    }

    /// `d -> 3K` per bin, split into logits, means and clamped log-scales.
    pub fn head_forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<MixtureVars> {
        let k = self.mixtures;
        let out = self.head.forward(tape, h)?;
        let logits = tape.narrow(out, 3, 0, k)?;
        let mu = tape.narrow(out, 3, k, k)?;
        let ls = tape.narrow(out, 3, 2 * k, k)?;
        let log_sigma = tape.clamp(ls, T::of(LOG_SIGMA_MIN), T::of(LOG_SIGMA_MAX))?;
        Ok(MixtureVars { logits, mu, log_sigma })
    }
}

/// How a tier is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Genre embedding with this many genres.
    Genre(usize),
    /// Feature extractor over the previous tiers.
    Previous { bidirectional: bool },
}

/// A full multiscale model.
#[derive(Clone, Debug)]
pub struct MelNet {
    pub config: MelNetConfig,
    pub tiers: Vec<TierNet>,
}

impl MelNet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: &MelNetConfig) -> Result<Self> {
        config.validate()?;
        let tiers = config
            .n_layers
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let cond = if g == 0 {
                    Conditioning::Genre(config.genre_count)
                } else {
                    Conditioning::Previous {
                        bidirectional: config.extractor_directions(g + 1) == 2,
                    }
                };
                TierNet::new(store, rng, &format!("tier{}", g + 1), config, n, cond)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tiers,
        })
    }

    /// Sum over tiers of each tier's mean NLL on a log-domain batch
    /// `x[B, T, J]`. Returns the total and the per-tier terms.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: &ndarray::Array3<f64>,
        genres: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let examples = super::decompose(x, self.tiers.len())?;
        let mut terms = Vec::with_capacity(examples.len());
        for (tier, ex) in self.tiers.iter().zip(&examples) {
            let target: Vec<T> = ex.target.iter().map(|&v| T::of(v)).collect();
            let xv = tape.constant(Tensor::new(ex.target.shape().to_vec(), target.clone())?)?;
            let mut inputs = TierInputs::default();
            if tier.genre.is_some() {
                inputs.genres = Some(genres);
            }
            if let Some(c) = &ex.cond {
                let cv = tape.constant(Tensor::new(c.shape().to_vec(), c.iter().map(|&v| T::of(v)).collect())?)?;
                inputs.features = Some(tier.condition(tape, cv)?);
            }
            let m = tier.forward(tape, xv, inputs)?;
            terms.push(m.nll(tape, &target)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok((total, terms))
    }
}
