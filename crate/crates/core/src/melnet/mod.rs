//! Autoregressive Mel spectrogram model with Gaussian-mixture outputs.
//!
//! Grids are modelled time-major, `x[batch, time, freq]`, in the log
//! domain `ln(x + 1e-6)`. Each tier pairs a time-delayed stack with a
//! frequency-delayed stack; the lowest tier adds a genre embedding and
//! higher tiers add features extracted from the tiers below.

mod generate;
mod mixture;
mod model;
mod tiers;

#[cfg(test)]
mod tests;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::nn::{NnError, Result, Tensor};

pub use generate::{generate, generate_tier, multiscale_generate};
pub use mixture::{gaussian_baseline_nll, sample_bin, MixtureParams};
pub use model::{Conditioning, Extractor, FreqLayer, Layer, MelNet, MixtureVars, TierInputs, TierNet, TimeLayer};
pub use tiers::{
    check_tier_shape, coarsest_shape, decompose, split_counts, tier_merge, tier_split, TierAxis, TierData, TierExample,
};

pub const LOG_EPS: f64 = 1e-6;

/// Ceiling applied to sampled log power before exponentiating. Audio in
/// [-1, 1] stays far below it; undertrained models can drift past `exp`'s range.
pub const MAX_LOG_POWER: f64 = 50.0;
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelNetConfig {
    pub dims: usize,
    /// Layers per tier, lowest tier first.
    pub n_layers: Vec<usize>,
    /// Extractor directions (1 or 2) for the conditioned tiers in order;
    /// the last value repeats.
    pub directions: Vec<usize>,
    pub mixtures: usize,
    pub genre_count: usize,
    #[serde(default)]
    pub checkpoint: bool,
}

impl MelNetConfig {
    pub fn new(dims: usize, n_layers: Vec<usize>, directions: Vec<usize>, genre_count: usize) -> Self {
        Self {
            dims,
            n_layers,
            directions,
            mixtures: 10,
            genre_count,
            checkpoint: false,
        }
    }

    pub fn num_tiers(&self) -> usize {
        self.n_layers.len()
    }

    /// Direction count of the extractor feeding tier `g` (1-based, `g >= 2`).
    pub fn extractor_directions(&self, g: usize) -> usize {
        match self.directions.len() {
            0 => 2,
            n => self.directions[(g.saturating_sub(2)).min(n - 1)],
        }
    }

    /// Trainable scalars in a model built from this config, without
    /// allocating it.
    pub fn param_count(&self) -> usize {
        let d = self.dims;
        let gru = 6 * d * d + 6 * d;
        let lin = |i: usize, o: usize| i * o + o;
        let layer = 4 * gru + lin(3 * d, d) + lin(2 * d, d) + lin(d, d);
        self.n_layers
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let cond = if g == 0 {
                    self.genre_count * d
                } else {
                    let bi = self.extractor_directions(g + 1) == 2;
                    lin(1, d) + gru * if bi { 2 } else { 1 } + lin(if bi { 2 * d } else { d }, d)
                };
                n * layer + 2 * d + lin(d, 3 * self.mixtures) + cond
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.dims == 0 {
            return bad("dims must be positive".into());
        }
        if self.mixtures == 0 {
            return bad("at least one mixture component is required".into());
        }
        if self.n_layers.is_empty() || self.n_layers.contains(&0) {
            return bad(format!("n_layers must be nonempty and positive, got {:?}", self.n_layers));
        }
        if let Some(d) = self.directions.iter().find(|&&d| d != 1 && d != 2) {
            return bad(format!("directions must be 1 or 2, got {d}"));
        }
        if self.genre_count == 0 {
            return bad("genre_count must be positive".into());
        }
        Ok(())
    }
}

/// `[num_mels, frames]` power values to a `[frames, num_mels]` log grid.
pub fn to_log_grid(mel: &Array2<f64>) -> Array2<f64> {
    mel.t().mapv(|v| (v + LOG_EPS).ln())
}

/// Inverse of [`to_log_grid`], clamped at zero.
pub fn from_log_grid(grid: &Array2<f64>) -> Array2<f64> {
    grid.t().mapv(|v| (v.min(MAX_LOG_POWER).exp() - LOG_EPS).max(0.0))
}

/// Batch mels `[B, num_mels, frames]` to a log grid `[B, frames, num_mels]`.
pub fn batch_to_log_grid(mels: &Tensor<f32>) -> Result<Array3<f64>> {
    let s = mels.shape();
    if s.len() != 3 {
        return Err(crate::nn::shape_err("melnet", format!("expected [B, M, T], got {s:?}")));
    }
    let (b, m, t) = (s[0], s[1], s[2]);
    let d = mels.data();
    Ok(Array3::from_shape_fn((b, t, m), |(b, i, j)| {
        (d[(b * m + j) * t + i] as f64 + LOG_EPS).ln()
    }))
}
