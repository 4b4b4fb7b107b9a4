//! Genre-conditional convolutional GAN over log-Mel spectrograms.
//!
//! The generator mixes noise with a genre embedding, lifts it to a small
//! 2-D seed, upsamples with transposed convolutions and residual blocks,
//! collapses to one channel per Mel band and refines along time with 1-D
//! convolutions of increasing width. The discriminator sees the
//! spectrogram alongside a genre plane and scores real/fake.

mod discriminator;
mod generator;
mod loss;


use serde::{Deserialize, Serialize};

use crate::nn::{NnError, Result};

pub use discriminator::Discriminator;
pub use generator::{Generator, ResBlock1d, ResBlock2d};
pub use loss::{d_loss, g_loss, wrong_genres, CMelGan, LEAKY_SLOPE};

/// One transposed-convolution upsampling stage; `[freq, time]` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleSpec {
    pub stride: [usize; 2],
    pub kernel: [usize; 2],
    pub out_channels: usize,
}

impl UpsampleSpec {
    /// Stride-`s` stage with kernel `2s` (3 when `s = 1`) on each axis.
    pub fn with_strides(stride: [usize; 2], out_channels: usize) -> Self {
        let k = |s: usize| if s == 1 { 3 } else { 2 * s };
        Self {
            stride,
            kernel: [k(stride[0]), k(stride[1])],
            out_channels,
        }
    }

    /// `(padding, output_padding)` making the stage scale its input by
    /// exactly the stride.
    pub fn padding(&self) -> Result<([usize; 2], [usize; 2])> {
        let mut pad = [0; 2];
        let mut out = [0; 2];
        for a in 0..2 {
            let (k, s) = (self.kernel[a], self.stride[a]);
            if s == 0 || k < s {
                return Err(NnError::Config(format!("kernel {k} shorter than stride {s}")));
            }
            let excess = k - s;
            pad[a] = excess.div_ceil(2);
            out[a] = 2 * pad[a] - excess;
            if out[a] > 0 && out[a] >= s {
                return Err(NnError::Config(format!(
                    "kernel {k} with stride {s} cannot scale exactly"
                )));
            }
        }
        Ok((pad, out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub genre_count: usize,
    pub seed_channels: usize,
    pub num_mels: usize,
    pub frames: usize,
    pub upsample: Vec<UpsampleSpec>,
    pub finetune_kernels: Vec<usize>,
    pub dilations: Vec<usize>,
    #[serde(default)]
    pub checkpoint: bool,
}

impl GeneratorConfig {
    /// Three upsampling stages with stride 2 on every axis that stays
    /// divisible (stride 1 otherwise), channels 64 -> 32 -> 16 -> 8.
    pub fn default_for(num_mels: usize, frames: usize, genre_count: usize) -> Self {
        Self::with_channels(num_mels, frames, genre_count, &[32, 16, 8])
    }

    /// One upsampling stage per entry of `channels`, stage `i` using
    /// stride 2 on an axis when `2^(i+1)` divides its extent.
    pub fn with_channels(num_mels: usize, frames: usize, genre_count: usize, channels: &[usize]) -> Self {
        let stride = |n: usize, stage: usize| if n % (1 << (stage + 1)) == 0 { 2 } else { 1 };
        let upsample = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| UpsampleSpec::with_strides([stride(num_mels, i), stride(frames, i)], c))
            .collect();
        Self {
            noise_dim: 128,
            genre_count,
            seed_channels: 64,
            num_mels,
            frames,
            upsample,
            finetune_kernels: vec![3, 7, 15, 31],
            dilations: vec![1, 3, 9],
            checkpoint: false,
        }
    }

    /// `(channels, freq, time)` after the initial linear lift.
    pub fn seed_shape(&self) -> Result<[usize; 3]> {
        let (sf, st) = self
            .upsample
            .iter()
            .fold((1, 1), |(f, t), u| (f * u.stride[0], t * u.stride[1]));
        if sf == 0 || st == 0 || self.num_mels % sf != 0 || self.frames % st != 0 {
            return Err(NnError::Config(format!(
                "strides {sf}x{st} do not divide the {}x{} target",
                self.num_mels, self.frames
            )));
        }
        Ok([self.seed_channels, self.num_mels / sf, self.frames / st])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.noise_dim == 0 || self.genre_count == 0 || self.seed_channels == 0 {
            return bad("noise_dim, genre_count and seed_channels must be positive".into());
        }
        self.seed_shape()?;
        for u in &self.upsample {
            if u.out_channels == 0 {
                return bad("upsampling stages need output channels".into());
            }
            u.padding()?;
        }
        if self.finetune_kernels.iter().any(|k| k % 2 == 0)
            || self.finetune_kernels.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "finetune kernels must be odd and strictly increasing, got {:?}",
                self.finetune_kernels
            ));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        Ok(())
    }
}

/// One discriminator convolution: square kernel, zero padding `kernel/2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl DConvSpec {
    fn out_extent(&self, n: usize) -> usize {
        let p = self.kernel / 2;
        (n + 2 * p).saturating_sub(self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub genre_count: usize,
    pub num_mels: usize,
    pub frames: usize,
    pub embed_dim: usize,
    pub convs: Vec<DConvSpec>,
}

impl DiscriminatorConfig {
    /// 7x7 and 9x9 stride-2 convolutions, grouped by 4 after the first,
    /// keeping only the stages that still shrink the grid.
    pub fn default_for(num_mels: usize, frames: usize, genre_count: usize) -> Self {
        Self::with_channels(num_mels, frames, genre_count, &[16, 32, 64, 64], 4)
    }

    /// One stride-2 convolution per entry of `channels`: 7x7 for the first
    /// two, 9x9 after; the first ungrouped and the rest split into
    /// `groups`. Stages that would no longer shrink the grid are dropped.
    pub fn with_channels(num_mels: usize, frames: usize, genre_count: usize, channels: &[usize], groups: usize) -> Self {
        let mut convs = Vec::new();
        let (mut h, mut w) = (num_mels, frames);
        for (i, &out_channels) in channels.iter().enumerate() {
            let c = DConvSpec {
                kernel: if i < 2 { 7 } else { 9 },
                stride: 2,
                out_channels,
                groups: if i == 0 { 1 } else { groups },
            };
            let (nh, nw) = (c.out_extent(h), c.out_extent(w));
            if nh * nw >= h * w {
                break;
            }
            convs.push(c);
            (h, w) = (nh, nw);
        }
        Self {
            genre_count,
            num_mels,
            frames,
            embed_dim: 16,
            convs,
        }
    }

    /// Spatial extents after each convolution.
    pub fn extents(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.convs.len());
        let (mut h, mut w) = (self.num_mels, self.frames);
        for c in &self.convs {
            (h, w) = (c.out_extent(h), c.out_extent(w));
            out.push((h, w));
        }
        out
    }

    /// Input width of the final linear layer.
    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.extents().last().copied().unwrap_or((self.num_mels, self.frames));
        let c = self.convs.last().map_or(2, |c| c.out_channels);
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.genre_count == 0 || self.embed_dim == 0 || self.num_mels == 0 || self.frames == 0 {
            return bad("genre_count, embed_dim and the grid extents must be positive".into());
        }
        let mut c_in = 2;
        let (mut h, mut w) = (self.num_mels, self.frames);
        for c in &self.convs {
            if c.kernel == 0 || c.stride == 0 || c.groups == 0 || c.out_channels == 0 {
                return bad(format!("invalid discriminator convolution {c:?}"));
            }
            if c_in % c.groups != 0 || c.out_channels % c.groups != 0 {
                return bad(format!("{c_in}->{} channels not divisible by {} groups", c.out_channels, c.groups));
            }
            let (nh, nw) = (c.out_extent(h), c.out_extent(w));
            if nh * nw >= h * w || nh > h || nw > w {
                return bad(format!("convolution {c:?} does not shrink a {h}x{w} grid"));
            }
            (c_in, h, w) = (c.out_channels, nh, nw);
        }
        Ok(())
    }
}
