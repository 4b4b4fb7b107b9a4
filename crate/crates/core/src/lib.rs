//! Genre-conditioned music spectrogram generation.
//!
//! * [`nn`]: reverse-mode tensor core with the layers both models use.
//! * [`dsp`]: STFT, Mel filterbanks, Griffin-Lim phase recovery, resampling, WAV I/O.
//! * [`data`]: corpus manifests, clip caching and random chunk batching.
//! * [`melnet`]: autoregressive mixture-density spectrogram model.
//! * [`cmelgan`]: conditional convolutional GAN over Mel spectrograms.
//! * [`train`]: configuration, training loops, run logs and throughput.

pub mod cmelgan;
pub mod data;
pub mod dsp;
pub mod melnet;
pub mod nn;
pub mod train;
