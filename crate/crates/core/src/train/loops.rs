use std::path::PathBuf;

use ::log::{info, warn};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    save_model, CheckpointMeta, Corpus, ModelSpec, Result, RunLog, StepRecord, ThroughputMeter, TrainConfig,
    TrainError, TrainOptions,
};
use crate::cmelgan::{CMelGan, DiscriminatorConfig, GeneratorConfig};
use crate::data::ManifestEntry;
use crate::melnet::{batch_to_log_grid, check_tier_shape, split_counts, MelNet, MelNetConfig};
use crate::nn::{Adam, NnError, ParamStore, Real, Tape};

const MELNET_LR: f64 = 1e-3;
const CMELGAN_LR: f64 = 1e-4;

pub struct MelNetRun {
    pub model: MelNet,
    pub store: ParamStore<f32>,
    pub log: RunLog,
    pub meter: ThroughputMeter,
    pub meta: CheckpointMeta,
    pub checkpoint: Option<PathBuf>,
}

pub struct CMelGanRun {
    pub gan: CMelGan<f32>,
    pub log: RunLog,
    pub meter: ThroughputMeter,
    pub meta: CheckpointMeta,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn melnet_config(&self, genre_count: usize) -> Result<MelNetConfig> {
        let missing = |k: &str| TrainError::Config {
            line: 0,
            msg: format!("MelNet needs `{k}` in TrainConfig"),
        };
        let cfg = MelNetConfig {
            mixtures: self.mixtures,
            checkpoint: self.checkpoint,
            ..MelNetConfig::new(
                self.dims.ok_or_else(|| missing("dims"))?,
                self.n_layers.clone().ok_or_else(|| missing("n_layers"))?,
                self.directions.clone().ok_or_else(|| missing("directions"))?,
                genre_count,
            )
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Time extent must halve once per time split of the tier hierarchy.
    pub fn melnet_frame_multiple(&self) -> usize {
        1 << split_counts(self.n_layers.as_ref().map_or(1, Vec::len)).0
    }

    pub fn cmelgan_configs(&self, frames: usize, genre_count: usize) -> Result<(GeneratorConfig, DiscriminatorConfig)> {
        let mut g = GeneratorConfig::with_channels(self.data.num_mels, frames, genre_count, &self.gen_channels);
        g.noise_dim = self.noise_dim;
        g.seed_channels = self.seed_channels;
        g.finetune_kernels = self.finetune_kernels.clone();
        g.dilations = self.dilations.clone();
        g.checkpoint = self.checkpoint;
        g.validate()?;
        let mut d = DiscriminatorConfig::with_channels(
            self.data.num_mels,
            frames,
            genre_count,
            &self.disc_channels,
            self.disc_groups,
        );
        d.embed_dim = self.disc_embed_dim;
        d.validate()?;
        Ok((g, d))
    }

    /// Time extent must divide by the product of generator time strides.
    pub fn cmelgan_frame_multiple(&self) -> usize {
        1 << self.gen_channels.len()
    }
}

/// Per-step bookkeeping shared by both loops.
struct Progress {
    log: RunLog,
    meter: ThroughputMeter,
    step: usize,
    last_good: Option<PathBuf>,
}

impl Progress {
    fn new() -> Self {
        Self {
            log: RunLog::new(),
            meter: ThroughputMeter::default(),
            step: 0,
            last_good: None,
        }
    }

    /// Turns a non-finite value caught inside the tape into a step fault,
    /// flushing the run log for any error.
    fn guard<R>(&self, opts: &TrainOptions, r: Result<R>) -> Result<R> {
        match r {
            Ok(v) => Ok(v),
            Err(e) => {
                self.write_log(opts)?;
                match e {
                    TrainError::Nn(NnError::NumericFault { .. }) => Err(self.fault()),
                    e => Err(e),
                }
            }
        }
    }

    fn fault(&self) -> TrainError {
        TrainError::NumericFault {
            step: self.step,
            last_good: self.last_good.clone(),
        }
    }

    fn record(&mut self, opts: &mut TrainOptions, epoch: usize, samples: u64, loss_a: f64, loss_b: Option<f64>) -> Result<()> {
        let now = opts.clock.elapsed_s();
        self.meter.record(samples, now);
        self.log.push(StepRecord {
            step: self.step,
            epoch,
            loss_a,
            loss_b,
            rate_khz: self.meter.rate_khz(),
            wall_s: now,
        })
    }

    fn write_log(&self, opts: &TrainOptions) -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            self.log.write_csv(&dir.join("runlog.csv"))?;
        }
        Ok(())
    }

    fn done(&self, opts: &TrainOptions) -> bool {
        opts.max_steps.is_some_and(|m| self.step >= m)
    }
}

fn finite_step<T: Real>(store: &mut ParamStore<T>, grads: &crate::nn::Gradients<T>, opt: &mut Adam, p: &Progress) -> Result<()> {
    store.accumulate(grads);
    if !store.grads_finite() {
        store.zero_grads();
        return Err(p.fault());
    }
    opt.step(store);
    Ok(())
}

/// Trains every MelNet tier jointly on log-Mel batches.
pub fn train_melnet(cfg: &TrainConfig, entries: &[ManifestEntry], mut opts: TrainOptions) -> Result<MelNetRun> {
    let mut corpus = Corpus::open(cfg, entries, cfg.melnet_frame_multiple(), opts.synchronous)?;
    let mcfg = cfg.melnet_config(corpus.vocab.len())?;
    check_tier_shape(corpus.frames, cfg.data.num_mels, mcfg.num_tiers())?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let model = MelNet::new(&mut store, &mut rng, &mcfg)?;
    let mut opt = Adam::new(cfg.lr.unwrap_or(MELNET_LR), 0.9, 0.999);
    info!(
        "melnet: {} parameters, {}x{} grids, {} steps per epoch",
        store.param_count(),
        corpus.frames,
        cfg.data.num_mels,
        corpus.steps_per_epoch
    );
    let mut meta = CheckpointMeta {
        model: ModelSpec::MelNet { config: mcfg },
        spectro: corpus.params,
        frames: corpus.frames,
        genres: corpus.vocab.labels().to_vec(),
        epoch: 0,
        step: 0,
        seed: cfg.seed,
    };
    let ckpt = opts.out_dir.as_ref().map(|d| d.join("melnet.ckpt"));
    let mut p = Progress::new();
    let mut saved_at = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for _ in 0..corpus.steps_per_epoch {
            if p.done(&opts) {
                break 'epochs;
            }
            let batch = corpus.batcher.next_batch()?;
            let x = batch_to_log_grid(&batch.mels)?;
            p.step += 1;
            let step = (|| {
                let mut tape = Tape::new(&store);
                let (l, _) = model.loss(&mut tape, &x, &batch.genre_ids)?;
                let v = tape.scalar(l)?.as_f64();
                if !v.is_finite() {
                    return Err(p.fault());
                }
                Ok((v, tape.backward(l)?))
            })();
            let (loss, grads) = p.guard(&opts, step)?;
            if let Err(e) = finite_step(&mut store, &grads, &mut opt, &p) {
                p.write_log(&opts)?;
                return Err(e);
            }
            p.record(&mut opts, epoch, (batch.len() * corpus.clip_samples) as u64, loss, None)?;
        }
        meta.epoch = epoch + 1;
        meta.step = p.step;
        if let Some(path) = &ckpt {
            save_model(path, &meta, &[&store])?;
            p.last_good = Some(path.clone());
            saved_at = p.step;
            p.write_log(&opts)?;
            info!("epoch {} done at step {}, nll {:.4}", epoch + 1, p.step, p.log.last().map_or(f64::NAN, |r| r.loss_a));
        }
    }
    meta.step = p.step;
    if let Some(path) = &ckpt {
        if saved_at != p.step || p.step == 0 {
            save_model(path, &meta, &[&store])?;
        }
    }
    p.write_log(&opts)?;
    Ok(MelNetRun {
        model,
        store,
        log: p.log,
        meter: p.meter,
        meta,
        checkpoint: ckpt,
    })
}

/// Alternates one discriminator step and one generator step per
/// iteration. `loss_a` logs the discriminator loss, `loss_b` the
/// generator's.
pub fn train_cmelgan(cfg: &TrainConfig, entries: &[ManifestEntry], mut opts: TrainOptions) -> Result<CMelGanRun> {
    let mut corpus = Corpus::open(cfg, entries, cfg.cmelgan_frame_multiple(), opts.synchronous)?;
    let genre_count = corpus.vocab.len();
    let (gcfg, dcfg) = cfg.cmelgan_configs(corpus.frames, genre_count)?;
    if genre_count < 2 {
        warn!("single-genre corpus: the mismatched-genre discriminator term is skipped");
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gan = CMelGan::<f32>::new(&gcfg, &dcfg, &mut rng)?;
    let lr = cfg.lr.unwrap_or(CMELGAN_LR);
    gan.g_opt.lr = lr;
    gan.d_opt.lr = lr;
    info!(
        "cmelgan: generator {} / discriminator {} parameters, {}x{} grids",
        gan.g_store.param_count(),
        gan.d_store.param_count(),
        cfg.data.num_mels,
        corpus.frames
    );
    let mut meta = CheckpointMeta {
        model: ModelSpec::CMelGan {
            generator: gcfg,
            discriminator: dcfg,
        },
        spectro: corpus.params,
        frames: corpus.frames,
        genres: corpus.vocab.labels().to_vec(),
        epoch: 0,
        step: 0,
        seed: cfg.seed,
    };
    let ckpt = opts.out_dir.as_ref().map(|d| d.join("cmelgan.ckpt"));
    let mut p = Progress::new();
    let mut saved_at = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for _ in 0..corpus.steps_per_epoch {
            if p.done(&opts) {
                break 'epochs;
            }
            let batch = corpus.batcher.next_batch()?;
            let real = batch.mels.map(|v| (v + crate::melnet::LOG_EPS as f32).ln());
            p.step += 1;
            let d = p.guard(&opts, gan.d_step(&real, &batch.genre_ids, &mut rng).map_err(Into::into))?;
            let genres: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(0..genre_count)).collect();
            let g = p.guard(&opts, gan.g_step(&genres, &mut rng).map_err(Into::into))?;
            let params_ok = gan.g_store.iter().chain(gan.d_store.iter()).all(|(_, q)| q.value.iter().all(|v| v.is_finite()));
            if !(d.is_finite() && g.is_finite() && params_ok) {
                p.write_log(&opts)?;
                return Err(p.fault());
            }
            p.record(&mut opts, epoch, (batch.len() * corpus.clip_samples) as u64, d, Some(g))?;
        }
        meta.epoch = epoch + 1;
        meta.step = p.step;
        if let Some(path) = &ckpt {
            save_model(path, &meta, &[&gan.g_store, &gan.d_store])?;
            p.last_good = Some(path.clone());
            saved_at = p.step;
            p.write_log(&opts)?;
        }
    }
    meta.step = p.step;
    if let Some(path) = &ckpt {
        if saved_at != p.step || p.step == 0 {
            save_model(path, &meta, &[&gan.g_store, &gan.d_store])?;
        }
    }
    p.write_log(&opts)?;
    Ok(CMelGanRun {
        gan,
        log: p.log,
        meter: p.meter,
        meta,
        checkpoint: ckpt,
    })
}

/// Repeatedly fits one log-domain grid `x[B, T, J]`; returns the loss
/// before each step.
pub fn overfit_melnet<T: Real>(
    model: &MelNet,
    store: &mut ParamStore<T>,
    x: &Array3<f64>,
    genres: &[usize],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(lr, 0.9, 0.999);
    let mut losses = Vec::with_capacity(steps);
    let mut p = Progress::new();
    for _ in 0..steps {
        p.step += 1;
        let grads = (|| {
            let mut tape = Tape::new(store);
            let (l, _) = model.loss(&mut tape, x, genres)?;
            let v = tape.scalar(l)?.as_f64();
            if !v.is_finite() {
                return Err(p.fault());
            }
            losses.push(v);
            Ok(tape.backward(l)?)
        })()
        .map_err(|e| match e {
            TrainError::Nn(NnError::NumericFault { .. }) => p.fault(),
            e => e,
        })?;
        finite_step(store, &grads, &mut opt, &p)?;
    }
    Ok(losses)
}
