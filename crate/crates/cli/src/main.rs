use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use melgen_core::data::{read_genre_map, read_manifest, scan_corpus, write_manifest};
use melgen_core::dsp::{read_wav, SpectroParams};
use melgen_core::train::{
    bench, generate_from_checkpoint, invert_waveform, spectro_params, train_cmelgan, train_melnet, write_output_wav,
    Clock, GenerateOptions, ModelKind, SteppedClock, SystemClock, TrainConfig, TrainOptions,
};

#[derive(Parser)]
#[command(name = "melgen", version, about = "Genre-conditioned Mel spectrogram models for music generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Index WAV files under one directory per genre into a manifest CSV.
    Manifest {
        #[arg(required = true)]
        roots: Vec<PathBuf>,
        /// `directory,genre` lines overriding the directory-name default.
        #[arg(long)]
        genre_map: Option<PathBuf>,
        #[arg(short, long, default_value = "manifest.csv")]
        out: PathBuf,
    },
    /// Train the autoregressive model.
    TrainMelnet(TrainArgs),
    /// Train the conditional GAN.
    TrainCmelgan(TrainArgs),
    /// Sample one clip of a genre from a checkpoint and write it as WAV.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        genre: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        iters: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Round-trip a WAV file through its Mel spectrogram and Griffin-Lim.
    Invert {
        #[arg(long = "in")]
        input: PathBuf,
        /// Takes the analysis settings from a config file instead of the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        win: usize,
        #[arg(long, default_value_t = 512)]
        hop: usize,
        #[arg(long, default_value_t = 128)]
        mels: usize,
        #[arg(long, default_value_t = 60)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Measure training throughput in kHz of audio per wall-clock second.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "melnet")]
        model: ModelKind,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Loads batches synchronously and logs a fixed 1 s per step instead of
    /// wall time, so repeated runs produce identical files.
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Manifest { roots, genre_map, out } => {
            let map = match genre_map {
                Some(p) => read_genre_map(&p).with_context(|| format!("reading {}", p.display()))?,
                None => HashMap::new(),
            };
            let scan = scan_corpus(&roots, &map)?;
            write_manifest(&scan.entries, &out)?;
            println!(
                "{} files, {:.2} h, {} skipped -> {}",
                scan.entries.len(),
                scan.total_duration_s / 3600.0,
                scan.skipped,
                out.display()
            );
        }
        Cmd::TrainMelnet(a) => train(ModelKind::MelNet, a)?,
        Cmd::TrainCmelgan(a) => train(ModelKind::CMelGan, a)?,
        Cmd::Generate {
            ckpt,
            genre,
            seed,
            iters,
            out,
        } => {
            let g = generate_from_checkpoint(&ckpt, &GenerateOptions { genre, seed, gl_iters: iters })?;
            write_output_wav(&out, &g.waveform)?;
            println!("{:.2} s -> {}", g.waveform.duration_s(), out.display());
        }
        Cmd::Invert {
            input,
            config,
            win,
            hop,
            mels,
            iters,
            seed,
            out,
        } => {
            let w = read_wav(&input).with_context(|| format!("reading {}", input.display()))?;
            let params = match config {
                Some(p) => spectro_params(&TrainConfig::load(&p)?.data),
                None => SpectroParams::new(w.sample_rate, win, hop, mels),
            };
            let inv = invert_waveform(&w, &params, iters, seed)?;
            write_output_wav(&out, &inv.waveform)?;
            if let Some(c) = inv.convergence.last() {
                println!("spectral convergence {c:.4} after {iters} iterations -> {}", out.display());
            }
        }
        Cmd::Bench {
            config,
            manifest,
            model,
            steps,
        } => {
            if steps == 0 {
                bail!("--steps must be positive");
            }
            let cfg = TrainConfig::load(&config)?;
            let entries = read_manifest(&manifest)?;
            let report = bench(&cfg, &entries, model, steps, Box::new(SystemClock::new()))?;
            for line in report.lines() {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn train(kind: ModelKind, a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    let entries = read_manifest(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let clock: Box<dyn Clock> = if a.deterministic {
        Box::new(SteppedClock::new(1.0))
    } else {
        Box::new(SystemClock::new())
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        max_steps: a.max_steps,
        clock,
        synchronous: a.deterministic,
    };
    let (log, ckpt) = match kind {
        ModelKind::MelNet => {
            let r = train_melnet(&cfg, &entries, opts)?;
            (r.log, r.checkpoint)
        }
        ModelKind::CMelGan => {
            let r = train_cmelgan(&cfg, &entries, opts)?;
            (r.log, r.checkpoint)
        }
    };
    if let Some(last) = log.last() {
        println!(
            "{kind}: {} steps, last loss {:.4}, {:.3} kHz",
            last.step, last.loss_a, last.rate_khz
        );
    }
    if let Some(p) = ckpt {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}
