//! End-to-end acceptance checks. Every criterion runs even if an earlier one
//! fails; each prints one PASS/FAIL line and the test fails if any did.
//!
//! Run with `cargo test -p melgen-core --test acceptance -- --nocapture` to
//! see the report.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use melgen_core::cmelgan::{d_loss, g_loss, DConvSpec, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use melgen_core::data::{
    clip_samples_for_frames, scan_corpus, Batcher, ChunkSampler, CorpusCache, GenreVocab, ManifestEntry,
};
use melgen_core::dsp::{
    griffin_lim, hz_to_mel, istft, mel_spectrogram, mel_to_hz, stft, write_wav, SpectroParams, Waveform,
};
use melgen_core::melnet::{gaussian_baseline_nll, to_log_grid, Conditioning, MelNet, MelNetConfig, TierInputs, TierNet};
use melgen_core::nn::gradcheck::{self, Options};
use melgen_core::nn::{Adam, Conv1d, Conv2d, ConvGeom, ConvSpec, Gru, Padding, ParamStore, Tape, Tensor, Var};
use melgen_core::train::{
    generate_from_checkpoint, overfit_melnet, read_meta, train_cmelgan, train_melnet, write_output_wav,
    GenerateOptions, SteppedClock, TrainConfig, TrainOptions,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Option<Duration>, start: Instant) -> Result<(), String> {
    match limit {
        Some(l) if start.elapsed() > l => Err(format!("took {:.1} s, limit {} s", start.elapsed().as_secs_f64(), l.as_secs())),
        _ => Ok(()),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn tone(freq: f64, secs: f64, sr: u32, amp: f64) -> Waveform {
    let n = (secs * sr as f64) as usize;
    let s = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
        .collect();
    Waveform::new(s, sr).unwrap()
}

/// Writes `files` WAVs per genre directory and indexes them.
fn tone_corpus(dir: &Path, genres: &[(&str, f64, f64)], files: usize, sr: u32) -> Vec<ManifestEntry> {
    let mut roots = Vec::new();
    for &(name, lo, hi) in genres {
        let d = dir.join(name);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..files {
            let f = lo + (hi - lo) * i as f64 / (files.max(2) - 1) as f64;
            write_wav(&d.join(format!("{i}.wav")), &tone(f, 1.0, sr, 0.4)).unwrap();
        }
        roots.push(d);
    }
    scan_corpus(&roots, &HashMap::new()).unwrap().entries
}

fn stepped() -> TrainOptions {
    TrainOptions {
        out_dir: None,
        max_steps: None,
        clock: Box::new(SteppedClock::new(0.5)),
        synchronous: true,
    }
}

// ---- 1 ------------------------------------------------------------------

fn mel_round_trip() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let f = 20.0 * (11025.0f64 / 20.0).powf(i as f64 / 999.0);
        let back = mel_to_hz(hz_to_mel(f).unwrap()).unwrap();
        worst = worst.max((back - f).abs() / f);
    }
    ensure(worst < 1e-9, || format!("max rel err {worst:.2e}"))?;
    within(Some(Duration::from_secs(1)), start)?;
    Ok(format!("max rel err {worst:.1e} over 1000 frequencies"))
}

// ---- 2 ------------------------------------------------------------------

fn griffin_lim_recovery() -> Outcome {
    let start = Instant::now();
    let sr = 22050;
    let params = SpectroParams::new(sr, 2048, 800, 180);
    let w = tone(440.0, 2.0, sr, 0.5);
    let mag = stft(&w, &params).unwrap().magnitude();
    let gl = griffin_lim(&mag, &params, 60, 0).unwrap();
    let c = &gl.convergence;
    ensure(c.len() == 60, || format!("{} convergence values", c.len()))?;
    let rises = c.windows(2).filter(|p| p[1] > p[0] + 1e-12).count();
    ensure(rises == 0, || format!("convergence rose {rises} times: {c:?}"))?;

    let y = &gl.waveform.samples;
    let n = y.len();
    let mut buf: Vec<Complex64> = y.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let peak = (0..=n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
    let peak_hz = peak as f64 * sr as f64 / n as f64;
    let bin = params.bin_hz();
    ensure((peak_hz - 440.0).abs() <= bin, || format!("FFT peak {peak_hz:.2} Hz, bin width {bin:.2} Hz"))?;
    within(Some(Duration::from_secs(30)), start)?;
    Ok(format!(
        "peak {peak_hz:.2} Hz (bin {bin:.2} Hz), convergence {:.4} -> {:.4}",
        c[0],
        c[59]
    ))
}

// ---- 3 ------------------------------------------------------------------

fn istft_reconstruction() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (win, hop) = [(2048, 800), (256, 64), (512, 200), (1024, 256), (400, 160)][i % 5];
        let n = win * 5 + r.random_range(0..win);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let p = SpectroParams::new(22050, win, hop, 16);
        let y = istft(&stft(&Waveform::new(x.clone(), 22050).unwrap(), &p).unwrap(), &p).unwrap();
        let (a, b) = (win, y.len().min(n) - win);
        let num: f64 = (a..b).map(|i| (y.samples[i] - x[i]).powi(2)).sum();
        let den: f64 = (a..b).map(|i| x[i].powi(2)).sum();
        worst = worst.max((num / den).sqrt());
    }
    ensure(worst < 1e-6, || format!("interior rel err {worst:.2e}"))?;
    Ok(format!("worst interior rel err {worst:.1e} over 10 waveforms"))
}

// ---- 4 ------------------------------------------------------------------

type OpFn = Box<dyn for<'p> Fn(&mut Tape<'p, f64>, &[Var]) -> melgen_core::nn::Result<Var>>;

struct Case {
    name: &'static str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: OpFn) -> Case {
    Case {
        name,
        store: ParamStore::new(),
        inputs,
        f,
    }
}

/// Every tape op once, on random shapes drawn from `seed`.
fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let s: Vec<usize> = (0..3).map(|_| r.random_range(2..5)).collect();
    let x = rand_t(&mut r, &s);
    let y = rand_t(&mut r, &s);
    // keep samples away from kinks
    let kinked = x.map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
    let clampy = x.map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.8 } else { v });
    let positive = x.map(|v| v.abs() + 0.2);
    let row = rand_t(&mut r, &[s[2]]);
    let axis = r.random_range(0..3);
    let rs = [s[0] * s[1], s[2]];
    let z = rand_t(&mut r, &[s[0], 3, s[2]]);

    let mut cases = vec![
        case("add", vec![x.clone(), y.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", vec![x.clone(), y.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        case("mul", vec![x.clone(), y.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        case("add_bcast", vec![x.clone(), row.clone()], Box::new(|t, v| t.add_bcast(v[0], v[1]))),
        case("mul_bcast", vec![x.clone(), row], Box::new(|t, v| t.mul_bcast(v[0], v[1]))),
        case("affine", vec![x.clone()], Box::new(|t, v| t.affine(v[0], -1.7, 0.3))),
        case("scale", vec![x.clone()], Box::new(|t, v| t.scale(v[0], 2.5))),
        case("exp", vec![x.clone()], Box::new(|t, v| t.exp(v[0]))),
        case("ln", vec![positive], Box::new(|t, v| t.ln(v[0]))),
        case("tanh", vec![x.clone()], Box::new(|t, v| t.tanh(v[0]))),
        case("sigmoid", vec![x.map(|v| 3.0 * v)], Box::new(|t, v| t.sigmoid(v[0]))),
        case("leaky_relu", vec![kinked], Box::new(|t, v| t.leaky_relu(v[0], 0.2))),
        case("clamp", vec![clampy], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5))),
        case("sum", vec![x.clone()], Box::new(|t, v| t.sum(v[0]))),
        case("mean", vec![x.clone()], Box::new(|t, v| t.mean(v[0]))),
        case("reshape", vec![x.clone()], Box::new(move |t, v| t.reshape(v[0], &rs))),
        case("permute", vec![x.clone()], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        case("narrow", vec![x.clone()], Box::new(move |t, v| t.narrow(v[0], axis, 1, 1))),
        case("select", vec![x.clone()], Box::new(move |t, v| t.select(v[0], axis, 0))),
        case("shift", vec![x.clone()], Box::new(move |t, v| t.shift(v[0], axis))),
        case("concat", vec![x.clone(), z], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        case("stack", vec![x.clone(), y], Box::new(move |t, v| t.stack(&[v[0], v[1], v[0]], axis))),
        case(
            "reflect_pad2d",
            vec![rand_t(&mut r, &[1, 2, s[1] + 1, s[2] + 1])],
            Box::new(|t, v| t.reflect_pad2d(v[0], [1, 2, 3, 0])),
        ),
    ];

    let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
    cases.push(case("embedding", vec![rand_t(&mut r, &[4, 3])], Box::new(move |t, v| t.embedding(v[0], &ids))));
    let (i, o) = (r.random_range(1..6), r.random_range(1..6));
    cases.push(case(
        "linear",
        vec![rand_t(&mut r, &[2, 3, i]), rand_t(&mut r, &[o, i]), rand_t(&mut r, &[o])],
        Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
    ));

    let groups = 1 + seed as usize % 2;
    let geom = ConvGeom {
        stride: [r.random_range(1..3), r.random_range(1..3)],
        dilation: [r.random_range(1..3), r.random_range(1..3)],
        padding: [r.random_range(0..2), r.random_range(0..2)],
        groups,
    };
    let (cin, cout) = (2 * groups, 2 * groups);
    let w = rand_t(&mut r, &[cout, cin / groups, 2, 3]);
    cases.push(case(
        "conv2d",
        vec![rand_t(&mut r, &[2, cin, 6, 7]), w.clone(), rand_t(&mut r, &[cout])],
        Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom)),
    ));
    let op = [geom.stride[0] - 1, 0];
    cases.push(case(
        "conv_transpose2d",
        vec![rand_t(&mut r, &[1, cout, 3, 3]), w, rand_t(&mut r, &[cin])],
        Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), geom, op)),
    ));
    cases.push(case(
        "weight_norm",
        vec![rand_t(&mut r, &[3, 2, 2]), rand_t(&mut r, &[3])],
        Box::new(|t, v| t.weight_norm(v[0], v[1])),
    ));

    let (n, k) = (r.random_range(1..5), r.random_range(1..4));
    let target: Vec<f64> = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
    cases.push(case(
        "mdn_nll",
        vec![rand_t(&mut r, &[n, k]), rand_t(&mut r, &[n, k]), rand_t(&mut r, &[n, k]).map(|v| 0.5 * v)],
        Box::new(move |t, v| t.mdn_nll(v[0], v[1], v[2], &target)),
    ));
    let p = Tensor::from_fn(&[n, k], |_| r.random_range(0.05..0.95));
    let labels: Vec<f64> = (0..n * k).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    cases.push(case("bce", vec![p], Box::new(move |t, v| t.bce(v[0], &labels))));

    // ops that own parameters
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, &mut r, "gru", 3, 4).unwrap();
    cases.push(Case {
        name: "gru_cell",
        store,
        inputs: vec![rand_t(&mut r, &[3, 2, 3]), rand_t(&mut r, &[2, 4])],
        f: Box::new(move |t, v| {
            let mut h = v[1];
            for step in 0..3 {
                let x = t.select(v[0], 0, step)?;
                h = gru.step(t, x, h)?;
            }
            Ok(h)
        }),
    });
    let mut store = ParamStore::<f64>::new();
    let c1 = Conv1d::new(&mut store, &mut r, "c", 2, 3, 3, 3, Padding::Reflect(0, 3), true).unwrap();
    cases.push(Case {
        name: "conv1d (weight-normed, reflect padded)",
        store,
        inputs: vec![rand_t(&mut r, &[1, 2, 8])],
        f: Box::new(move |t, v| c1.forward(t, v[0])),
    });
    let mut store = ParamStore::<f64>::new();
    let a = Conv2d::new(&mut store, &mut r, "a", ConvSpec::new(2, 2, [3, 3]).padding(Padding::Zeros(1, 1))).unwrap();
    let b = Conv2d::new(&mut store, &mut r, "b", ConvSpec::new(2, 2, [3, 3]).padding(Padding::Reflect(1, 1))).unwrap();
    cases.push(Case {
        name: "checkpoint",
        store,
        inputs: vec![rand_t(&mut r, &[1, 2, 4, 5])],
        f: Box::new(move |t, v| {
            let (a, b) = (a.clone(), b.clone());
            let out = t.checkpoint(&[v[0]], move |t, v| {
                let h = a.forward(t, v[0])?;
                let h = t.tanh(h)?;
                Ok(vec![b.forward(t, h)?])
            })?;
            Ok(out[0])
        }),
    });
    cases
}

/// Fixed non-uniform weights so every output element gets its own upstream
/// gradient.
fn project<'p>(t: &mut Tape<'p, f64>, y: Var) -> melgen_core::nn::Result<Var> {
    let shape = t.shape(y).to_vec();
    let c = t.constant(Tensor::from_fn(&shape, |i| (i as f64 * 0.7 + 0.3).sin() + 0.1))?;
    let m = t.mul(y, c)?;
    t.sum(m)
}

fn check_case(c: &Case) -> f64 {
    let f = &c.f;
    gradcheck::check(
        &c.store,
        &c.inputs,
        |t, v| {
            let y = f(t, v)?;
            project(t, y)
        },
        Options::default(),
    )
    .unwrap_or_else(|e| panic!("{}: {e}", c.name))
    .max_rel_err
}

fn tiny_generator() -> GeneratorConfig {
    let mut g = GeneratorConfig::default_for(8, 8, 2);
    g.noise_dim = 4;
    g.seed_channels = 3;
    for u in &mut g.upsample {
        u.out_channels = 2;
    }
    g.finetune_kernels = vec![3];
    g.dilations = vec![1, 2];
    g
}

fn tiny_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        genre_count: 3,
        num_mels: 6,
        frames: 5,
        embed_dim: 3,
        convs: vec![
            DConvSpec { kernel: 3, stride: 2, out_channels: 4, groups: 1 },
            DConvSpec { kernel: 3, stride: 2, out_channels: 4, groups: 2 },
        ],
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut op_worst: HashMap<&'static str, f64> = HashMap::new();
    for seed in 0..10 {
        for c in op_cases(seed) {
            let e = check_case(&c);
            let w = op_worst.entry(c.name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let mut failed: Vec<String> = op_worst
        .iter()
        .filter(|(_, &e)| !(e < 1e-5))
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect();
    let op_max = op_worst.values().cloned().fold(0.0, f64::max);

    let mut model_worst = [0.0f64; 4];
    let mut max_params = 0;
    for seed in 0..10u64 {
        let mut r = rng(500 + seed);

        let mut store = ParamStore::<f64>::new();
        let cfg = MelNetConfig {
            mixtures: 2,
            checkpoint: seed % 2 == 1,
            ..MelNetConfig::new(3, vec![1, 1], vec![2, 1], 3)
        };
        let model = MelNet::new(&mut store, &mut r, &cfg).unwrap();
        max_params = max_params.max(store.param_count());
        let x = Array3::from_shape_fn((2, 4, 3), |_| r.random_range(-2.0..2.0));
        let rep = gradcheck::check(&store, &[], |t, _| Ok(model.loss(t, &x, &[0, 2])?.0), Options::default()).unwrap();
        model_worst[0] = model_worst[0].max(rep.max_rel_err);

        let mut store = ParamStore::<f64>::new();
        let gen = Generator::new(&mut store, &mut r, &tiny_generator()).unwrap();
        max_params = max_params.max(store.param_count());
        let z = rand_t(&mut r, &[2, 4]);
        // Hundreds of leaky-ReLU inputs per pass: a 1e-5 step straddles a kink
        // on some seeds, so the generator uses a smaller one.
        let rep = gradcheck::check(
            &store,
            &[z],
            |t, v| {
                let y = gen.forward(t, v[0], &[0, 1])?;
                project(t, y)
            },
            Options { eps: 1e-6, ..Options::default() },
        )
        .unwrap();
        model_worst[1] = model_worst[1].max(rep.max_rel_err);

        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::new(&mut store, &mut r, &tiny_discriminator()).unwrap();
        max_params = max_params.max(store.param_count());
        let real = rand_t(&mut r, &[2, 6, 5]);
        let fake = rand_t(&mut r, &[2, 6, 5]);
        let rep = gradcheck::check(
            &store,
            &[real, fake.clone()],
            |t, v| d_loss(t, &d, v[0], &[0, 2], v[1], &[1, 2], Some(&[1, 0])),
            Options::default(),
        )
        .unwrap();
        model_worst[2] = model_worst[2].max(rep.max_rel_err);
        let rep = gradcheck::check(&store, &[fake], |t, v| g_loss(t, &d, v[0], &[2, 1]), Options::default()).unwrap();
        model_worst[3] = model_worst[3].max(rep.max_rel_err);
    }
    for (name, e) in ["melnet loss", "generator", "discriminator loss", "generator loss"].iter().zip(model_worst) {
        if !(e < 1e-4) {
            failed.push(format!("{name} {e:.1e}"));
        }
    }
    ensure(max_params <= 5000, || format!("model with {max_params} params exceeds 5k"))?;
    ensure(failed.is_empty(), || format!("failing: {}", failed.join(", ")))?;
    within(Some(Duration::from_secs(300)), start)?;
    Ok(format!(
        "{} ops worst {op_max:.1e}; models worst {:.1e} (<= {max_params} params); 10 seeds",
        op_worst.len(),
        model_worst.iter().cloned().fold(0.0, f64::max)
    ))
}

// ---- 5 ------------------------------------------------------------------

fn tier_outputs(tier: &TierNet, store: &ParamStore<f64>, x: &Array3<f64>) -> [Vec<f64>; 3] {
    let mut tape = Tape::inference(store);
    let xv = tape
        .constant(Tensor::new(x.shape().to_vec(), x.iter().cloned().collect()).unwrap())
        .unwrap();
    let m = tier
        .forward(&mut tape, xv, TierInputs { genres: Some(&[1]), features: None })
        .unwrap();
    [m.logits, m.mu, m.log_sigma].map(|v| tape.value(v).to_vec())
}

fn causality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let (t, f) = (12, 8);
    let x = Array3::from_shape_fn((1, t, f), |_| r.random_range(-2.0..2.0));
    let mut store = ParamStore::<f64>::new();
    let cfg = MelNetConfig {
        mixtures: 2,
        ..MelNetConfig::new(4, vec![2], vec![2, 1], 3)
    };
    let tier = TierNet::new(&mut store, &mut r, "t", &cfg, 2, Conditioning::Genre(3)).unwrap();
    let k = cfg.mixtures;
    let base = tier_outputs(&tier, &store, &x);
    let (mut violations, mut reached) = (0, 0);
    for pi in 0..t {
        for pj in 0..f {
            let mut xp = x.clone();
            xp[[0, pi, pj]] += 0.75;
            let out = tier_outputs(&tier, &store, &xp);
            for i in 0..t {
                for j in 0..f {
                    let o = (i * f + j) * k;
                    let changed = (0..3).any(|c| out[c][o..o + k] != base[c][o..o + k]);
                    let successor = pi < i || (pi == i && pj < j);
                    if changed && !successor {
                        violations += 1;
                    }
                    if changed && successor {
                        reached += 1;
                    }
                }
            }
        }
    }
    ensure(violations == 0, || format!("{violations} non-successor outputs changed"))?;
    ensure(reached > 0, || "no perturbation reached any output".into())?;
    within(Some(Duration::from_secs(120)), start)?;
    Ok(format!("96 perturbations, 0 violations, {reached} successor outputs changed"))
}

// ---- 6 ------------------------------------------------------------------

fn checkpoint_equivalence() -> Outcome {
    let mut r = rng(6);
    let cfg = MelNetConfig {
        mixtures: 2,
        ..MelNetConfig::new(4, vec![3], vec![2, 1], 2)
    };
    let mut store = ParamStore::<f64>::new();
    let plain = TierNet::new(&mut store, &mut r, "t", &cfg, 3, Conditioning::Genre(2)).unwrap();
    let ck = TierNet {
        checkpoint: true,
        ..plain.clone()
    };
    let x = Array3::from_shape_fn((2, 5, 6), |_| r.random_range(-2.0..2.0));
    let target: Vec<f64> = x.iter().cloned().collect();
    let run = |tier: &TierNet| {
        let mut tape = Tape::new(&store);
        let xv = tape
            .constant(Tensor::new(x.shape().to_vec(), target.clone()).unwrap())
            .unwrap();
        let m = tier
            .forward(&mut tape, xv, TierInputs { genres: Some(&[0, 1]), features: None })
            .unwrap();
        let loss = m.nll(&mut tape, &target).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads: Vec<f64> = store.iter().flat_map(|(id, _)| g.param(id).unwrap().to_vec()).collect();
        (grads, tape.stored_activations())
    };
    let (g0, n0) = run(&plain);
    let (g1, n1) = run(&ck);
    let diff = g0.iter().zip(&g1).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure(diff < 1e-6, || format!("max-abs gradient difference {diff:.2e}"))?;
    ensure(n1 < n0, || format!("stored activations {n1} with checkpointing vs {n0} without"))?;
    Ok(format!("3 blocks: grad diff {diff:.1e}, stored activations {n0} -> {n1}"))
}

// ---- 7 ------------------------------------------------------------------

fn mdn_analytic_and_overfit() -> Outcome {
    let start = Instant::now();
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::inference(&store);
    let y = 0.37;
    let logits = tape.constant(Tensor::zeros(&[1, 1])).unwrap();
    let mu = tape.constant(Tensor::full(&[1, 1], y)).unwrap();
    let ls = tape.constant(Tensor::zeros(&[1, 1])).unwrap();
    let l = tape.mdn_nll(logits, mu, ls, &[y]).unwrap();
    let got = tape.scalar(l).unwrap();
    let want = 0.5 * (2.0 * std::f64::consts::PI).ln();
    ensure((got - want).abs() < 1e-9, || format!("single-bin NLL {got} vs {want}"))?;

    // one chunk of a rising chirp's log-Mel spectrogram
    let sr = 8000;
    let n = 4000;
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.5 * (2.0 * std::f64::consts::PI * (200.0 * t + 2500.0 * t * t)).sin()
        })
        .collect();
    let params = SpectroParams::new(sr, 256, 128, 16);
    let mel = mel_spectrogram(&Waveform::new(s, sr).unwrap(), &params).unwrap();
    let grid = to_log_grid(&mel.values);
    let frames = 24.min(grid.nrows());
    let x = Array3::from_shape_fn((1, frames, 16), |(_, i, j)| grid[[i, j]]);
    let baseline = gaussian_baseline_nll(&x);

    let mut store = ParamStore::<f32>::new();
    let cfg = MelNetConfig {
        mixtures: 4,
        ..MelNetConfig::new(16, vec![2], vec![2, 1], 1)
    };
    let model = MelNet::new(&mut store, &mut rng(7), &cfg).unwrap();
    let losses = overfit_melnet(&model, &mut store, &x, &[0], 500, 3e-3).map_err(|e| e.to_string())?;
    let mut tape = Tape::inference(&store);
    let (l, _) = model.loss(&mut tape, &x, &[0]).unwrap();
    let fin = tape.scalar(l).unwrap() as f64;
    ensure(fin < baseline, || format!("after 500 steps NLL {fin:.4} >= baseline {baseline:.4}"))?;
    within(Some(Duration::from_secs(600)), start)?;
    Ok(format!(
        "NLL at analytic point {got:.12}; overfit NLL {:.3} -> {fin:.3} vs baseline {baseline:.3}",
        losses[0]
    ))
}

// ---- 8 ------------------------------------------------------------------

fn eval_conv(x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let store = ParamStore::new();
    let mut t = Tape::inference(&store);
    let xv = t.constant(x.clone()).unwrap();
    let wv = t.constant(w.clone()).unwrap();
    let y = t.conv2d(xv, wv, None, geom).unwrap();
    t.tensor(y)
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_geom(r: &mut ChaCha8Rng, groups: usize) -> ConvGeom {
    ConvGeom {
        stride: [r.random_range(1..3), r.random_range(1..4)],
        dilation: [r.random_range(1..3), r.random_range(1..3)],
        padding: [r.random_range(0..3), r.random_range(0..2)],
        groups,
    }
}

fn conv_identities() -> Outcome {
    let mut r = rng(8);
    let mut adj_worst = 0.0f64;
    for _ in 0..20 {
        let groups = r.random_range(1..4);
        let geom = random_geom(&mut r, groups);
        let (cin, cout) = (groups * r.random_range(1..3), groups * r.random_range(1..3));
        let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(6..10), r.random_range(6..10));
        let x = rand_t(&mut r, &[2, cin, h, w]);
        let wt = rand_t(&mut r, &[cout, cin / groups, kh, kw]);
        let ax = eval_conv(&x, &wt, geom);
        let y = rand_t(&mut r, ax.shape());
        let (ho, wo) = (ax.shape()[2], ax.shape()[3]);
        let op = [
            h - geom.transpose_extent(0, ho, kh, 0).unwrap(),
            w - geom.transpose_extent(1, wo, kw, 0).unwrap(),
        ];
        let store = ParamStore::new();
        let mut t = Tape::inference(&store);
        let yv = t.constant(y.clone()).unwrap();
        let wv = t.constant(wt).unwrap();
        let aty = t.conv_transpose2d(yv, wv, None, geom, op).unwrap();
        ensure(t.shape(aty) == x.shape(), || format!("{geom:?}: transpose shape {:?}", t.shape(aty)))?;
        let lhs = inner(ax.data(), y.data());
        let rhs = inner(x.data(), t.value(aty));
        adj_worst = adj_worst.max((lhs - rhs).abs());
    }
    ensure(adj_worst < 1e-9, || format!("adjoint mismatch {adj_worst:.2e}"))?;

    let mut grp_worst = 0.0f64;
    for _ in 0..20 {
        let groups = r.random_range(2..5);
        let geom = random_geom(&mut r, groups);
        let (ci, co) = (r.random_range(1..3), r.random_range(1..3));
        let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(6..10), r.random_range(6..10));
        let x = rand_t(&mut r, &[2, groups * ci, h, w]);
        let w = rand_t(&mut r, &[groups * co, ci, kh, kw]);
        let full = eval_conv(&x, &w, geom);
        let single = ConvGeom { groups: 1, ..geom };
        let store = ParamStore::new();
        let mut t = Tape::inference(&store);
        let xv = t.constant(x).unwrap();
        let wv = t.constant(w).unwrap();
        let mut parts = Vec::new();
        for g in 0..groups {
            let xg = t.narrow(xv, 1, ci * g, ci).unwrap();
            let wg = t.narrow(wv, 0, co * g, co).unwrap();
            let (xg, wg) = (t.tensor(xg), t.tensor(wg));
            parts.push(t.constant(eval_conv(&xg, &wg, single)).unwrap());
        }
        let cat = t.concat(&parts, 1).unwrap();
        grp_worst = grp_worst.max(t.tensor(cat).max_abs_diff(&full));
    }
    ensure(grp_worst < 1e-9, || format!("grouped decomposition mismatch {grp_worst:.2e}"))?;
    Ok(format!("adjoint {adj_worst:.1e}, grouped {grp_worst:.1e} over 20 configurations each"))
}

// ---- 9 ------------------------------------------------------------------

const GAN_CONFIG: &str = "\
DataConfig:
batch_sz=4, num_mels=16, win_sz=0.25
stft_hop_sz=64, stft_win_sz=256, sample_rate=8000
TrainConfig:
epochs=100000, seed=9, noise_dim=16, seed_channels=8, gen_channels=[8,8,8]
finetune_kernels=[3,5], dilations=[1,3], disc_channels=[8,16], disc_embed_dim=4, disc_groups=2
";

fn gan_smoke() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    // sorted labels: genre 0 is the low band
    let entries = tone_corpus(tmp.path(), &[("0_low", 150.0, 400.0), ("1_high", 2500.0, 3500.0)], 3, 8000);
    let cfg = TrainConfig::parse(GAN_CONFIG).map_err(|e| e.to_string())?;
    let run = train_cmelgan(
        &cfg,
        &entries,
        TrainOptions {
            max_steps: Some(300),
            ..stepped()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(run.meta.genres == ["0_low", "1_high"], || format!("genres {:?}", run.meta.genres))?;
    ensure(run.log.len() == 300, || format!("{} steps logged", run.log.len()))?;
    let finite = run
        .log
        .records()
        .iter()
        .all(|r| r.loss_a.is_finite() && r.loss_b.is_some_and(f64::is_finite));
    ensure(finite, || "non-finite loss logged".into())?;

    let genres = [0, 1, 0, 1, 0, 1, 0, 1];
    let out = run.gan.generate(&genres, &mut rng(90)).map_err(|e| e.to_string())?;
    let per = out.numel() / genres.len();
    let min_std = out
        .data()
        .chunks(per)
        .map(|s| {
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            (s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / per as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    ensure(min_std > 1e-4, || format!("collapsed output, min per-sample std {min_std:.2e}"))?;

    let acc = discriminator_toy(&run.gan.disc.config);
    ensure(acc >= 0.95, || format!("toy accuracy {acc:.3}"))?;
    within(Some(Duration::from_secs(900)), start)?;
    let last = run.log.last().unwrap();
    Ok(format!(
        "300 steps finite (final D {:.3}, G {:.3}); min per-sample std {min_std:.3}; D toy accuracy {:.1}%",
        last.loss_a,
        last.loss_b.unwrap(),
        100.0 * acc
    ))
}

/// Trains a fresh discriminator alone to call constant-1 grids real and
/// constant-0 grids fake; returns held-out accuracy.
fn discriminator_toy(cfg: &DiscriminatorConfig) -> f64 {
    let mut r = rng(19);
    let mut store = ParamStore::<f32>::new();
    let d = Discriminator::new(&mut store, &mut r, cfg).unwrap();
    let mut opt = Adam::new(1e-3, 0.5, 0.9);
    let (m, t, g) = (cfg.num_mels, cfg.frames, cfg.genre_count);
    let batch = |r: &mut ChaCha8Rng| {
        let labels: Vec<f32> = (0..8).map(|_| r.random_range(0..2) as f32).collect();
        let genres: Vec<usize> = (0..8).map(|_| r.random_range(0..g)).collect();
        let mel = Tensor::from_fn(&[8, m, t], |i| labels[i / (m * t)]);
        (mel, genres, labels)
    };
    for _ in 0..200 {
        let (mel, genres, labels) = batch(&mut r);
        let grads = {
            let mut tape = Tape::new(&store);
            let x = tape.constant(mel).unwrap();
            let p = d.forward(&mut tape, x, &genres).unwrap();
            let l = tape.bce(p, &labels).unwrap();
            tape.backward(l).unwrap()
        };
        store.accumulate(&grads);
        opt.step(&mut store);
    }
    let mut correct = 0;
    for _ in 0..25 {
        let (mel, genres, labels) = batch(&mut r);
        let mut tape = Tape::inference(&store);
        let x = tape.constant(mel).unwrap();
        let p = d.forward(&mut tape, x, &genres).unwrap();
        correct += tape
            .value(p)
            .iter()
            .zip(&labels)
            .filter(|(&p, &y)| (p > 0.5) == (y > 0.5))
            .count();
    }
    correct as f64 / 200.0
}

// ---- 10 -----------------------------------------------------------------

const SMALL_DATA: &str = "DataConfig:\nbatch_sz=2, num_mels=16, win_sz=0.25\nstft_hop_sz=64, stft_win_sz=256, sample_rate=8000\n";

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let entries = tone_corpus(tmp.path(), &[("low", 300.0, 350.0), ("high", 2000.0, 2050.0)], 2, 8000);
    let melnet = TrainConfig::parse(&format!(
        "{SMALL_DATA}TrainConfig:\ndims=4, n_layers=[1,1], directions=[1], mixtures=2, epochs=100, seed=3\n"
    ))
    .map_err(|e| e.to_string())?;
    let gan = TrainConfig::parse(&format!(
        "{SMALL_DATA}TrainConfig:\nepochs=100, seed=5, noise_dim=8, seed_channels=4, gen_channels=[4,4,4]\nfinetune_kernels=[3,5], dilations=[1,3], disc_channels=[4,8], disc_embed_dim=4, disc_groups=2\n"
    ))
    .map_err(|e| e.to_string())?;

    let end_to_end = |run: &str, cmelgan: bool| -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tmp.path().join(run);
        let opts = TrainOptions {
            out_dir: Some(dir.clone()),
            max_steps: Some(50),
            ..stepped()
        };
        let ckpt: PathBuf = if cmelgan {
            train_cmelgan(&gan, &entries, opts).map_err(|e| e.to_string())?.checkpoint
        } else {
            train_melnet(&melnet, &entries, opts).map_err(|e| e.to_string())?.checkpoint
        }
        .ok_or("no checkpoint written")?;
        let meta = read_meta(&melgen_core::nn::load_checkpoint(&ckpt).unwrap()).unwrap();
        ensure(meta.step == 50, || format!("checkpoint at step {}", meta.step))?;
        let g = generate_from_checkpoint(
            &ckpt,
            &GenerateOptions {
                genre: "low".into(),
                seed: 21,
                gl_iters: 8,
            },
        )
        .map_err(|e| e.to_string())?;
        let wav = dir.join("out.wav");
        write_output_wav(&wav, &g.waveform).map_err(|e| e.to_string())?;
        Ok((std::fs::read(dir.join("runlog.csv")).unwrap(), std::fs::read(wav).unwrap()))
    };
    let mut sizes = Vec::new();
    for (kind, cmelgan) in [("melnet", false), ("cmelgan", true)] {
        let a = end_to_end(&format!("{kind}-a"), cmelgan)?;
        let b = end_to_end(&format!("{kind}-b"), cmelgan)?;
        ensure(a.0 == b.0, || format!("{kind}: run logs differ"))?;
        ensure(a.1 == b.1, || format!("{kind}: WAVs differ"))?;
        ensure(String::from_utf8_lossy(&a.0).lines().count() == 51, || format!("{kind}: expected 50 log rows"))?;
        sizes.push(format!("{kind} log {} B, wav {} B", a.0.len(), a.1.len()));
    }
    Ok(format!("byte-identical across two runs: {}", sizes.join("; ")))
}

// ---- 11 -----------------------------------------------------------------

const BIG: &str = "DataConfig:\n\nbatch_sz=6, num_mels=180,\nwin_sz=3,\nstft_hop_sz=800,\nstft_win_sz=256*8\n\nTrainConfig:\n\ndims=256, n_layers=[12,6,5,4],\ndirections=[2,1]\n";
const SMALL: &str = "DataConfig:\n\nbatch_sz=6, num_mels=180,\nwin_sz=8,\nstft_hop_sz=800,\nstft_win_sz=256*8\n\nTrainConfig:\n\ndims=64, n_layers=[12,6,5,4],\ndirections=[2,1]\n";

fn config_fidelity() -> Outcome {
    let mut counts = Vec::new();
    for (text, win_sz, dims, published) in [(BIG, 3.0, 256, 50.8e6), (SMALL, 8.0, 64, 4.04e6)] {
        let c = TrainConfig::parse(text).map_err(|e| e.to_string())?;
        let d = &c.data;
        ensure(
            d.batch_sz == 6 && d.num_mels == 180 && d.win_sz == win_sz && d.stft_hop_sz == 800 && d.stft_win_sz == 2048,
            || format!("data block parsed as {d:?}"),
        )?;
        ensure(
            c.dims == Some(dims) && c.n_layers == Some(vec![12, 6, 5, 4]) && c.directions == Some(vec![2, 1]),
            || format!("model block parsed as dims {:?} n_layers {:?} directions {:?}", c.dims, c.n_layers, c.directions),
        )?;
        let count = c.melnet_config(1).map_err(|e| e.to_string())?.param_count();
        counts.push(format!(
            "dims={dims}: {:.2}M vs {:.2}M published ({:+.1}%)",
            count as f64 / 1e6,
            published / 1e6,
            100.0 * (count as f64 - published) / published
        ));
    }
    Ok(format!("both blocks exact; param counts (one genre) {}", counts.join(", ")))
}

// ---- 12 -----------------------------------------------------------------

fn cache_reads() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let entries = tone_corpus(tmp.path(), &[("a", 200.0, 400.0), ("b", 900.0, 1500.0)], 3, 8000);
    let entries: Vec<ManifestEntry> = entries.into_iter().take(5).collect();
    let vocab = GenreVocab::from_manifest(&entries);
    let params = SpectroParams::new(8000, 256, 64, 16);
    let cache = Arc::new(CorpusCache::load(&entries, &vocab, 8000).map_err(|e| e.to_string())?);
    let warm = cache.disk_reads();
    ensure(warm == 5, || format!("{warm} reads while loading 5 files"))?;
    let clip = clip_samples_for_frames(24, &params);
    let total: usize = cache.songs().iter().map(|s| s.samples.len()).sum();
    let steps = total.div_ceil(clip).div_ceil(2);
    let mut batches = 0;
    for (prefetch, workers) in [(0, 1), (3, 2)] {
        let sampler = ChunkSampler::new(cache.clone(), &params, clip).map_err(|e| e.to_string())?;
        let mut b = Batcher::new(sampler, 2, 4, prefetch, workers).map_err(|e| e.to_string())?;
        for _ in 0..3 * steps {
            b.next_batch().map_err(|e| e.to_string())?;
            batches += 1;
        }
    }
    let reads = cache.disk_reads();
    ensure(reads == 5, || format!("{reads} disk reads after {batches} batches"))?;
    Ok(format!("5 reads after {batches} batches (3 epochs, synchronous and prefetching)"))
}

// ---- report -------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("Mel scale round trip", mel_round_trip),
        ("Griffin-Lim recovery", griffin_lim_recovery),
        ("ISTFT of STFT reconstruction", istft_reconstruction),
        ("gradient oracle", gradient_oracle),
        ("MelNet causality", causality),
        ("checkpointing equivalence", checkpoint_equivalence),
        ("MDN analytic point and overfit", mdn_analytic_and_overfit),
        ("transposed-conv adjoint and grouped conv", conv_identities),
        ("cMelGAN smoke", gan_smoke),
        ("determinism", determinism),
        ("config fidelity", config_fidelity),
        ("cache reads", cache_reads),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1} s): {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name} ({secs:.1} s): {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
