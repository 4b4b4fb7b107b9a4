use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::gradcheck::{self, Options};
use crate::nn::{ParamStore, Real, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_grid(r: &mut ChaCha8Rng, b: usize, t: usize, f: usize) -> Array3<f64> {
    Array3::from_shape_fn((b, t, f), |_| r.random_range(-2.0..2.0))
}

fn tensor<T: Real>(a: &Array3<f64>) -> Tensor<T> {
    Tensor::new(a.shape().to_vec(), a.iter().map(|&v| T::of(v)).collect()).unwrap()
}

fn config(dims: usize, n_layers: Vec<usize>, mixtures: usize) -> MelNetConfig {
    MelNetConfig {
        mixtures,
        ..MelNetConfig::new(dims, n_layers, vec![2, 1], 3)
    }
}

fn zero_params<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    for p in store.iter_mut() {
        if p.name.starts_with(prefix) {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Raw head outputs (logits, mu, log_sigma) for every bin of `x`.
fn raw_outputs<T: Real>(
    tier: &TierNet,
    store: &ParamStore<T>,
    x: &Array3<f64>,
    genres: Option<&[usize]>,
    cond: Option<&Array3<f64>>,
) -> [Vec<T>; 3] {
    let mut tape = Tape::inference(store);
    let xv = tape.constant(tensor(x)).unwrap();
    let features = cond.map(|c| {
        let cv = tape.constant(tensor(c)).unwrap();
        tier.condition(&mut tape, cv).unwrap()
    });
    let m = tier.forward(&mut tape, xv, TierInputs { genres, features }).unwrap();
    [m.logits, m.mu, m.log_sigma].map(|v| tape.value(v).to_vec())
}

#[test]
fn shifted_inputs_follow_their_definitions() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let tier = TierNet::new(&mut store, &mut r, "t", &config(3, vec![1], 2), 1, Conditioning::Genre(2)).unwrap();
    let eval = |x: &Array3<f64>| {
        let mut tape = Tape::inference(&store);
        let xv = tape.constant(tensor(x)).unwrap();
        let (ht, hf) = tier.initial_states(&mut tape, xv).unwrap();
        (tape.tensor(ht), tape.tensor(hf))
    };
    let zero = Array3::zeros((1, 4, 3));
    let (ht, hf) = eval(&zero);
    assert!(ht.data().iter().chain(hf.data()).all(|&v| v == 0.0));

    let base = rand_grid(&mut r, 1, 4, 3);
    let (ht0, hf0) = eval(&base);
    for (i, j) in [(0, 0), (1, 2), (3, 1)] {
        let mut x = base.clone();
        x[[0, i, j]] += 1.0;
        let (ht, hf) = eval(&x);
        for ti in 0..4 {
            for fj in 0..3 {
                for c in 0..3 {
                    let o = (ti * 3 + fj) * 3 + c;
                    let dt = ht.data()[o] != ht0.data()[o];
                    let df = hf.data()[o] != hf0.data()[o];
                    assert_eq!(dt, ti == i + 1 && fj == j, "time shift at {ti},{fj}");
                    assert_eq!(df, ti == i && fj == j + 1, "freq shift at {ti},{fj}");
                }
            }
        }
    }
    // The first row and the lowest band never see the input.
    let (ht, hf) = eval(&rand_grid(&mut r, 1, 4, 3));
    assert!(ht.data()[..9].iter().all(|&v| v == 0.0));
    assert!((0..4).all(|i| hf.data()[i * 9..i * 9 + 3].iter().all(|&v| v == 0.0)));
}

#[test]
fn zeroed_layers_are_residual_identities() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let tier = TierNet::new(&mut store, &mut r, "t", &config(4, vec![1], 2), 1, Conditioning::Genre(2)).unwrap();
    zero_params(&mut store, "t.layer0");
    let h = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
    let g = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.11).cos());
    let mut tape = Tape::inference(&store);
    let hv = tape.constant(h.clone()).unwrap();
    let gv = tape.constant(g).unwrap();
    let out = tier.layers[0].time.forward(&mut tape, hv).unwrap();
    assert_eq!(tape.tensor(out), h);
    let out = tier.layers[0].freq.forward(&mut tape, hv, gv).unwrap();
    assert_eq!(tape.tensor(out), h);
}

#[test]
fn layer_dependencies_follow_scan_directions() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(2);
    let tier = TierNet::new(&mut store, &mut r, "t", &config(3, vec![1], 2), 1, Conditioning::Genre(2)).unwrap();
    let (t, f, d) = (4, 5, 3);
    let base = Tensor::from_fn(&[1, t, f, d], |_| r.random_range(-1.0..1.0));
    let other = Tensor::from_fn(&[1, t, f, d], |_| r.random_range(-1.0..1.0));
    let run = |h: &Tensor<f64>, which: usize| {
        let mut tape = Tape::inference(&store);
        let hv = tape.constant(h.clone()).unwrap();
        let ov = tape.constant(other.clone()).unwrap();
        let out = if which == 0 {
            tier.layers[0].time.forward(&mut tape, hv).unwrap()
        } else {
            tier.layers[0].freq.forward(&mut tape, hv, ov).unwrap()
        };
        tape.tensor(out)
    };
    for which in 0..2 {
        let y0 = run(&base, which);
        for (pi, pj) in [(1, 2), (2, 0), (3, 4)] {
            let mut h = base.clone();
            h.data_mut()[(pi * f + pj) * d] += 0.5;
            let y = run(&h, which);
            for i in 0..t {
                for j in 0..f {
                    let o = (i * f + j) * d;
                    let changed = (0..d).any(|c| y.data()[o + c] != y0.data()[o + c]);
                    let allowed = if which == 0 { i >= pi } else { i == pi && j >= pj };
                    if !allowed {
                        assert!(!changed, "layer {which}: ({pi},{pj}) leaked into ({i},{j})");
                    }
                }
            }
        }
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(10 + seed);
        let tier = TierNet::new(&mut store, &mut r, "t", &config(3, vec![1], 2), 1, Conditioning::Genre(2)).unwrap();
        let h = Tensor::from_fn(&[1, 4, 3, 3], |_| r.random_range(-1.0..1.0));
        let g = Tensor::from_fn(&[1, 4, 3, 3], |_| r.random_range(-1.0..1.0));
        let wt = Tensor::from_fn(&[1, 4, 3, 3], |_| r.random_range(-1.0..1.0));
        let time = tier.layers[0].time.clone();
        let freq = tier.layers[0].freq.clone();
        let project = |tape: &mut Tape<'_, f64>, y: Var| {
            let w = tape.constant(wt.clone())?;
            let p = tape.mul(y, w)?;
            tape.sum(p)
        };
        let rep = gradcheck::check(&store, &[h.clone()], |tape, xs| {
            let y = time.forward(tape, xs[0])?;
            project(tape, y)
        }, Options::default())
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "time layer: {rep:?}");
        let rep = gradcheck::check(&store, &[h, g], |tape, xs| {
            let y = freq.forward(tape, xs[0], xs[1])?;
            project(tape, y)
        }, Options::default())
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "freq layer: {rep:?}");
    }
}

#[test]
fn zeroed_head_gives_uniform_unit_mixtures_and_simplex_holds() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(3);
    let tier = TierNet::new(&mut store, &mut r, "t", &config(4, vec![1], 3), 1, Conditioning::Genre(2)).unwrap();
    let mut tape = Tape::inference(&store);
    let h = tape.constant(Tensor::zeros(&[1, 2, 2, 4])).unwrap();
    let m = tier.head_forward(&mut tape, h).unwrap();
    let p = m.to_params(&tape);
    // Zero hidden state leaves only the head bias.
    let mut zs = store.clone();
    zero_params(&mut zs, "t.head");
    let mut zt = Tape::inference(&zs);
    let h = zt.constant(Tensor::zeros(&[1, 2, 2, 4])).unwrap();
    let z = tier.head_forward(&mut zt, h).unwrap().to_params(&zt);
    assert!(z.pi.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(z.mu.iter().all(|&v| v == 0.0));
    assert!(z.sigma.iter().all(|&v| v == 1.0));
    assert_eq!(p.bins(), 4);

    let x = rand_grid(&mut r, 2, 3, 4);
    let [l, mu, ls] = raw_outputs(&tier, &store, &x, Some(&[0, 1]), None);
    let p = MixtureParams::from_raw([2, 3, 4], 3, &l, &mu, &ls);
    for b in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                let (pi, _, sigma) = p.bin(b, i, j);
                assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(sigma.iter().all(|&s| s > 0.0));
            }
        }
    }
}

#[test]
fn mdn_loss_analytic_point_is_stationary_in_mu() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let l = tape.input(Tensor::zeros(&[1, 1])).unwrap();
    let mu = tape.input(Tensor::full(&[1, 1], 0.3)).unwrap();
    let ls = tape.input(Tensor::zeros(&[1, 1])).unwrap();
    let loss = tape.mdn_nll(l, mu, ls, &[0.3]).unwrap();
    let want = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((tape.scalar(loss).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.91894).abs() < 1e-5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.var(mu).unwrap()[0], 0.0);
}

/// Positions whose raw outputs changed after perturbing `(pi, pj)`.
fn assert_causal<T: Real>(tier: &TierNet, store: &ParamStore<T>, x: &Array3<f64>, genres: Option<&[usize]>) {
    let (_, t, f) = x.dim();
    let k = tier.mixtures;
    let base = raw_outputs(tier, store, x, genres, None);
    for pi in 0..t {
        for pj in 0..f {
            let mut xp = x.clone();
            xp[[0, pi, pj]] += 0.75;
            let out = raw_outputs(tier, store, &xp, genres, None);
            for i in 0..t {
                for j in 0..f {
                    let precedes = pi < i || (pi == i && pj < j);
                    if precedes {
                        continue;
                    }
                    let o = (i * f + j) * k;
                    for c in 0..3 {
                        assert!(
                            out[c][o..o + k] == base[c][o..o + k],
                            "perturbing ({pi},{pj}) changed output {c} at ({i},{j})"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn outputs_depend_only_on_raster_predecessors() {
    let mut r = rng(4);
    let x = rand_grid(&mut r, 1, 5, 4);
    for checkpoint in [false, true] {
        let mut store = ParamStore::<f32>::new();
        let cfg = MelNetConfig {
            checkpoint,
            ..config(4, vec![2], 2)
        };
        let tier = TierNet::new(&mut store, &mut r, "t", &cfg, 2, Conditioning::Genre(3)).unwrap();
        assert_causal(&tier, &store, &x, Some(&[1]));
    }
    // The first bin is the same for any input.
    let mut store = ParamStore::<f64>::new();
    let tier = TierNet::new(&mut store, &mut r, "t", &config(4, vec![2], 2), 2, Conditioning::Genre(3)).unwrap();
    let a = raw_outputs(&tier, &store, &rand_grid(&mut r, 1, 5, 4), Some(&[2]), None);
    let b = raw_outputs(&tier, &store, &rand_grid(&mut r, 1, 5, 4), Some(&[2]), None);
    for c in 0..3 {
        assert_eq!(a[c][..2], b[c][..2]);
    }
}

#[test]
fn checkpointed_tier_matches_plain_tier() {
    let mut r = rng(5);
    let cfg = config(3, vec![3], 2);
    let mut store = ParamStore::<f64>::new();
    let tier = TierNet::new(&mut store, &mut r, "t", &cfg, 3, Conditioning::Genre(2)).unwrap();
    let ck = TierNet {
        checkpoint: true,
        ..tier.clone()
    };
    let x = rand_grid(&mut r, 2, 3, 4);
    let target: Vec<f64> = x.iter().cloned().collect();
    let run = |t: &TierNet| {
        let mut tape = Tape::new(&store);
        let xv = tape.constant(tensor(&x)).unwrap();
        let m = t.forward(&mut tape, xv, TierInputs { genres: Some(&[0, 1]), features: None }).unwrap();
        let loss = m.nll(&mut tape, &target).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = store.iter().map(|(id, _)| g.param(id).unwrap().to_vec()).collect();
        (tape.scalar(loss).unwrap(), grads, tape.stored_activations())
    };
    let (l0, g0, n0) = run(&tier);
    let (l1, g1, n1) = run(&ck);
    assert_eq!(l0, l1);
    let diff = g0
        .iter()
        .flatten()
        .zip(g1.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff < 1e-6, "{diff}");
    assert!(n1 < n0, "{n1} vs {n0}");
}

#[test]
fn small_model_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = MelNetConfig {
            checkpoint: seed % 2 == 1,
            ..config(3, vec![1, 1], 2)
        };
        let model = MelNet::new(&mut store, &mut r, &cfg).unwrap();
        assert!(store.param_count() <= 5000);
        let x = rand_grid(&mut r, 2, 4, 3);
        let genres = [0usize, 2];
        let rep = gradcheck::check(
            &store,
            &[],
            |tape, _| Ok(model.loss(tape, &x, &genres)?.0),
            Options::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn extractor_conditions_the_tier_and_receives_gradient() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let cfg = config(4, vec![1], 2);
    let tier = TierNet::new(&mut store, &mut r, "t", &cfg, 1, Conditioning::Previous { bidirectional: true }).unwrap();
    let x = rand_grid(&mut r, 1, 3, 4);
    let c = rand_grid(&mut r, 1, 3, 4);

    {
        let mut tape = Tape::inference(&store);
        let cv = tape.constant(tensor(&c)).unwrap();
        let feat = tier.condition(&mut tape, cv).unwrap();
        assert_eq!(tape.shape(feat), &[1, 3, 4, 4]);
    }

    let target: Vec<f64> = x.iter().cloned().collect();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(tensor(&x)).unwrap();
    let cv = tape.constant(tensor(&c)).unwrap();
    let features = Some(tier.condition(&mut tape, cv).unwrap());
    let m = tier.forward(&mut tape, xv, TierInputs { genres: None, features }).unwrap();
    let loss = m.nll(&mut tape, &target).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut touched = 0;
    for (id, p) in store.iter() {
        if p.name.starts_with("t.extractor") {
            assert!(g.param(id).unwrap().iter().all(|v| v.is_finite()));
            touched += g.param(id).unwrap().iter().any(|&v| v != 0.0) as usize;
        }
    }
    assert_eq!(touched, 12, "every extractor tensor gets gradient");

    // A zeroed extractor reduces the tier to its unconditioned form.
    drop(tape);
    zero_params(&mut store, "t.extractor");
    let with = raw_outputs(&tier, &store, &x, None, Some(&c));
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(tensor(&x)).unwrap();
    let zero = tape.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let m = tier.forward(&mut tape, xv, TierInputs { genres: None, features: Some(zero) }).unwrap();
    assert_eq!(tape.value(m.mu), with[1].as_slice());
}

#[test]
fn generation_is_deterministic_prefix_consistent_and_genre_sensitive() {
    let mut r = rng(7);
    let mut store = ParamStore::<f32>::new();
    let model = MelNet::new(&mut store, &mut r, &config(4, vec![1], 2)).unwrap();
    let a = generate(&model, &store, 0, (4, 5), &mut rng(1)).unwrap();
    let b = generate(&model, &store, 0, (4, 5), &mut rng(1)).unwrap();
    assert_eq!(a.dim(), (4, 5));
    assert_eq!(a, b);
    let part = generate_tier(&model.tiers[0], &store, Some(0), None, (4, 5), &mut rng(1), Some(7)).unwrap();
    for n in 0..20 {
        let (i, j) = (n / 5, n % 5);
        if n < 7 {
            assert_eq!(part[[i, j]], a[[i, j]]);
        } else {
            assert_eq!(part[[i, j]], 0.0);
        }
    }
    let c = multiscale_generate(&model, &store, 0, (4, 5), &mut rng(1)).unwrap();
    assert_eq!(c, a);
    let d = generate(&model, &store, 2, (4, 5), &mut rng(1)).unwrap();
    assert_ne!(d, a);
}

#[test]
fn multiscale_generation_fills_the_final_shape() {
    let mut r = rng(8);
    let mut store = ParamStore::<f32>::new();
    let model = MelNet::new(&mut store, &mut r, &config(3, vec![1, 1, 1], 1)).unwrap();
    let g = multiscale_generate(&model, &store, 1, (8, 6), &mut rng(2)).unwrap();
    assert_eq!(g.dim(), (8, 6));
    assert!(g.iter().all(|v| v.is_finite()));
    assert!(multiscale_generate(&model, &store, 1, (7, 6), &mut rng(2)).is_err());
    assert!(multiscale_generate(&model, &store, 1, (8, 5), &mut rng(2)).is_err());
}

#[test]
fn batch_loss_is_invariant_to_element_order() {
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let model = MelNet::new(&mut store, &mut r, &config(3, vec![1, 1], 2)).unwrap();
    let x = rand_grid(&mut r, 3, 4, 4);
    let mut rev = x.clone();
    for b in 0..3 {
        rev.index_axis_mut(ndarray::Axis(0), b).assign(&x.index_axis(ndarray::Axis(0), 2 - b));
    }
    let eval = |x: &Array3<f64>, g: &[usize]| {
        let mut tape = Tape::inference(&store);
        let (l, _) = model.loss(&mut tape, x, g).unwrap();
        tape.scalar(l).unwrap()
    };
    let a = eval(&x, &[0, 1, 2]);
    let b = eval(&rev, &[2, 1, 0]);
    assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn overfitting_one_grid_lowers_the_loss() {
    let mut r = rng(10);
    let mut store = ParamStore::<f32>::new();
    let model = MelNet::new(&mut store, &mut r, &config(8, vec![1], 2)).unwrap();
    let x = Array3::from_shape_fn((1, 6, 4), |(_, i, j)| ((i + 2 * j) % 3) as f64 - 1.0);
    let mut adam = crate::nn::Adam::new(3e-3, 0.9, 0.999);
    let mut losses = Vec::new();
    for _ in 0..60 {
        let grads = {
            let mut tape = Tape::new(&store);
            let (l, _) = model.loss(&mut tape, &x, &[0]).unwrap();
            losses.push(tape.scalar(l).unwrap());
            tape.backward(l).unwrap()
        };
        store.accumulate(&grads);
        adam.step(&mut store);
    }
    let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
    let tail: f32 = losses[50..].iter().sum::<f32>() / 10.0;
    assert!(tail < head - 0.3, "{head} -> {tail}");
}

#[test]
fn config_rules_and_direction_mapping() {
    let c = MelNetConfig::new(64, vec![12, 6, 5, 4], vec![2, 1], 3);
    assert_eq!(c.num_tiers(), 4);
    assert_eq!(c.extractor_directions(2), 2);
    assert_eq!(c.extractor_directions(3), 1);
    assert_eq!(c.extractor_directions(4), 1);
    assert!(c.validate().is_ok());
    for bad in [
        MelNetConfig { dims: 0, ..c.clone() },
        MelNetConfig { mixtures: 0, ..c.clone() },
        MelNetConfig { n_layers: vec![], ..c.clone() },
        MelNetConfig { directions: vec![3], ..c.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn log_grid_round_trip() {
    let mel = Array2::from_shape_fn((3, 5), |(m, t)| (m * 5 + t) as f64 * 0.25);
    let g = to_log_grid(&mel);
    assert_eq!(g.dim(), (5, 3));
    let back = from_log_grid(&g);
    assert!(back.iter().zip(&mel).all(|(a, b)| (a - b).abs() < 1e-9));
    let t = Tensor::new(vec![1, 3, 5], mel.iter().map(|&v| v as f32).collect()).unwrap();
    let bg = batch_to_log_grid(&t).unwrap();
    assert!((bg[[0, 4, 2]] - (mel[[2, 4]] + LOG_EPS).ln()).abs() < 1e-6);
}

#[test]
fn analytic_param_count_matches_built_models() {
    for cfg in [
        config(4, vec![1], 2),
        config(6, vec![2, 1, 1], 3),
        MelNetConfig::new(5, vec![1, 2, 1, 1], vec![1, 2], 4),
    ] {
        let mut store = ParamStore::<f32>::new();
        MelNet::new(&mut store, &mut rng(0), &cfg).unwrap();
        assert_eq!(cfg.param_count(), store.param_count(), "{cfg:?}");
    }
}
