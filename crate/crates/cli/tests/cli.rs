use std::path::Path;
use std::process::{Command, Output};

use melgen_core::dsp::{read_wav, write_wav, Waveform};

const CONFIG: &str = "\
DataConfig:
batch_sz=2, num_mels=16, win_sz=0.25
stft_hop_sz=64, stft_win_sz=256, sample_rate=8000
TrainConfig:
dims=4, n_layers=[1,1], directions=[1], mixtures=2, epochs=1, seed=7
noise_dim=8, seed_channels=4, gen_channels=[4,4,4]
finetune_kernels=[3,5], dilations=[1,3], disc_channels=[4,8], disc_embed_dim=4, disc_groups=2
";

fn melgen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melgen"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tone(freq: f64) -> Waveform {
    let s = (0..8000)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin())
        .collect();
    Waveform::new(s, 8000).unwrap()
}

fn setup(dir: &Path) {
    for (genre, f) in [("calm", 250.0), ("bright", 1800.0)] {
        std::fs::create_dir_all(dir.join(genre)).unwrap();
        for i in 0..2 {
            write_wav(&dir.join(format!("{genre}/{i}.wav")), &tone(f + 40.0 * i as f64)).unwrap();
        }
    }
    std::fs::write(dir.join("small.cfg"), CONFIG).unwrap();
    std::fs::write(dir.join("map.csv"), "calm,ambient\n").unwrap();
}

#[test]
fn manifest_train_generate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);

    let msg = ok(melgen(&["manifest", "calm", "bright", "--genre-map", "map.csv", "-o", "m.csv"], d));
    assert!(msg.starts_with("4 files"), "{msg}");
    let manifest = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(manifest.contains("ambient,") && manifest.contains("bright,"));

    let train = |out: &str| {
        ok(melgen(
            &["train-melnet", "--config", "small.cfg", "--manifest", "m.csv", "--out", out, "--max-steps", "3", "--deterministic"],
            d,
        ))
    };
    assert!(train("r1").contains("3 steps"));
    train("r2");
    let log1 = std::fs::read(d.join("r1/runlog.csv")).unwrap();
    assert_eq!(log1, std::fs::read(d.join("r2/runlog.csv")).unwrap());
    assert_eq!(String::from_utf8(log1).unwrap().lines().count(), 4);

    let gen = |out: &str| ok(melgen(&["generate", "--ckpt", "r1/melnet.ckpt", "--genre", "ambient", "--seed", "2", "--iters", "4", "-o", out], d));
    gen("a.wav");
    gen("b.wav");
    let a = std::fs::read(d.join("a.wav")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.wav")).unwrap());
    let w = read_wav(&d.join("a.wav")).unwrap();
    assert_eq!(w.sample_rate, 8000);
    assert!(w.peak() <= 1.0);

    let bad = melgen(&["generate", "--ckpt", "r1/melnet.ckpt", "--genre", "polka", "-o", "c.wav"], d);
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("polka") && err.contains("ambient"), "{err}");
}

#[test]
fn cmelgan_training_invert_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    ok(melgen(&["manifest", "calm", "bright", "-o", "m.csv"], d));

    let out = ok(melgen(
        &["train-cmelgan", "--config", "small.cfg", "--manifest", "m.csv", "--out", "g", "--max-steps", "2", "--deterministic"],
        d,
    ));
    assert!(out.starts_with("cmelgan: 2 steps"), "{out}");
    let header = std::fs::read_to_string(d.join("g/runlog.csv")).unwrap();
    assert!(header.lines().next().unwrap().contains("loss_b"));
    ok(melgen(&["generate", "--ckpt", "g/cmelgan.ckpt", "--genre", "calm", "--iters", "3", "-o", "g.wav"], d));

    let inv = ok(melgen(&["invert", "--in", "calm/0.wav", "--config", "small.cfg", "--iters", "8", "-o", "inv.wav"], d));
    assert!(inv.contains("spectral convergence"), "{inv}");
    assert!(read_wav(&d.join("inv.wav")).unwrap().len() > 7000);

    let bench = ok(melgen(&["bench", "--config", "small.cfg", "--manifest", "m.csv", "--model", "cmelgan", "--steps", "2"], d));
    assert!(bench.contains("cmelgan: 2 steps") && bench.contains("kHz"), "{bench}");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    ok(melgen(&["manifest", "calm", "-o", "m.csv"], d));
    std::fs::write(d.join("bad.cfg"), CONFIG.replace("epochs=1", "epochs=1, colour=3")).unwrap();
    let out = melgen(&["train-melnet", "--config", "bad.cfg", "--manifest", "m.csv", "--out", "x"], d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5") && err.contains("colour"), "{err}");

    let missing = melgen(&["invert", "--in", "nope.wav", "-o", "x.wav"], d);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.wav"));
}
