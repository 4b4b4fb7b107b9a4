use std::f64::consts::PI;

use super::{DspError, Result, Waveform};

/// Zero crossings of the sinc on each side of the centre, at the filter
/// cutoff.
const ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 8.6;
/// Cutoff as a fraction of the lower of the two Nyquist frequencies.
const ROLLOFF: f64 = 0.95;

/// Band-limited sample-rate conversion with a Kaiser-windowed sinc,
/// evaluated polyphase over the rational ratio `target/source`.
///
/// The output holds `round(len·target/source)` samples; out-of-range input
/// taps are treated as zeros.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(DspError::Input("target rate must be positive".into()));
    }
    let source = w.sample_rate;
    if source == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(source as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source as u64 / g;
    let fc = ROLLOFF * (target_rate as f64 / source as f64).min(1.0);
    let half_width = ZERO_CROSSINGS as f64 / fc;
    let k = half_width.ceil() as i64;

    let phases: Vec<Vec<f64>> = (0..up)
        .map(|ph| {
            let frac = ph as f64 / up as f64;
            let mut taps: Vec<f64> = (-k + 1..=k)
                .map(|j| {
                    let x = frac - j as f64;
                    fc * sinc(fc * x) * kaiser(x / half_width)
                })
                .collect();
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= s);
            taps
        })
        .collect();

    let len = w.len() as u64;
    let out_len = (len * target_rate as u64 + source as u64 / 2) / source as u64;
    let x = &w.samples;
    let mut out = Vec::with_capacity(out_len as usize);
    for n in 0..out_len {
        let pos = n * down;
        let base = (pos / up) as i64;
        let taps = &phases[(pos % up) as usize];
        let mut acc = 0.0;
        for (t, j) in taps.iter().zip(-k + 1..=k) {
            let i = base + j;
            if i >= 0 && (i as u64) < len {
                acc += t * x[i as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn kaiser(x: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
