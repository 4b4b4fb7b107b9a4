use ndarray::{Array2, Array3};
use rand::Rng;

use super::model::{MelNet, TierInputs, TierNet};
use super::{check_tier_shape, coarsest_shape, sample_bin, tier_merge, TierAxis, TierData};
use crate::nn::{ParamStore, Real, Result, Tape, Tensor};

/// Samples one tier bin by bin in time-then-frequency order.
///
/// Each bin costs one forward pass over the rows generated so far (later
/// rows cannot influence it). With `limit`, generation stops after that
/// many bins and the rest of the grid stays zero.
pub fn generate_tier<T: Real, R: Rng + ?Sized>(
    tier: &TierNet,
    store: &ParamStore<T>,
    genre: Option<usize>,
    cond: Option<&Array2<f64>>,
    shape: (usize, usize),
    rng: &mut R,
    limit: Option<usize>,
) -> Result<Array2<f64>> {
    let (t, f) = shape;
    let k = tier.mixtures;
    let d = tier.dims;
    let features: Option<Vec<T>> = match cond {
        Some(c) => {
            if c.dim() != shape {
                return Err(crate::nn::NnError::Config(format!(
                    "conditioning grid {:?} does not match tier shape {shape:?}",
                    c.dim()
                )));
            }
            let mut tape = Tape::inference(store);
            let cv = tape.constant(Tensor::new(vec![1, t, f], c.iter().map(|&v| T::of(v)).collect())?)?;
            let feat = tier.condition(&mut tape, cv)?;
            Some(tape.value(feat).to_vec())
        }
        None => None,
    };
    let genres = genre.map(|g| [g]);
    let mut x = vec![T::zero(); t * f];
    let mut done = 0;
    'outer: for i in 0..t {
        for j in 0..f {
            if limit.is_some_and(|l| done >= l) {
                break 'outer;
            }
            let rows = i + 1;
            let mut tape = Tape::inference(store);
            let xv = tape.constant(Tensor::new(vec![1, rows, f], x[..rows * f].to_vec())?)?;
            let mut inputs = TierInputs {
                genres: genres.as_ref().map(|g| g.as_slice()),
                features: None,
            };
            if let Some(feat) = &features {
                let fv = tape.constant(Tensor::new(vec![1, rows, f, d], feat[..rows * f * d].to_vec())?)?;
                inputs.features = Some(fv);
            }
            let m = tier.forward(&mut tape, xv, inputs)?;
            let o = (i * f + j) * k;
            let raw = |v| -> Vec<f64> { tape.value(v)[o..o + k].iter().map(|x: &T| x.as_f64()).collect() };
            let p = super::MixtureParams::from_raw([1, 1, 1], k, &raw(m.logits), &raw(m.mu), &raw(m.log_sigma));
            x[i * f + j] = T::of(sample_bin(&p.pi, &p.mu, &p.sigma, rng));
            done += 1;
        }
    }
    Ok(Array2::from_shape_vec((t, f), x.into_iter().map(|v| v.as_f64()).collect()).expect("shape matches"))
}

/// Unconditional generation with the lowest tier only.
pub fn generate<T: Real, R: Rng + ?Sized>(
    model: &MelNet,
    store: &ParamStore<T>,
    genre: usize,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<Array2<f64>> {
    generate_tier(&model.tiers[0], store, Some(genre), None, shape, rng, None)
}

/// Coarse-to-fine generation through every tier. Returns a log-domain
/// `[time, freq]` grid of `final_shape`.
pub fn multiscale_generate<T: Real, R: Rng + ?Sized>(
    model: &MelNet,
    store: &ParamStore<T>,
    genre: usize,
    final_shape: (usize, usize),
    rng: &mut R,
) -> Result<Array2<f64>> {
    let g_total = model.tiers.len();
    check_tier_shape(final_shape.0, final_shape.1, g_total)?;
    let coarse = coarsest_shape(final_shape.0, final_shape.1, g_total);
    let mut cur = generate_tier(&model.tiers[0], store, Some(genre), None, coarse, rng, None)?;
    for g in 2..=g_total {
        let axis = TierAxis::of_split(g_total - g);
        let odd = generate_tier(&model.tiers[g - 1], store, None, Some(&cur), cur.dim(), rng, None)?;
        let wrap = |a: Array2<f64>| {
            let (t, f) = a.dim();
            TierData {
                grid: a.into_shape_with_order((1, t, f)).expect("contiguous"),
                axis,
            }
        };
        let merged: Array3<f64> = tier_merge(&wrap(cur), &wrap(odd))?;
        let (_, t, f) = merged.dim();
        cur = merged.into_shape_with_order((t, f)).expect("contiguous");
    }
    Ok(cur)
}
