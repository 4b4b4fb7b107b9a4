use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{NnError, Result};

/// Grid axis a tier was split along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TierAxis {
    Time,
    Freq,
}

impl TierAxis {
    fn ndarray_axis(self) -> Axis {
        match self {
            TierAxis::Time => Axis(1),
            TierAxis::Freq => Axis(2),
        }
    }

    /// Axis of the `k`-th split, counted from the full-resolution grid:
    /// time first, then alternating.
    pub fn of_split(k: usize) -> Self {
        if k % 2 == 0 {
            TierAxis::Time
        } else {
            TierAxis::Freq
        }
    }
}

/// One interleaved half of a `[batch, time, freq]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TierData {
    pub grid: Array3<f64>,
    pub axis: TierAxis,
}

/// Even and odd indices along `axis`.
pub fn tier_split(x: &Array3<f64>, axis: TierAxis) -> Result<(TierData, TierData)> {
    let ax = axis.ndarray_axis();
    let n = x.len_of(ax);
    if n < 2 {
        return Err(NnError::Config(format!("cannot split an axis of extent {n}")));
    }
    let pick = |start: usize| {
        let idx: Vec<usize> = (start..n).step_by(2).collect();
        TierData {
            grid: x.select(ax, &idx),
            axis,
        }
    };
    Ok((pick(0), pick(1)))
}

/// Inverse of [`tier_split`].
pub fn tier_merge(even: &TierData, odd: &TierData) -> Result<Array3<f64>> {
    if even.axis != odd.axis {
        return Err(NnError::Config("tiers were split along different axes".into()));
    }
    let ax = even.axis.ndarray_axis();
    let (ne, no) = (even.grid.len_of(ax), odd.grid.len_of(ax));
    let mut other_e = even.grid.shape().to_vec();
    let mut other_o = odd.grid.shape().to_vec();
    other_e[ax.0] = 0;
    other_o[ax.0] = 0;
    if other_e != other_o || !(ne == no || ne == no + 1) {
        return Err(NnError::Config(format!(
            "cannot interleave {:?} with {:?}",
            even.grid.shape(),
            odd.grid.shape()
        )));
    }
    let mut shape = even.grid.shape().to_vec();
    shape[ax.0] = ne + no;
    let mut out = Array3::zeros((shape[0], shape[1], shape[2]));
    for i in 0..ne + no {
        let src = if i % 2 == 0 { &even.grid } else { &odd.grid };
        out.index_axis_mut(ax, i).assign(&src.index_axis(ax, i / 2));
    }
    Ok(out)
}

/// Number of splits applied to the time and frequency axes for `tiers`.
pub fn split_counts(tiers: usize) -> (u32, u32) {
    let s = tiers.saturating_sub(1) as u32;
    (s.div_ceil(2), s / 2)
}

/// Checks that a `[time, freq]` grid divides evenly into `tiers` tiers.
pub fn check_tier_shape(time: usize, freq: usize, tiers: usize) -> Result<()> {
    if tiers == 0 {
        return Err(NnError::Config("at least one tier is required".into()));
    }
    let (st, sf) = split_counts(tiers);
    let (dt, df) = (1usize << st, 1usize << sf);
    if time == 0 || freq == 0 || time % dt != 0 || freq % df != 0 {
        return Err(NnError::Config(format!(
            "a {time}x{freq} grid cannot be split into {tiers} tiers: time must be divisible by {dt} and frequency by {df}"
        )));
    }
    Ok(())
}

/// Per-tier training pair: the grid a tier models and, above the first
/// tier, the already-known grid it is conditioned on.
#[derive(Clone, Debug)]
pub struct TierExample {
    pub target: Array3<f64>,
    pub cond: Option<Array3<f64>>,
    pub axis: Option<TierAxis>,
}

/// Splits `x` into the `tiers` modelling problems, coarsest first.
pub fn decompose(x: &Array3<f64>, tiers: usize) -> Result<Vec<TierExample>> {
    let (_, t, f) = x.dim();
    check_tier_shape(t, f, tiers)?;
    let mut cur = x.clone();
    let mut parts = Vec::with_capacity(tiers - 1);
    for k in 0..tiers - 1 {
        let (even, odd) = tier_split(&cur, TierAxis::of_split(k))?;
        cur = even.grid.clone();
        parts.push((even, odd));
    }
    let mut out = vec![TierExample {
        target: cur,
        cond: None,
        axis: None,
    }];
    for (even, odd) in parts.into_iter().rev() {
        out.push(TierExample {
            target: odd.grid,
            cond: Some(even.grid),
            axis: Some(odd.axis),
        });
    }
    Ok(out)
}

/// `[time, freq]` extent of the coarsest tier.
pub fn coarsest_shape(time: usize, freq: usize, tiers: usize) -> (usize, usize) {
    let (st, sf) = split_counts(tiers);
    (time >> st, freq >> sf)
}
