//! Density-adaptive partition of [0,1].
//!
//! Interval widths follow the recursion z_{i+1} = z_i + (f0(z_i)/n)^{1/(2β+1)},
//! so cells are narrow where f0 is small. The final collected point is merged
//! into the last interval and the grid is closed at 1, which keeps the last
//! width between one and three regular steps whenever f0 varies slowly at the
//! working resolution.

use serde::Serialize;

use crate::funcspace::DensityModel;
use crate::{Error, Result};

/// Safety cap on the interval count.
const MAX_INTERVALS: usize = 10_000_000;

/// Tie guard: recursion points this close to 1 are treated as having reached it.
const END_GUARD: f64 = 1e-15;

/// Adaptive grid 0 = x_0 < x_1 < … < x_m = 1 with provenance.
#[derive(Clone, Debug, Serialize)]
pub struct Partition {
    /// Grid points, length m + 1.
    pub x: Vec<f64>,
    /// Interval widths Δ_i = x_i − x_{i−1}, length m.
    pub delta: Vec<f64>,
    pub m: usize,
    pub n: u64,
    pub beta: f64,
    pub f0_id: String,
}

impl Partition {
    /// Width of the regular step at position z.
    fn step(f0: &DensityModel, n: u64, beta: f64, z: f64) -> f64 {
        (f0.eval(z) / n as f64).powf(1.0 / (2.0 * beta + 1.0))
    }

    /// Left endpoint of interval i (0-based).
    pub fn left(&self, i: usize) -> f64 {
        self.x[i]
    }

    /// Right endpoint of interval i (0-based).
    pub fn right(&self, i: usize) -> f64 {
        self.x[i + 1]
    }
}

/// Runs the width recursion for f0 at scale n and smoothness beta.
///
/// Collected points stay strictly below 1; the last one is replaced by 1, so
/// the final interval absorbs the remainder instead of producing a sliver.
pub fn build_partition(f0: &DensityModel, n: u64, beta: f64) -> Result<Partition> {
    if f0.floor <= 0.0 {
        return Err(Error::config(
            "partition recursion needs a strictly positive density floor",
        ));
    }
    if n < 2 {
        return Err(Error::config(format!("need n ≥ 2, got {n}")));
    }
    if !(beta > 0.0) {
        return Err(Error::config(format!("need beta > 0, got {beta}")));
    }

    let mut collected = vec![0.0f64];
    let mut z = 0.0f64;
    loop {
        let step = Partition::step(f0, n, beta, z);
        if !(step > 0.0) {
            return Err(Error::numeric(format!(
                "vanishing recursion step at z = {z}"
            )));
        }
        let next = z + step;
        if next >= 1.0 - END_GUARD {
            break;
        }
        collected.push(next);
        z = next;
        if collected.len() > MAX_INTERVALS {
            return Err(Error::numeric(format!(
                "partition exceeded {MAX_INTERVALS} intervals"
            )));
        }
    }

    // Merge the last collected point into the final interval and close at 1.
    let mut x = collected;
    if x.len() > 1 {
        x.pop();
    }
    x.push(1.0);

    let delta: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let m = delta.len();
    Ok(Partition {
        x,
        delta,
        m,
        n,
        beta,
        f0_id: f0.family_id().to_owned(),
    })
}

/// Left-endpoint step approximation of f0 on the partition: the variance
/// profile of the step-noise Gaussian experiment. Not renormalized.
pub fn step_approx(f0: &DensityModel, p: &Partition) -> Result<DensityModel> {
    let values: Vec<f64> = (0..p.m).map(|i| f0.eval(p.left(i))).collect();
    DensityModel::from_values_constant(p.x.clone(), values, f0.beta, f0.radius, false)
}

/// Counts grid points where f0 leaves the band [½f0(x_{i−1}), 2f0(x_{i−1})]
/// on its interval. Zero whenever the floor dominates the resolution scale.
pub fn band_violations(f0: &DensityModel, p: &Partition, points_per_interval: usize) -> usize {
    let k = points_per_interval.max(2);
    let mut bad = 0;
    for i in 0..p.m {
        let anchor = f0.eval(p.left(i));
        for t in 0..=k {
            let x = p.left(i) + p.delta[i] * t as f64 / k as f64;
            let v = f0.eval(x);
            if v < 0.5 * anchor || v > 2.0 * anchor {
                bad += 1;
            }
        }
    }
    bad
}
