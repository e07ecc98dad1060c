//! Interval-wise Haar system on an adaptive partition.
//!
//! Each partition interval carries its own scaling function and a dyadic tree
//! of Haar wavelets, positive on the left half of their support. Coefficients
//! are stored per interval in heap order: slot 0 is the scaling coefficient,
//! slot 2^j + k the detail at level j, position k. Both function coefficients
//! and path functionals are computed from one pyramid of finest-cell sums, so
//! the two extraction routes agree exactly.

use rayon::prelude::*;
use serde::Serialize;

use crate::experiments::{GwnPath, VarianceMode};
use crate::funcspace::DensityModel;
use crate::partition::Partition;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CoeffKind {
    /// Scaling/detail coefficients of a density.
    FunctionCoeffs,
    /// Gaussian sequence-space observations Z*.
    GaussSequence,
    /// Output of the count-to-Gaussian transform.
    TransformedSequence,
}

/// Coefficients indexed by (interval, level, position).
///
/// Level −1 denotes the scaling slot. Detail levels run 0..=jmax, so each
/// interval holds 2^(jmax+1) numbers.
#[derive(Clone, Debug, Serialize)]
pub struct CoeffTensor {
    pub values: Vec<Vec<f64>>,
    pub jmax: usize,
    pub kind: CoeffKind,
}

impl CoeffTensor {
    pub fn zeros(intervals: usize, jmax: usize, kind: CoeffKind) -> Self {
        CoeffTensor {
            values: vec![vec![0.0; 1 << (jmax + 1)]; intervals],
            jmax,
            kind,
        }
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn scaling(&self, i: usize) -> f64 {
        self.values[i][0]
    }

    pub fn set_scaling(&mut self, i: usize, v: f64) {
        self.values[i][0] = v;
    }

    pub fn detail(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i][(1 << j) + k]
    }

    pub fn set_detail(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.values[i][(1 << j) + k] = v;
    }

    /// Rows (interval, level, position, value) with level −1 for scaling slots.
    pub fn entries(&self) -> impl Iterator<Item = (usize, i64, usize, f64)> + '_ {
        self.values.iter().enumerate().flat_map(move |(i, row)| {
            row.iter().enumerate().map(move |(slot, &v)| {
                if slot == 0 {
                    (i, -1, 0, v)
                } else {
                    let j = slot.ilog2() as usize;
                    (i, j as i64, slot - (1 << j), v)
                }
            })
        })
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (i, j, k, v) in self.entries() {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite coefficient at ({i}, {j}, {k})"
                )));
            }
        }
        Ok(())
    }

    /// Flat CSV rows `i,j,k,value` with j = −1 for scaling slots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,k,value\n");
        for (i, j, k, v) in self.entries() {
            out.push_str(&format!("{i},{j},{k},{v:.17e}\n"));
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; every slot of a rectangular
    /// tensor must be present.
    pub fn from_csv(text: &str, kind: CoeffKind) -> Result<Self> {
        let mut rows = Vec::new();
        let mut max_i = 0usize;
        let mut max_j = -1i64;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('i')) {
                continue;
            }
            let mut parts = line.split(',');
            let bad = || Error::config(format!("bad coefficient row {}: {line}", lineno + 1));
            let i: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let j: i64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let k: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            let v: f64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            if j < -1 {
                return Err(bad());
            }
            max_i = max_i.max(i);
            max_j = max_j.max(j);
            rows.push((i, j, k, v));
        }
        if rows.is_empty() || max_j < 0 {
            return Err(Error::config("coefficient CSV has no detail rows"));
        }
        let jmax = max_j as usize;
        let mut t = CoeffTensor::zeros(max_i + 1, jmax, kind);
        let mut seen = vec![vec![false; 1 << (jmax + 1)]; max_i + 1];
        for (i, j, k, v) in rows {
            let slot = if j == -1 {
                if k != 0 {
                    return Err(Error::config(format!("scaling row with k = {k}")));
                }
                0
            } else {
                let width = 1usize << j;
                if k >= width {
                    return Err(Error::config(format!("position {k} out of range at level {j}")));
                }
                width + k
            };
            t.values[i][slot] = v;
            seen[i][slot] = true;
        }
        if seen.iter().any(|row| row.iter().any(|s| !s)) {
            return Err(Error::config("coefficient CSV is missing slots"));
        }
        Ok(t)
    }
}

/// Support of the Haar cell (i, j, k): the k-th dyadic piece of interval i at
/// depth j. Its left half carries the positive sign.
pub fn haar_cell(p: &Partition, i: usize, j: usize, k: usize) -> (f64, f64) {
    let w = p.delta[i] / (1u64 << j) as f64;
    let a = p.left(i) + w * k as f64;
    (a, a + w)
}

/// Dyadic boundaries of interval i at depth `levels`: 2^levels + 1 points.
pub fn dyadic_boundaries(p: &Partition, i: usize, levels: usize) -> Vec<f64> {
    let parts = 1usize << levels;
    let (a, d) = (p.left(i), p.delta[i]);
    let mut out = Vec::with_capacity(parts + 1);
    for q in 0..parts {
        out.push(a + d * q as f64 / parts as f64);
    }
    out.push(p.right(i));
    out
}

/// Edge grid containing every Haar cell boundary up to detail level jmax:
/// each interval split into 2^(jmax+1) equal cells.
pub fn aligned_edges(p: &Partition, jmax: usize) -> Vec<f64> {
    let mut edges = Vec::with_capacity(p.m << (jmax + 1));
    for i in 0..p.m {
        let b = dyadic_boundaries(p, i, jmax + 1);
        edges.extend_from_slice(&b[..b.len() - 1]);
    }
    edges.push(1.0);
    edges
}

/// Sums finest-cell values upward: out[j][k] covers cell (j, k), depths
/// 0..=levels with out[levels] = base.
fn pyramid(base: Vec<f64>) -> Vec<Vec<f64>> {
    let levels = base.len().trailing_zeros() as usize;
    debug_assert_eq!(1usize << levels, base.len());
    let mut tiers = vec![base];
    for _ in 0..levels {
        let prev = tiers.last().unwrap();
        let next: Vec<f64> = prev.chunks(2).map(|c| c[0] + c[1]).collect();
        tiers.push(next);
    }
    tiers.reverse();
    tiers
}

/// Fills one interval's slots from its dyadic sum pyramid.
///
/// `scale(sum)` maps the whole-interval sum to the scaling slot; `detail(j,
/// left − right)` maps a signed half difference to the detail slot.
fn fill_interval(
    tiers: &[Vec<f64>],
    jmax: usize,
    scale: impl Fn(f64) -> f64,
    detail: impl Fn(usize, f64) -> f64,
) -> Vec<f64> {
    let mut row = vec![0.0; 1 << (jmax + 1)];
    row[0] = scale(tiers[0][0]);
    for j in 0..=jmax {
        for k in 0..(1usize << j) {
            let child = &tiers[j + 1];
            row[(1 << j) + k] = detail(j, child[2 * k] - child[2 * k + 1]);
        }
    }
    row
}

/// Scaling and detail coefficients of f on the partition, details to level
/// jmax, from exact subcell integrals.
pub fn haar_coeffs(f: &DensityModel, p: &Partition, jmax: usize) -> CoeffTensor {
    let values: Vec<Vec<f64>> = (0..p.m)
        .into_par_iter()
        .map(|i| {
            let bounds = dyadic_boundaries(p, i, jmax + 1);
            let base: Vec<f64> = bounds.windows(2).map(|w| f.integral(w[0], w[1])).collect();
            let tiers = pyramid(base);
            let d = p.delta[i];
            fill_interval(
                &tiers,
                jmax,
                |s| s / d.sqrt(),
                |j, diff| diff / (d / (1u64 << j) as f64).sqrt(),
            )
        })
        .collect();
    CoeffTensor {
        values,
        jmax,
        kind: CoeffKind::FunctionCoeffs,
    }
}

/// Sequence-space observations from a step-mode path: exact signed sums of
/// increments over Haar cells, standardized by the step variance profile.
///
/// The path grid must contain every Haar cell boundary at depth jmax + 1;
/// anything else is reported as grid misalignment.
pub fn gwn_to_coeffs(
    y: &GwnPath,
    p: &Partition,
    f0: &DensityModel,
    jmax: usize,
) -> Result<CoeffTensor> {
    if y.mode != VarianceMode::StepF0 {
        return Err(Error::config(
            "sequence extraction expects a step-variance path",
        ));
    }
    let n = y.n as f64;
    // Prefix sums of increments let each Haar cell sum come from two lookups.
    let mut prefix = Vec::with_capacity(y.edges.len());
    let mut acc = 0.0;
    prefix.push(0.0);
    for v in &y.increments {
        acc += v;
        prefix.push(acc);
    }

    let edge_index = |target: f64, hint: usize| -> Result<usize> {
        let mut idx = y.edges.partition_point(|e| *e < target - 1e-12);
        if idx > 0 && (y.edges[idx - 1] - target).abs() < (y.edges[idx.min(y.edges.len() - 1)] - target).abs() {
            idx -= 1;
        }
        let _ = hint;
        if idx >= y.edges.len() || (y.edges[idx] - target).abs() > 1e-12 {
            return Err(Error::numeric(format!(
                "grid misalignment: no path edge at {target}"
            )));
        }
        Ok(idx)
    };

    let mut values = Vec::with_capacity(p.m);
    for i in 0..p.m {
        let bounds = dyadic_boundaries(p, i, jmax + 1);
        let mut base = Vec::with_capacity(bounds.len() - 1);
        let mut prev = edge_index(bounds[0], 0)?;
        for b in &bounds[1..] {
            let cur = edge_index(*b, prev)?;
            if cur <= prev {
                return Err(Error::numeric(format!(
                    "grid misalignment: empty path cell before {b}"
                )));
            }
            base.push(prefix[cur] - prefix[prev]);
            prev = cur;
        }
        let tiers = pyramid(base);
        let d = p.delta[i];
        let anchor = f0.eval(p.left(i));
        let std_scale = (n / anchor).sqrt();
        values.push(fill_interval(
            &tiers,
            jmax,
            |s| n * s,
            |j, diff| std_scale * diff / (d / (1u64 << j) as f64).sqrt(),
        ));
    }
    Ok(CoeffTensor {
        values,
        jmax,
        kind: CoeffKind::GaussSequence,
    })
}

/// Upper bound on the squared L² error of truncating the expansion at detail
/// level jmax, summed from the coefficient decay bound.
pub fn l2_tail_bound(p: &Partition, radius: f64, beta: f64, jmax: usize) -> f64 {
    let sum: f64 = p
        .delta
        .iter()
        .map(|d| radius * radius * d.powf(2.0 * beta + 1.0))
        .sum();
    sum * 2f64.powf(-2.0 * jmax as f64 * beta) / (2f64.powf(2.0 * beta) - 1.0)
}

/// Default detail cap: high enough that the truncation tail is negligible at
/// scale 1/n, but never above ⌈3·log₂ n⌉ or the caller's cap.
pub fn default_jmax(p: &Partition, radius: f64, beta: f64, n: u64, user_cap: Option<usize>) -> usize {
    let hard = (3.0 * (n as f64).log2()).ceil() as usize;
    let hard = user_cap.map_or(hard, |c| c.min(hard));
    let target = 1e-3 / n as f64;
    let mut j = 0usize;
    while j < hard && l2_tail_bound(p, radius, beta, j) >= target {
        j += 1;
    }
    j
}

/// Counts detail coefficients violating the decay bound R(2^{−j}Δ_i)^{β+1/2}.
pub fn decay_violations(t: &CoeffTensor, p: &Partition, radius: f64, beta: f64) -> usize {
    let mut bad = 0;
    for (i, j, _k, v) in t.entries() {
        if j < 0 {
            continue;
        }
        let w = p.delta[i] / (1u64 << j) as f64;
        if v.abs() > radius * w.powf(beta + 0.5) + 1e-13 {
            bad += 1;
        }
    }
    bad
}
