//! Constructive kernels between the experiments.
//!
//! A point process is reduced to dyadic cell counts; counts are mapped to a
//! Gaussian-like sequence through the smoothed binomial quantile transform,
//! whose inverse recovers every count exactly; and i.i.d. samples are carried
//! to Poisson processes and back by the Poissonization kernel.
//!
//! The transform works in log probability space throughout: with cell counts
//! up to 10^6 the binomial CDF under an off-half split underflows linear f64
//! long before the coupling regime of interest, while log quantities stay
//! representable to lnP ≈ −7·10^5.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::experiments::{DensitySample, PointProcessSample};
use crate::funcspace::DensityModel;
use crate::haar::{CoeffKind, CoeffTensor};
use crate::partition::Partition;
use crate::rng::{dither, rng_for};
use crate::special::{ln_binom_pmf, ln_norm_cdf, logaddexp, norm_quantile_from_ln};
use crate::{Error, Result};

/// Cells with more observations than this use a normal approximation to the
/// smoothed binomial CDF; the event is recorded as a warning.
pub const EXACT_COUNT_LIMIT: u64 = 1_000_000;

/// Nonnegative counts per dyadic cell of each partition interval.
///
/// Level j has 2^j cells per interval, stored at slot 2^j − 1 + k for depths
/// 0..=levels. Level 0 holds the interval totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTensor {
    pub counts: Vec<Vec<u64>>,
    pub levels: usize,
}

impl CountTensor {
    pub fn zeros(intervals: usize, levels: usize) -> Self {
        CountTensor {
            counts: vec![vec![0; (1 << (levels + 1)) - 1]; intervals],
            levels,
        }
    }

    pub fn intervals(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u64 {
        self.counts[i][(1 << j) - 1 + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u64) {
        self.counts[i][(1 << j) - 1 + k] = v;
    }

    /// Verifies counting additivity: each cell equals the sum of its children.
    pub fn check_consistency(&self) -> Result<()> {
        for i in 0..self.intervals() {
            for j in 0..self.levels {
                for k in 0..(1usize << j) {
                    let parent = self.get(i, j, k);
                    let sum = self.get(i, j + 1, 2 * k) + self.get(i, j + 1, 2 * k + 1);
                    if parent != sum {
                        return Err(Error::numeric(format!(
                            "inconsistent counts at ({i},{j},{k}): {parent} vs child sum {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bins points into finest dyadic cells (depth jmax + 1) and aggregates
/// upward, so consistency holds by construction.
pub fn bin_counts(points: &[f64], p: &Partition, jmax: usize) -> CountTensor {
    let levels = jmax + 1;
    let fine = 1usize << levels;
    let mut t = CountTensor::zeros(p.m, levels);
    for &x in points {
        if !(0.0..=1.0).contains(&x) {
            continue;
        }
        let i = match p.x.partition_point(|v| *v <= x) {
            0 => 0,
            q if q > p.m => p.m - 1,
            q => q - 1,
        };
        let rel = ((x - p.left(i)) / p.delta[i]).clamp(0.0, 1.0);
        let cell = ((rel * fine as f64) as usize).min(fine - 1);
        let slot = (fine - 1) + cell;
        t.counts[i][slot] += 1;
    }
    for i in 0..p.m {
        for j in (0..levels).rev() {
            for k in 0..(1usize << j) {
                let v = t.get(i, j + 1, 2 * k) + t.get(i, j + 1, 2 * k + 1);
                t.set(i, j, k, v);
            }
        }
    }
    t
}

/// Success probability of the left child cell: ∫ over the left half of cell
/// (i, j, k) divided by the integral over the whole cell.
pub fn split_probability(f: &DensityModel, p: &Partition, i: usize, j: usize, k: usize) -> f64 {
    let (a, b) = crate::haar::haar_cell(p, i, j, k);
    let mid = a + 0.5 * (b - a);
    let whole = f.integral(a, b);
    if whole <= 0.0 {
        return 0.5;
    }
    f.integral(a, mid) / whole
}

/// ln of the Binomial(m, p) CDF at k, by a self-terminating downward sum of
/// pmf ratios from the anchor term.
fn ln_binom_cdf(m: u64, k: u64, p: f64) -> f64 {
    if k >= m {
        return 0.0;
    }
    let anchor = ln_binom_pmf(m, k, p);
    if anchor == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    // pmf(i−1)/pmf(i) = (i/(m−i+1))·((1−p)/p), applied downward from k.
    let odds = (1.0 - p) / p;
    let mut acc = 1.0f64;
    let mut term = 1.0f64;
    let mut i = k;
    while i >= 1 {
        term *= i as f64 / (m - i + 1) as f64 * odds;
        acc += term;
        if term < 1e-18 * acc {
            break;
        }
        i -= 1;
    }
    anchor + acc.ln()
}

pub(crate) fn ln_binom_cdf_half(m: u64, k: u64) -> f64 {
    ln_binom_cdf(m, k, 0.5)
}

/// ln G_{m,p}(x) for x in (−½, m·p + ½]; the caller reflects above the mean.
fn ln_smoothed_cdf_lower(m: u64, p: f64, x: f64) -> f64 {
    debug_assert!(x >= -0.5);
    let k = ((x + 0.5).ceil() - 1.0).clamp(0.0, m as f64) as u64;
    let frac = (x - (k as f64 - 0.5)).clamp(1e-300, 1.0);
    let part = ln_binom_pmf(m, k, p) + frac.ln();
    if k == 0 {
        part
    } else {
        logaddexp(ln_binom_cdf(m, k - 1, p), part)
    }
}

/// CDF of Binomial(m, p) + Uniform(−½, ½]: piecewise linear, exact.
pub fn binom_cdf_smoothed(m: u64, p: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "p must lie in [0,1]");
    if x <= -0.5 {
        return 0.0;
    }
    if x >= m as f64 + 0.5 {
        return 1.0;
    }
    if m == 0 {
        return (x + 0.5).clamp(0.0, 1.0);
    }
    if p == 0.0 {
        return (x + 0.5).clamp(0.0, 1.0);
    }
    if p == 1.0 {
        return (x - m as f64 + 0.5).clamp(0.0, 1.0);
    }
    let mean = m as f64 * p;
    if x <= mean {
        ln_smoothed_cdf_lower(m, p, x).exp()
    } else {
        1.0 - ln_smoothed_cdf_lower(m, 1.0 - p, m as f64 - x).exp()
    }
}

/// The p = ½ transform core: Z = Φ^{−1}(G_{m,1/2}(x)), evaluated through log
/// probabilities with tail symmetry, so both tails keep full precision.
pub fn qc_transform(m: u64, x: f64) -> f64 {
    let half_m = 0.5 * m as f64;
    if x <= half_m {
        norm_quantile_from_ln(ln_smoothed_cdf_lower(m, 0.5, x.max(-0.5)))
    } else {
        -norm_quantile_from_ln(ln_smoothed_cdf_lower(m, 0.5, (m as f64 - x).max(-0.5)))
    }
}

/// Inverse of ln G_{m,1/2}: returns x with ln G(x) = lp, for lp ≤ ln ½.
fn smoothed_quantile_from_ln(m: u64, lp: f64) -> f64 {
    if m == 0 {
        return lp.exp() - 0.5;
    }
    // Locate the cell: smallest k with ln CDF(k) ≥ lp, starting from a
    // normal-approximation guess and walking.
    let z = norm_quantile_from_ln(lp);
    let mut k = (0.5 * m as f64 + z * 0.5 * (m as f64).sqrt())
        .round()
        .clamp(0.0, m as f64) as u64;
    while ln_binom_cdf_half(m, k) < lp {
        k += 1;
    }
    while k > 0 && ln_binom_cdf_half(m, k - 1) >= lp {
        k -= 1;
    }
    let b = crate::special::ln_binom_pmf_half(m, k);
    let frac = if k == 0 {
        (lp - b).exp()
    } else {
        let a = ln_binom_cdf_half(m, k - 1);
        (a - b).exp() * (lp - a).exp_m1()
    };
    k as f64 - 0.5 + frac.clamp(1e-300, 1.0)
}

/// Inverse transform core: x with qc_transform(m, x) = z.
pub fn qc_invert(m: u64, z: f64) -> f64 {
    if z <= 0.0 {
        smoothed_quantile_from_ln(m, ln_norm_cdf(z))
    } else {
        m as f64 - smoothed_quantile_from_ln(m, ln_norm_cdf(-z))
    }
}

/// Parameters accompanying a serialized transform: the coefficient CSV plus
/// this JSON restores the full pipeline configuration.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TransformSidecar {
    pub jmax: usize,
    pub seed: u64,
    /// Poissonization threshold constant.
    pub c: f64,
    /// Hölder radius the threshold constant was derived from.
    #[serde(rename = "C")]
    pub big_c: f64,
}

/// Transformed sequence with the dithers that produced it.
#[derive(Clone, Debug)]
pub struct SmoothedTransform {
    pub z: CoeffTensor,
    /// Uniform dithers, same slot layout as `z`.
    pub u_record: Vec<Vec<f64>>,
    /// One entry per cell that fell back to the normal approximation.
    pub warnings: Vec<String>,
}

fn fallback_sigma(m: u64) -> f64 {
    (0.25 * m as f64 + 1.0 / 12.0).sqrt()
}

/// Maps a consistent count tensor to its Gaussian-like sequence: slot 0 is
/// the dithered total, detail slots Φ^{−1}∘G_{parent,1/2}(left child + U).
///
/// Dithers are drawn per output coordinate from per-interval derived streams,
/// so parallel and serial runs agree.
pub fn quantile_transform(counts: &CountTensor, seed: u64) -> Result<SmoothedTransform> {
    counts.check_consistency()?;
    if counts.levels == 0 {
        return Err(Error::config("need at least one dyadic level"));
    }
    let jmax = counts.levels - 1;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<String>)> = (0..counts.intervals())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let mut z = vec![0.0; 1 << (jmax + 1)];
            let mut us = vec![0.0; 1 << (jmax + 1)];
            let mut warns = Vec::new();
            let u = dither(&mut rng);
            us[0] = u;
            z[0] = counts.get(i, 0, 0) as f64 + u;
            for j in 0..=jmax {
                for k in 0..(1usize << j) {
                    let m = counts.get(i, j, k);
                    let child = counts.get(i, j + 1, 2 * k);
                    let u = dither(&mut rng);
                    let slot = (1 << j) + k;
                    us[slot] = u;
                    let x = child as f64 + u;
                    z[slot] = if m > EXACT_COUNT_LIMIT {
                        warns.push(format!(
                            "cell ({i},{j},{k}): count {m} above exact limit, normal fallback"
                        ));
                        (x - 0.5 * m as f64) / fallback_sigma(m)
                    } else {
                        qc_transform(m, x)
                    };
                }
            }
            (z, us, warns)
        })
        .collect();

    let mut values = Vec::with_capacity(rows.len());
    let mut u_record = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    for (z, us, warns) in rows {
        values.push(z);
        u_record.push(us);
        warnings.extend(warns);
    }
    Ok(SmoothedTransform {
        z: CoeffTensor {
            values,
            jmax,
            kind: CoeffKind::TransformedSequence,
        },
        u_record,
        warnings,
    })
}

/// Rounds a recovered real count, rejecting values too close to the rounding
/// boundary.
fn round_count(x: f64, what: &str) -> Result<i64> {
    let fraction = x - x.floor();
    if (fraction - 0.5).abs() < 1e-9 {
        return Err(Error::numeric(format!(
            "rounding ambiguity at {what}: recovered value {x}"
        )));
    }
    Ok((x - 0.5).ceil() as i64)
}

/// Exact inverse of [`quantile_transform`]: recovers every count by rounding
/// the de-Gaussianized values level by level.
pub fn invert_transform(st: &SmoothedTransform) -> Result<CountTensor> {
    let jmax = st.z.jmax;
    let levels = jmax + 1;
    let tensors: Vec<Result<Vec<u64>>> = (0..st.z.intervals())
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0u64; (1 << (levels + 1)) - 1];
            let top = round_count(st.z.scaling(i), &format!("interval {i} total"))?;
            if top < 0 {
                return Err(Error::numeric(format!(
                    "corrupt transform: negative total {top} in interval {i}"
                )));
            }
            row[0] = top as u64;
            for j in 0..=jmax {
                for k in 0..(1usize << j) {
                    let m = row[(1 << j) - 1 + k];
                    let z = st.z.detail(i, j, k);
                    let x = if m > EXACT_COUNT_LIMIT {
                        0.5 * m as f64 + z * fallback_sigma(m)
                    } else {
                        qc_invert(m, z)
                    };
                    let child = round_count(x, &format!("cell ({i},{j},{k})"))?;
                    if child < 0 || child as u64 > m {
                        return Err(Error::numeric(format!(
                            "corrupt transform: child count {child} outside [0, {m}] at ({i},{j},{k})"
                        )));
                    }
                    row[(1 << (j + 1)) - 1 + 2 * k] = child as u64;
                    row[(1 << (j + 1)) - 1 + 2 * k + 1] = m - child as u64;
                }
            }
            Ok(row)
        })
        .collect();
    let mut counts = Vec::with_capacity(tensors.len());
    for row in tensors {
        counts.push(row?);
    }
    Ok(CountTensor { counts, levels })
}

/// Scale drained from n by the Poissonization construction.
pub fn poissonization_kappa(n: u64) -> f64 {
    (2.0 * n as f64 * (n as f64).ln()).sqrt()
}

/// Density threshold below which the augmentation drops mass: c·(log n / n)^{β/(β+1)}
/// with c = (4C) ∨ (4C)^{(2β+1)/(β+1)}.
pub fn poissonization_threshold(n: u64, beta: f64, big_c: f64) -> f64 {
    let l = (n as f64).ln() / n as f64;
    let base = 4.0 * big_c;
    let c = base.max(base.powf((2.0 * beta + 1.0) / (beta + 1.0)));
    c * l.powf(beta / (beta + 1.0))
}

/// Deterministic squared-deficiency bound between the i.i.d. and Poisson
/// experiments: n^{−2β/(2β+1)}·log²n·∫(1/f ∧ n^{β/(β+1)})^{1/(2β+1)} dx.
pub fn poissonization_bound(f: &DensityModel, n: u64, beta: f64) -> f64 {
    let nf = n as f64;
    let cap = nf.powf(beta / (beta + 1.0));
    let integral = crate::quad::integrate(
        |x| {
            let v = f.eval(x);
            let inv = if v > 0.0 { (1.0 / v).min(cap) } else { cap };
            inv.powf(1.0 / (2.0 * beta + 1.0))
        },
        0.0,
        1.0,
        1e-10,
        1e-13,
    )
    .value;
    nf.powf(-2.0 * beta / (2.0 * beta + 1.0)) * nf.ln().powi(2) * integral
}

/// Carries an i.i.d. sample to a Poisson process: thin to N ∧ n points with
/// N ~ Poisson(n − κ_n), duplicate the first observation (N − n) ∨ 0 times,
/// and superpose an independent process with intensity κ_n·f̂·1(f̂ ≥ threshold).
pub fn poissonize(
    ds: &DensitySample,
    fhat: &DensityModel,
    beta: f64,
    big_c: f64,
    rng: &mut ChaCha12Rng,
) -> Result<PointProcessSample> {
    let n = ds.n;
    if n < 2 {
        return Err(Error::config("poissonization needs n ≥ 2"));
    }
    let kappa = poissonization_kappa(n);
    if kappa >= n as f64 {
        return Err(Error::numeric(format!(
            "poissonization needs κ_n < n, got κ = {kappa} at n = {n}"
        )));
    }
    let big_n = rand_distr::Distribution::sample(
        &rand_distr::Poisson::new(n as f64 - kappa).expect("positive mean"),
        rng,
    ) as u64;

    let mut points: Vec<f64> = ds
        .points
        .iter()
        .take(big_n.min(n) as usize)
        .copied()
        .collect();
    if big_n > n {
        let first = *ds.points.first().ok_or_else(|| Error::config("empty sample"))?;
        for _ in 0..(big_n - n) {
            points.push(first);
        }
    }

    // Augmentation by thinning: propose from f̂, keep where f̂ clears the
    // threshold; the kept points form a Poisson process with the thresholded
    // intensity exactly.
    let thr = poissonization_threshold(n, beta, big_c);
    let aug = rand_distr::Distribution::sample(
        &rand_distr::Poisson::new(kappa * fhat.mass()).expect("positive mean"),
        rng,
    ) as u64;
    for _ in 0..aug {
        let x = fhat.quantile(rng.gen::<f64>() * fhat.mass())?;
        if fhat.eval(x) >= thr {
            points.push(x);
        }
    }
    Ok(PointProcessSample { points, n })
}

/// Mirror kernel: keeps min(N, n) Poisson points and pads up to n by
/// resampling from the thresholded estimate.
pub fn depoissonize(
    pp: &PointProcessSample,
    fhat: &DensityModel,
    beta: f64,
    big_c: f64,
    rng: &mut ChaCha12Rng,
) -> Result<DensitySample> {
    let n = pp.n;
    if n < 2 {
        return Err(Error::config("depoissonization needs n ≥ 2"));
    }
    let mut points: Vec<f64> = pp.points.iter().take(n as usize).copied().collect();
    let thr = poissonization_threshold(n, beta, big_c);
    let mut attempts = 0u64;
    while points.len() < n as usize {
        let x = fhat.quantile(rng.gen::<f64>() * fhat.mass())?;
        if fhat.eval(x) >= thr {
            points.push(x);
        }
        attempts += 1;
        if attempts > 10_000_000 {
            return Err(Error::numeric(
                "padding stalled: thresholded density carries almost no mass",
            ));
        }
    }
    Ok(DensitySample { points, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::sample_poisson_process;
    use crate::partition::build_partition;

    fn uniform_partition(n: u64) -> Partition {
        build_partition(&DensityModel::uniform(), n, 1.0).unwrap()
    }

    #[test]
    fn binning_examples() {
        let p = uniform_partition(1024);
        let t = bin_counts(&[], &p, 3);
        assert!(t.counts.iter().all(|row| row.iter().all(|&c| c == 0)));

        // One point: the chain of cells containing it counts exactly 1.
        let x = p.left(2) + 0.3 * p.delta[2];
        let t = bin_counts(&[x], &p, 3);
        t.check_consistency().unwrap();
        for j in 0..=4usize {
            let total: u64 = (0..(1u64 << j)).map(|k| t.get(2, j, k as usize)).sum();
            assert_eq!(total, 1, "level {j}");
            let nonzero = (0..(1usize << j)).filter(|&k| t.get(2, j, k) > 0).count();
            assert_eq!(nonzero, 1);
        }
        for i in [0usize, 1, 3] {
            assert_eq!(t.get(i, 0, 0), 0);
        }
    }

    #[test]
    fn binned_totals_match_poisson_means() {
        let f = DensityModel::uniform();
        let p = uniform_partition(1024);
        let n = 10_000u64;
        let reps = 400;
        let mut rng = rng_for(101, 0);
        let mut mean = vec![0.0; p.m];
        for _ in 0..reps {
            let s = sample_poisson_process(&f, n, &mut rng).unwrap();
            let t = bin_counts(&s.points, &p, 1);
            t.check_consistency().unwrap();
            for i in 0..p.m {
                mean[i] += t.get(i, 0, 0) as f64 / reps as f64;
            }
        }
        for i in 0..p.m {
            let want = n as f64 * p.delta[i];
            let se = (want / reps as f64).sqrt();
            assert!(
                (mean[i] - want).abs() < 3.0 * se,
                "interval {i}: {} vs {want}",
                mean[i]
            );
        }
    }

    #[test]
    fn smoothed_cdf_matches_hand_values() {
        // Degenerate binomial: uniform CDF.
        assert_eq!(binom_cdf_smoothed(0, 0.5, -0.7), 0.0);
        assert!((binom_cdf_smoothed(0, 0.5, 0.25) - 0.75).abs() < 1e-15);
        assert_eq!(binom_cdf_smoothed(0, 0.5, 0.6), 1.0);

        // m=2, p=½: pmf {¼, ½, ¼}; G(1) = ¼ + ½·½ = ½.
        assert!((binom_cdf_smoothed(2, 0.5, 1.0) - 0.5).abs() < 1e-14);

        // Symmetry at p = ½.
        for m in [1u64, 5, 64] {
            for t in 0..20 {
                let x = -0.5 + (m as f64 + 1.0) * t as f64 / 19.0;
                let s = binom_cdf_smoothed(m, 0.5, x) + binom_cdf_smoothed(m, 0.5, m as f64 - x);
                assert!((s - 1.0).abs() < 1e-12, "m={m} x={x}: {s}");
            }
        }
    }

    #[test]
    fn smoothed_cdf_general_p_against_enumeration() {
        let m = 5u64;
        let p = 0.3f64;
        let pmf: Vec<f64> = (0..=m)
            .map(|k| ln_binom_pmf(m, k, p).exp())
            .collect();
        for t in 0..40 {
            let x = -0.5 + 6.0 * t as f64 / 39.0;
            let mut want = 0.0;
            for (k, w) in pmf.iter().enumerate() {
                let lo = k as f64 - 0.5;
                want += w * ((x - lo).clamp(0.0, 1.0));
            }
            let got = binom_cdf_smoothed(m, p, x);
            assert!((got - want).abs() < 1e-13, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn smoothed_cdf_is_increasing() {
        let m = 64u64;
        let mut prev = -1.0;
        for t in 0..=200 {
            let x = -0.5 + 65.0 * t as f64 / 200.0;
            let g = binom_cdf_smoothed(m, 0.5, x);
            assert!(g >= prev);
            prev = g;
        }
    }

    #[test]
    fn transform_core_round_trips() {
        for &m in &[0u64, 1, 2, 5, 17, 100, 10_000, 1_000_000] {
            let children: Vec<u64> = [0, 1, m / 3, m / 2, m.saturating_sub(1), m]
                .iter()
                .copied()
                .filter(|c| *c <= m)
                .collect();
            for &child in &children {
                for &u in &[-0.499, -0.25, 1e-4, 0.25, 0.5] {
                    let x = child as f64 + u;
                    let z = qc_transform(m, x);
                    assert!(z.is_finite(), "m={m} x={x}");
                    let back = qc_invert(m, z);
                    assert!(
                        (back - x).abs() < 1e-6 * (1.0 + x.abs()),
                        "m={m} child={child} u={u}: {back} vs {x}"
                    );
                }
            }
        }
    }

    #[test]
    fn transform_marginal_is_standard_normal_at_half_split() {
        // Parent Poisson, child conditionally Bin(m, ½): Z is exactly N(0,1).
        let reps = 100_000usize;
        let mut rng = rng_for(7, 0);
        let mut zs = Vec::with_capacity(reps);
        let pois = rand_distr::Poisson::new(50.0f64).unwrap();
        for _ in 0..reps {
            let m = rand_distr::Distribution::sample(&pois, &mut rng) as u64;
            let mut child = 0u64;
            for _ in 0..m {
                if rng.gen::<bool>() {
                    child += 1;
                }
            }
            let u = dither(&mut rng);
            zs.push(qc_transform(m, child as f64 + u));
        }
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, z) in zs.iter().enumerate() {
            let f = crate::special::norm_cdf(*z);
            ks = ks
                .max((f - i as f64 / reps as f64).abs())
                .max((f - (i + 1) as f64 / reps as f64).abs());
        }
        assert!(ks < 0.01, "Kolmogorov distance {ks}");
    }

    fn random_consistent_tensor(
        rng: &mut ChaCha12Rng,
        intervals: usize,
        levels: usize,
        max_top: u64,
    ) -> CountTensor {
        let mut t = CountTensor::zeros(intervals, levels);
        for i in 0..intervals {
            t.set(i, 0, 0, rng.gen_range(0..=max_top));
            for j in 0..levels {
                for k in 0..(1usize << j) {
                    let m = t.get(i, j, k);
                    let child = if m == 0 {
                        0
                    } else {
                        // Skewed splits exercise the CDF tails.
                        let frac = rng.gen::<f64>().powi(3);
                        ((m as f64 * frac).round() as u64).min(m)
                    };
                    t.set(i, j + 1, 2 * k, child);
                    t.set(i, j + 1, 2 * k + 1, m - child);
                }
            }
        }
        t
    }

    #[test]
    fn transform_round_trip_on_random_tensors() {
        let mut rng = rng_for(999, 0);
        for trial in 0..300 {
            let levels = 1 + (trial % 3);
            let t = random_consistent_tensor(&mut rng, 2, levels, 1_000_000);
            let st = quantile_transform(&t, 1000 + trial as u64).unwrap();
            assert!(st.warnings.is_empty());
            assert!(st
                .u_record
                .iter()
                .flatten()
                .all(|u| *u > -0.5 && *u <= 0.5));
            let back = invert_transform(&st).unwrap();
            assert_eq!(back, t, "trial {trial}");
        }
    }

    #[test]
    fn oversized_counts_fall_back_with_warning() {
        let mut t = CountTensor::zeros(1, 1);
        t.set(0, 0, 0, 2_000_000);
        t.set(0, 1, 0, 999_983);
        t.set(0, 1, 1, 1_000_017);
        let st = quantile_transform(&t, 4).unwrap();
        assert_eq!(st.warnings.len(), 1);
        let back = invert_transform(&st).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn inversion_rejects_corrupt_sequences() {
        let mut t = CountTensor::zeros(1, 1);
        t.set(0, 0, 0, 3);
        t.set(0, 1, 0, 2);
        t.set(0, 1, 1, 1);
        let st = quantile_transform(&t, 11).unwrap();

        // Negative total.
        let mut bad = st.clone();
        bad.z.set_scaling(0, -3.2);
        assert!(matches!(invert_transform(&bad), Err(Error::Numeric(_))));

        // Value parked exactly on a rounding boundary.
        let mut bad = st.clone();
        bad.z.set_scaling(0, 2.5);
        assert!(invert_transform(&bad).is_err());

        // Fallback cell whose z implies a child above the parent.
        let mut big = CountTensor::zeros(1, 1);
        big.set(0, 0, 0, 2_000_000);
        big.set(0, 1, 0, 1_000_000);
        big.set(0, 1, 1, 1_000_000);
        let mut st = quantile_transform(&big, 12).unwrap();
        st.z.set_detail(0, 0, 0, 2000.0);
        assert!(invert_transform(&st).is_err());
    }

    #[test]
    fn child_counts_are_conditionally_binomial() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let f = DensityModel::power_floor(1.0, 0.5).unwrap();
        let p = build_partition(&f, 2000, 1.0).unwrap();
        let reps = 6000;
        let mut rng = rng_for(55, 0);
        let mut parents = Vec::with_capacity(reps);
        let mut children = Vec::with_capacity(reps);
        for _ in 0..reps {
            let s = sample_poisson_process(&f, 2000, &mut rng).unwrap();
            let t = bin_counts(&s.points, &p, 0);
            parents.push(t.get(0, 0, 0));
            children.push(t.get(0, 1, 0));
        }
        // Condition on the modal parent count.
        let mut freq = std::collections::HashMap::new();
        for &m in &parents {
            *freq.entry(m).or_insert(0usize) += 1;
        }
        let (&m_star, _) = freq.iter().max_by_key(|(_, c)| **c).unwrap();
        let cond: Vec<u64> = parents
            .iter()
            .zip(&children)
            .filter(|(m, _)| **m == m_star)
            .map(|(_, c)| *c)
            .collect();
        assert!(cond.len() > 100, "too few conditioned replicates");

        let psplit = split_probability(&f, &p, 0, 0, 0);
        // Bin the conditional children; merge cells to expected ≥ 5.
        let total = cond.len() as f64;
        let pmf: Vec<f64> = (0..=m_star)
            .map(|k| ln_binom_pmf(m_star, k, psplit).exp())
            .collect();
        let mut edges = vec![0u64];
        let mut acc = 0.0;
        for k in 0..=m_star {
            acc += pmf[k as usize] * total;
            if acc >= 5.0 && k < m_star {
                edges.push(k + 1);
                acc = 0.0;
            }
        }
        edges.push(m_star + 1);
        let mut x2 = 0.0;
        for w in edges.windows(2) {
            let expect: f64 = (w[0]..w[1]).map(|k| pmf[k as usize]).sum::<f64>() * total;
            let observed = cond.iter().filter(|&&c| c >= w[0] && c < w[1]).count() as f64;
            if expect > 0.0 {
                x2 += (observed - expect).powi(2) / expect;
            }
        }
        let df = (edges.len() - 2).max(1) as f64;
        let cutoff = ChiSquared::new(df).unwrap().inverse_cdf(1.0 - 1e-3);
        assert!(x2 < cutoff, "chi-square {x2} vs {cutoff} (df {df}, m* {m_star})");
    }

    #[test]
    fn split_probability_matches_detail_identity() {
        let f = DensityModel::cosine(0.5).unwrap();
        let p = build_partition(&f, 512, 1.0).unwrap();
        let t = crate::haar::haar_coeffs(&f, &p, 3);
        for i in 0..p.m {
            for j in 0..=3usize {
                for k in 0..(1usize << j) {
                    let (a, b) = crate::haar::haar_cell(&p, i, j, k);
                    let mass = f.integral(a, b);
                    let ps = split_probability(&f, &p, i, j, k);
                    let lhs = 2.0 * ps - 1.0;
                    let w = p.delta[i] / (1u64 << j) as f64;
                    let rhs = t.detail(i, j, k) * w.sqrt() / mass;
                    assert!((lhs - rhs).abs() < 1e-11, "({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn poissonization_count_and_threshold_behaviour() {
        let f = DensityModel::uniform();
        let n = 10_000u64;
        let mut rng = rng_for(77, 0);
        let reps = 300;
        let mut mean = 0.0;
        for r in 0..reps {
            let ds = crate::experiments::sample_density(&f, n, &mut rng).unwrap();
            let pp = poissonize(&ds, &f, 1.0, 0.1, &mut rng).unwrap();
            mean += pp.points.len() as f64 / reps as f64;
            if r == 0 {
                assert!(pp.points.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
        // Threshold 0.4·(ln n/n)^{1/2} ≈ 0.012 < 1 passes everywhere, so the
        // drained mass is restored: mean ≈ n.
        let se = (2.0 * n as f64 / reps as f64).sqrt();
        assert!((mean - n as f64).abs() < 5.0 * se, "mean {mean}");

        // Threshold above sup f: no augmentation, mean ≈ n − κ_n.
        let mut rng = rng_for(77, 1);
        let mut mean = 0.0;
        for _ in 0..reps {
            let ds = crate::experiments::sample_density(&f, n, &mut rng).unwrap();
            let pp = poissonize(&ds, &f, 1.0, 1e6, &mut rng).unwrap();
            mean += pp.points.len() as f64 / reps as f64;
        }
        let want = n as f64 - poissonization_kappa(n);
        assert!((mean - want).abs() < 5.0 * se, "mean {mean} vs {want}");

        // Small n runs; n = 1 violates the precondition.
        let ds = crate::experiments::sample_density(&f, 4, &mut rng).unwrap();
        assert!(poissonize(&ds, &f, 1.0, 0.1, &mut rng).is_ok());
        let ds1 = DensitySample { points: vec![0.3], n: 1 };
        assert!(poissonize(&ds1, &f, 1.0, 0.1, &mut rng).is_err());
    }

    #[test]
    fn depoissonization_size_contract() {
        let f = DensityModel::uniform();
        let mut rng = rng_for(88, 0);
        let pp = PointProcessSample {
            points: (0..12).map(|i| (i as f64 + 0.5) / 12.0).collect(),
            n: 10,
        };
        let ds = depoissonize(&pp, &f, 1.0, 0.1, &mut rng).unwrap();
        assert_eq!(ds.points.len(), 10);
        assert_eq!(&ds.points[..], &pp.points[..10]);

        let short = PointProcessSample {
            points: vec![0.1, 0.2, 0.3],
            n: 10,
        };
        let ds = depoissonize(&short, &f, 1.0, 0.1, &mut rng).unwrap();
        assert_eq!(ds.points.len(), 10);
        assert_eq!(&ds.points[..3], &short.points[..]);
        assert!(ds.points.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn padded_points_follow_the_density() {
        let f = DensityModel::power_floor(1.0, 0.5).unwrap();
        let mut rng = rng_for(89, 0);
        let pp = PointProcessSample { points: vec![], n: 10_000 };
        let ds = depoissonize(&pp, &f, 1.0, 1e-4, &mut rng).unwrap();
        let mut pts = ds.points.clone();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, x) in pts.iter().enumerate() {
            let fx = 0.5 * x * x + 0.5 * x;
            ks = ks
                .max((fx - i as f64 / pts.len() as f64).abs())
                .max((fx - (i + 1) as f64 / pts.len() as f64).abs());
        }
        assert!(ks < 0.02, "Kolmogorov distance {ks}");
    }

    #[test]
    fn deterministic_bound_decreases_at_documented_rate() {
        let f = DensityModel::power(1.0).unwrap();
        let b1 = poissonization_bound(&f, 1 << 10, 1.0);
        let b2 = poissonization_bound(&f, 1 << 14, 1.0);
        assert!(b1 > b2);
        // Slope between the two points, adjusted for the log² factor.
        let adj = |b: f64, n: u64| (b / (n as f64).ln().powi(2)).ln();
        let slope = (adj(b2, 1 << 14) - adj(b1, 1 << 10)) / ((1u64 << 14) as f64 / 1024.0).ln();
        assert!((slope - (-2.0 / 3.0)).abs() < 0.15, "slope {slope}");
    }
}
