//! Samplers for the three experiments: i.i.d. density data, Poisson point
//! processes with intensity n·f, and Gaussian white-noise paths observed as
//! cell increments. Also provides the sample-splitting maps between scales n
//! and (⌊n/2⌋, ⌈n/2⌉).

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::Serialize;

use crate::funcspace::DensityModel;
use crate::partition::{build_partition, step_approx};
use crate::{Error, Result};

/// n i.i.d. observations from a density.
#[derive(Clone, Debug, Serialize)]
pub struct DensitySample {
    pub points: Vec<f64>,
    pub n: u64,
}

/// Poisson process on [0,1] with intensity n·f.
#[derive(Clone, Debug, Serialize)]
pub struct PointProcessSample {
    pub points: Vec<f64>,
    pub n: u64,
}

/// One value per line, full precision.
pub fn points_to_csv(points: &[f64]) -> String {
    let mut out = String::with_capacity(points.len() * 20);
    for x in points {
        out.push_str(&format!("{x:.17e}\n"));
    }
    out
}

impl DensitySample {
    pub fn to_csv(&self) -> String {
        points_to_csv(&self.points)
    }
}

impl PointProcessSample {
    pub fn to_csv(&self) -> String {
        points_to_csv(&self.points)
    }
}

/// Noise profile of a white-noise path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VarianceMode {
    /// dY = 2√f dt + n^{−1/2} dW.
    Unit,
    /// dY = f dt + n^{−1/2} √(T_n f0) dW, with T_n f0 the partition step profile.
    StepF0,
}

/// White-noise path stored as increments over the cells of `edges`.
///
/// `drift[c]` is the exact drift integral over cell c and `noise_w[c]` the
/// cell's noise weight w_c, so increment c ~ Normal(drift[c], w_c/n). Keeping
/// both makes splitting and zero-noise injection exact.
#[derive(Clone, Debug, Serialize)]
pub struct GwnPath {
    pub edges: Vec<f64>,
    pub increments: Vec<f64>,
    pub drift: Vec<f64>,
    pub noise_w: Vec<f64>,
    pub n: u64,
    pub mode: VarianceMode,
}

impl GwnPath {
    pub fn cells(&self) -> usize {
        self.increments.len()
    }

    /// Builds a path on explicit edges. `profile` carries the step variance
    /// model for [`VarianceMode::StepF0`]; pass `None` for unit noise.
    pub fn sample_on_edges(
        f: &DensityModel,
        n: u64,
        edges: Vec<f64>,
        profile: Option<&DensityModel>,
        rng: &mut ChaCha12Rng,
    ) -> Result<GwnPath> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("path edges must be strictly increasing"));
        }
        if n == 0 {
            return Err(Error::config("need n ≥ 1"));
        }
        let cells = edges.len() - 1;
        let mut drift = Vec::with_capacity(cells);
        let mut noise_w = Vec::with_capacity(cells);
        for c in 0..cells {
            let (a, b) = (edges[c], edges[c + 1]);
            match profile {
                None => {
                    let q = crate::quad::integrate(
                        |x| 2.0 * f.eval(x).max(0.0).sqrt(),
                        a,
                        b,
                        1e-11,
                        1e-14,
                    );
                    drift.push(q.value);
                    noise_w.push(b - a);
                }
                Some(t) => {
                    drift.push(f.integral(a, b));
                    noise_w.push(t.integral(a, b));
                }
            }
        }
        let sd_scale = 1.0 / (n as f64).sqrt();
        let increments: Vec<f64> = drift
            .iter()
            .zip(noise_w.iter())
            .map(|(d, w)| d + sd_scale * w.sqrt() * standard_normal(rng))
            .collect();
        Ok(GwnPath {
            edges,
            increments,
            drift,
            noise_w,
            n,
            mode: if profile.is_some() {
                VarianceMode::StepF0
            } else {
                VarianceMode::Unit
            },
        })
    }

    /// Replaces increments by their means; degenerate zero-noise path.
    pub fn strip_noise(&mut self) {
        self.increments.clone_from(&self.drift);
    }
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// n i.i.d. draws from f via inverse CDF.
pub fn sample_density(f: &DensityModel, n: u64, rng: &mut ChaCha12Rng) -> Result<DensitySample> {
    if n == 0 {
        return Err(Error::config("need n ≥ 1"));
    }
    let mass = f.mass();
    let mut points = Vec::with_capacity(n as usize);
    for _ in 0..n {
        points.push(f.quantile(rng.gen::<f64>() * mass)?);
    }
    Ok(DensitySample { points, n })
}

/// Poisson process with intensity n·f: N ~ Poisson(n·mass), then N i.i.d.
/// points from the normalized density.
pub fn sample_poisson_process(
    f: &DensityModel,
    n: u64,
    rng: &mut ChaCha12Rng,
) -> Result<PointProcessSample> {
    if n == 0 {
        return Err(Error::config("need n ≥ 1"));
    }
    let lambda = n as f64 * f.mass();
    let count = rand_distr::Poisson::new(lambda)
        .map_err(|e| Error::config(format!("bad Poisson intensity {lambda}: {e}")))?
        .sample(rng) as u64;
    let mass = f.mass();
    let mut points = Vec::with_capacity(count as usize);
    for _ in 0..count {
        points.push(f.quantile(rng.gen::<f64>() * mass)?);
    }
    Ok(PointProcessSample { points, n })
}

/// White-noise path on a uniform grid of `grid_size` cells.
///
/// Step mode needs f0: the variance profile is the left-endpoint step
/// approximation of f0 on its adaptive partition at scale n.
pub fn sample_gwn(
    f: &DensityModel,
    n: u64,
    grid_size: usize,
    mode: VarianceMode,
    f0: Option<&DensityModel>,
    rng: &mut ChaCha12Rng,
) -> Result<GwnPath> {
    if grid_size < 2 {
        return Err(Error::config(format!("grid_size ≥ 2 required, got {grid_size}")));
    }
    let edges: Vec<f64> = (0..=grid_size).map(|i| i as f64 / grid_size as f64).collect();
    match mode {
        VarianceMode::Unit => GwnPath::sample_on_edges(f, n, edges, None, rng),
        VarianceMode::StepF0 => {
            let f0 = f0.ok_or_else(|| Error::config("step mode requires f0"))?;
            let p = build_partition(f0, n, f0.beta)?;
            let t = step_approx(f0, &p)?;
            GwnPath::sample_on_edges(f, n, edges, Some(&t), rng)
        }
    }
}

/// Splits an i.i.d. sample into independent halves of sizes ⌊n/2⌋ and ⌈n/2⌉.
pub fn split_density(s: &DensitySample) -> (DensitySample, DensitySample) {
    let n1 = s.n / 2;
    let (a, b) = s.points.split_at(n1 as usize);
    (
        DensitySample { points: a.to_vec(), n: n1 },
        DensitySample { points: b.to_vec(), n: s.n - n1 },
    )
}

/// Thins a Poisson process: each point joins the first half independently
/// with probability ⌊n/2⌋/n, yielding independent processes at the two scales.
pub fn split_poisson(
    s: &PointProcessSample,
    rng: &mut ChaCha12Rng,
) -> (PointProcessSample, PointProcessSample) {
    let n1 = s.n / 2;
    let p = n1 as f64 / s.n as f64;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &x in &s.points {
        if rng.gen::<f64>() < p {
            first.push(x);
        } else {
            second.push(x);
        }
    }
    (
        PointProcessSample { points: first, n: n1 },
        PointProcessSample { points: second, n: s.n - n1 },
    )
}

/// Splits a white-noise path into independent paths at scales n1 = ⌊n/2⌋ and
/// n2 = ⌈n/2⌉ by rotating the underlying Brownian increments against fresh
/// noise; the weighted recombination cancels the fresh noise algebraically.
pub fn split_gwn(y: &GwnPath, rng: &mut ChaCha12Rng) -> (GwnPath, GwnPath) {
    let n = y.n as f64;
    let n1 = y.n / 2;
    let n2 = y.n - n1;
    let a = (n1 as f64 / n).sqrt();
    let b = (n2 as f64 / n).sqrt();
    let mut inc1 = Vec::with_capacity(y.cells());
    let mut inc2 = Vec::with_capacity(y.cells());
    for c in 0..y.cells() {
        let dw = n.sqrt() * (y.increments[c] - y.drift[c]);
        let g = y.noise_w[c].sqrt() * standard_normal(rng);
        let dw1 = a * dw + b * g;
        let dw2 = b * dw - a * g;
        inc1.push(y.drift[c] + dw1 / (n1 as f64).sqrt());
        inc2.push(y.drift[c] + dw2 / (n2 as f64).sqrt());
    }
    let mk = |n: u64, increments: Vec<f64>| GwnPath {
        edges: y.edges.clone(),
        increments,
        drift: y.drift.clone(),
        noise_w: y.noise_w.clone(),
        n,
        mode: y.mode,
    };
    (mk(n1, inc1), mk(n2, inc2))
}

/// Inverse of [`split_gwn`]: (n1·y1 + n2·y2)/n, cellwise.
pub fn recombine_gwn(y1: &GwnPath, y2: &GwnPath) -> Result<GwnPath> {
    if y1.cells() != y2.cells() || y1.edges != y2.edges {
        return Err(Error::config("cannot recombine paths on different grids"));
    }
    let n = y1.n + y2.n;
    let increments: Vec<f64> = y1
        .increments
        .iter()
        .zip(&y2.increments)
        .map(|(u, v)| (y1.n as f64 * u + y2.n as f64 * v) / n as f64)
        .collect();
    Ok(GwnPath {
        edges: y1.edges.clone(),
        increments,
        drift: y1.drift.clone(),
        noise_w: y1.noise_w.clone(),
        n,
        mode: y1.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn density_sampler_is_deterministic_and_in_range() {
        let f = DensityModel::uniform();
        let a = sample_density(&f, 5, &mut rng_for(7, 0)).unwrap();
        let b = sample_density(&f, 5, &mut rng_for(7, 0)).unwrap();
        assert_eq!(a.points, b.points);
        assert!(a.points.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(sample_density(&f, 0, &mut rng_for(7, 1)).is_err());
    }

    #[test]
    fn density_sampler_matches_cdf_in_kolmogorov_distance() {
        let f = DensityModel::power_floor(1.0, 0.5).unwrap();
        let n = 100_000u64;
        let mut s = sample_density(&f, n, &mut rng_for(11, 0)).unwrap();
        s.points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sup = 0.0f64;
        for (i, &x) in s.points.iter().enumerate() {
            let fx = 0.5 * x * x + 0.5 * x;
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            sup = sup.max((fx - lo).abs()).max((fx - hi).abs());
        }
        // DKW-style budget at δ = 1e−3.
        let bound = 3e-3 * (2.0f64 / 1e-3).ln().sqrt();
        assert!(sup < bound, "Kolmogorov distance {sup} vs {bound}");
    }

    #[test]
    fn poisson_counts_match_poisson_law() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let f = DensityModel::uniform();
        let n = 100u64;
        let reps = 10_000;
        let mut rng = rng_for(13, 0);
        let mut counts = Vec::with_capacity(reps);
        let mut mean = 0.0;
        for _ in 0..reps {
            let s = sample_poisson_process(&f, n, &mut rng).unwrap();
            assert!(s.points.iter().all(|x| (0.0..=1.0).contains(x)));
            counts.push(s.points.len());
            mean += s.points.len() as f64;
        }
        mean /= reps as f64;
        assert!((mean - 100.0).abs() < 0.5, "mean count {mean}");

        // Chi-square goodness of fit against Poisson(100), cells merged to
        // expected count ≥ 5.
        let win = crate::special::poisson_cdf_window(100.0).unwrap();
        let pmf_at = |k: usize| -> f64 {
            crate::special::ln_poisson_pmf(k as u64, 100.0).exp()
        };
        let lo = win.offset as usize;
        let hi = lo + win.cdf.len() - 1;
        let mut edges = vec![lo];
        let mut acc = 0.0;
        for k in lo..=hi {
            acc += pmf_at(k) * reps as f64;
            if acc >= 5.0 && k < hi {
                edges.push(k + 1);
                acc = 0.0;
            }
        }
        edges.push(hi + 1);
        let mut x2 = 0.0;
        for w in edges.windows(2) {
            let expected: f64 = (w[0]..w[1]).map(pmf_at).sum::<f64>() * reps as f64;
            let observed = counts
                .iter()
                .filter(|&&c| {
                    let c = c.max(lo).min(hi);
                    c >= w[0] && c < w[1]
                })
                .count() as f64;
            if expected > 0.0 {
                x2 += (observed - expected).powi(2) / expected;
            }
        }
        let df = (edges.len() - 2) as f64;
        let cutoff = ChiSquared::new(df).unwrap().inverse_cdf(1.0 - 1e-3);
        assert!(x2 < cutoff, "chi-square {x2} vs cutoff {cutoff} at df {df}");
    }

    #[test]
    fn gwn_unit_mode_cell_moments() {
        let f = DensityModel::uniform();
        let reps = 10_000;
        let mut rng = rng_for(17, 0);
        let mut first = Vec::with_capacity(reps);
        for _ in 0..reps {
            let y = sample_gwn(&f, 100, 4, VarianceMode::Unit, None, &mut rng).unwrap();
            assert_eq!(y.cells(), 4);
            first.push(y.increments[0]);
        }
        let mean = first.iter().sum::<f64>() / reps as f64;
        let var = first.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        // Increment ~ Normal(2·0.25, 0.25/100).
        assert!((mean - 0.5).abs() < 4.0 * (0.0025f64 / reps as f64).sqrt());
        assert!((var - 0.0025).abs() < 0.05 * 0.0025, "var {var}");
    }

    #[test]
    fn gwn_step_mode_uniform_profile() {
        let f = DensityModel::uniform();
        let mut rng = rng_for(19, 0);
        let y = sample_gwn(&f, 256, 8, VarianceMode::StepF0, Some(&f), &mut rng).unwrap();
        for c in 0..8 {
            assert!((y.drift[c] - 0.125).abs() < 1e-14);
            assert!((y.noise_w[c] - 0.125).abs() < 1e-14);
        }
        assert!(sample_gwn(&f, 256, 8, VarianceMode::StepF0, None, &mut rng).is_err());
    }

    #[test]
    fn zero_noise_paths_reduce_to_drift() {
        let f = DensityModel::cosine(0.5).unwrap();
        let mut rng = rng_for(23, 0);
        let mut y = sample_gwn(&f, 64, 16, VarianceMode::Unit, None, &mut rng).unwrap();
        y.strip_noise();
        assert_eq!(y.increments, y.drift);
    }

    #[test]
    fn splits_have_the_right_sizes() {
        let f = DensityModel::uniform();
        let s = sample_density(&f, 10, &mut rng_for(29, 0)).unwrap();
        let (a, b) = split_density(&s);
        assert_eq!((a.n, b.n), (5, 5));
        assert_eq!(a.points.len(), 5);
        let s = sample_density(&f, 11, &mut rng_for(29, 1)).unwrap();
        let (a, b) = split_density(&s);
        assert_eq!((a.n, b.n), (5, 6));

        let pp = sample_poisson_process(&f, 100, &mut rng_for(29, 2)).unwrap();
        let (h1, h2) = split_poisson(&pp, &mut rng_for(29, 3));
        assert_eq!(h1.points.len() + h2.points.len(), pp.points.len());
        assert_eq!((h1.n, h2.n), (50, 50));
    }

    #[test]
    fn poisson_split_halves_are_poisson_at_half_scale() {
        let f = DensityModel::uniform();
        let n = 100u64;
        let reps = 4000;
        let mut rng = rng_for(31, 0);
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for _ in 0..reps {
            let s = sample_poisson_process(&f, n, &mut rng).unwrap();
            let (h1, _) = split_poisson(&s, &mut rng);
            let c = h1.points.len() as f64;
            mean += c;
            m2 += c * c;
        }
        mean /= reps as f64;
        let var = m2 / reps as f64 - mean * mean;
        // Thinned process is Poisson(50): mean ≈ var ≈ 50.
        let se = (50.0f64 / reps as f64).sqrt();
        assert!((mean - 50.0).abs() < 5.0 * se, "mean {mean}");
        assert!((var - 50.0).abs() < 0.15 * 50.0, "var {var}");
    }

    #[test]
    fn gwn_split_recombines_to_original() {
        let f = DensityModel::cosine(0.5).unwrap();
        let mut rng = rng_for(37, 0);
        for n in [100u64, 101, 4096] {
            let y = sample_gwn(&f, n, 32, VarianceMode::Unit, None, &mut rng).unwrap();
            let (h1, h2) = split_gwn(&y, &mut rng);
            assert_eq!((h1.n, h2.n), (n / 2, n - n / 2));
            let back = recombine_gwn(&h1, &h2).unwrap();
            for c in 0..y.cells() {
                assert!(
                    (back.increments[c] - y.increments[c]).abs()
                        <= 1e-13 * (1.0 + y.increments[c].abs()),
                    "n={n} cell {c}: {} vs {}",
                    back.increments[c],
                    y.increments[c]
                );
            }
        }
    }

    #[test]
    fn gwn_split_half_has_half_scale_variance() {
        let f = DensityModel::uniform();
        let reps = 10_000;
        let mut rng = rng_for(41, 0);
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let y = sample_gwn(&f, 100, 4, VarianceMode::Unit, None, &mut rng).unwrap();
            let (h1, _) = split_gwn(&y, &mut rng);
            vals.push(h1.increments[0]);
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        // Half path at n1 = 50: variance 0.25/50.
        assert!((var - 0.005).abs() < 0.05 * 0.005, "var {var}");
    }
}
