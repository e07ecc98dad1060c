//! Information distances between the experiments' laws.
//!
//! Closed forms where they exist (Poisson processes, Gaussian shifts,
//! smoothed Poisson counts vs their matching normals, the transformed-count
//! law vs a unit normal), generic 1-D Hellinger quadrature otherwise, and the
//! telescoped sequence-space Hellinger budget that drives the rate studies.

use rayon::prelude::*;
use serde::Serialize;

use crate::coupling::split_probability;
use crate::funcspace::DensityModel;
use crate::haar::{default_jmax, haar_cell, haar_coeffs, l2_tail_bound};
use crate::partition::build_partition;
use crate::rng::rng_for;
use crate::special::{
    ln_poisson_pmf, norm_cdf, norm_quantile_from_ln, normal_mass, poisson_cdf_window,
    poisson_quantile,
};
use crate::{Error, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DivergenceKind {
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "Hellinger2")]
    Hellinger2,
    #[serde(rename = "KL")]
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

/// One computed distance with its numeric uncertainty.
#[derive(Clone, Debug, Serialize)]
pub struct DivergenceReport {
    pub kind: DivergenceKind,
    pub value: f64,
    pub method: Method,
    #[serde(rename = "error")]
    pub error_estimate: f64,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

impl DivergenceReport {
    fn new(kind: DivergenceKind, value: f64, method: Method, error_estimate: f64) -> Self {
        DivergenceReport {
            kind,
            value,
            method,
            error_estimate,
            params: serde_json::Value::Null,
        }
    }
}

/// TV, squared Hellinger, and KL for one pair of laws.
#[derive(Clone, Debug, Serialize)]
pub struct DivergenceTriple {
    pub tv: DivergenceReport,
    pub h2: DivergenceReport,
    pub kl: DivergenceReport,
}

impl DivergenceTriple {
    /// Largest violation of the chain TV ≤ H ≤ √KL; ≤ 0 when the chain holds.
    pub fn chain_violation(&self) -> f64 {
        let h = self.h2.value.max(0.0).sqrt();
        let sqrt_kl = self.kl.value.max(0.0).sqrt();
        (self.tv.value - h).max(h - sqrt_kl)
    }
}

/// H² between Poisson processes with the given intensities on [0,1]:
/// ∫(√λ₁ − √λ₂)².
pub fn hellinger2_poisson_processes(
    lambda1: &dyn Fn(f64) -> f64,
    lambda2: &dyn Fn(f64) -> f64,
) -> DivergenceReport {
    let q = crate::quad::integrate(
        |x| {
            let d = lambda1(x).max(0.0).sqrt() - lambda2(x).max(0.0).sqrt();
            d * d
        },
        0.0,
        1.0,
        1e-8,
        1e-14,
    );
    DivergenceReport::new(DivergenceKind::Hellinger2, q.value, Method::Quadrature, q.error)
}

/// All three distances between white-noise laws dY = b dt + σ dW sharing σ:
/// closed forms in the drift separation ‖b₁ − b₂‖₂.
pub fn gauss_shift_divergences(
    b1: &dyn Fn(f64) -> f64,
    b2: &dyn Fn(f64) -> f64,
    sigma: f64,
) -> Result<DivergenceTriple> {
    if sigma <= 0.0 {
        return Err(Error::config("noise level must be positive"));
    }
    let q = crate::quad::integrate(
        |x| {
            let d = b1(x) - b2(x);
            d * d
        },
        0.0,
        1.0,
        1e-10,
        1e-15,
    );
    let norm2 = q.value.max(0.0);
    let norm = norm2.sqrt();
    let tv = 1.0 - 2.0 * norm_cdf(-norm / (2.0 * sigma));
    let h2 = 2.0 - 2.0 * (-norm2 / (8.0 * sigma * sigma)).exp();
    let kl = norm2 / (2.0 * sigma * sigma);
    // First-order propagation of the quadrature error on ‖b₁−b₂‖₂².
    let e = q.error;
    Ok(DivergenceTriple {
        tv: DivergenceReport::new(
            DivergenceKind::Tv,
            tv.clamp(0.0, 1.0),
            Method::ClosedForm,
            e / (sigma * sigma),
        ),
        h2: DivergenceReport::new(
            DivergenceKind::Hellinger2,
            h2.clamp(0.0, 2.0),
            Method::ClosedForm,
            e / (4.0 * sigma * sigma),
        ),
        kl: DivergenceReport::new(
            DivergenceKind::Kl,
            kl.max(0.0),
            Method::ClosedForm,
            e / (2.0 * sigma * sigma),
        ),
    })
}

/// Exact KL between Poisson(λ) + Uniform(−½,½] and Normal(λ, λ):
/// Σ_k pmf·ln pmf + ln√(2πλ) + (λ + 1/12)/(2λ). The entropy series is
/// truncated 12√λ beyond the mean; the discarded tail is below 1e−14.
pub fn kl_poisson_uniform_vs_gauss(lambda: f64) -> Result<DivergenceReport> {
    if lambda <= 0.0 {
        return Err(Error::config("λ must be positive"));
    }
    if lambda > 1e9 {
        return Err(Error::numeric(
            "λ > 1e9: individual pmf terms underflow the entropy series",
        ));
    }
    let spread = 12.0 * lambda.sqrt() + 5.0;
    let lo = (lambda - spread).floor().max(0.0) as u64;
    let hi = (lambda + spread).ceil() as u64;
    let mut entropy = 0.0;
    for k in lo..=hi {
        let lp = ln_poisson_pmf(k, lambda);
        if lp > -700.0 {
            entropy += lp.exp() * lp;
        }
    }
    let kl = entropy
        + (2.0 * std::f64::consts::PI * lambda).sqrt().ln()
        + (lambda + 1.0 / 12.0) / (2.0 * lambda);
    Ok(DivergenceReport::new(
        DivergenceKind::Kl,
        kl.max(0.0),
        Method::ClosedForm,
        1e-14,
    ))
}

/// H² between Poisson(λ) + Uniform(−½,½] and Normal(λ, λ₀), summed in closed
/// form cell by cell, together with the asymptotic reference bound
/// 1.2/(4λ) + 4(λ/λ₀ − 1)² (slack 1.2 standing in for the 1 + o(1) factor).
pub fn hellinger2_mismatched_gauss(lambda: f64, lambda0: f64) -> Result<(DivergenceReport, f64)> {
    if lambda <= 0.0 || lambda0 <= 0.0 {
        return Err(Error::config("intensities must be positive"));
    }
    if lambda > 1e9 || lambda0 > 1e9 {
        return Err(Error::numeric("intensity too large for the cell sum"));
    }
    let spread = 14.0 * (lambda.sqrt() + lambda0.sqrt()) + 5.0;
    let lo = (lambda - spread).floor().max(0.0) as u64;
    let hi = (lambda + spread).ceil() as u64;
    let scale = (8.0 * std::f64::consts::PI * lambda0).powf(0.25);
    let sd2 = (2.0 * lambda0).sqrt();
    let mut s = 0.0;
    for k in lo..=hi {
        let lp = ln_poisson_pmf(k, lambda);
        if lp < -700.0 {
            continue;
        }
        let a = (k as f64 - 0.5 - lambda) / sd2;
        let b = (k as f64 + 0.5 - lambda) / sd2;
        s += (0.5 * lp).exp() * scale * normal_mass(a, b);
    }
    let h2 = (2.0 - 2.0 * s).clamp(0.0, 2.0);
    let bound = 1.2 / (4.0 * lambda) + 4.0 * (lambda / lambda0 - 1.0).powi(2);
    Ok((
        DivergenceReport::new(DivergenceKind::Hellinger2, h2, Method::ClosedForm, 1e-12),
        bound,
    ))
}

/// Generic H² between two densities on [a, b] by quadrature of 2 − 2∫√(pq).
pub fn hellinger2_densities(
    p: &dyn Fn(f64) -> f64,
    q: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
) -> DivergenceReport {
    let quad = crate::quad::integrate(
        |x| (p(x).max(0.0) * q(x).max(0.0)).sqrt(),
        a,
        b,
        1e-10,
        1e-14,
    );
    DivergenceReport::new(
        DivergenceKind::Hellinger2,
        (2.0 - 2.0 * quad.value).clamp(0.0, 2.0),
        Method::Quadrature,
        2.0 * quad.error,
    )
}

/// Φ^{−1}(Binomial(m,½) CDF at k), the cell boundary of the transformed law.
fn transform_boundary(m: u64, k_plus_1: u64) -> f64 {
    if k_plus_1 == 0 {
        return f64::NEG_INFINITY;
    }
    let k = k_plus_1 - 1;
    if k >= m {
        return f64::INFINITY;
    }
    // Bin(m,½) symmetry keeps both tails in log precision.
    if (k as f64) < 0.5 * m as f64 {
        norm_quantile_from_ln(crate::coupling::ln_binom_cdf_half(m, k))
    } else {
        -norm_quantile_from_ln(crate::coupling::ln_binom_cdf_half(m, m - k - 1))
    }
}

/// H² between Normal(μ, 1) and the transformed count law
/// Φ^{−1}∘G_{m,1/2}(Bin(m,p) + U), in closed form cell by cell:
/// 2 − 2e^{−μ²/8} Σ_k √(pmf_p(k)/pmf_½(k)) ∫_cell φ(z − μ/2) dz.
pub fn hellinger2_quantile_coupling(m: u64, p: f64, mu: f64) -> DivergenceReport {
    assert!((0.0..=1.0).contains(&p), "p must lie in [0,1]");
    if m == 0 {
        let h2 = 2.0 - 2.0 * (-mu * mu / 8.0).exp();
        return DivergenceReport::new(DivergenceKind::Hellinger2, h2, Method::ClosedForm, 1e-15);
    }
    // Contributing cells: where Bin(m,p) carries mass or where the normal
    // factor does (transformed scale, mapped back through the mean split).
    let half_sd = 0.5 * (m as f64).sqrt();
    let center = 0.5 * m as f64 + 0.5 * mu * half_sd;
    let spread = 14.0 * (m as f64 * p * (1.0 - p)).sqrt() + 14.0 * half_sd + 5.0;
    let lo = (m as f64 * p).min(center) - spread;
    let hi = (m as f64 * p).max(center) + spread;
    let lo = lo.floor().max(0.0) as u64;
    let hi = (hi.ceil() as u64).min(m);
    let ln_prefactor = -mu * mu / 8.0;
    let mut s = 0.0;
    let mut z_lo = transform_boundary(m, lo);
    for k in lo..=hi {
        let z_hi = transform_boundary(m, k + 1);
        let lw = 0.5 * (crate::special::ln_binom_pmf(m, k, p)
            - crate::special::ln_binom_pmf_half(m, k))
            + ln_prefactor;
        if lw > -700.0 {
            s += lw.exp() * normal_mass(z_lo - 0.5 * mu, z_hi - 0.5 * mu);
        }
        z_lo = z_hi;
    }
    DivergenceReport::new(
        DivergenceKind::Hellinger2,
        (2.0 - 2.0 * s).clamp(0.0, 2.0),
        Method::ClosedForm,
        1e-12,
    )
}

/// Per-level accounting of the sequence-space budget.
#[derive(Clone, Debug, Serialize)]
pub struct LevelTerms {
    pub level: usize,
    /// Monte Carlo estimate of Σ_cells E[H²] over the parent-count law.
    pub mc_total: f64,
    pub mc_error: f64,
    /// Deterministic diagnostic terms: drift mismatch, split bias, split
    /// fourth moment. Each nonnegative; their sum is `bound_total`.
    pub term_i: f64,
    pub term_ii: f64,
    pub term_iii: f64,
    pub bound_total: f64,
    pub cells: usize,
    pub skipped: usize,
}

/// Full budget report; `total` is the value the rate studies track.
#[derive(Clone, Debug, Serialize)]
pub struct BudgetReport {
    pub total: f64,
    pub error: f64,
    pub level_minus1: f64,
    pub levels: Vec<LevelTerms>,
    pub jmax: usize,
    pub m: usize,
    pub skipped_cells: usize,
    pub skip_error_bound: f64,
    /// L² mass beyond jmax (informational; the default jmax makes it
    /// negligible at scale n).
    pub l2_tail: f64,
}

impl BudgetReport {
    pub fn report(&self) -> DivergenceReport {
        DivergenceReport::new(
            DivergenceKind::Hellinger2,
            self.total,
            Method::MonteCarlo,
            self.error,
        )
    }
}

/// Knobs for [`coupling_hellinger_budget`].
#[derive(Clone, Debug)]
pub struct BudgetConfig {
    /// Detail truncation; `None` picks the tail-driven default.
    pub jmax: Option<usize>,
    /// Required envelope band: band.0·f0 ≤ f ≤ band.1·f0.
    pub band: (f64, f64),
    pub mc_reps: usize,
    pub seed: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            jmax: None,
            band: (1.0 / 32.0, 32.0),
            mc_reps: 256,
            seed: 1,
        }
    }
}

/// Upper budget for the squared Hellinger distance between the coupled
/// sequence laws of the Poisson experiment for f and the Gaussian reference
/// built from f0, telescoped over resolution levels.
///
/// Level −1 sums the exact smoothed-Poisson vs Normal(λ, λ₀) distance per
/// interval; each detail level averages the per-cell transformed-count
/// distance over stratified parent counts N ~ Poisson(n ∫_cell f).
pub fn coupling_hellinger_budget(
    f: &DensityModel,
    f0: &DensityModel,
    n: u64,
    beta: f64,
    cfg: &BudgetConfig,
) -> Result<BudgetReport> {
    let p = build_partition(f0, n, beta)?;
    check_band(f, f0, cfg.band)?;
    let jmax = match cfg.jmax {
        Some(j) => j,
        None => default_jmax(&p, f.radius, beta, n, Some(20)),
    };
    if cfg.mc_reps == 0 {
        return Err(Error::config("mc_reps must be positive"));
    }
    let coeffs = haar_coeffs(f, &p, jmax);

    let mut level_minus1 = 0.0;
    let mut err2 = 0.0;
    for i in 0..p.m {
        let lam = n as f64 * f.integral(p.left(i), p.right(i));
        let lam0 = n as f64 * p.delta[i] * f0.eval(p.left(i));
        let (rep, _) = hellinger2_mismatched_gauss(lam, lam0)?;
        level_minus1 += rep.value;
        err2 += rep.error_estimate * rep.error_estimate;
    }

    struct CellOut {
        level: usize,
        mc: f64,
        var: f64,
        ti: f64,
        tii: f64,
        tiii: f64,
        skipped: bool,
        skip_bound: f64,
    }

    let mut cells: Vec<(usize, usize, usize)> = Vec::new();
    for j in 0..=jmax {
        for i in 0..p.m {
            for k in 0..(1usize << j) {
                cells.push((i, j, k));
            }
        }
    }
    let reps = cfg.mc_reps;
    let outs: Vec<Result<CellOut>> = cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(i, j, k))| {
            let (a, b) = haar_cell(&p, i, j, k);
            let lam = n as f64 * f.integral(a, b);
            let ps = split_probability(f, &p, i, j, k);
            let mu = (n as f64 / f0.eval(p.left(i))).sqrt() * coeffs.detail(i, j, k);
            let dp = ps - 0.5;
            let ti = (mu - lam.sqrt() * 2.0 * dp).powi(2);
            let tii = dp * dp;
            let tiii = (lam + lam * lam).sqrt() * dp.powi(4);
            if dp.abs() < 1e-12 && mu.abs() < 1e-12 {
                // Skipped cell: H² ≤ c·((μ−√N·2dp)² + dp² + N·dp⁴) stays
                // below this deterministic envelope over all N.
                let nmax = lam + 20.0 * lam.sqrt() + 20.0;
                let skip_bound = 8.0 * ((mu.abs() + 2.0 * nmax.sqrt() * dp.abs()).powi(2)
                    + dp * dp
                    + nmax * dp.powi(4));
                return Ok(CellOut {
                    level: j,
                    mc: 0.0,
                    var: 0.0,
                    ti,
                    tii,
                    tiii,
                    skipped: true,
                    skip_bound,
                });
            }
            let table = poisson_cdf_window(lam)?;
            let mut rng = rng_for(cfg.seed, idx as u64);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for r in 0..reps {
                let u = (r as f64 + rng.gen::<f64>()) / reps as f64;
                let parent = poisson_quantile(&table, u);
                let h = hellinger2_quantile_coupling(parent, ps, mu).value;
                sum += h;
                sumsq += h * h;
            }
            let mean = sum / reps as f64;
            let var = (sumsq / reps as f64 - mean * mean).max(0.0) / reps as f64;
            Ok(CellOut {
                level: j,
                mc: mean,
                var,
                ti,
                tii,
                tiii,
                skipped: false,
                skip_bound: 0.0,
            })
        })
        .collect();

    let mut levels: Vec<LevelTerms> = (0..=jmax)
        .map(|j| LevelTerms {
            level: j,
            mc_total: 0.0,
            mc_error: 0.0,
            term_i: 0.0,
            term_ii: 0.0,
            term_iii: 0.0,
            bound_total: 0.0,
            cells: 0,
            skipped: 0,
        })
        .collect();
    let mut skipped_cells = 0usize;
    let mut skip_error_bound = 0.0;
    for out in outs {
        let c = out?;
        let l = &mut levels[c.level];
        l.mc_total += c.mc;
        l.mc_error += c.var;
        l.term_i += c.ti;
        l.term_ii += c.tii;
        l.term_iii += c.tiii;
        l.cells += 1;
        if c.skipped {
            l.skipped += 1;
            skipped_cells += 1;
            skip_error_bound += c.skip_bound;
        }
    }
    let mut total = level_minus1;
    for l in &mut levels {
        l.mc_error = l.mc_error.sqrt();
        l.bound_total = l.term_i + l.term_ii + l.term_iii;
        total += l.mc_total;
        err2 += l.mc_error * l.mc_error;
    }
    Ok(BudgetReport {
        total,
        error: err2.sqrt() + skip_error_bound,
        level_minus1,
        levels,
        jmax,
        m: p.m,
        skipped_cells,
        skip_error_bound,
        l2_tail: l2_tail_bound(&p, f.radius, beta, jmax),
    })
}

fn check_band(f: &DensityModel, f0: &DensityModel, band: (f64, f64)) -> Result<()> {
    if !(band.0 > 0.0 && band.1 > band.0) {
        return Err(Error::config("band must satisfy 0 < lo < hi"));
    }
    let grid = 4096;
    for t in 0..grid {
        let x = (t as f64 + 0.5) / grid as f64;
        let base = f0.eval(x);
        let v = f.eval(x);
        if v < band.0 * base || v > band.1 * base {
            return Err(Error::config(format!(
                "f leaves the band [{}, {}]·f0 at x = {x}: f = {v}, f0 = {base}",
                band.0, band.1
            )));
        }
    }
    Ok(())
}

/// Empirical total variation via E_a[(1 − ratio)⁺] and its mirror under b,
/// averaged; `ratio` is the b-over-a density ratio at a point.
pub fn tv_monte_carlo(
    sampler_a: &mut dyn FnMut(&mut rand_chacha::ChaCha12Rng) -> f64,
    sampler_b: &mut dyn FnMut(&mut rand_chacha::ChaCha12Rng) -> f64,
    ratio: &dyn Fn(f64) -> f64,
    reps: usize,
    seed: u64,
) -> Result<DivergenceReport> {
    if reps == 0 {
        return Err(Error::config("reps must be positive"));
    }
    let mut rng = rng_for(seed, 0);
    let half = reps / 2;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let push = |v: f64, sum: &mut f64, sumsq: &mut f64| {
        *sum += v;
        *sumsq += v * v;
    };
    for _ in 0..half {
        let x = sampler_a(&mut rng);
        let r = ratio(x);
        if r <= 0.0 || !r.is_finite() {
            return Err(Error::numeric(format!("density ratio {r} at x = {x}")));
        }
        push((1.0 - r).max(0.0), &mut sum, &mut sumsq);
    }
    for _ in 0..(reps - half) {
        let x = sampler_b(&mut rng);
        let r = ratio(x);
        if r <= 0.0 || !r.is_finite() {
            return Err(Error::numeric(format!("density ratio {r} at x = {x}")));
        }
        push((1.0 - 1.0 / r).max(0.0), &mut sum, &mut sumsq);
    }
    let mean = sum / reps as f64;
    let var = (sumsq / reps as f64 - mean * mean).max(0.0);
    Ok(DivergenceReport::new(
        DivergenceKind::Tv,
        mean.clamp(0.0, 1.0),
        Method::MonteCarlo,
        (var / reps as f64).sqrt(),
    ))
}

/// Least-squares slope of y against x with the standard error of the slope.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::config("need at least 3 points for a slope fit"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::config("degenerate abscissae"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    Ok((slope, intercept, se))
}
