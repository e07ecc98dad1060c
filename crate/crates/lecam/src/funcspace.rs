//! Densities on [0,1] with declared smoothness.
//!
//! A [`DensityModel`] couples a concrete density family with the smoothness
//! class it is claimed to live in: a Hölder exponent `beta`, a class radius
//! `radius`, and a certified pointwise lower bound `floor`. Built-in families
//! carry closed-form integrals and quantiles so that downstream coupling
//! computations are free of quadrature noise. [`check_class`] estimates the
//! class seminorms on a dyadic grid and reports membership.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{quad, Error, Result};

type EvalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Concrete density shapes on [0,1].
#[derive(Clone)]
pub enum Family {
    /// f ≡ 1.
    Uniform,
    /// f(x) = (x^beta + c)/Z with Z = 1/(beta+1) + c; requires c > 0.
    PowerFloor { beta: f64, c: f64 },
    /// f(x) = (beta+1) x^beta; touches zero at the origin.
    Power { beta: f64 },
    /// f(x) = 1 + a cos(2πx); requires |a| < 1.
    Cosine { a: f64 },
    /// Piecewise-linear interpolant of (xs, ys); `cum` holds nodal CDF values.
    PiecewiseLinear {
        xs: Arc<Vec<f64>>,
        ys: Arc<Vec<f64>>,
        cum: Arc<Vec<f64>>,
    },
    /// Piecewise-constant on cells bounded by `edges`; `cum` holds edge CDF values.
    PiecewiseConstant {
        edges: Arc<Vec<f64>>,
        ys: Arc<Vec<f64>>,
        cum: Arc<Vec<f64>>,
    },
    /// Black-box density; optional exact CDF closure replaces quadrature.
    Custom {
        eval: EvalFn,
        cdf: Option<EvalFn>,
    },
}

impl fmt::Debug for Family {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Uniform => write!(fm, "Uniform"),
            Family::PowerFloor { beta, c } => write!(fm, "PowerFloor {{ beta: {beta}, c: {c} }}"),
            Family::Power { beta } => write!(fm, "Power {{ beta: {beta} }}"),
            Family::Cosine { a } => write!(fm, "Cosine {{ a: {a} }}"),
            Family::PiecewiseLinear { xs, .. } => {
                write!(fm, "PiecewiseLinear {{ nodes: {} }}", xs.len())
            }
            Family::PiecewiseConstant { edges, .. } => {
                write!(fm, "PiecewiseConstant {{ cells: {} }}", edges.len() - 1)
            }
            Family::Custom { cdf, .. } => {
                write!(fm, "Custom {{ exact_cdf: {} }}", cdf.is_some())
            }
        }
    }
}

/// A density together with its declared smoothness class.
///
/// `mass` is the actual integral of the shape over [0,1]. Built-in families
/// normalize analytically, so mass is 1 up to rounding; estimator outputs
/// constructed with `normalize = false` may carry a different mass and the
/// field records it rather than hiding it.
#[derive(Clone, Debug)]
pub struct DensityModel {
    pub family: Family,
    /// Declared Hölder exponent.
    pub beta: f64,
    /// Declared class radius R.
    pub radius: f64,
    /// Optional interior radius R′ < R; carried for configs, never defaulted.
    pub radius_interior: Option<f64>,
    /// Certified pointwise lower bound on f over [0,1].
    pub floor: f64,
    mass: f64,
}

/// Serializable density description: `{"family", "params", "beta", "R"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Descriptor {
    pub family: String,
    #[serde(default)]
    pub params: serde_json::Value,
    pub beta: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "R_prime", default, skip_serializing_if = "Option::is_none")]
    pub radius_interior: Option<f64>,
}

/// Seminorm estimates and class membership for one density.
#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub sup_norm: f64,
    /// sup of the order-⌊β⌋ derivative estimate.
    pub deriv_sup: f64,
    /// Difference-quotient estimate of the order β−⌊β⌋ Hölder seminorm of f^(⌊β⌋).
    pub holder_seminorm: f64,
    /// Flatness seminorm; identically 0 for β ≤ 1.
    pub flatness_seminorm: f64,
    /// sup_norm + deriv_sup + holder_seminorm.
    pub cbeta_norm: f64,
    pub member_cbeta: bool,
    pub member_hbeta: bool,
    pub grid_size: usize,
}

impl DensityModel {
    pub fn uniform() -> Self {
        DensityModel {
            family: Family::Uniform,
            beta: 1.0,
            radius: 2.1,
            radius_interior: None,
            floor: 1.0,
            mass: 1.0,
        }
    }

    pub fn power_floor(beta: f64, c: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::config(format!("power_floor needs beta > 0, got {beta}")));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::config(format!("power_floor needs c > 0, got {c}")));
        }
        let z = 1.0 / (beta + 1.0) + c;
        let mut model = DensityModel {
            family: Family::PowerFloor { beta, c },
            beta,
            radius: f64::NAN,
            radius_interior: None,
            floor: c / z,
            mass: 1.0,
        };
        model.radius = default_radius(&model)?;
        Ok(model)
    }

    pub fn power(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::config(format!("power needs beta > 0, got {beta}")));
        }
        let mut model = DensityModel {
            family: Family::Power { beta },
            beta,
            radius: f64::NAN,
            radius_interior: None,
            floor: 0.0,
            mass: 1.0,
        };
        model.radius = default_radius(&model)?;
        Ok(model)
    }

    pub fn cosine(a: f64) -> Result<Self> {
        if !(a.abs() < 1.0) {
            return Err(Error::config(format!("cosine needs |a| < 1, got {a}")));
        }
        let mut model = DensityModel {
            family: Family::Cosine { a },
            beta: 1.0,
            radius: f64::NAN,
            radius_interior: None,
            floor: 1.0 - a.abs(),
            mass: 1.0,
        };
        model.radius = default_radius(&model)?;
        Ok(model)
    }

    /// Piecewise-linear density through (xs, ys). Node grid must start at 0,
    /// end at 1, and be strictly increasing; ys must be nonnegative.
    pub fn from_values_linear(
        xs: Vec<f64>,
        mut ys: Vec<f64>,
        beta: f64,
        radius: f64,
        normalize: bool,
    ) -> Result<Self> {
        check_nodes(&xs, &ys, xs.len())?;
        let raw: f64 = xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * 0.5 * (y[0] + y[1]))
            .sum();
        if normalize {
            if raw <= 0.0 {
                return Err(Error::config("cannot normalize a zero-mass interpolant"));
            }
            for y in &mut ys {
                *y /= raw;
            }
        }
        let mut cum = Vec::with_capacity(xs.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for i in 1..xs.len() {
            acc += (xs[i] - xs[i - 1]) * 0.5 * (ys[i - 1] + ys[i]);
            cum.push(acc);
        }
        let floor = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(DensityModel {
            family: Family::PiecewiseLinear {
                xs: Arc::new(xs),
                ys: Arc::new(ys),
                cum: Arc::new(cum),
            },
            beta,
            radius,
            radius_interior: None,
            floor,
            mass: acc,
        })
    }

    /// Piecewise-constant density on the cells of `edges`.
    pub fn from_values_constant(
        edges: Vec<f64>,
        mut ys: Vec<f64>,
        beta: f64,
        radius: f64,
        normalize: bool,
    ) -> Result<Self> {
        check_nodes(&edges, &ys, edges.len() - 1)?;
        let raw: f64 = edges
            .windows(2)
            .zip(ys.iter())
            .map(|(e, y)| (e[1] - e[0]) * y)
            .sum();
        if normalize {
            if raw <= 0.0 {
                return Err(Error::config("cannot normalize a zero-mass histogram"));
            }
            for y in &mut ys {
                *y /= raw;
            }
        }
        let mut cum = Vec::with_capacity(edges.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for i in 1..edges.len() {
            acc += (edges[i] - edges[i - 1]) * ys[i - 1];
            cum.push(acc);
        }
        let floor = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(DensityModel {
            family: Family::PiecewiseConstant {
                edges: Arc::new(edges),
                ys: Arc::new(ys),
                cum: Arc::new(cum),
            },
            beta,
            radius,
            radius_interior: None,
            floor,
            mass: acc,
        })
    }

    /// Black-box density with quadrature integrals.
    pub fn custom(
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        beta: f64,
        radius: f64,
        floor: f64,
    ) -> Result<Self> {
        let eval: EvalFn = Arc::new(eval);
        let q = quad::integrate(|x| eval(x), 0.0, 1.0, 1e-12, 1e-14);
        Ok(DensityModel {
            family: Family::Custom { eval, cdf: None },
            beta,
            radius,
            radius_interior: None,
            floor,
            mass: q.value,
        })
    }

    /// Black-box density with a caller-supplied exact CDF. The CDF closure
    /// must satisfy cdf(0) = 0 and be the primitive of `eval`; integrals and
    /// quantiles then avoid quadrature entirely.
    pub fn custom_with_cdf(
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        cdf: impl Fn(f64) -> f64 + Send + Sync + 'static,
        beta: f64,
        radius: f64,
        floor: f64,
    ) -> Result<Self> {
        let mass = cdf(1.0) - cdf(0.0);
        Ok(DensityModel {
            family: Family::Custom {
                eval: Arc::new(eval),
                cdf: Some(Arc::new(cdf)),
            },
            beta,
            radius,
            radius_interior: None,
            floor,
            mass,
        })
    }

    /// Density value at x; zero outside [0,1].
    pub fn eval(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        match &self.family {
            Family::Uniform => 1.0,
            Family::PowerFloor { beta, c } => {
                (x.powf(*beta) + c) / (1.0 / (beta + 1.0) + c)
            }
            Family::Power { beta } => (beta + 1.0) * x.powf(*beta),
            Family::Cosine { a } => 1.0 + a * (2.0 * std::f64::consts::PI * x).cos(),
            Family::PiecewiseLinear { xs, ys, .. } => {
                let i = segment_index(xs, x);
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                ys[i] + t * (ys[i + 1] - ys[i])
            }
            Family::PiecewiseConstant { edges, ys, .. } => {
                let i = segment_index(edges, x);
                ys[i]
            }
            Family::Custom { eval, .. } => eval(x),
        }
    }

    /// ∫ₐᵇ f, clamped to [0,1]; exact for every family that has a closed form.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let a = a.clamp(0.0, 1.0);
        let b = b.clamp(0.0, 1.0);
        if a >= b {
            return 0.0;
        }
        match &self.family {
            Family::Uniform => b - a,
            Family::PowerFloor { beta, c } => {
                let z = 1.0 / (beta + 1.0) + c;
                ((b.powf(beta + 1.0) - a.powf(beta + 1.0)) / (beta + 1.0) + c * (b - a)) / z
            }
            Family::Power { beta } => b.powf(beta + 1.0) - a.powf(beta + 1.0),
            Family::Cosine { a: amp } => {
                let tau = 2.0 * std::f64::consts::PI;
                (b - a) + amp * ((tau * b).sin() - (tau * a).sin()) / tau
            }
            Family::PiecewiseLinear { .. } | Family::PiecewiseConstant { .. } => {
                self.cdf_grid(b) - self.cdf_grid(a)
            }
            Family::Custom { eval, cdf } => match cdf {
                Some(cdf) => cdf(b) - cdf(a),
                None => quad::integrate(|x| eval(x), a, b, 1e-12, 1e-15).value,
            },
        }
    }

    /// CDF at x.
    pub fn cdf(&self, x: f64) -> f64 {
        self.integral(0.0, x)
    }

    /// Actual mass ∫₀¹ f.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Inverse CDF for q in [0, mass]; monotone solve where no closed form exists.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !q.is_finite() || q < 0.0 || q > self.mass * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::config(format!(
                "quantile level {q} outside [0, {}]",
                self.mass
            )));
        }
        let q = q.clamp(0.0, self.mass);
        match &self.family {
            Family::Uniform => Ok(q),
            Family::Power { beta } => Ok(q.powf(1.0 / (beta + 1.0))),
            Family::PiecewiseLinear { xs, ys, cum } => {
                let i = cum_index(cum, q);
                let s = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
                let r = q - cum[i];
                let u = if s.abs() < 1e-14 {
                    if ys[i] > 0.0 { r / ys[i] } else { 0.0 }
                } else {
                    let disc = (ys[i] * ys[i] + 2.0 * s * r).max(0.0).sqrt();
                    if ys[i] + disc > 0.0 {
                        2.0 * r / (ys[i] + disc)
                    } else {
                        0.0
                    }
                };
                Ok((xs[i] + u).min(xs[i + 1]))
            }
            Family::PiecewiseConstant { edges, ys, cum } => {
                let i = cum_index(cum, q);
                let u = if ys[i] > 0.0 { (q - cum[i]) / ys[i] } else { 0.0 };
                Ok((edges[i] + u).min(edges[i + 1]))
            }
            _ => monotone_invert(&|x| self.cdf(x), &|x| self.eval(x), q, 0.0, 1.0),
        }
    }

    /// Grid-backed CDF for the piecewise families.
    fn cdf_grid(&self, x: f64) -> f64 {
        match &self.family {
            Family::PiecewiseLinear { xs, ys, cum } => {
                let i = segment_index(xs, x);
                let u = x - xs[i];
                let s = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
                cum[i] + u * (ys[i] + 0.5 * s * u)
            }
            Family::PiecewiseConstant { edges, ys, cum } => {
                let i = segment_index(edges, x);
                cum[i] + (x - edges[i]) * ys[i]
            }
            _ => unreachable!("cdf_grid is only called for piecewise families"),
        }
    }

    pub fn family_id(&self) -> &'static str {
        match &self.family {
            Family::Uniform => "uniform",
            Family::PowerFloor { .. } => "power_floor",
            Family::Power { .. } => "power",
            Family::Cosine { .. } => "cosine",
            Family::PiecewiseLinear { .. } => "piecewise_linear",
            Family::PiecewiseConstant { .. } => "piecewise_constant",
            Family::Custom { .. } => "custom",
        }
    }

    /// Serializable description; custom densities have none.
    pub fn descriptor(&self) -> Result<Descriptor> {
        let params = match &self.family {
            Family::Uniform => serde_json::json!({}),
            Family::PowerFloor { beta, c } => serde_json::json!({ "beta": beta, "c": c }),
            Family::Power { beta } => serde_json::json!({ "beta": beta }),
            Family::Cosine { a } => serde_json::json!({ "a": a }),
            Family::PiecewiseLinear { xs, ys, .. } => {
                serde_json::json!({ "xs": xs.as_ref(), "ys": ys.as_ref() })
            }
            Family::PiecewiseConstant { edges, ys, .. } => {
                serde_json::json!({ "edges": edges.as_ref(), "ys": ys.as_ref() })
            }
            Family::Custom { .. } => {
                return Err(Error::config(
                    "custom densities have no serializable descriptor",
                ))
            }
        };
        Ok(Descriptor {
            family: self.family_id().to_owned(),
            params,
            beta: self.beta,
            radius: self.radius,
            radius_interior: self.radius_interior,
        })
    }
}

/// Builds a built-in family from its id and shape parameters.
///
/// Smoothness defaults: the shape exponent for the power families, 1
/// otherwise. The class radius defaults to a grid estimate of the full norm
/// with 5% headroom; pass an explicit `R` through [`from_descriptor`] to
/// override either.
pub fn make_family(family_id: &str, params: &serde_json::Value) -> Result<DensityModel> {
    let get = |key: &str| -> Option<f64> { params.get(key).and_then(|v| v.as_f64()) };
    let get_vec = |key: &str| -> Result<Vec<f64>> {
        params
            .get(key)
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_f64()).collect::<Vec<_>>())
            .ok_or_else(|| Error::config(format!("{family_id} needs numeric array {key:?}")))
    };
    match family_id {
        "uniform" => Ok(DensityModel::uniform()),
        "power_floor" => {
            let beta = get("beta").unwrap_or(1.0);
            let c = get("c")
                .ok_or_else(|| Error::config("power_floor needs parameter c"))?;
            DensityModel::power_floor(beta, c)
        }
        "power" => DensityModel::power(get("beta").unwrap_or(1.0)),
        "cosine" => {
            let a = get("a").ok_or_else(|| Error::config("cosine needs parameter a"))?;
            DensityModel::cosine(a)
        }
        "piecewise_linear" => {
            let xs = get_vec("xs")?;
            let ys = get_vec("ys")?;
            let mut model = DensityModel::from_values_linear(xs, ys, 1.0, f64::NAN, true)?;
            model.radius = default_radius(&model)?;
            Ok(model)
        }
        "piecewise_constant" => {
            let edges = get_vec("edges")?;
            let ys = get_vec("ys")?;
            let mut model = DensityModel::from_values_constant(edges, ys, 1.0, f64::NAN, true)?;
            model.radius = default_radius(&model)?;
            Ok(model)
        }
        other => Err(Error::config(format!("unknown family {other:?}"))),
    }
}

/// Rebuilds a model from a descriptor, applying its beta/R overrides.
pub fn from_descriptor(desc: &Descriptor) -> Result<DensityModel> {
    let mut model = make_family(&desc.family, &desc.params)?;
    if desc.beta.is_finite() && desc.beta > 0.0 {
        model.beta = desc.beta;
    }
    if desc.radius.is_finite() && desc.radius > 0.0 {
        model.radius = desc.radius;
    }
    model.radius_interior = desc.radius_interior;
    Ok(model)
}

/// Estimates the class seminorms of f on a dyadic grid and compares the full
/// norm against the declared radius.
///
/// The Hölder seminorm maximizes difference quotients over all grid pairs;
/// for exponents below 1 the sup can sit at well-separated pairs, so no
/// locality cutoff is applied. Flatness ratios treat 0/0 as 0.
pub fn check_class(f: &DensityModel, grid_size: usize) -> Result<ClassReport> {
    if grid_size < 64 {
        return Err(Error::config(format!("grid_size ≥ 64 required, got {grid_size}")));
    }
    let g = grid_size;
    let h = 1.0 / g as f64;
    let values: Vec<f64> = (0..=g).map(|i| f.eval(i as f64 / g as f64)).collect();
    let sup_norm = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // ⌊β⌋ = largest integer strictly below β; ceil(β) − 1 covers integers too.
    let d = (f.beta.ceil() as usize).saturating_sub(1);
    let dvals = finite_difference(&values, d, h);
    let deriv_sup = dvals.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let expo = f.beta - d as f64;
    let mut pow_gap = vec![0.0f64; dvals.len()];
    for (k, p) in pow_gap.iter_mut().enumerate().skip(1) {
        *p = (k as f64 * h).powf(expo);
    }
    let mut holder = 0.0f64;
    for i in 0..dvals.len() {
        for j in (i + 1)..dvals.len() {
            let q = (dvals[j] - dvals[i]).abs() / pow_gap[j - i];
            if q > holder {
                holder = q;
            }
        }
    }

    let mut flatness = 0.0f64;
    let mut order = 1usize;
    while (order as f64) < f.beta {
        let dj = finite_difference(&values, order, h);
        // Difference values sit at offsets of order·h/2; compare against f there.
        let mut inner = 0.0f64;
        for (i, dv) in dj.iter().enumerate() {
            let x = (i as f64 + 0.5 * order as f64) * h;
            let fv = f.eval(x.min(1.0)).abs();
            let num = dv.abs().powf(f.beta);
            let ratio = if num == 0.0 {
                0.0
            } else if fv == 0.0 {
                f64::INFINITY
            } else {
                num / fv.powf(f.beta - order as f64)
            };
            if ratio > inner {
                inner = ratio;
            }
        }
        flatness = flatness.max(inner.powf(1.0 / order as f64));
        order += 1;
    }

    let cbeta_norm = sup_norm + deriv_sup + holder;
    let member_cbeta = cbeta_norm <= f.radius;
    let member_hbeta = member_cbeta && flatness <= f.radius;
    Ok(ClassReport {
        sup_norm,
        deriv_sup,
        holder_seminorm: holder,
        flatness_seminorm: flatness,
        cbeta_norm,
        member_cbeta,
        member_hbeta,
        grid_size,
    })
}

/// Solves g(x) = target for increasing g on [lo, hi] by safeguarded Newton.
pub fn monotone_invert(
    g: &dyn Fn(f64) -> f64,
    dg: &dyn Fn(f64) -> f64,
    target: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let glo = g(lo);
    let ghi = g(hi);
    if target <= glo {
        return Ok(lo);
    }
    if target >= ghi {
        return Ok(hi);
    }
    let (mut a, mut b) = (lo, hi);
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let gx = g(x);
        if gx < target {
            a = x;
        } else {
            b = x;
        }
        if b - a < 1e-15 * (1.0 + x.abs()) {
            return Ok(x);
        }
        let slope = dg(x);
        let step = if slope > 0.0 { (target - gx) / slope } else { 0.0 };
        let newton = x + step;
        x = if step != 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
    }
    Ok(x)
}

/// Full-norm grid estimate with 5% headroom; used when no radius is declared.
fn default_radius(model: &DensityModel) -> Result<f64> {
    let mut probe = model.clone();
    probe.radius = f64::INFINITY;
    let report = check_class(&probe, 1 << 13)?;
    let norm = report.cbeta_norm.max(report.flatness_seminorm);
    if !norm.is_finite() {
        return Err(Error::config(
            "density norm estimate diverges; declare a radius explicitly",
        ));
    }
    Ok(norm * 1.05)
}

/// Repeated forward differences: order-k derivative estimates at staggered points.
fn finite_difference(values: &[f64], order: usize, h: f64) -> Vec<f64> {
    let mut cur = values.to_vec();
    for _ in 0..order {
        cur = cur.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    }
    cur
}

fn check_nodes(xs: &[f64], ys: &[f64], expected_vals: usize) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::config("need at least two nodes"));
    }
    if ys.len() != expected_vals {
        return Err(Error::config(format!(
            "expected {expected_vals} values for {} nodes, got {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs[0] != 0.0 || *xs.last().unwrap() != 1.0 {
        return Err(Error::config("node grid must span [0, 1] exactly"));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("node grid must be strictly increasing"));
    }
    if ys.iter().any(|y| !y.is_finite() || *y < 0.0) {
        return Err(Error::config("density values must be finite and nonnegative"));
    }
    Ok(())
}

/// Index i with xs[i] ≤ x < xs[i+1] (last segment for x = end).
fn segment_index(xs: &[f64], x: f64) -> usize {
    let n = xs.len();
    match xs.partition_point(|v| *v <= x) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    }
}

/// Index i with cum[i] ≤ q ≤ cum[i+1], skipping leading zero-mass cells.
fn cum_index(cum: &[f64], q: f64) -> usize {
    let n = cum.len();
    let p = cum.partition_point(|v| *v < q);
    p.clamp(1, n - 1) - 1
}
