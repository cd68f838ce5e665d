//! Variation of complex fields.
//!
//! Three routes to the same number:
//!
//! * `gradient_l1`: `sum_s w_s |df|_s`.
//! * `dual`: `sup |<f, d^dagger alpha>|` over one-forms with `|alpha|_s <= 1`
//!   at every gradient site, by projected ascent.
//! * `heatflow`: `V(t) = sum_s w_s |d e^{-tH} f|_s` along a decreasing time
//!   schedule, extrapolated to `t = 0`.
//!
//! Also here: the polar decomposition `(|Df|, sigma)` of the derivative
//! measure, its pairing with one-forms, and a few BV utilities.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{DiscreteManifold, OneForm, ScalarField};
use crate::heat::{HeatOperator, HeatParams};
use crate::registry::Registry;
use crate::vecmeasure::{Field, FiniteVectorMeasure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dual,
    GradientL1,
    Heatflow,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duality_gap: Option<f64>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariationResult {
    pub value: f64,
    pub method: Method,
    /// Set when the value overflowed, e.g. in refinement studies of rough data.
    pub diverged: bool,
    pub diagnostics: Diagnostics,
    /// Dual maximizer, when the method produces one.
    #[serde(skip)]
    pub maximizer: Option<OneForm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<HeatflowCurve>,
}

impl VariationResult {
    fn new(value: f64, method: Method) -> Self {
        Self {
            value,
            method,
            diverged: !value.is_finite(),
            diagnostics: Diagnostics {
                converged: true,
                ..Diagnostics::default()
            },
            maximizer: None,
            curve: None,
        }
    }
}

/// `sum_s w_s |df|_s`.
pub fn variation_gradient_l1(m: &DiscreteManifold, f: &ScalarField) -> Result<VariationResult> {
    Ok(VariationResult::new(gradient_l1(m, f)?, Method::GradientL1))
}

pub fn gradient_l1(m: &DiscreteManifold, f: &ScalarField) -> Result<f64> {
    let df = m.exterior_derivative(f)?;
    Ok(weighted_norm_sum(m, &df))
}

fn weighted_norm_sum(m: &DiscreteManifold, a: &OneForm) -> f64 {
    (0..m.n_sites())
        .map(|s| m.site_volume(s) * m.fiber_norm(s, a.site(s)))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualParams {
    pub max_iterations: usize,
    /// Stop once `gap <= tolerance * (1 + value)`.
    pub tolerance: f64,
    /// First step, as a multiple of `1 / max_s |df|_s`.
    pub initial_step: f64,
}

impl Default for DualParams {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            tolerance: 1e-10,
            initial_step: 1.0,
        }
    }
}

/// Dual supremum by projected ascent with Barzilai-Borwein steps.
///
/// The objective `Re <f, d^dagger alpha>` is evaluated through the
/// codifferential. Its gradient in the site inner product is `df`, which
/// does not depend on `alpha`, so the Barzilai-Borwein quotient has a
/// vanishing denominator and the step doubles instead. The duality gap is
/// measured against `sum_s w_s |df|_s`, which bounds every feasible value.
/// Running out of iterations is not an error: the best value is returned
/// with `converged = false`.
pub fn variation_dual(m: &DiscreteManifold, f: &ScalarField, p: &DualParams) -> Result<VariationResult> {
    if !(p.tolerance > 0.0) || !(p.initial_step > 0.0) {
        return Err(Error::InvalidArgument(
            "dual solver needs positive tolerance and initial step".into(),
        ));
    }
    let grad = m.exterior_derivative(f)?;
    let bound = weighted_norm_sum(m, &grad);
    let gmax = (0..m.n_sites())
        .map(|s| m.fiber_norm(s, grad.site(s)))
        .fold(0.0, f64::max);
    let k = m.site_components();

    let mut alpha = OneForm::zeros(m.n_sites(), k);
    let mut best = (0.0, alpha.clone());
    let mut gap = bound;
    let mut step = if gmax > 0.0 { p.initial_step / gmax } else { 1.0 };
    let mut iterations = 0;
    while iterations < p.max_iterations && gap > p.tolerance * (1.0 + best.0) {
        iterations += 1;
        let mut next = alpha.clone();
        for s in 0..m.n_sites() {
            let a = next.site_mut(s);
            for (ai, gi) in a.iter_mut().zip(grad.site(s)) {
                *ai += gi * step;
            }
        }
        project_unit_balls(m, &mut next);

        let value = m.vertex_inner(f, &m.codifferential(&next)?)?.norm();
        if value >= best.0 {
            best = (value, next.clone());
        }
        gap = bound - best.0;

        // grad(next) - grad(alpha) = 0 for this linear objective, so the
        // Barzilai-Borwein quotient <s,s>/<s,y> is undefined: double instead.
        step *= 2.0;
        alpha = next;
    }
    let (value, maximizer) = best;
    let mut out = VariationResult::new(value, Method::Dual);
    out.diagnostics.iterations = Some(iterations);
    out.diagnostics.duality_gap = Some(gap);
    out.diagnostics.converged = gap <= p.tolerance * (1.0 + value);
    out.maximizer = Some(maximizer);
    Ok(out)
}

/// Scales every site of `a` back into the closed unit ball of its fiber norm.
pub fn project_unit_balls(m: &DiscreteManifold, a: &mut OneForm) {
    for s in 0..m.n_sites() {
        let n = m.fiber_norm(s, a.site(s));
        if n > 1.0 {
            a.site_mut(s).iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Time schedule for the heat-flow curve. Times must come out positive and
/// strictly decreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `t_k = t0 * ratio^k`. `t0` defaults to `diameter^2 / 16`. With
    /// `down_to` set, points continue until `t` would drop below it and
    /// `points` is ignored.
    Geometric {
        #[serde(default)]
        t0: Option<f64>,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_ratio")]
        ratio: f64,
        #[serde(default)]
        down_to: Option<f64>,
    },
    /// `t_k = c * h * ratio^k` with `h` the mesh size, tying time to the
    /// discretization scale for joint refinement.
    Coupled {
        c: f64,
        #[serde(default = "default_coupled_points")]
        points: usize,
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
    Explicit { times: Vec<f64> },
}

fn default_points() -> usize {
    12
}

fn default_coupled_points() -> usize {
    2
}

fn default_ratio() -> f64 {
    0.5
}

const MAX_SCHEDULE_POINTS: usize = 10_000;

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Geometric {
            t0: None,
            points: default_points(),
            ratio: default_ratio(),
            down_to: None,
        }
    }
}

impl Schedule {
    pub fn times(&self, m: &DiscreteManifold) -> Result<Vec<f64>> {
        let geometric = |t0: f64, ratio: f64, points: usize| -> Result<Vec<f64>> {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "schedule ratio must lie in (0, 1) (got {ratio})"
                )));
            }
            Ok((0..points).map(|k| t0 * ratio.powi(k as i32)).collect())
        };
        let times = match *self {
            Schedule::Geometric {
                t0,
                points,
                ratio,
                down_to,
            } => {
                let t0 = t0.unwrap_or_else(|| m.diameter().powi(2) / 16.0);
                match down_to {
                    Some(floor) => {
                        if !(floor > 0.0) {
                            return Err(Error::InvalidArgument("schedule floor must be > 0".into()));
                        }
                        let mut out = geometric(t0, ratio, 1)?;
                        let mut t = t0 * ratio;
                        while t >= floor * (1.0 - 1e-12) && out.len() < MAX_SCHEDULE_POINTS {
                            out.push(t);
                            t *= ratio;
                        }
                        out
                    }
                    None => geometric(t0, ratio, points)?,
                }
            }
            Schedule::Coupled { c, points, ratio } => geometric(c * m.mesh_size(), ratio, points)?,
            Schedule::Explicit { ref times } => times.clone(),
        };
        validate_schedule(&times)?;
        Ok(times)
    }
}

fn validate_schedule(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("heat-flow schedule is empty".into()));
    }
    if let Some(&t) = times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("schedule times must be positive (got {t})")));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "schedule must be strictly decreasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    LastValue,
    /// Linear in `t` through the two smallest times.
    #[default]
    Richardson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatflowCurve {
    pub points: Vec<CurvePoint>,
    pub last_value: f64,
    pub richardson: f64,
    pub extrapolation: Extrapolation,
    pub limit: f64,
}

impl HeatflowCurve {
    fn from_points(points: Vec<CurvePoint>, extrapolation: Extrapolation) -> Self {
        let n = points.len();
        let last_value = points[n - 1].value;
        let richardson = if n >= 2 {
            let (p1, p2) = (points[n - 2], points[n - 1]);
            (p1.t * p2.value - p2.t * p1.value) / (p1.t - p2.t)
        } else {
            last_value
        };
        let limit = match extrapolation {
            Extrapolation::LastValue => last_value,
            Extrapolation::Richardson => richardson,
        };
        Self {
            points,
            last_value,
            richardson,
            extrapolation,
            limit,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min)
    }
}

/// `V(t) = sum_s w_s |d e^{-tH} f|_s` at every scheduled time, computed in
/// parallel across times.
pub fn variation_heatflow(
    hop: &HeatOperator,
    f: &ScalarField,
    schedule: &Schedule,
    extrapolation: Extrapolation,
) -> Result<HeatflowCurve> {
    let m = hop.manifold();
    check_len("scalar field vertices", m.n_vertices(), f.len())?;
    let times = schedule.times(m)?;
    let points = times
        .par_iter()
        .map(|&t| {
            let u = hop.apply(f, t)?;
            Ok(CurvePoint {
                t,
                value: gradient_l1(m, &u)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatflowCurve::from_points(points, extrapolation))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationParams {
    pub dual: DualParams,
    pub schedule: Schedule,
    pub extrapolation: Extrapolation,
    pub heat: HeatParams,
}

pub trait VariationMethod: Send + Sync {
    fn compute(
        &self,
        m: &Arc<DiscreteManifold>,
        f: &ScalarField,
        p: &VariationParams,
    ) -> Result<VariationResult>;
}

struct DualMethod;
impl VariationMethod for DualMethod {
    fn compute(&self, m: &Arc<DiscreteManifold>, f: &ScalarField, p: &VariationParams) -> Result<VariationResult> {
        variation_dual(m, f, &p.dual)
    }
}

struct GradientL1Method;
impl VariationMethod for GradientL1Method {
    fn compute(&self, m: &Arc<DiscreteManifold>, f: &ScalarField, _: &VariationParams) -> Result<VariationResult> {
        variation_gradient_l1(m, f)
    }
}

struct HeatflowMethod;
impl VariationMethod for HeatflowMethod {
    fn compute(&self, m: &Arc<DiscreteManifold>, f: &ScalarField, p: &VariationParams) -> Result<VariationResult> {
        let hop = HeatOperator::build(m.clone(), &p.heat)?;
        let curve = variation_heatflow(&hop, f, &p.schedule, p.extrapolation)?;
        let mut out = VariationResult::new(curve.limit, Method::Heatflow);
        out.diagnostics.schedule = Some(curve.times());
        out.curve = Some(curve);
        Ok(out)
    }
}

/// Variation methods by name: `dual`, `gradient_l1` (alias `l1`), `heatflow`.
pub fn methods() -> &'static Registry<dyn VariationMethod> {
    static REG: OnceLock<Registry<dyn VariationMethod>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn VariationMethod> = Registry::new("variation method");
        r.register("dual", Arc::new(DualMethod))
            .register("gradient_l1", Arc::new(GradientL1Method))
            .register("heatflow", Arc::new(HeatflowMethod))
            .alias("l1", "gradient_l1");
        r
    })
}

/// The derivative measure of a field: nonnegative site masses and a unit
/// covector field on their support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorMeasure {
    pub mass: Vec<f64>,
    /// Zero on sites without mass.
    pub sigma: OneForm,
}

impl VectorMeasure {
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.mass.len()).filter(|&s| self.mass[s] > 0.0).collect()
    }

    /// Atoms `mass_s * sigma_s` at each supported site, written in
    /// orthonormal fiber coordinates so that the total variation of the
    /// result equals the total mass.
    pub fn to_finite_measure(&self, m: &DiscreteManifold) -> Result<FiniteVectorMeasure> {
        check_len("vector measure sites", m.n_sites(), self.mass.len())?;
        let mut nu = FiniteVectorMeasure::new(m.site_components(), Field::Complex);
        for s in self.support() {
            let scale = match m.mode() {
                crate::geometry::Mode::Graph => 1.0 / m.edges()[s].length,
                crate::geometry::Mode::Mesh => 1.0,
            };
            let atom = self.sigma.site(s).iter().map(|v| v * (scale * self.mass[s])).collect();
            nu.insert(s, atom)?;
        }
        Ok(nu)
    }
}

/// `mass_s = w_s |df|_s` and `sigma = df / |df|` where the mass is positive.
pub fn polar_decompose(m: &DiscreteManifold, f: &ScalarField) -> Result<VectorMeasure> {
    let df = m.exterior_derivative(f)?;
    let k = m.site_components();
    let mut sigma = OneForm::zeros(m.n_sites(), k);
    let mut mass = vec![0.0; m.n_sites()];
    for s in 0..m.n_sites() {
        let n = m.fiber_norm(s, df.site(s));
        if n > 0.0 {
            mass[s] = m.site_volume(s) * n;
            for (o, v) in sigma.site_mut(s).iter_mut().zip(df.site(s)) {
                *o = v / n;
            }
        }
    }
    Ok(VectorMeasure { mass, sigma })
}

/// `sum_s mass_s (sigma_s, alpha_s)` with the fiber Hermitian pairing.
pub fn measure_pair_apply(m: &DiscreteManifold, nu: &VectorMeasure, alpha: &OneForm) -> Result<Complex64> {
    check_len("vector measure sites", m.n_sites(), nu.mass.len())?;
    check_len("one-form sites", m.n_sites(), alpha.n_sites())?;
    check_len("one-form components", m.site_components(), alpha.components())?;
    Ok((0..m.n_sites())
        .filter(|&s| nu.mass[s] > 0.0)
        .map(|s| m.fiber_pairing(s, nu.sigma.site(s), alpha.site(s)) * nu.mass[s])
        .sum())
}

/// `sum_j |f_{j+1} - f_j|` for samples on an ordered 1-D grid.
pub fn pointwise_variation_1d(samples: &[Complex64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pointwise variation needs at least 2 samples (got {})",
            samples.len()
        )));
    }
    Ok(samples.windows(2).map(|w| (w[1] - w[0]).norm()).sum())
}

/// `||f||_1 + Var(f)`.
pub fn bv_norm(m: &DiscreteManifold, f: &ScalarField) -> Result<f64> {
    Ok(m.l1_norm(f) + gradient_l1(m, f)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityLevel {
    pub mesh_size: f64,
    /// `max_s mass_s / w_s`.
    pub max_density: f64,
    pub total_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityProfile {
    pub levels: Vec<DensityLevel>,
    /// Least-squares slope of `log max_density` against `log mesh_size`:
    /// near 0 for absolutely continuous derivatives, near -1 for jumps.
    pub loglog_slope: Option<f64>,
}

pub fn density_profile(family: &[(&DiscreteManifold, &ScalarField)]) -> Result<DensityProfile> {
    if family.is_empty() {
        return Err(Error::InvalidArgument("density profile needs at least one level".into()));
    }
    let levels = family
        .iter()
        .map(|(m, f)| {
            let nu = polar_decompose(m, f)?;
            let max_density = (0..m.n_sites())
                .map(|s| nu.mass[s] / m.site_volume(s))
                .fold(0.0, f64::max);
            Ok(DensityLevel {
                mesh_size: m.mesh_size(),
                max_density,
                total_mass: nu.total_mass(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|l| l.max_density > 0.0)
        .map(|l| (l.mesh_size.ln(), l.max_density.ln()))
        .collect();
    Ok(DensityProfile {
        loglog_slope: least_squares_slope(&pts),
        levels,
    })
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::geometry::Edge;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Brute force over the vertices of the dual box for real `f` on a
    /// graph: the supremum of a linear function over a product of intervals
    /// `[-l_e, l_e]` is attained at a sign pattern. `d^dagger` is assembled
    /// densely from its defining weights.
    fn brute_force_dual(m: &DiscreteManifold, f: &[f64]) -> f64 {
        let n = m.n_vertices();
        let e = m.edges().len();
        let mut dt = DMatrix::<f64>::zeros(n, e);
        for (s, edge) in m.edges().iter().enumerate() {
            let c = edge.weight / (edge.length * edge.length);
            dt[(edge.head, s)] += c / m.volumes()[edge.head];
            dt[(edge.tail, s)] -= c / m.volumes()[edge.tail];
        }
        let mut best = 0.0f64;
        for mask in 0..(1u32 << e) {
            let mut val = 0.0;
            for s in 0..e {
                let a = if mask >> s & 1 == 1 { 1.0 } else { -1.0 } * m.edges()[s].length;
                for x in 0..n {
                    val += m.volumes()[x] * f[x] * dt[(x, s)] * a;
                }
            }
            best = best.max(val.abs());
        }
        best
    }

    #[test]
    fn gradient_l1_examples() {
        let g = builtin::two_vertex();
        let f = ScalarField::from_real(&[1.0, 0.0]);
        assert_eq!(variation_gradient_l1(&g, &f).unwrap().value, 1.0);
        let k = ScalarField::constant(2, c(4.0, 1.0));
        assert_eq!(variation_gradient_l1(&g, &k).unwrap().value, 0.0);

        let cyc = builtin::cycle(40).unwrap();
        let arc: Vec<f64> = (0..40).map(|i| if (7..23).contains(&i) { 1.0 } else { 0.0 }).collect();
        let v = variation_gradient_l1(&cyc, &ScalarField::from_real(&arc)).unwrap().value;
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dual_of_constant_is_zero() {
        let m = builtin::flat_torus(5).unwrap();
        let r = variation_dual(&m, &ScalarField::constant(25, c(1.0, -2.0)), &DualParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.diagnostics.converged);
    }

    #[test]
    fn dual_matches_brute_force_on_path() {
        let m = builtin::path(5).unwrap();
        for seed in 0..10 {
            let f = builtin::random_field(5, seed).real_parts();
            let dual = variation_dual(&m, &ScalarField::from_real(&f), &DualParams::default()).unwrap();
            let oracle = brute_force_dual(&m, &f);
            assert!((dual.value - oracle).abs() < 1e-6, "{} vs {}", dual.value, oracle);
        }
    }

    #[test]
    fn dual_is_phase_invariant() {
        let m = builtin::cycle(12).unwrap();
        let g = ScalarField::from_real(&builtin::random_field(12, 3).real_parts());
        let p = DualParams::default();
        let a = variation_dual(&m, &g, &p).unwrap().value;
        let b = variation_dual(&m, &g.scale(c(0.0, 1.0)), &p).unwrap().value;
        assert!((a - b).abs() < 1e-10 * (1.0 + a));
    }

    #[test]
    fn dual_maximizer_is_feasible() {
        let m = builtin::flat_torus(6).unwrap();
        let f = builtin::random_field(36, 9);
        let r = variation_dual(&m, &f, &DualParams::default()).unwrap();
        let alpha = r.maximizer.unwrap();
        assert!(m.site_norm(&alpha).unwrap().iter().all(|&n| n <= 1.0 + 1e-12));
        let l1 = variation_gradient_l1(&m, &f).unwrap().value;
        assert!((r.value - l1).abs() <= 1e-8 * (1.0 + l1));
    }

    #[test]
    fn dual_reports_non_convergence() {
        let m = builtin::cycle(16).unwrap();
        let f = builtin::random_field(16, 1);
        let p = DualParams {
            max_iterations: 1,
            initial_step: 1e-6,
            ..DualParams::default()
        };
        let r = variation_dual(&m, &f, &p).unwrap();
        assert!(!r.diagnostics.converged);
        assert_eq!(r.diagnostics.iterations, Some(1));
    }

    #[test]
    fn heatflow_two_vertex_closed_form() {
        let m = Arc::new(builtin::two_vertex());
        let hop = HeatOperator::build(m, &HeatParams::spectral()).unwrap();
        let f = ScalarField::from_real(&[1.0, 0.0]);
        let sched = Schedule::Explicit {
            times: vec![1.0, 0.5, 0.1, 0.01],
        };
        let curve = variation_heatflow(&hop, &f, &sched, Extrapolation::Richardson).unwrap();
        for p in &curve.points {
            assert!((p.value - (-p.t).exp()).abs() < 1e-12);
        }
        let (a, b) = ((-0.1f64).exp(), (-0.01f64).exp());
        assert!((curve.limit - (0.1 * b - 0.01 * a) / 0.09).abs() < 1e-12);
        assert!((curve.limit - 1.0).abs() < 1e-3);
        assert_eq!(curve.last_value, (-0.01f64).exp());
    }

    #[test]
    fn heatflow_of_constant_is_zero() {
        let m = Arc::new(builtin::cycle(8).unwrap());
        let hop = HeatOperator::build(m, &HeatParams::spectral()).unwrap();
        let f = ScalarField::constant(8, c(2.0, 0.0));
        let curve = variation_heatflow(&hop, &f, &Schedule::default(), Extrapolation::LastValue).unwrap();
        assert_eq!(curve.points.len(), 12);
        assert!(curve.points.iter().all(|p| p.value < 1e-12));
    }

    #[test]
    fn schedules() {
        let m = builtin::cycle(512).unwrap();
        let h = 1.0 / 512.0;
        let t = Schedule::Geometric {
            t0: None,
            points: 0,
            ratio: 0.5,
            down_to: Some(h * h),
        }
        .times(&m)
        .unwrap();
        assert_eq!(t[0], 0.25 / 16.0);
        assert_eq!(*t.last().unwrap(), h * h);
        assert_eq!(t.len(), 13);
        let t = Schedule::Coupled {
            c: 2.0,
            points: 2,
            ratio: 0.5,
        }
        .times(&m)
        .unwrap();
        assert_eq!(t, vec![2.0 * h, h]);
        assert!(Schedule::Explicit { times: vec![] }.times(&m).is_err());
        assert!(Schedule::Explicit { times: vec![0.1, 0.2] }.times(&m).is_err());
        assert!(Schedule::Explicit { times: vec![0.1, -0.2] }.times(&m).is_err());
    }

    #[test]
    fn schedule_json_round_trip() {
        let s: Schedule = serde_json::from_str(r#"{"kind":"coupled","c":0.5}"#).unwrap();
        assert_eq!(
            s,
            Schedule::Coupled {
                c: 0.5,
                points: 2,
                ratio: 0.5
            }
        );
        let back: Schedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn registry_methods_agree() {
        let m = Arc::new(builtin::cycle(32).unwrap());
        let f = builtin::random_field(32, 4);
        let p = VariationParams::default();
        let l1 = methods().get("l1").unwrap().compute(&m, &f, &p).unwrap();
        let dual = methods().get("dual").unwrap().compute(&m, &f, &p).unwrap();
        assert_eq!(l1.method, Method::GradientL1);
        assert!((l1.value - dual.value).abs() < 1e-8 * (1.0 + l1.value));
        let hf = methods().get("heatflow").unwrap().compute(&m, &f, &p).unwrap();
        assert!(hf.curve.is_some() && hf.value > 0.0);
        assert!(methods().get("newton").is_err());
    }

    #[test]
    fn polar_two_vertex() {
        let g = builtin::two_vertex();
        let nu = polar_decompose(&g, &ScalarField::from_real(&[1.0, 0.0])).unwrap();
        assert_eq!(nu.mass, vec![1.0]);
        assert_eq!(nu.sigma.values(), &[c(-1.0, 0.0)]);
        let nu0 = polar_decompose(&g, &ScalarField::constant(2, c(1.0, 1.0))).unwrap();
        assert!(nu0.support().is_empty());
    }

    #[test]
    fn polar_reconstructs_pairing() {
        for m in [
            builtin::random_graph(10, 1, 5).unwrap(),
            builtin::flat_torus(5).unwrap(),
        ] {
            let f = builtin::random_field(m.n_vertices(), 8);
            let nu = polar_decompose(&m, &f).unwrap();
            let var = variation_gradient_l1(&m, &f).unwrap().value;
            assert!((nu.total_mass() - var).abs() < 1e-12);
            for seed in 0..100 {
                let alpha = builtin::random_one_form(&m, seed);
                let lhs = m.vertex_inner(&f, &m.codifferential(&alpha).unwrap()).unwrap();
                let rhs = measure_pair_apply(&m, &nu, &alpha).unwrap();
                assert!((lhs - rhs).norm() < 1e-12 * (1.0 + lhs.norm()));
            }
            let own = measure_pair_apply(&m, &nu, &nu.sigma).unwrap();
            assert!((own.re - nu.total_mass()).abs() < 1e-12 && own.im.abs() < 1e-12);
            let tv = nu.to_finite_measure(&m).unwrap().total_variation();
            assert!((tv - var).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_1d() {
        let v = |xs: &[f64]| pointwise_variation_1d(&ScalarField::from_real(xs).0).unwrap();
        assert_eq!(v(&[0.0, 1.0, 0.0]), 2.0);
        assert_eq!(v(&[-1.0, 0.5, 0.5, 3.0]), 4.0);
        assert!(pointwise_variation_1d(&[c(1.0, 0.0)]).is_err());
        let m = builtin::path_uniform(9, 1.0).unwrap();
        let f = builtin::random_field(9, 2);
        let a = pointwise_variation_1d(&f.0).unwrap();
        let b = variation_gradient_l1(&m, &f).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bv_norm_of_constant() {
        let m = builtin::flat_torus(4).unwrap();
        let n = bv_norm(&m, &ScalarField::constant(16, c(3.0, 4.0))).unwrap();
        assert!((n - 5.0).abs() < 1e-12);
    }

    #[test]
    fn density_profile_separates_smooth_and_jump() {
        let levels = [32usize, 64, 128, 256];
        let ms: Vec<_> = levels.iter().map(|&n| builtin::cycle(n).unwrap()).collect();
        let smooth: Vec<_> = levels
            .iter()
            .map(|&n| {
                let xs: Vec<f64> = (0..n)
                    .map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
                    .collect();
                ScalarField::from_real(&xs)
            })
            .collect();
        let step: Vec<_> = levels
            .iter()
            .map(|&n| ScalarField::from_real(&(0..n).map(|i| (2 * i < n) as u8 as f64).collect::<Vec<_>>()))
            .collect();
        let sp_fam: Vec<_> = ms.iter().zip(&smooth).collect();
        let jp_fam: Vec<_> = ms.iter().zip(&step).collect();
        let sp = density_profile(&sp_fam).unwrap();
        assert!(sp.levels.iter().all(|l| l.max_density <= 2.0 * std::f64::consts::PI + 1e-9));
        assert!(sp.loglog_slope.unwrap().abs() < 0.01);
        let jp = density_profile(&jp_fam).unwrap();
        assert!((jp.loglog_slope.unwrap() + 1.0).abs() < 1e-9);
        assert!(density_profile(&[]).is_err());
    }

    #[test]
    fn mesh_mode_dual_agrees() {
        let (m, _) = builtin::parametric_torus(8, 6, 2.0).unwrap();
        let f = builtin::random_field(m.n_vertices(), 12);
        let l1 = variation_gradient_l1(&m, &f).unwrap().value;
        let d = variation_dual(&m, &f, &DualParams::default()).unwrap().value;
        assert!((l1 - d).abs() <= 1e-8 * (1.0 + l1));
    }

    #[test]
    fn lower_semicontinuity_on_oscillating_sequence() {
        // f_n = f + sin(n x) / n converges to f in L1 while its variation stays
        // bounded below by Var(f).
        let m = builtin::cycle(256).unwrap();
        let f: Vec<f64> = (0..256).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect();
        let var = variation_gradient_l1(&m, &ScalarField::from_real(&f)).unwrap().value;
        for n in [4, 16, 64] {
            let fnv: Vec<f64> = (0..256)
                .map(|i| f[i] + (2.0 * std::f64::consts::PI * (n * i) as f64 / 256.0).sin() / n as f64)
                .collect();
            let vn = variation_gradient_l1(&m, &ScalarField::from_real(&fnv)).unwrap().value;
            assert!(var <= vn + 1e-9);
        }
    }

    fn graph_strategy() -> impl Strategy<Value = (DiscreteManifold, ScalarField)> {
        (3usize..12, any::<u64>()).prop_map(|(n, seed)| {
            let m = builtin::random_graph(n, 1, seed).unwrap();
            let f = builtin::random_field(n, seed ^ 0x5bd1);
            (m, f)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn duality_equality((m, f) in graph_strategy()) {
            let l1 = variation_gradient_l1(&m, &f).unwrap().value;
            let d = variation_dual(&m, &f, &DualParams::default()).unwrap();
            prop_assert!(d.diagnostics.converged);
            prop_assert!((l1 - d.value).abs() <= 1e-8 * (1.0 + l1));
        }

        #[test]
        fn phase_invariance((m, f) in graph_strategy(), theta in 0.0..std::f64::consts::TAU) {
            let a = variation_gradient_l1(&m, &f).unwrap().value;
            let b = variation_gradient_l1(&m, &f.scale(Complex64::from_polar(1.0, theta))).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }

        #[test]
        fn pairing_bound((m, f) in graph_strategy(), seed in any::<u64>()) {
            let nu = polar_decompose(&m, &f).unwrap();
            let alpha = builtin::random_one_form(&m, seed);
            let sup = m.site_norm(&alpha).unwrap().into_iter().fold(0.0, f64::max);
            let v = measure_pair_apply(&m, &nu, &alpha).unwrap();
            prop_assert!(v.norm() <= nu.total_mass() * sup * (1.0 + 1e-12));
        }

        #[test]
        fn sigma_is_unit_on_support((m, f) in graph_strategy()) {
            let nu = polar_decompose(&m, &f).unwrap();
            for s in nu.support() {
                prop_assert!((m.fiber_norm(s, nu.sigma.site(s)) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn bv_norm_is_l1_plus_gradient((m, f) in graph_strategy()) {
            let df = m.exterior_derivative(&f).unwrap();
            let sn = m.site_norm(&df).unwrap();
            let grad: f64 = sn.iter().enumerate().map(|(s, n)| n * m.site_volume(s)).sum();
            prop_assert!((bv_norm(&m, &f).unwrap() - m.l1_norm(&f) - grad).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_edge_variation() {
        let m = DiscreteManifold::graph(
            1,
            vec![1.0, 1.0],
            vec![Edge {
                tail: 0,
                head: 1,
                length: 0.5,
                weight: 3.0,
            }],
        )
        .unwrap();
        let v = variation_gradient_l1(&m, &ScalarField::from_real(&[0.0, 1.0])).unwrap().value;
        assert!((v - 6.0).abs() < 1e-14);
    }
}
