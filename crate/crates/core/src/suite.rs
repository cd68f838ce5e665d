//! The acceptance battery. Each criterion is a [`Criterion`] object; the
//! CLI `suite` command and the `acceptance` test target both run them from
//! [`criteria`].

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builtin;
use crate::curvature::{
    conformal_perturbation, domination_check, scalar_potentials, ConformalData, EndomorphismField,
    OneFormHeatOperator, Potential, RicciDecomposition,
};
use crate::error::{Error, Result};
use crate::geometry::{DiscreteManifold, Edge, MetricRescale, ScalarField};
use crate::heat::{HeatOperator, HeatParams};
use crate::stochastic::{
    estimate, kasminskii_certify, kato_modulus, Functional, KasminskiiParams, Killing, KilledPaths,
    MonteCarloParams, WalkModel,
};
use crate::variation::{
    gradient_l1, measure_pair_apply, polar_decompose, variation_dual, variation_heatflow, DualParams,
    Extrapolation, Schedule,
};
use crate::vecmeasure::{partition_supremum, FiniteVectorMeasure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteParams {
    /// Monte Carlo samples per estimate.
    pub samples: usize,
    pub seed: u64,
    /// Criterion ids to run; empty runs all.
    pub only: Vec<u32>,
    /// Report wall-clock times. Off by default so reports are reproducible.
    pub timings: bool,
    /// `t = c h ratio^k` for the perimeter estimate.
    pub perimeter_c: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 20_240_601,
            only: Vec::new(),
            timings: false,
            perimeter_c: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    /// What `value` measures.
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub details: Vec<String>,
    /// Set when the check fails for a reason that is understood and
    /// recorded; the report still says FAIL.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub known_limitation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_limit_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
}

impl Check {
    fn new(c: &dyn Criterion, metric: &str, value: f64, tolerance: f64) -> Self {
        Self {
            id: c.id(),
            title: c.title().into(),
            passed: value <= tolerance,
            metric: metric.into(),
            value,
            tolerance,
            details: Vec::new(),
            known_limitation: None,
            runtime_limit_seconds: None,
            runtime_seconds: None,
        }
    }

    fn detail(mut self, s: impl Into<String>) -> Self {
        self.details.push(s.into());
        self
    }

    fn also(mut self, ok: bool, s: impl Into<String>) -> Self {
        self.passed &= ok;
        self.details.push(s.into());
        self
    }

    /// One line for logs: `PASS [03] title: metric = value (tol ...)`.
    pub fn line(&self) -> String {
        format!(
            "{} [{:02}] {}: {} = {:.3e} (tol {:.1e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.metric,
            self.value,
            self.tolerance,
            if self.known_limitation.is_some() { " [known limitation]" } else { "" }
        )
    }
}

pub trait Criterion: Send + Sync {
    fn id(&self) -> u32;
    fn title(&self) -> &'static str;
    /// Wall-clock budget, when the criterion has one.
    fn runtime_limit(&self) -> Option<f64> {
        None
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check>;
}

/// Runs one criterion, applying its time budget. Errors turn into failed
/// checks so that a report always has one line per criterion.
pub fn run_criterion(c: &dyn Criterion, p: &SuiteParams) -> Check {
    let start = Instant::now();
    let mut check = c.evaluate(p).unwrap_or_else(|e| Check {
        id: c.id(),
        title: c.title().into(),
        passed: false,
        metric: "error".into(),
        value: f64::NAN,
        tolerance: f64::NAN,
        details: vec![e.to_string()],
        known_limitation: None,
        runtime_limit_seconds: None,
        runtime_seconds: None,
    });
    let secs = start.elapsed().as_secs_f64();
    if let Some(limit) = c.runtime_limit() {
        check.runtime_limit_seconds = Some(limit);
        if secs > limit {
            check.passed = false;
            check.details.push(format!("runtime {secs:.1} s exceeds {limit} s"));
        }
    }
    if p.timings {
        check.runtime_seconds = Some(secs);
    }
    check
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub params: SuiteParams,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub fn run_suite(p: &SuiteParams) -> SuiteReport {
    let checks: Vec<Check> = criteria()
        .iter()
        .filter(|c| p.only.is_empty() || p.only.contains(&c.id()))
        .map(|c| run_criterion(c.as_ref(), p))
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    SuiteReport {
        params: p.clone(),
        checks,
        passed,
    }
}

pub fn criteria() -> &'static [Arc<dyn Criterion>] {
    static LIST: OnceLock<Vec<Arc<dyn Criterion>>> = OnceLock::new();
    LIST.get_or_init(|| {
        vec![
            Arc::new(DualityEquality),
            Arc::new(DualOracle),
            Arc::new(TwoVertexLimit),
            Arc::new(JumpLimit),
            Arc::new(Perimeter),
            Arc::new(LowerBoundEveryTime),
            Arc::new(PolarDecomposition),
            Arc::new(KatoAndKasminskii),
            Arc::new(FeynmanKacOracle),
            Arc::new(Commutation),
            Arc::new(Domination),
            Arc::new(ConformalAlgebra),
            Arc::new(Scaling),
            Arc::new(Isometry),
            Arc::new(LowerSemicontinuity),
        ]
    })
}

pub fn criterion(id: u32) -> Result<Arc<dyn Criterion>> {
    criteria()
        .iter()
        .find(|c| c.id() == id)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no acceptance criterion {id} (have 1..=15)")))
}

/// A manifold and a field used by the criteria that range over the suite.
pub struct SuiteCase {
    pub name: String,
    pub manifold: Arc<DiscreteManifold>,
    pub field: ScalarField,
}

fn builtin_case(manifold: &str, field: &str) -> Result<SuiteCase> {
    let b = builtin::generate_builtin(manifold)?;
    let f = builtin::generate_field(&b, field)?;
    Ok(SuiteCase {
        name: format!("{manifold} {field}"),
        manifold: Arc::new(b.manifold),
        field: f,
    })
}

/// Graph and mesh fields, real and complex, smooth and with jumps.
pub fn suite_cases() -> Result<Vec<SuiteCase>> {
    let mut v = vec![
        builtin_case("two_vertex", "step")?,
        builtin_case("cycle(64)", "step")?,
        builtin_case("cycle(64)", "random(1)")?,
        builtin_case("path(65)", "sinusoid(2)")?,
        builtin_case("flat_torus(16)", "disk_indicator(0.2)")?,
        builtin_case("flat_torus(16)", "random(3)")?,
        builtin_case("parametric_torus(12x8)", "sinusoid(1, 1)")?,
    ];
    let g = builtin::random_graph(10, 2, 3)?;
    v.push(SuiteCase {
        name: "random_graph(10, m=2) random(2)".into(),
        field: builtin::random_field(g.n_vertices(), 2),
        manifold: Arc::new(g),
    });
    Ok(v)
}

fn spectral(m: &Arc<DiscreteManifold>) -> Result<HeatOperator> {
    HeatOperator::build(m.clone(), &HeatParams::spectral())
}

fn mc(p: &SuiteParams, salt: u64) -> MonteCarloParams {
    MonteCarloParams {
        samples: p.samples,
        seed: p.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..MonteCarloParams::default()
    }
}

struct DualityEquality;
impl Criterion for DualityEquality {
    fn id(&self) -> u32 {
        1
    }
    fn title(&self) -> &'static str {
        "dual supremum equals gradient L1 norm"
    }
    fn runtime_limit(&self) -> Option<f64> {
        Some(30.0)
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let mut worst = 0.0f64;
        let mut details = Vec::new();
        for name in ["cycle(64)", "path(65)", "flat_torus(16)"] {
            let m = builtin::generate_builtin(name)?.manifold;
            let errs = (0..50u64)
                .into_par_iter()
                .map(|k| {
                    let f = builtin::random_field(m.n_vertices(), p.seed.wrapping_add(k));
                    let d = variation_dual(&m, &f, &DualParams::default())?;
                    let l = gradient_l1(&m, &f)?;
                    Ok((d.value - l).abs() / (1.0 + l))
                })
                .collect::<Result<Vec<f64>>>()?;
            let w = errs.iter().copied().fold(0.0, f64::max);
            details.push(format!("{name}: max |dual - l1| / (1 + l1) = {w:.2e} over 50 fields"));
            worst = worst.max(w);
        }
        let mut c = Check::new(self, "max relative gap", worst, 1e-8);
        c.details = details;
        Ok(c)
    }
}

/// Every connected labelled graph on 2..=5 vertices, with deterministic
/// random lengths, weights and volumes.
pub fn small_graph_catalog(seed: u64) -> Vec<DiscreteManifold> {
    let mut out = Vec::new();
    for n in 2..=5usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for mask in 1u32..(1 << pairs.len()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ mask as u64);
            let edges: Vec<Edge> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &(tail, head))| Edge {
                    tail,
                    head,
                    length: rng.random_range(0.2..2.0),
                    weight: rng.random_range(0.2..2.0),
                })
                .collect();
            let vol = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
            if let Ok(m) = DiscreteManifold::graph(1, vol, edges) {
                out.push(m);
            }
        }
    }
    out
}

/// `max |<f, d^dagger alpha>|` over the vertices `alpha_e = +-length_e` of
/// the dual ball; exact for real `f`.
pub fn dual_sign_oracle(m: &DiscreteManifold, f: &[f64]) -> Result<f64> {
    let ne = m.edges().len();
    if ne > 20 {
        return Err(Error::InvalidArgument("sign enumeration is limited to 20 edges".into()));
    }
    let fz = ScalarField::from_real(f);
    let mut best = 0.0f64;
    for signs in 0u32..(1 << ne) {
        let vals = m
            .edges()
            .iter()
            .enumerate()
            .map(|(i, e)| Complex64::new(if signs & (1 << i) != 0 { e.length } else { -e.length }, 0.0))
            .collect();
        let a = crate::geometry::OneForm::new(vals, 1);
        let v = m.vertex_inner(&fz, &m.codifferential(&a)?)?;
        best = best.max(v.norm());
    }
    Ok(best)
}

struct DualOracle;
impl Criterion for DualOracle {
    fn id(&self) -> u32 {
        2
    }
    fn title(&self) -> &'static str {
        "dual solver matches brute force on small graphs"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let catalog = small_graph_catalog(p.seed);
        let errs = catalog
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(i as u64));
                let f: Vec<f64> = (0..m.n_vertices()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d = variation_dual(m, &ScalarField::from_real(&f), &DualParams::default())?;
                Ok((d.value - dual_sign_oracle(m, &f)?).abs())
            })
            .collect::<Result<Vec<f64>>>()?;
        let worst = errs.iter().copied().fold(0.0, f64::max);
        Ok(Check::new(self, "max |dual - oracle|", worst, 1e-6)
            .detail(format!("{} connected graphs on 2..=5 vertices, real fields", catalog.len())))
    }
}

struct TwoVertexLimit;
impl Criterion for TwoVertexLimit {
    fn id(&self) -> u32 {
        3
    }
    fn title(&self) -> &'static str {
        "heat-flow variation on the two-vertex graph is exp(-t)"
    }
    fn evaluate(&self, _: &SuiteParams) -> Result<Check> {
        let m = Arc::new(builtin::two_vertex());
        let hop = spectral(&m)?;
        let f = ScalarField::from_real(&[1.0, 0.0]);
        let mut times = vec![1.0, 0.5, 0.1, 0.01];
        while *times.last().unwrap() > 1e-6 {
            times.push(times.last().unwrap() / 2.0);
        }
        let curve = variation_heatflow(&hop, &f, &Schedule::Explicit { times }, Extrapolation::Richardson)?;
        let worst = curve.points[..4]
            .iter()
            .map(|pt| (pt.value - (-pt.t).exp()).abs())
            .fold(0.0, f64::max);
        let lim = (curve.limit - 1.0).abs();
        Ok(Check::new(self, "max |V(t) - exp(-t)| at t in {1, 0.5, 0.1, 0.01}", worst, 1e-10)
            .also(lim <= 1e-6, format!("|limit - 1| = {lim:.2e} (tol 1e-6), limit from t = {:.2e}", curve.points.last().unwrap().t)))
    }
}

struct JumpLimit;
impl Criterion for JumpLimit {
    fn id(&self) -> u32 {
        4
    }
    fn title(&self) -> &'static str {
        "heat-flow limit of an arc indicator on cycle(512) is 2"
    }
    fn evaluate(&self, _: &SuiteParams) -> Result<Check> {
        let c = builtin_case("cycle(512)", "step")?;
        let hop = spectral(&c.manifold)?;
        let h = c.manifold.mesh_size();
        let schedule = Schedule::Geometric {
            t0: None,
            points: 0,
            ratio: 0.5,
            down_to: Some(h * h),
        };
        let curve = variation_heatflow(&hop, &c.field, &schedule, Extrapolation::Richardson)?;
        let rel = (curve.limit - 2.0).abs() / 2.0;
        Ok(Check::new(self, "|limit - 2| / 2", rel, 0.01).detail(format!(
            "limit {:.6} from {} times down to {:.2e}",
            curve.limit,
            curve.points.len(),
            curve.points.last().unwrap().t
        )))
    }
}

struct Perimeter;
impl Criterion for Perimeter {
    fn id(&self) -> u32 {
        5
    }
    fn title(&self) -> &'static str {
        "perimeter of a disk on flat_torus(256) from coupled refinement"
    }
    fn runtime_limit(&self) -> Option<f64> {
        Some(300.0)
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Solver(format!("cannot build a single-thread pool: {e}")))?;
        pool.install(|| {
            let c = builtin_case("flat_torus(256)", "disk_indicator(0.2)")?;
            let hop = HeatOperator::build(c.manifold.clone(), &HeatParams::default())?;
            let schedule = Schedule::Coupled {
                c: p.perimeter_c,
                points: 2,
                ratio: 0.5,
            };
            let curve = variation_heatflow(&hop, &c.field, &schedule, Extrapolation::Richardson)?;
            let want = 2.0 * PI * 0.2;
            let rel = (curve.limit - want).abs() / want;
            let pts: Vec<String> = curve.points.iter().map(|q| format!("V({:.3e}) = {:.6}", q.t, q.value)).collect();
            Ok(Check::new(self, "|estimate - 2 pi r| / (2 pi r)", rel, 0.03)
                .detail(format!("estimate {:.6} vs {want:.6}, heat strategy {}", curve.limit, hop.strategy()))
                .detail(pts.join(", ")))
        })
    }
}

struct LowerBoundEveryTime;
impl Criterion for LowerBoundEveryTime {
    fn id(&self) -> u32 {
        6
    }
    fn title(&self) -> &'static str {
        "Var(f) <= V(t) + 1e-9 at every scheduled t"
    }
    fn evaluate(&self, _: &SuiteParams) -> Result<Check> {
        let mut worst = f64::NEG_INFINITY;
        let mut small_gap = f64::NEG_INFINITY;
        let mut details = Vec::new();
        for c in suite_cases()? {
            let hop = spectral(&c.manifold)?;
            let var = gradient_l1(&c.manifold, &c.field)?;
            let curve = variation_heatflow(&hop, &c.field, &Schedule::default(), Extrapolation::Richardson)?;
            let (t, v) = curve
                .points
                .iter()
                .map(|q| (q.t, var - q.value))
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            worst = worst.max(v);
            let tiny = hop.apply(&c.field, small_time(&hop)?)?;
            let liminf_gap = var - gradient_l1(&c.manifold, &tiny)?;
            small_gap = small_gap.max(liminf_gap);
            details.push(format!(
                "{}: max Var - V(t) = {v:.3e} at t = {t:.2e}; small-time gap Var - V = {liminf_gap:.1e}",
                c.name
            ));
        }
        let mut c = Check::new(self, "max over cases and t of Var(f) - V(t)", worst, 1e-9);
        c.details = details;
        if !c.passed && small_gap <= 1e-9 {
            c.known_limitation = Some(format!(
                "V(t) < Var(f) at positive t (heat smoothing lowers the variation); the bound holds \
                 only as t -> 0, where the largest gap is {small_gap:.1e}"
            ));
        }
        Ok(c)
    }
}

/// A time with `t * lambda_max < 1e-12`.
fn small_time(hop: &HeatOperator) -> Result<f64> {
    let sd = hop
        .spectral()
        .ok_or_else(|| Error::Unsupported("needs the spectral heat strategy".into()))?;
    let top = sd.eigenvalues.iter().copied().fold(0.0, f64::max);
    Ok(if top > 0.0 { 0.5e-12 / top } else { 1e-12 })
}

struct PolarDecomposition;
impl Criterion for PolarDecomposition {
    fn id(&self) -> u32 {
        7
    }
    fn title(&self) -> &'static str {
        "polar decomposition of the derivative measure"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let (mut pair_err, mut mass_err, mut unit_err) = (0.0f64, 0.0f64, 0.0f64);
        for (i, c) in suite_cases()?.iter().enumerate() {
            let m = &c.manifold;
            let nu = polar_decompose(m, &c.field)?;
            let var = gradient_l1(m, &c.field)?;
            mass_err = mass_err.max((nu.total_mass() - var).abs() / (1.0 + var));
            for s in nu.support() {
                unit_err = unit_err.max((m.fiber_norm(s, nu.sigma.site(s)) - 1.0).abs());
            }
            for k in 0..100u64 {
                let a = builtin::random_one_form(m, p.seed.wrapping_add(1000 * i as u64 + k));
                let lhs = measure_pair_apply(m, &nu, &a)?;
                let rhs = m.vertex_inner(&c.field, &m.codifferential(&a)?)?;
                pair_err = pair_err.max((lhs - rhs).norm() / (1.0 + rhs.norm()));
            }
        }
        Ok(Check::new(self, "max relative pairing error", pair_err, 1e-12)
            .also(mass_err <= 1e-12, format!("max |total mass - Var| / (1 + Var) = {mass_err:.2e} (tol 1e-12)"))
            .also(unit_err <= 1e-12, format!("max ||sigma| - 1| on support = {unit_err:.2e} (tol 1e-12)")))
    }
}

struct KatoAndKasminskii;
impl Criterion for KatoAndKasminskii {
    fn id(&self) -> u32 {
        8
    }
    fn title(&self) -> &'static str {
        "Kato modulus and Kas'minskii certificates"
    }
    fn runtime_limit(&self) -> Option<f64> {
        Some(120.0)
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let m = Arc::new(builtin::cycle(16)?);
        let hop = spectral(&m)?;
        let grid = [0.001, 0.01, 0.1, 0.5, 1.0, 2.0];
        let mut kato_err = 0.0f64;
        for cst in [0.5, 3.0] {
            let r = kato_modulus(&hop, &[cst; 16], &grid)?;
            for (t, d) in grid.iter().zip(&r.modulus) {
                kato_err = kato_err.max((d - cst * t).abs());
            }
        }
        let walk = WalkModel::build(&hop, &Killing::default())?;
        let params = KasminskiiParams {
            delta: 2.0,
            test_times: vec![0.5, 1.0, 2.0],
            mc: mc(p, 8),
            ..KasminskiiParams::default()
        };
        let cst = 1.0;
        let flat = kasminskii_certify(&walk, &hop, &[cst; 16], &params)?;
        let s = flat.s;
        let analytic = (cst * s).exp() <= 1.0 / (1.0 - cst * s) && cst * s < 0.5;
        let exact_ok = flat.rows.iter().all(|r| (cst * r.t).exp() <= r.bound);
        let mut spike = vec![0.0; 16];
        spike[0] = 50.0;
        let sp = kasminskii_certify(&walk, &hop, &spike, &params)?;
        let schr = hop.generator_dense() - DMatrix::from_diagonal(&DVector::from_vec(spike.clone()));
        let mut oracle_ok = true;
        let mut oracle = Vec::new();
        for r in &sp.rows {
            let exact = ((&schr * -r.t).exp() * DVector::from_element(16, 1.0)).max();
            oracle_ok &= exact <= r.bound && exact <= r.sup_upper;
            oracle.push(format!("t = {}: {exact:.4e}", r.t));
        }
        let rows: Vec<String> = sp
            .rows
            .iter()
            .map(|r| format!("t = {}: upper {:.4e} <= {:.4e}", r.t, r.sup_upper, r.bound))
            .collect();
        Ok(Check::new(self, "max |D(c, t) - c t|", kato_err, 1e-10)
            .also(
                analytic && exact_ok,
                format!(
                    "constant v = 1: s = {s:.4e}, exp(cs) = {:.6} <= 1/(1 - cs) = {:.6}; delta exp(tC) covers exp(ct): {exact_ok}",
                    (cst * s).exp(),
                    1.0 / (1.0 - cst * s)
                ),
            )
            .also(flat.valid, format!("constant v = 1 certificate by Monte Carlo (n = {}): valid = {}", p.samples, flat.valid))
            .also(sp.rows.iter().all(|r| r.holds), format!("spike 50 on cycle(16): s = {:.3e}, C = {:.4}; {}", sp.s, sp.c, rows.join("; ")))
            .also(oracle_ok, format!("dense oracle sup exp(-t(H - v)) 1 below bound and MC upper: {}", oracle.join("; ")))
            .also(sp.khasminskii.holds, format!(
                "spike: sup E[exp int_0^s v] upper {:.4} <= 1/(1 - D) = {:.4}",
                sp.khasminskii.sup_upper, sp.khasminskii.bound
            )))
    }
}

struct FeynmanKacOracle;
impl Criterion for FeynmanKacOracle {
    fn id(&self) -> u32 {
        9
    }
    fn title(&self) -> &'static str {
        "Feynman-Kac Monte Carlo against the matrix exponential"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let ms = vec![
            builtin::cycle(12)?,
            builtin::path(10)?,
            builtin::random_graph(15, 1, p.seed)?,
            builtin::random_graph(20, 2, p.seed.wrapping_add(1))?,
        ];
        let total: usize = ms.iter().map(|m| m.n_vertices()).sum();
        let t = 0.7;
        let mut misses = 0usize;
        let mut worst = 0.0f64;
        for (i, m) in ms.into_iter().enumerate() {
            let m = Arc::new(m);
            let hop = spectral(&m)?;
            let n = m.n_vertices();
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(100 + i as u64));
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let a = hop.generator_dense() - DMatrix::from_diagonal(&DVector::from_vec(v.clone()));
            let exact = (a * -t).exp() * DVector::from_vec(g.clone());
            let walk = WalkModel::build(&hop, &Killing::default())?;
            let f = Functional {
                potential: &v,
                terminal: Some(&g),
                killed: KilledPaths::Drop,
            };
            let params = mc(p, 9 + i as u64);
            let est = (0..n)
                .into_par_iter()
                .map(|x| estimate(&walk, &f, x, t, &params, total))
                .collect::<Result<Vec<_>>>()?;
            for (e, x) in est.iter().zip(exact.iter()) {
                if !(e.lower <= *x && *x <= e.upper) {
                    misses += 1;
                }
                worst = worst.max((e.mean - x).abs() / x);
            }
        }
        Ok(Check::new(self, "exact values outside the simultaneous 99% intervals", misses as f64, 0.0)
            .detail(format!("{total} starts, t = {t}, n = {}; max relative error of the mean {worst:.2e}", p.samples)))
    }
}

struct Commutation;
impl Criterion for Commutation {
    fn id(&self) -> u32 {
        10
    }
    fn title(&self) -> &'static str {
        "1-form semigroup commutes with d on flat_torus(16)"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let m = Arc::new(builtin::flat_torus(16)?);
        let op = OneFormHeatOperator::build(m.clone(), &Potential::None)?;
        let hop = spectral(&m)?;
        let mut worst = 0.0f64;
        for k in 0..3 {
            let h = ScalarField::from_real(&builtin::random_field(m.n_vertices(), p.seed.wrapping_add(k)).real_parts());
            for t in [0.01, 0.1, 1.0] {
                let a = op.apply(&op.exterior_derivative(&h)?, t)?;
                let b = op.exterior_derivative(&hop.apply(&h, t)?)?;
                worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max));
            }
        }
        Ok(Check::new(self, "max edge |e^{-tH1} dh - d e^{-tH} h|", worst, 1e-10)
            .detail("3 random h, t in {0.01, 0.1, 1}"))
    }
}

struct Domination;
impl Criterion for Domination {
    fn id(&self) -> u32 {
        11
    }
    fn title(&self) -> &'static str {
        "1-form semigroup dominated by the Feynman-Kac majorant on cycle(16)"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let m = Arc::new(builtin::cycle(16)?);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(11));
        let ricci: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..2.0)).collect();
        let dec = RicciDecomposition::from_ricci(&EndomorphismField::scalar(1, &ricci));
        let (_, w2) = scalar_potentials(&dec);
        let v: Vec<f64> = w2.iter().map(|w| -w).collect();
        let op = OneFormHeatOperator::build(m.clone(), &Potential::Scalar(v))?;
        let alpha = builtin::random_field(16, p.seed.wrapping_add(12)).0;
        let mut violations = 0usize;
        let mut c = Check::new(self, "sites above the 99% upper bound", 0.0, 0.0);
        for (k, t) in [0.1, 1.0].into_iter().enumerate() {
            let r = domination_check(&op, &w2, &alpha, t, &mc(p, 110 + k as u64))?;
            violations += r.violations.len();
            let slack = r
                .rows
                .iter()
                .map(|row| row.lhs / row.majorant.upper)
                .fold(0.0, f64::max);
            c = c.detail(format!(
                "t = {t}: {} violations, max lhs / upper = {slack:.4}, V >= -w2: {}",
                r.violations.len(),
                r.potential_dominated
            ));
        }
        c.value = violations as f64;
        c.passed = violations == 0;
        Ok(c)
    }
}

struct ConformalAlgebra;
impl Criterion for ConformalAlgebra {
    fn id(&self) -> u32 {
        12
    }
    fn title(&self) -> &'static str {
        "conformal perturbation algebra"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(12));
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let g = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
            let hs = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-5.0..5.0));
            let hs = (&hs + hs.transpose()) * 0.5;
            let d = ConformalData {
                psi: rng.random_range(-2.0..2.0),
                dpsi: vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                hess: hs.iter().copied().collect(),
                laplacian: rng.random_range(-5.0..5.0),
            };
            let t = conformal_perturbation(2, &g, &d)?;
            worst = worst.max((t - &g * (-d.laplacian)).amax());
        }
        let g3 = DMatrix::identity(3, 3);
        let d3 = ConformalData {
            psi: 0.0,
            dpsi: vec![1.0, 0.0, 0.0],
            hess: vec![0.0; 9],
            laplacian: 0.0,
        };
        let t3 = conformal_perturbation(3, &g3, &d3)?;
        let dp = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let want = &dp * dp.transpose() - g3;
        let e3 = (t3 - want).amax();
        Ok(Check::new(self, "max |T - (-lap psi) g| over 1000 m = 2 inputs", worst, 1e-14)
            .also(e3 <= 1e-14, format!("m = 3, psi = x1: max |T - (dpsi dpsi^T - g)| = {e3:.1e}")))
    }
}

struct Scaling;
impl Criterion for Scaling {
    fn id(&self) -> u32 {
        13
    }
    fn title(&self) -> &'static str {
        "variation scales by c^(m-1) under g -> c^2 g"
    }
    fn evaluate(&self, _: &SuiteParams) -> Result<Check> {
        let mut worst = 0.0f64;
        let mut c = Check::new(self, "max relative scaling error", 0.0, 1e-12);
        for case in suite_cases()? {
            let m = &case.manifold;
            let var = gradient_l1(m, &case.field)?;
            for s in [0.5f64, 2.0] {
                let scaled = m.rescale_metric(&MetricRescale::constant(m.n_vertices(), s.ln()))?;
                let v = gradient_l1(&scaled, &case.field)?;
                let want = s.powi(m.dim() as i32 - 1) * var;
                worst = worst.max((v - want).abs() / (1.0 + want));
            }
        }
        c.value = worst;
        c.passed = worst <= c.tolerance;
        Ok(c.detail("gradient L1 variation on every suite case, c in {0.5, 2}"))
    }
}

struct Isometry;
impl Criterion for Isometry {
    fn id(&self) -> u32 {
        14
    }
    fn title(&self) -> &'static str {
        "complex measures: total variation is kept by the real identification"
    }
    fn evaluate(&self, p: &SuiteParams) -> Result<Check> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(14));
        let mut worst = 0.0f64;
        let mut oracle = 0.0f64;
        let mut checked = 0;
        for k in 0..200 {
            let atoms = rng.random_range(1..=8usize);
            let dim = rng.random_range(1..=3usize);
            let nu = FiniteVectorMeasure::from_complex_atoms(
                dim,
                (0..atoms).map(|j| {
                    let v = (0..dim)
                        .map(|_| Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                        .collect();
                    (2 * j + k % 3, v)
                }),
            )?;
            let tv = nu.total_variation();
            worst = worst.max((tv - nu.complex_to_real().total_variation()).abs() / tv.max(1.0));
            if atoms <= 4 {
                checked += 1;
                oracle = oracle.max((tv - partition_supremum(&nu)?).abs() / tv.max(1.0));
            }
        }
        Ok(Check::new(self, "max |TV - TV_real| / max(1, TV)", worst, 1e-14).also(
            oracle <= 1e-14,
            format!("partition oracle on {checked} measures with <= 4 atoms: max error {oracle:.1e}"),
        ))
    }
}

struct LowerSemicontinuity;
impl Criterion for LowerSemicontinuity {
    fn id(&self) -> u32 {
        15
    }
    fn title(&self) -> &'static str {
        "Var(e^{-t_n H} f) converges to Var(f) from heat-smoothed approximants"
    }
    fn evaluate(&self, _: &SuiteParams) -> Result<Check> {
        let mut lsc = f64::NEG_INFINITY;
        let mut conv = 0.0f64;
        let mut details = Vec::new();
        for c in suite_cases()? {
            let hop = spectral(&c.manifold)?;
            let var = gradient_l1(&c.manifold, &c.field)?;
            let stop = small_time(&hop)?;
            let diam = c.manifold.diameter();
            let mut times = vec![diam * diam / 16.0];
            while *times.last().unwrap() > stop {
                times.push(times.last().unwrap() / 2.0);
            }
            let curve = variation_heatflow(&hop, &c.field, &Schedule::Explicit { times }, Extrapolation::LastValue)?;
            let tail = &curve.points[curve.points.len().saturating_sub(5)..];
            let liminf = tail.iter().map(|q| q.value).fold(f64::INFINITY, f64::min);
            let last = curve.points.last().unwrap();
            lsc = lsc.max(var - liminf);
            let e = (last.value - var).abs() / (1.0 + var);
            conv = conv.max(e);
            details.push(format!(
                "{}: {} approximants down to t = {:.1e}; Var - liminf = {:.1e}; |Var(f_n) - Var| / (1 + Var) = {e:.1e}",
                c.name,
                curve.points.len(),
                last.t,
                var - liminf
            ));
        }
        let mut c = Check::new(self, "max Var(f) - liminf Var(f_n)", lsc, 1e-9)
            .also(conv <= 1e-9, format!("max |Var(f_n) - Var(f)| / (1 + Var) at the last n = {conv:.2e} (tol 1e-9)"));
        c.details.extend(details);
        Ok(c)
    }
}
