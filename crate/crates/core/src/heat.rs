//! The scalar heat semigroup `e^{-tH}` with `H = (1/2) d^dagger d`.
//!
//! Writing `d^dagger d = Vol^{-1} L` with `L` the symmetric (graph or
//! piecewise-linear) Laplacian, the generator is `H = Vol^{-1} K` with
//! `K = L / 2`. Two interchangeable strategies propagate fields:
//!
//! * `spectral`: dense eigenpairs of `Vol^{-1/2} K Vol^{-1/2}`, giving exact
//!   semigroup laws and kernel rows. Limited to a configurable vertex count.
//! * `crank_nicolson` (alias `implicit_stepper`): `n` Crank-Nicolson steps of
//!   size `t/n`, the first `rannacher_steps` of them each replaced by two
//!   backward-Euler half steps to damp the stiff modes of rough data. Every
//!   step solves `(Vol + theta tau K) u' = (Vol - (1 - theta) tau K) u` by
//!   Jacobi-preconditioned conjugate gradients.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{DiscreteManifold, Mode, ScalarField};
use crate::registry::Registry;
use crate::sparse::{conjugate_gradient, CsrMatrix};

/// Entries below this are printed as this value in reports; computations
/// always use the raw kernel.
pub const KERNEL_REPORT_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatParams {
    /// `auto`, `spectral`, `crank_nicolson` or `implicit_stepper`.
    pub strategy: String,
    /// `auto` picks `spectral` up to this many vertices.
    pub spectral_max_vertices: usize,
    /// Crank-Nicolson steps per application.
    pub steps: usize,
    pub rannacher_steps: usize,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self {
            strategy: "auto".into(),
            spectral_max_vertices: 3000,
            steps: 64,
            rannacher_steps: 2,
            cg_tolerance: 1e-13,
            cg_max_iterations: 20_000,
        }
    }
}

impl HeatParams {
    pub fn spectral() -> Self {
        Self {
            strategy: "spectral".into(),
            ..Self::default()
        }
    }

    pub fn stepper(steps: usize) -> Self {
        Self {
            strategy: "crank_nicolson".into(),
            steps,
            ..Self::default()
        }
    }
}

/// Builds a propagator for one manifold.
pub trait HeatStrategy: Send + Sync {
    fn build(
        &self,
        manifold: &DiscreteManifold,
        stiffness: &CsrMatrix,
        params: &HeatParams,
    ) -> Result<Box<dyn HeatPropagator>>;
}

/// Applies `e^{-tH}` to real vectors.
pub trait HeatPropagator: Send + Sync {
    fn name(&self) -> &'static str;
    fn propagate(&self, f: &[f64], t: f64) -> Result<Vec<f64>>;
    fn spectral(&self) -> Option<&SpectralData> {
        None
    }
}

pub fn strategies() -> &'static Registry<dyn HeatStrategy> {
    static REG: OnceLock<Registry<dyn HeatStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn HeatStrategy> = Registry::new("heat strategy");
        r.register("spectral", Arc::new(SpectralStrategy))
            .register("crank_nicolson", Arc::new(CrankNicolsonStrategy))
            .alias("implicit_stepper", "crank_nicolson");
        r
    })
}

/// The symmetric matrix `L` with `d^dagger d = Vol^{-1} L`.
pub fn laplacian_matrix(m: &DiscreteManifold) -> CsrMatrix {
    let n = m.n_vertices();
    let mut t = Vec::new();
    match m.mode() {
        Mode::Graph => {
            for e in m.edges() {
                let c = e.weight / (e.length * e.length);
                t.push((e.tail, e.tail, c));
                t.push((e.head, e.head, c));
                t.push((e.tail, e.head, -c));
                t.push((e.head, e.tail, -c));
            }
        }
        Mode::Mesh => {
            for tri in m.triangles() {
                let g = tri.hat_gradients();
                for a in 0..3 {
                    for b in 0..3 {
                        let v = tri.weight * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                        t.push((tri.vertices[a], tri.vertices[b], v));
                    }
                }
            }
        }
    }
    for i in 0..n {
        t.push((i, i, 0.0));
    }
    CsrMatrix::from_triplets(n, t)
}

/// Eigenpairs of `H`, orthonormal in the volume-weighted inner product.
#[derive(Clone, Debug)]
pub struct SpectralData {
    /// Ascending; `eigenvalues[0] == 0`.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenfield `phi_k`.
    pub eigenfields: DMatrix<f64>,
    vol: Vec<f64>,
}

impl SpectralData {
    pub fn compute(vol: &[f64], stiffness: &CsrMatrix) -> Result<Self> {
        let n = vol.len();
        let isq: Vec<f64> = vol.iter().map(|v| 1.0 / v.sqrt()).collect();
        let mut s = stiffness.to_dense();
        for i in 0..n {
            for j in 0..n {
                s[(i, j)] *= isq[i] * isq[j];
            }
        }
        let s = (&s + s.transpose()) * 0.5;
        let eig = SymmetricEigen::try_new(s, f64::EPSILON, 0)
            .ok_or_else(|| Error::Solver("symmetric eigensolver did not converge".into()))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut eigenvalues = Vec::with_capacity(n);
        let mut eigenfields = DMatrix::zeros(n, n);
        let total: f64 = vol.iter().sum();
        for (k, &src) in order.iter().enumerate() {
            if k == 0 {
                // Connected and closed: the bottom mode is the constant.
                eigenvalues.push(0.0);
                for i in 0..n {
                    eigenfields[(i, 0)] = 1.0 / total.sqrt();
                }
                continue;
            }
            eigenvalues.push(eig.eigenvalues[src].max(0.0));
            for i in 0..n {
                eigenfields[(i, k)] = eig.eigenvectors[(i, src)] * isq[i];
            }
        }
        Ok(Self {
            eigenvalues,
            eigenfields,
            vol: vol.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `sum_k g(lambda_k) phi_k <phi_k, f>`.
    pub fn apply_function(&self, f: &[f64], g: impl Fn(f64) -> f64) -> Vec<f64> {
        let weighted = DVector::from_iterator(f.len(), f.iter().zip(&self.vol).map(|(a, v)| a * v));
        let mut coef = self.eigenfields.tr_mul(&weighted);
        for (c, &l) in coef.iter_mut().zip(&self.eigenvalues) {
            *c *= g(l);
        }
        (&self.eigenfields * coef).iter().copied().collect()
    }

    /// `x -> sum_k g(lambda_k) phi_k(x) phi_k(y)` for fixed `x`.
    pub fn kernel_row_with(&self, x: usize, g: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.len();
        let scaled = DVector::from_iterator(
            n,
            (0..n).map(|k| g(self.eigenvalues[k]) * self.eigenfields[(x, k)]),
        );
        (&self.eigenfields * scaled).iter().copied().collect()
    }

    pub fn kernel_diagonal(&self, t: f64) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|x| {
                (0..n)
                    .map(|k| (-self.eigenvalues[k] * t).exp() * self.eigenfields[(x, k)].powi(2))
                    .sum()
            })
            .collect()
    }
}

struct SpectralStrategy;

struct SpectralPropagator(SpectralData);

impl HeatStrategy for SpectralStrategy {
    fn build(
        &self,
        m: &DiscreteManifold,
        k: &CsrMatrix,
        params: &HeatParams,
    ) -> Result<Box<dyn HeatPropagator>> {
        if m.n_vertices() > params.spectral_max_vertices {
            return Err(Error::Unsupported(format!(
                "spectral strategy limited to {} vertices (manifold has {})",
                params.spectral_max_vertices,
                m.n_vertices()
            )));
        }
        Ok(Box::new(SpectralPropagator(SpectralData::compute(
            m.volumes(),
            k,
        )?)))
    }
}

impl HeatPropagator for SpectralPropagator {
    fn name(&self) -> &'static str {
        "spectral"
    }

    fn propagate(&self, f: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.0.apply_function(f, |l| (-l * t).exp()))
    }

    fn spectral(&self) -> Option<&SpectralData> {
        Some(&self.0)
    }
}

struct CrankNicolsonStrategy;

struct CrankNicolson {
    vol: Vec<f64>,
    stiffness: CsrMatrix,
    steps: usize,
    rannacher: usize,
    tol: f64,
    max_iter: usize,
}

impl HeatStrategy for CrankNicolsonStrategy {
    fn build(
        &self,
        m: &DiscreteManifold,
        k: &CsrMatrix,
        params: &HeatParams,
    ) -> Result<Box<dyn HeatPropagator>> {
        if params.steps == 0 {
            return Err(Error::InvalidArgument("step count must be positive".into()));
        }
        Ok(Box::new(CrankNicolson {
            vol: m.volumes().to_vec(),
            stiffness: k.clone(),
            steps: params.steps,
            rannacher: params.rannacher_steps.min(params.steps),
            tol: params.cg_tolerance,
            max_iter: params.cg_max_iterations,
        }))
    }
}

impl CrankNicolson {
    /// One theta-step of size `tau`.
    fn step(&self, u: &[f64], tau: f64, theta: f64) -> Result<Vec<f64>> {
        let n = u.len();
        let mut ku = vec![0.0; n];
        self.stiffness.matvec(u, &mut ku);
        let rhs: Vec<f64> = (0..n)
            .map(|i| self.vol[i] * u[i] - (1.0 - theta) * tau * ku[i])
            .collect();
        let a = self.stiffness.shifted(&self.vol, theta * tau);
        let mut x = u.to_vec();
        conjugate_gradient(&a, &rhs, &mut x, self.tol, self.max_iter)?;
        Ok(x)
    }
}

impl HeatPropagator for CrankNicolson {
    fn name(&self) -> &'static str {
        "crank_nicolson"
    }

    fn propagate(&self, f: &[f64], t: f64) -> Result<Vec<f64>> {
        let tau = t / self.steps as f64;
        let mut u = f.to_vec();
        for s in 0..self.steps {
            if s < self.rannacher {
                u = self.step(&u, tau / 2.0, 1.0)?;
                u = self.step(&u, tau / 2.0, 1.0)?;
            } else {
                u = self.step(&u, tau, 0.5)?;
            }
        }
        Ok(u)
    }
}

/// A prepared solver for `e^{-tH}` on one manifold. Immutable; all methods
/// take `&self` and may be called concurrently.
pub struct HeatOperator {
    manifold: Arc<DiscreteManifold>,
    stiffness: CsrMatrix,
    propagator: Box<dyn HeatPropagator>,
}

impl std::fmt::Debug for HeatOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatOperator")
            .field("strategy", &self.propagator.name())
            .field("vertices", &self.manifold.n_vertices())
            .finish()
    }
}

impl HeatOperator {
    pub fn build(manifold: Arc<DiscreteManifold>, params: &HeatParams) -> Result<Self> {
        let name = match params.strategy.as_str() {
            "auto" if manifold.n_vertices() <= params.spectral_max_vertices => "spectral",
            "auto" => "crank_nicolson",
            other => other,
        };
        let strategy = strategies().get(name)?;
        let stiffness = laplacian_matrix(&manifold).scaled(0.5);
        let propagator = strategy.build(&manifold, &stiffness, params)?;
        Ok(Self {
            manifold,
            stiffness,
            propagator,
        })
    }

    pub fn manifold(&self) -> &Arc<DiscreteManifold> {
        &self.manifold
    }

    pub fn strategy(&self) -> &'static str {
        self.propagator.name()
    }

    /// `K` with `H = Vol^{-1} K`.
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Entry `H_{xy} = K_{xy} / vol_x`.
    pub fn generator_entry(&self, x: usize, y: usize) -> f64 {
        self.stiffness.get(x, y) / self.manifold.volumes()[x]
    }

    /// Dense `H`.
    pub fn generator_dense(&self) -> DMatrix<f64> {
        let mut h = self.stiffness.to_dense();
        for (i, v) in self.manifold.volumes().iter().enumerate() {
            for j in 0..h.ncols() {
                h[(i, j)] /= v;
            }
        }
        h
    }

    pub fn spectral(&self) -> Option<&SpectralData> {
        self.propagator.spectral()
    }

    fn require_spectral(&self, what: &str) -> Result<&SpectralData> {
        self.spectral().ok_or_else(|| {
            Error::Unsupported(format!(
                "{what} requires the spectral heat strategy (have {})",
                self.strategy()
            ))
        })
    }

    /// `e^{-tH} f`; `t = 0` returns `f` unchanged.
    pub fn apply(&self, f: &ScalarField, t: f64) -> Result<ScalarField> {
        check_len("scalar field vertices", self.manifold.n_vertices(), f.len())?;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("time must be >= 0 (got {t})")));
        }
        if t == 0.0 {
            return Ok(f.clone());
        }
        let re = f.real_parts();
        let im = f.imag_parts();
        let has_im = im.iter().any(|&v| v != 0.0);
        let (re, im) = if has_im {
            let (a, b) = rayon::join(
                || self.propagator.propagate(&re, t),
                || self.propagator.propagate(&im, t),
            );
            (a?, b?)
        } else {
            (self.propagator.propagate(&re, t)?, vec![0.0; re.len()])
        };
        Ok(ScalarField::from_parts(&re, &im))
    }

    /// Row `y -> p(t, x, y)` of the heat kernel, so that
    /// `(e^{-tH} f)(x) = sum_y p(t,x,y) f(y) vol_y`.
    pub fn kernel_row(&self, t: f64, x: usize) -> Result<Vec<f64>> {
        let sd = self.require_spectral("heat kernel rows")?;
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("time must be > 0 (got {t})")));
        }
        if x >= self.manifold.n_vertices() {
            return Err(Error::InvalidArgument(format!("vertex {x} out of range")));
        }
        Ok(sd.kernel_row_with(x, |l| (-l * t).exp()))
    }

    pub fn kernel_bound_check(&self, t_grid: &[f64], bound: f64) -> Result<KernelBoundReport> {
        let sd = self.require_spectral("heat kernel bound check")?;
        let m = self.manifold.dim() as f64;
        let h = self.manifold.mesh_size();
        let mut rows = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("time must be > 0 (got {t})")));
            }
            let diag = sd.kernel_diagonal(t);
            let (argmax, sup) = diag
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            rows.push(KernelBoundRow {
                t,
                sup_scaled_diagonal: sup * t.powf(m / 2.0),
                argmax,
                sub_mesh: t < h * h,
            });
        }
        let resolved_ok = rows
            .iter()
            .filter(|r| !r.sub_mesh)
            .all(|r| r.sup_scaled_diagonal <= bound);
        Ok(KernelBoundReport {
            bound,
            dimension: self.manifold.dim(),
            mesh_size: h,
            any_sub_mesh: rows.iter().any(|r| r.sub_mesh),
            within_bound: resolved_ok,
            rows,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelBoundRow {
    pub t: f64,
    /// `sup_x p(t,x,x) t^{m/2}`.
    pub sup_scaled_diagonal: f64,
    pub argmax: usize,
    /// `t < h^2`: the kernel no longer resolves the geometry.
    pub sub_mesh: bool,
}

/// Empirical check of `p(t,x,x) <= C t^{-m/2}` over a time grid.
#[derive(Clone, Debug, Serialize)]
pub struct KernelBoundReport {
    pub bound: f64,
    pub dimension: usize,
    pub mesh_size: f64,
    pub rows: Vec<KernelBoundRow>,
    pub any_sub_mesh: bool,
    /// Whether every row with `t >= h^2` satisfies the bound.
    pub within_bound: bool,
}
