//! Ricci-type endomorphism fields, the conformal perturbation formula and
//! the heat semigroup on 1-forms.
//!
//! 1-forms here are edge cochains. In graph mode those are the usual edge
//! values. In mesh mode the edge complex `d0: C^0 -> C^1`, `d1: C^1 -> C^2`
//! carries Whitney mass matrices, scaled so that `d0^T M1 d0` is the same
//! stiffness the scalar heat operator uses.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{DiscreteManifold, Mode, ScalarField};
use crate::stochastic::{
    below_bound, estimate, kasminskii_certify, Estimate, Functional, KasminskiiCertificate, KasminskiiParams,
    Killing, KilledPaths, MonteCarloParams, WalkModel,
};

const HERMITIAN_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

/// A Hermitian `dim x dim` matrix per point.
#[derive(Clone, Debug, PartialEq)]
pub struct EndomorphismField {
    dim: usize,
    mats: Vec<DMatrix<Complex64>>,
}

impl EndomorphismField {
    pub fn new(dim: usize, mats: Vec<DMatrix<Complex64>>) -> Result<Self> {
        for (x, m) in mats.iter().enumerate() {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Validation(format!(
                    "endomorphism at point {x} is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::Validation(format!("endomorphism at point {x} is not finite")));
            }
            let skew = hermitian_defect(m);
            if skew > HERMITIAN_TOL * (1.0 + cmax(m)) {
                return Err(Error::Validation(format!(
                    "endomorphism at point {x} is not Hermitian (|R - R*| = {skew:e})"
                )));
            }
        }
        Ok(Self { dim, mats })
    }

    pub fn from_real(dim: usize, mats: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(dim, mats.into_iter().map(|m| m.map(|v| Complex64::new(v, 0.0))).collect())
    }

    /// `values[x] * id` at every point.
    pub fn scalar(dim: usize, values: &[f64]) -> Self {
        let mats = values
            .iter()
            .map(|&v| DMatrix::identity(dim, dim) * Complex64::new(v, 0.0))
            .collect();
        Self { dim, mats }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, x: usize) -> &DMatrix<Complex64> {
        &self.mats[x]
    }

    pub fn matrices(&self) -> &[DMatrix<Complex64>] {
        &self.mats
    }

    /// Ascending eigenvalues per point.
    pub fn eigenvalues(&self) -> Vec<Vec<f64>> {
        self.mats.iter().map(|m| eigh(m).0).collect()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            dim: self.dim,
            mats: self.mats.iter().zip(&other.mats).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| cmax(&(a - b)))
            .fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Mismatch {
                what: "endomorphism dimension",
                expected: self.dim,
                got: other.dim,
            });
        }
        check_len("endomorphism points", self.len(), other.len())
    }
}

fn cmax(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn hermitian_defect(m: &DMatrix<Complex64>) -> f64 {
    cmax(&(m - m.adjoint()))
}

/// Ascending eigenvalues and matching unitary eigenvectors.
fn eigh(m: &DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let e = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_columns(
        &order.iter().map(|&i| e.eigenvectors.column(i).into_owned()).collect::<Vec<_>>(),
    );
    (vals, vecs)
}

/// `R = R_plus - R_minus` with both parts positive semidefinite and
/// `R_plus R_minus = 0`.
pub fn spectral_parts(r: &EndomorphismField) -> (EndomorphismField, EndomorphismField) {
    let (plus, minus): (Vec<_>, Vec<_>) = r
        .mats
        .iter()
        .map(|m| {
            let (vals, u) = eigh(m);
            let part = |g: &dyn Fn(f64) -> f64| {
                let d = DMatrix::from_diagonal(&DVector::from_iterator(
                    vals.len(),
                    vals.iter().map(|&l| Complex64::new(g(l), 0.0)),
                ));
                let p = &u * d * u.adjoint();
                (&p + p.adjoint()) * Complex64::new(0.5, 0.0)
            };
            (part(&|l| l.max(0.0)), part(&|l| (-l).max(0.0)))
        })
        .unzip();
    (
        EndomorphismField { dim: r.dim, mats: plus },
        EndomorphismField { dim: r.dim, mats: minus },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RicciDecomposition {
    r1: EndomorphismField,
    r2: EndomorphismField,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl RicciDecomposition {
    pub fn new(r1: EndomorphismField, r2: EndomorphismField) -> Result<Self> {
        r1.check_compatible(&r2)?;
        let mut w1 = Vec::with_capacity(r1.len());
        let mut w2 = Vec::with_capacity(r2.len());
        for (x, (a, b)) in r1.mats.iter().zip(&r2.mats).enumerate() {
            let (ea, _) = eigh(a);
            let (eb, _) = eigh(b);
            for (name, e, m) in [("R1", &ea, a), ("R2", &eb, b)] {
                let lo = e.first().copied().unwrap_or(0.0);
                if lo < -PSD_TOL * (1.0 + cmax(m)) {
                    return Err(Error::Validation(format!(
                        "{name} at point {x} is not positive semidefinite (min eigenvalue {lo:e})"
                    )));
                }
            }
            w1.push((ea.first().copied().unwrap_or(0.0) / 2.0).max(0.0));
            w2.push((eb.last().copied().unwrap_or(0.0) / 2.0).max(0.0));
        }
        Ok(Self { r1, r2, w1, w2 })
    }

    /// Splits `r` into its spectral positive and negative parts.
    pub fn from_ricci(r: &EndomorphismField) -> Self {
        let (p, m) = spectral_parts(r);
        Self::new(p, m).expect("spectral parts are positive semidefinite")
    }

    pub fn r1(&self) -> &EndomorphismField {
        &self.r1
    }

    pub fn r2(&self) -> &EndomorphismField {
        &self.r2
    }

    pub fn ricci(&self) -> EndomorphismField {
        self.r1.sub(&self.r2).expect("compatible parts")
    }
}

/// `(w1, w2)`: pointwise smallest eigenvalue of `R1/2` and largest of `R2/2`.
pub fn scalar_potentials(dec: &RicciDecomposition) -> (Vec<f64>, Vec<f64>) {
    (dec.w1.clone(), dec.w2.clone())
}

/// Derivative data of the conformal exponent at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalData {
    pub psi: f64,
    pub dpsi: Vec<f64>,
    /// Row-major Hessian.
    pub hess: Vec<f64>,
    pub laplacian: f64,
}

/// Pointwise change of the Ricci tensor under `g -> exp(2 psi) g`.
pub fn conformal_perturbation(m: usize, g: &DMatrix<f64>, data: &ConformalData) -> Result<DMatrix<f64>> {
    if g.nrows() != m || g.ncols() != m {
        return Err(Error::Mismatch {
            what: "metric matrix size",
            expected: m,
            got: g.nrows().max(g.ncols()),
        });
    }
    check_len("dpsi", m, data.dpsi.len())?;
    check_len("Hessian entries", m * m, data.hess.len())?;
    let finite = g.iter().chain(&data.dpsi).chain(&data.hess).all(|v| v.is_finite())
        && data.laplacian.is_finite();
    if !finite {
        return Err(Error::Validation("conformal data must be finite".into()));
    }
    if (g - g.transpose()).amax() > 1e-12 * (1.0 + g.amax()) {
        return Err(Error::Validation("metric matrix is not symmetric".into()));
    }
    let chol = Cholesky::new(g.clone())
        .ok_or_else(|| Error::Validation("metric matrix is not positive definite".into()))?;
    let hess = DMatrix::from_row_slice(m, m, &data.hess);
    if (&hess - hess.transpose()).amax() > 1e-12 * (1.0 + hess.amax()) {
        return Err(Error::Validation("Hessian is not symmetric".into()));
    }
    let dpsi = DVector::from_column_slice(&data.dpsi);
    let sq = dpsi.dot(&chol.solve(&dpsi));
    let k = 2.0 - m as f64;
    let outer = &dpsi * dpsi.transpose();
    let t = (hess - outer) * k - g * (data.laplacian - k * sq);
    Ok((&t + t.transpose()) * 0.5)
}

/// Potential term of the 1-form generator, one entry per gradient site.
#[derive(Clone, Debug, Default)]
pub enum Potential {
    #[default]
    None,
    /// A scalar per site: per edge in graph mode, per triangle in mesh mode.
    Scalar(Vec<f64>),
    /// A real symmetric matrix per site: `1 x 1` per edge in graph mode,
    /// `2 x 2` in the local frame of each triangle in mesh mode.
    Endomorphism(EndomorphismField),
}

/// `e^{-t H1}` for `H1 = (d0 d0^dagger + d1^dagger d1)/2 + V` on edge
/// cochains, diagonalized once.
pub struct OneFormHeatOperator {
    manifold: Arc<DiscreteManifold>,
    edges: Vec<(usize, usize)>,
    m1: DMatrix<f64>,
    /// `M1 H1` without the potential.
    s0: DMatrix<f64>,
    /// `M1 V`.
    sv: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl std::fmt::Debug for OneFormHeatOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OneFormHeatOperator")
            .field("mode", &self.manifold.mode())
            .field("edges", &self.edges.len())
            .finish()
    }
}

impl OneFormHeatOperator {
    pub fn build(manifold: Arc<DiscreteManifold>, potential: &Potential) -> Result<Self> {
        let edges: Vec<(usize, usize)> = manifold.edges().iter().map(|e| (e.tail, e.head)).collect();
        let ne = edges.len();
        if ne == 0 {
            return Err(Error::Validation("the manifold has no edges".into()));
        }
        let n = manifold.n_vertices();
        let mut d0 = DMatrix::zeros(ne, n);
        for (i, &(a, b)) in edges.iter().enumerate() {
            d0[(i, a)] = -1.0;
            d0[(i, b)] = 1.0;
        }
        let (m1, curl, sv) = match manifold.mode() {
            Mode::Graph => {
                if let Some(x) = manifold.vertex_edges().iter().position(|v| v.len() > 2) {
                    return Err(Error::Unsupported(format!(
                        "d1 is unavailable in graph mode: vertex {x} has degree {}; 1-form heat on graphs needs a path or cycle",
                        manifold.vertex_edges()[x].len()
                    )));
                }
                let m1 = DMatrix::from_diagonal(&DVector::from_iterator(
                    ne,
                    manifold.edges().iter().map(|e| e.weight / (e.length * e.length)),
                ));
                let v = graph_potential(potential, ne)?;
                let sv = DMatrix::from_diagonal(&DVector::from_iterator(
                    ne,
                    v.iter().zip(m1.diagonal().iter()).map(|(a, b)| a * b),
                ));
                (m1, DMatrix::zeros(ne, ne), sv)
            }
            Mode::Mesh => mesh_matrices(&manifold, &edges, potential)?,
        };
        let vol = manifold.volumes();
        let m1d0 = &m1 * &d0;
        let mut scaled = m1d0.clone();
        for (j, v) in vol.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / v);
        }
        let mut s0 = (&scaled * m1d0.transpose() + curl) * 0.5;
        symmetrize(&mut s0);
        let chol = Cholesky::new(m1.clone())
            .ok_or_else(|| Error::Solver("edge mass matrix is not positive definite".into()))?;
        let l = chol.l();
        let linv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Solver("edge mass factor is singular".into()))?;
        let mut c = &linv * (&s0 + &sv) * linv.transpose();
        symmetrize(&mut c);
        let eig = c.symmetric_eigen();
        let q = eig.eigenvectors;
        let left = linv.transpose() * &q;
        let right = (&l * &q).transpose();
        Ok(Self {
            manifold,
            edges,
            m1,
            s0,
            sv,
            eigenvalues: eig.eigenvalues,
            left,
            right,
        })
    }

    pub fn manifold(&self) -> &Arc<DiscreteManifold> {
        &self.manifold
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// `(tail, head)` per edge.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.m1
    }

    /// Dense `H1`.
    pub fn generator(&self) -> DMatrix<f64> {
        self.solve_mass(&(&self.s0 + &self.sv))
    }

    /// Dense `H1` with the potential left out.
    pub fn free_generator(&self) -> DMatrix<f64> {
        self.solve_mass(&self.s0)
    }

    /// Dense `V`.
    pub fn potential_matrix(&self) -> DMatrix<f64> {
        self.solve_mass(&self.sv)
    }

    fn solve_mass(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        Cholesky::new(self.m1.clone()).expect("checked at build").solve(s)
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// `d0 h` as an edge cochain.
    pub fn exterior_derivative(&self, h: &ScalarField) -> Result<Vec<Complex64>> {
        check_len("scalar field", self.manifold.n_vertices(), h.len())?;
        Ok(self.edges.iter().map(|&(a, b)| h.0[b] - h.0[a]).collect())
    }

    /// `<a, b>` in the edge mass inner product.
    pub fn inner(&self, a: &[Complex64], b: &[Complex64]) -> Result<Complex64> {
        check_len("edge cochain", self.n_edges(), a.len())?;
        check_len("edge cochain", self.n_edges(), b.len())?;
        let (ar, ai) = split(a);
        let (br, bi) = split(b);
        let re = ar.dot(&(&self.m1 * &br)) + ai.dot(&(&self.m1 * &bi));
        let im = ar.dot(&(&self.m1 * &bi)) - ai.dot(&(&self.m1 * &br));
        Ok(Complex64::new(re, im))
    }

    pub fn apply(&self, alpha: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
        check_len("edge cochain", self.n_edges(), alpha.len())?;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("time must be >= 0 (got {t})")));
        }
        if t == 0.0 {
            return Ok(alpha.to_vec());
        }
        let (re, im) = split(alpha);
        let decay = self.eigenvalues.map(|l| (-t * l).exp());
        let go = |x: &DVector<f64>| &self.left * (&self.right * x).component_mul(&decay);
        let (re, im) = (go(&re), go(&im));
        Ok(re.iter().zip(im.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect())
    }

    /// `|alpha|` per edge in graph mode.
    pub fn site_norms(&self, alpha: &[Complex64]) -> Result<Vec<f64>> {
        self.require_graph("site norms of edge cochains")?;
        check_len("edge cochain", self.n_edges(), alpha.len())?;
        Ok(self
            .manifold
            .edges()
            .iter()
            .zip(alpha)
            .map(|(e, a)| a.norm() / e.length)
            .collect())
    }

    fn require_graph(&self, what: &str) -> Result<()> {
        if self.manifold.mode() != Mode::Graph {
            return Err(Error::Unsupported(format!("{what} is implemented in graph mode only")));
        }
        Ok(())
    }

    /// The scalar walk that dominates the free 1-form semigroup in the
    /// normalized frame `beta = alpha / length`. Writing that generator as
    /// `D + A` (diagonal plus off-diagonal), the walk jumps with rates
    /// `|A|`, is killed at rate `max(U, 0)` and picks up the potential
    /// `max(-U, 0)`, where `U = D - rowsum |A|`.
    pub fn dominating_walk(&self) -> Result<(WalkModel, Vec<f64>)> {
        self.require_graph("the dominating walk")?;
        let h = self.free_generator();
        let len: Vec<f64> = self.manifold.edges().iter().map(|e| e.length).collect();
        let ne = self.n_edges();
        let mut jumps = vec![Vec::new(); ne];
        let mut kill = vec![0.0; ne];
        let mut extra = vec![0.0; ne];
        for e in 0..ne {
            let mut rowsum = 0.0;
            for f in (0..ne).filter(|&f| f != e) {
                let a = (h[(e, f)] * len[f] / len[e]).abs();
                if a > 0.0 {
                    jumps[e].push((f, a));
                    rowsum += a;
                }
            }
            let u = h[(e, e)] - rowsum;
            // Row sums cancel in exact arithmetic on uniform pieces.
            let u = if u.abs() <= 1e-12 * (1.0 + h[(e, e)].abs()) { 0.0 } else { u };
            kill[e] = u.max(0.0);
            extra[e] = (-u).max(0.0);
        }
        let w = WalkModel::from_rates(jumps, &Killing {
            rates: Some(kill),
            cemetery: Vec::new(),
        })?;
        Ok((w, extra))
    }
}

fn split(a: &[Complex64]) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_iterator(a.len(), a.iter().map(|z| z.re)),
        DVector::from_iterator(a.len(), a.iter().map(|z| z.im)),
    )
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn real_site_matrix(r: &EndomorphismField, s: usize) -> Result<DMatrix<f64>> {
    let m = r.get(s);
    if m.iter().any(|z| z.im.abs() > HERMITIAN_TOL * (1.0 + cmax(m))) {
        return Err(Error::Unsupported(format!(
            "the 1-form potential must be real symmetric (site {s} has imaginary entries)"
        )));
    }
    Ok(m.map(|z| z.re))
}

fn graph_potential(p: &Potential, ne: usize) -> Result<Vec<f64>> {
    match p {
        Potential::None => Ok(vec![0.0; ne]),
        Potential::Scalar(v) => {
            check_len("potential sites", ne, v.len())?;
            Ok(v.clone())
        }
        Potential::Endomorphism(r) => {
            check_len("potential sites", ne, r.len())?;
            if r.dim() != 1 {
                return Err(Error::Mismatch {
                    what: "graph-mode potential fiber dimension",
                    expected: 1,
                    got: r.dim(),
                });
            }
            (0..ne).map(|s| Ok(real_site_matrix(r, s)?[(0, 0)])).collect()
        }
    }
}

/// Whitney `M1`, `d1^T M2 d1` and `M1 V` on a triangle mesh.
fn mesh_matrices(
    m: &DiscreteManifold,
    edges: &[(usize, usize)],
    potential: &Potential,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let tris = m.triangles();
    let site_pot: Vec<DMatrix<f64>> = match potential {
        Potential::None => vec![DMatrix::zeros(2, 2); tris.len()],
        Potential::Scalar(v) => {
            check_len("potential sites", tris.len(), v.len())?;
            v.iter().map(|&c| DMatrix::identity(2, 2) * c).collect()
        }
        Potential::Endomorphism(r) => {
            check_len("potential sites", tris.len(), r.len())?;
            if r.dim() != 2 {
                return Err(Error::Mismatch {
                    what: "mesh-mode potential fiber dimension",
                    expected: 2,
                    got: r.dim(),
                });
            }
            (0..tris.len()).map(|s| real_site_matrix(r, s)).collect::<Result<_>>()?
        }
    };
    let index: HashMap<(usize, usize), usize> =
        edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let ne = edges.len();
    let mut m1 = DMatrix::zeros(ne, ne);
    let mut curl = DMatrix::zeros(ne, ne);
    let mut sv = DMatrix::zeros(ne, ne);
    const LOCAL: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];
    for (s, t) in tris.iter().enumerate() {
        let g = t.hat_gradients();
        let mut ids = [0usize; 3];
        let mut sign = [0.0f64; 3];
        let mut oriented = [(0usize, 0usize); 3];
        for (k, &(a, b)) in LOCAL.iter().enumerate() {
            let (va, vb) = (t.vertices[a], t.vertices[b]);
            let key = (va.min(vb), va.max(vb));
            ids[k] = *index.get(&key).ok_or_else(|| {
                Error::Validation(format!("triangle {s} uses edge {key:?} missing from the edge list"))
            })?;
            // Local orientation follows the global tail -> head.
            if va < vb {
                sign[k] = 1.0;
                oriented[k] = (a, b);
            } else {
                sign[k] = -1.0;
                oriented[k] = (b, a);
            }
        }
        let r = &site_pot[s];
        let dotm = |a: usize, b: usize, mat: Option<&DMatrix<f64>>| -> f64 {
            let (x, y) = (g[a], g[b]);
            match mat {
                None => x[0] * y[0] + x[1] * y[1],
                Some(r) => {
                    x[0] * (r[(0, 0)] * y[0] + r[(0, 1)] * y[1])
                        + x[1] * (r[(1, 0)] * y[0] + r[(1, 1)] * y[1])
                }
            }
        };
        let lam = |i: usize, j: usize| if i == j { 2.0 / 12.0 } else { 1.0 / 12.0 };
        for p in 0..3 {
            let (i, j) = oriented[p];
            for q in 0..3 {
                let (k, l) = oriented[q];
                let whitney = |mat: Option<&DMatrix<f64>>| {
                    lam(i, k) * dotm(j, l, mat) - lam(i, l) * dotm(j, k, mat)
                        - lam(j, k) * dotm(i, l, mat)
                        + lam(j, l) * dotm(i, k, mat)
                };
                m1[(ids[p], ids[q])] += t.weight * whitney(None);
                sv[(ids[p], ids[q])] += t.weight * whitney(Some(r));
                let a2 = t.area() * t.area();
                curl[(ids[p], ids[q])] += t.weight / a2 * sign[p] * sign[q];
            }
        }
    }
    symmetrize(&mut m1);
    symmetrize(&mut sv);
    Ok((m1, curl, sv))
}

/// One row of a domination check, per edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationRow {
    pub site: usize,
    /// `|e^{-t H1} alpha|` at the site.
    pub lhs: f64,
    pub majorant: Estimate,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub t: f64,
    /// Whether `V >= -w2` holds at every site, the hypothesis under which
    /// no violations are expected.
    pub potential_dominated: bool,
    pub rows: Vec<DominationRow>,
    pub violations: Vec<usize>,
}

fn check_w2(w2: &[f64], ne: usize) -> Result<()> {
    check_len("w2 sites", ne, w2.len())?;
    if w2.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("w2 must be finite and >= 0".into()));
    }
    Ok(())
}

/// Compares `|e^{-t H1} alpha|` per edge with the Monte Carlo estimate of
/// `E[exp(int_0^t w2) |alpha|(X_t) 1_{t < zeta}]` for the dominating walk.
/// Graph mode only; `w2` lives on edges.
pub fn domination_check(
    op: &OneFormHeatOperator,
    w2: &[f64],
    alpha: &[Complex64],
    t: f64,
    mc: &MonteCarloParams,
) -> Result<DominationReport> {
    op.require_graph("the domination check")?;
    let ne = op.n_edges();
    check_w2(w2, ne)?;
    if mc.samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo sample budget is zero".into()));
    }
    let lhs = op.site_norms(&op.apply(alpha, t)?)?;
    let terminal = op.site_norms(alpha)?;
    let (walk, extra) = op.dominating_walk()?;
    let potential: Vec<f64> = w2.iter().zip(&extra).map(|(a, b)| a + b).collect();
    let f = Functional {
        potential: &potential,
        terminal: Some(&terminal),
        killed: KilledPaths::Drop,
    };
    let rows = (0..ne)
        .into_par_iter()
        .map(|e| {
            let est = estimate(&walk, &f, e, t, mc, ne)?;
            Ok(DominationRow {
                site: e,
                lhs: lhs[e],
                violated: !below_bound(lhs[e], est.upper),
                majorant: est,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let v = op.potential_matrix();
    let potential_dominated = (0..ne).all(|e| v[(e, e)] + w2[e] >= -1e-12);
    let violations = rows.iter().filter(|r| r.violated).map(|r| r.site).collect();
    Ok(DominationReport {
        t,
        potential_dominated,
        rows,
        violations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupBoundRow {
    pub t: f64,
    /// `|e^{-t H1} alpha|_inf / |alpha|_inf`.
    pub ratio: f64,
    /// `delta exp(t C)`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupBoundReport {
    pub certificate: KasminskiiCertificate,
    pub rows: Vec<SupBoundRow>,
}

/// Checks `|e^{-t H1} alpha|_inf <= delta exp(t C) |alpha|_inf` at the
/// certificate's test times, with `C` from a Kas'minskii certificate for
/// the potential of the dominating walk.
pub fn sup_bound_check(
    op: &OneFormHeatOperator,
    w2: &[f64],
    alpha: &[Complex64],
    p: &KasminskiiParams,
) -> Result<SupBoundReport> {
    op.require_graph("the sup-norm bound")?;
    check_w2(w2, op.n_edges())?;
    let (walk, extra) = op.dominating_walk()?;
    let v: Vec<f64> = w2.iter().zip(&extra).map(|(a, b)| a + b).collect();
    let certificate = kasminskii_certify(&walk, &walk, &v, p)?;
    let norm0 = op.site_norms(alpha)?.into_iter().fold(0.0, f64::max);
    let rows = p
        .test_times
        .iter()
        .map(|&t| {
            let nt = op.site_norms(&op.apply(alpha, t)?)?.into_iter().fold(0.0, f64::max);
            let ratio = if norm0 > 0.0 { nt / norm0 } else { 0.0 };
            let bound = certificate.bound(t);
            Ok(SupBoundRow {
                t,
                ratio,
                bound,
                holds: ratio <= bound * (1.0 + 1e-12),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SupBoundReport { certificate, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::heat::{laplacian_matrix, HeatOperator, HeatParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random_hermitian(dim: usize, rng: &mut impl Rng) -> DMatrix<Complex64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        (&a + a.adjoint()) * c(0.5)
    }

    fn random_psd(dim: usize, rng: &mut impl Rng) -> DMatrix<Complex64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        &a * a.adjoint()
    }

    fn diag(v: &[f64]) -> DMatrix<Complex64> {
        DMatrix::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|&x| c(x))))
    }

    #[test]
    fn diagonal_parts() {
        let r = EndomorphismField::new(2, vec![diag(&[2.0, -3.0])]).unwrap();
        let (p, m) = spectral_parts(&r);
        assert!(cmax(&(p.get(0) - diag(&[2.0, 0.0]))) < 1e-15);
        assert!(cmax(&(m.get(0) - diag(&[0.0, 3.0]))) < 1e-15);
    }

    #[test]
    fn psd_has_no_negative_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = EndomorphismField::new(3, (0..10).map(|_| random_psd(3, &mut rng)).collect()).unwrap();
        let (p, m) = spectral_parts(&r);
        assert!(m.matrices().iter().all(|x| cmax(x) < 1e-12));
        assert!(p.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut m = diag(&[1.0, 1.0]);
        m[(0, 1)] = c(1.0);
        assert!(matches!(EndomorphismField::new(2, vec![m]), Err(Error::Validation(_))));
        let z = DMatrix::from_element(2, 3, c(0.0));
        assert!(EndomorphismField::new(2, vec![z]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn parts_reconstruct_and_are_orthogonal(seed in any::<u64>(), dim in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = EndomorphismField::new(dim, (0..4).map(|_| random_hermitian(dim, &mut rng)).collect()).unwrap();
            let (p, m) = spectral_parts(&r);
            prop_assert!(p.sub(&m).unwrap().max_abs_diff(&r) < 1e-12);
            for (a, b) in p.matrices().iter().zip(m.matrices()) {
                prop_assert!(cmax(&(a * b)) < 1e-12);
                prop_assert!(hermitian_defect(a) < 1e-14);
            }
            for e in p.eigenvalues().iter().chain(m.eigenvalues().iter()) {
                prop_assert!(e[0] >= -1e-12);
            }
        }

        #[test]
        fn potentials_match_operator_norms(seed in any::<u64>(), dim in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r1 = EndomorphismField::new(dim, (0..4).map(|_| random_psd(dim, &mut rng)).collect()).unwrap();
            let r2 = EndomorphismField::new(dim, (0..4).map(|_| random_psd(dim, &mut rng)).collect()).unwrap();
            let dec = RicciDecomposition::new(r1.clone(), r2.clone()).unwrap();
            let (w1, w2) = scalar_potentials(&dec);
            for x in 0..4 {
                // Largest singular value of a PSD matrix is its top eigenvalue.
                let top = r2.get(x).clone().singular_values().max();
                prop_assert!((2.0 * w2[x] - top).abs() < 1e-12 * (1.0 + top));
                // Smallest eigenvalue via min over a Rayleigh quotient family.
                let inv = r1.get(x).clone().try_inverse();
                if let Some(inv) = inv {
                    let bottom = 1.0 / inv.singular_values().max();
                    prop_assert!((2.0 * w1[x] - bottom).abs() < 1e-9 * (1.0 + bottom));
                }
                prop_assert!(w1[x] >= 0.0 && w2[x] >= 0.0);
            }
            prop_assert!(dec.ricci().max_abs_diff(&r1.sub(&r2).unwrap()) < 1e-15);
        }

        #[test]
        fn conformal_two_dimensional_identity(
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, d) = random_conformal(2, &mut rng);
            let t = conformal_perturbation(2, &g, &d).unwrap();
            let want = &g * (-d.laplacian);
            prop_assert!((t - want).amax() <= 1e-14 * (1.0 + g.amax() * d.laplacian.abs()));
        }
    }

    fn random_conformal(m: usize, rng: &mut impl Rng) -> (DMatrix<f64>, ConformalData) {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let g = &a * a.transpose() + DMatrix::identity(m, m) * 0.5;
        let h = DMatrix::from_fn(m, m, |_, _| rng.random_range(-2.0..2.0));
        let h = (&h + h.transpose()) * 0.5;
        (
            g,
            ConformalData {
                psi: rng.random_range(-1.0..1.0),
                dpsi: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
                hess: h.transpose().iter().copied().collect(),
                laplacian: rng.random_range(-3.0..3.0),
            },
        )
    }

    #[test]
    fn conformal_examples() {
        let g = DMatrix::identity(3, 3);
        let flat = ConformalData {
            psi: 4.0,
            dpsi: vec![0.0; 3],
            hess: vec![0.0; 9],
            laplacian: 0.0,
        };
        assert_eq!(conformal_perturbation(3, &g, &flat).unwrap(), DMatrix::zeros(3, 3));
        let linear = ConformalData {
            psi: 0.0,
            dpsi: vec![1.0, 0.0, 0.0],
            hess: vec![0.0; 9],
            laplacian: 0.0,
        };
        let t = conformal_perturbation(3, &g, &linear).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0]);
        assert!((t - want).amax() < 1e-15);
    }

    #[test]
    fn conformal_general_dimension_by_hand() {
        // m = 4, g = 2 id: |dpsi|^2 = (1 + 4)/2 = 2.5.
        let g = DMatrix::identity(4, 4) * 2.0;
        let mut hess = vec![0.0; 16];
        hess[0] = 1.0;
        hess[5] = -1.0;
        let d = ConformalData {
            psi: 0.0,
            dpsi: vec![1.0, 2.0, 0.0, 0.0],
            hess,
            laplacian: 0.5,
        };
        let t = conformal_perturbation(4, &g, &d).unwrap();
        // (2 - 4)(Hess - dpsi dpsi^T) - (0.5 + 2 * 2.5) * 2 id
        let mut want = DMatrix::zeros(4, 4);
        let outer = [[1.0, 2.0], [2.0, 4.0]];
        let h = [[1.0, 0.0], [0.0, -1.0]];
        for i in 0..2 {
            for j in 0..2 {
                want[(i, j)] = -2.0 * (h[i][j] - outer[i][j]);
            }
        }
        for i in 0..4 {
            want[(i, i)] -= 11.0;
        }
        assert!((t - want).amax() < 1e-14);
    }

    #[test]
    fn conformal_rejects_bad_metric() {
        let d = ConformalData {
            psi: 0.0,
            dpsi: vec![0.0; 2],
            hess: vec![0.0; 4],
            laplacian: 1.0,
        };
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(conformal_perturbation(2, &indefinite, &d), Err(Error::Validation(_))));
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(conformal_perturbation(2, &skew, &d), Err(Error::Validation(_))));
    }

    fn arc(m: DiscreteManifold) -> Arc<DiscreteManifold> {
        Arc::new(m)
    }

    fn random_cochain(n: usize, seed: u64) -> Vec<Complex64> {
        builtin::random_field(n, seed).0
    }

    #[test]
    fn time_zero_is_identity() {
        let op = OneFormHeatOperator::build(arc(builtin::flat_torus(4).unwrap()), &Potential::None).unwrap();
        let a = random_cochain(op.n_edges(), 3);
        assert_eq!(op.apply(&a, 0.0).unwrap(), a);
        assert!(op.apply(&a, -1.0).is_err());
    }

    #[test]
    fn exact_part_reproduces_scalar_stiffness() {
        let (torus, _) = builtin::parametric_torus(6, 5, 3.0).unwrap();
        for m in [builtin::flat_torus(5).unwrap(), torus] {
            let m = arc(m);
            let op = OneFormHeatOperator::build(m.clone(), &Potential::None).unwrap();
            let mut d0 = DMatrix::zeros(op.n_edges(), m.n_vertices());
            for (i, &(a, b)) in op.edges().iter().enumerate() {
                d0[(i, a)] = -1.0;
                d0[(i, b)] = 1.0;
            }
            let l = laplacian_matrix(&m).to_dense();
            let w = d0.transpose() * op.mass() * &d0;
            assert!((w - &l).amax() < 1e-10 * l.amax());
            // H1 is self-adjoint for the mass inner product.
            let s = op.mass() * op.generator();
            assert!((&s - s.transpose()).amax() < 1e-9 * s.amax());
        }
    }

    #[test]
    fn generator_intertwines_exact_forms() {
        let m = arc(builtin::flat_torus(6).unwrap());
        let op = OneFormHeatOperator::build(m.clone(), &Potential::None).unwrap();
        let hop = HeatOperator::build(m.clone(), &HeatParams::spectral()).unwrap();
        let h = builtin::random_field(m.n_vertices(), 4);
        let dh = DVector::from_iterator(op.n_edges(), op.exterior_derivative(&h).unwrap().iter().map(|z| z.re));
        let lhs = op.generator() * dh;
        let hh = hop.generator_dense() * DVector::from_iterator(h.len(), h.0.iter().map(|z| z.re));
        let rhs = op.exterior_derivative(&ScalarField::from_real(hh.as_slice())).unwrap();
        let err = lhs.iter().zip(&rhs).map(|(a, b)| (a - b.re).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9 * lhs.amax(), "{err}");
    }

    #[test]
    fn semigroup_commutes_with_d() {
        let m = arc(builtin::flat_torus(8).unwrap());
        let op = OneFormHeatOperator::build(m.clone(), &Potential::None).unwrap();
        let hop = HeatOperator::build(m.clone(), &HeatParams::spectral()).unwrap();
        for seed in 0..3 {
            let h = builtin::random_field(m.n_vertices(), seed);
            for t in [0.01, 0.1, 1.0] {
                let a = op.apply(&op.exterior_derivative(&h).unwrap(), t).unwrap();
                let b = op.exterior_derivative(&hop.apply(&h, t).unwrap()).unwrap();
                let err = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
                assert!(err < 1e-10, "t = {t}: {err:e}");
            }
        }
    }

    #[test]
    fn cycle_semigroup_is_schrodinger_on_edges() {
        let n = 7;
        let m = arc(builtin::cycle(n).unwrap());
        let w: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let op = OneFormHeatOperator::build(m.clone(), &Potential::Scalar(w.clone())).unwrap();
        // Edge i joins i and i + 1 (mod n); neighbouring edges share one
        // vertex, where one is incoming and the other outgoing.
        let h = 1.0 / n as f64;
        let mut gen = DMatrix::zeros(n, n);
        for (i, e) in m.edges().iter().enumerate() {
            gen[(i, i)] = 1.0 / (h * h) + w[i];
            for (j, f) in m.edges().iter().enumerate().filter(|&(j, _)| j != i) {
                for x in [e.tail, e.head] {
                    let se = if x == e.head { 1.0 } else { -1.0 };
                    if x == f.tail || x == f.head {
                        let sf = if x == f.head { 1.0 } else { -1.0 };
                        gen[(i, j)] += 0.5 * se * sf / (h * h);
                    }
                }
            }
        }
        let a = random_cochain(n, 9);
        for t in [0.001, 0.01, 0.1] {
            let e = (&gen * -t).exp();
            let re = &e * DVector::from_iterator(n, a.iter().map(|z| z.re));
            let im = &e * DVector::from_iterator(n, a.iter().map(|z| z.im));
            let got = op.apply(&a, t).unwrap();
            for k in 0..n {
                assert!((got[k] - Complex64::new(re[k], im[k])).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn branching_graph_is_unsupported() {
        let m = arc(builtin::random_graph(8, 1, 1).unwrap());
        if m.vertex_edges().iter().any(|v| v.len() > 2) {
            assert!(matches!(
                OneFormHeatOperator::build(m, &Potential::None),
                Err(Error::Unsupported(_))
            ));
        }
        let star = DiscreteManifold::graph(
            1,
            vec![1.0; 4],
            (1..4)
                .map(|h| crate::geometry::Edge {
                    tail: 0,
                    head: h,
                    length: 1.0,
                    weight: 1.0,
                })
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            OneFormHeatOperator::build(arc(star), &Potential::None),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn mesh_potential_shifts_spectrum() {
        let m = arc(builtin::flat_torus(4).unwrap());
        let nt = m.triangles().len();
        let base = OneFormHeatOperator::build(m.clone(), &Potential::None).unwrap();
        let shifted = OneFormHeatOperator::build(m.clone(), &Potential::Scalar(vec![2.5; nt])).unwrap();
        let mut a: Vec<f64> = base.eigenvalues().iter().copied().collect();
        let mut b: Vec<f64> = shifted.eigenvalues().iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 2.5).abs() < 1e-8 * (1.0 + x.abs()));
        }
        let field = EndomorphismField::scalar(2, &vec![2.5; nt]);
        let same = OneFormHeatOperator::build(m, &Potential::Endomorphism(field)).unwrap();
        assert!((same.generator() - shifted.generator()).amax() < 1e-9);
    }

    fn small_mc(samples: usize, seed: u64) -> MonteCarloParams {
        MonteCarloParams {
            samples,
            seed,
            ..MonteCarloParams::default()
        }
    }

    #[test]
    fn domination_of_zero_form() {
        let op = OneFormHeatOperator::build(arc(builtin::cycle(5).unwrap()), &Potential::None).unwrap();
        let r = domination_check(&op, &[0.0; 5], &[c(0.0); 5], 0.1, &small_mc(200, 1)).unwrap();
        assert!(r.violations.is_empty());
        assert!(r.rows.iter().all(|x| x.lhs == 0.0 && x.majorant.mean == 0.0));
        assert!(domination_check(&op, &[0.0; 5], &[c(0.0); 5], 0.1, &small_mc(0, 1)).is_err());
        assert!(domination_check(&op, &[-1.0; 5], &[c(0.0); 5], 0.1, &small_mc(10, 1)).is_err());
    }

    #[test]
    fn domination_matches_dense_majorant() {
        // In the normalized frame the dominating semigroup is
        // exp(-t (D - |A|)).
        let m = arc(builtin::cycle(3).unwrap());
        let op = OneFormHeatOperator::build(m.clone(), &Potential::None).unwrap();
        let a = random_cochain(3, 2);
        let h = op.free_generator();
        let dom = DMatrix::from_fn(3, 3, |i, j| if i == j { h[(i, j)] } else { -h[(i, j)].abs() });
        let beta = DVector::from_vec(op.site_norms(&a).unwrap());
        let t = 0.01;
        let want = (&dom * -t).exp() * beta;
        let r = domination_check(&op, &[0.0; 3], &a, t, &small_mc(20_000, 5)).unwrap();
        assert!(r.violations.is_empty());
        for (row, w) in r.rows.iter().zip(want.iter()) {
            assert!(row.lhs <= w * (1.0 + 1e-9));
            assert!(row.majorant.lower <= *w && *w <= row.majorant.upper, "{row:?} vs {w}");
        }
    }

    #[test]
    fn constant_potential_factors_out() {
        let m = arc(builtin::cycle(6).unwrap());
        let cst = 1.5;
        let free = OneFormHeatOperator::build(m.clone(), &Potential::None).unwrap();
        let op = OneFormHeatOperator::build(m.clone(), &Potential::Scalar(vec![-cst; 6])).unwrap();
        let a = random_cochain(6, 8);
        let t = 0.2;
        let r0 = domination_check(&free, &[0.0; 6], &a, t, &small_mc(5000, 3)).unwrap();
        let r1 = domination_check(&op, &[cst; 6], &a, t, &small_mc(5000, 3)).unwrap();
        assert!(r1.potential_dominated);
        let g = (cst * t).exp();
        for (x, y) in r0.rows.iter().zip(&r1.rows) {
            assert!((y.lhs - g * x.lhs).abs() < 1e-10 * (1.0 + y.lhs));
            assert!((y.majorant.mean - g * x.majorant.mean).abs() < 1e-9 * (1.0 + y.majorant.mean));
        }
        assert!(r1.violations.is_empty());
    }

    #[test]
    fn path_domination_has_no_violations() {
        let m = arc(builtin::path(6).unwrap());
        let w2: Vec<f64> = (0..5).map(|i| 0.5 * i as f64).collect();
        let v: Vec<f64> = w2.iter().map(|x| -x).collect();
        let op = OneFormHeatOperator::build(m, &Potential::Scalar(v)).unwrap();
        let a = random_cochain(5, 1);
        let r = domination_check(&op, &w2, &a, 0.05, &small_mc(4000, 2)).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
    }

    #[test]
    fn sup_norm_bound_from_certificate() {
        let m = arc(builtin::cycle(8).unwrap());
        let mut w2 = vec![0.0; 8];
        w2[3] = 4.0;
        let v: Vec<f64> = w2.iter().map(|x| -x).collect();
        let op = OneFormHeatOperator::build(m, &Potential::Scalar(v)).unwrap();
        let a = random_cochain(8, 11);
        let p = KasminskiiParams {
            mc: small_mc(4000, 9),
            ..KasminskiiParams::default()
        };
        let r = sup_bound_check(&op, &w2, &a, &p).unwrap();
        assert!(r.certificate.valid);
        assert!(r.rows.iter().all(|x| x.holds), "{:?}", r.rows);
    }
}
