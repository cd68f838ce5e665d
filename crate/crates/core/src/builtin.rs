//! Deterministic builtin manifolds and fields.
//!
//! Every manifold comes with planar coordinates per vertex, which the field
//! generators use. Unless parameters override it, 1-D builtins have unit
//! total length and surfaces have unit total area.
//!
//! | name | params | construction |
//! |------|--------|--------------|
//! | `two_vertex` | none | vol = 1, one edge with length = weight = 1, m = 1 |
//! | `cycle` | `N` | N vertices on the unit circle of length 1, len = vol = weight = 1/N |
//! | `path` | `N[, spacing]` | unit length: len = weight = 1/(N-1), endpoint vol halved; with `spacing`, every vol, len and weight equals it |
//! | `flat_torus` | `N[xN]` | N^2 grid on [0,1)^2, each cell split along its (i,j)-(i+1,j+1) diagonal |
//! | `parametric_torus` | `N[xM[, R/r]]` | embedded torus with radius ratio R/r (default 2), scaled to smooth area 1 |

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{DiscreteManifold, Edge, OneForm, ScalarField, Triangle};
use crate::registry::{Registry, Selector};

/// A generated manifold together with planar coordinates for its vertices.
#[derive(Clone, Debug)]
pub struct Builtin {
    pub name: String,
    pub manifold: DiscreteManifold,
    /// `(x, y)` per vertex in the generator's parameter domain, `[0,1)`-scaled.
    pub coords: Vec<[f64; 2]>,
    /// Whether coordinates wrap around (circle, torus).
    pub periodic: bool,
    /// For parametric tori: `(R, r)` after scaling.
    pub radii: Option<(f64, f64)>,
}

pub trait ManifoldGenerator: Send + Sync {
    fn generate(&self, params: &[f64]) -> Result<Builtin>;
}

pub trait FieldGenerator: Send + Sync {
    fn generate(&self, b: &Builtin, params: &[f64]) -> Result<ScalarField>;
}

fn count(params: &[f64], i: usize, default: Option<usize>, name: &str) -> Result<usize> {
    match params.get(i) {
        Some(&v) if v >= 1.0 && v.fract() == 0.0 => Ok(v as usize),
        Some(&v) => Err(Error::InvalidArgument(format!(
            "{name}: expected a positive integer, got {v}"
        ))),
        None => default.ok_or_else(|| Error::InvalidArgument(format!("{name}: missing size"))),
    }
}

struct TwoVertex;
impl ManifoldGenerator for TwoVertex {
    fn generate(&self, _: &[f64]) -> Result<Builtin> {
        Ok(Builtin {
            name: "two_vertex".into(),
            manifold: two_vertex(),
            coords: vec![[0.0, 0.0], [1.0, 0.0]],
            periodic: false,
            radii: None,
        })
    }
}

struct Cycle;
impl ManifoldGenerator for Cycle {
    fn generate(&self, p: &[f64]) -> Result<Builtin> {
        let n = count(p, 0, None, "cycle")?;
        Ok(Builtin {
            name: format!("cycle({n})"),
            manifold: cycle(n)?,
            coords: (0..n).map(|i| [i as f64 / n as f64, 0.0]).collect(),
            periodic: true,
            radii: None,
        })
    }
}

struct Path;
impl ManifoldGenerator for Path {
    fn generate(&self, p: &[f64]) -> Result<Builtin> {
        let n = count(p, 0, None, "path")?;
        let (manifold, step) = match p.get(1) {
            Some(&h) => (path_uniform(n, h)?, h),
            None => (path(n)?, 1.0 / (n.max(2) - 1) as f64),
        };
        Ok(Builtin {
            name: format!("path({n})"),
            manifold,
            coords: (0..n).map(|i| [i as f64 * step, 0.0]).collect(),
            periodic: false,
            radii: None,
        })
    }
}

struct FlatTorus;
impl ManifoldGenerator for FlatTorus {
    fn generate(&self, p: &[f64]) -> Result<Builtin> {
        let n = count(p, 0, None, "flat_torus")?;
        let m = count(p, 1, Some(n), "flat_torus")?;
        if n != m {
            return Err(Error::InvalidArgument(
                "flat_torus: only square grids are supported".into(),
            ));
        }
        Ok(Builtin {
            name: format!("flat_torus({n}x{n})"),
            manifold: flat_torus(n)?,
            coords: (0..n * n)
                .map(|k| [(k / n) as f64 / n as f64, (k % n) as f64 / n as f64])
                .collect(),
            periodic: true,
            radii: None,
        })
    }
}

struct ParametricTorus;
impl ManifoldGenerator for ParametricTorus {
    fn generate(&self, p: &[f64]) -> Result<Builtin> {
        let n = count(p, 0, None, "parametric_torus")?;
        let m = count(p, 1, Some(n), "parametric_torus")?;
        let ratio = p.get(2).copied().unwrap_or(2.0);
        let (manifold, radii) = parametric_torus(n, m, ratio)?;
        Ok(Builtin {
            name: format!("parametric_torus({n}x{m})"),
            manifold,
            coords: (0..n * m)
                .map(|k| [(k / m) as f64 / n as f64, (k % m) as f64 / m as f64])
                .collect(),
            periodic: true,
            radii: Some(radii),
        })
    }
}

pub fn two_vertex() -> DiscreteManifold {
    DiscreteManifold::graph(
        1,
        vec![1.0, 1.0],
        vec![Edge {
            tail: 0,
            head: 1,
            length: 1.0,
            weight: 1.0,
        }],
    )
    .expect("two-vertex graph is valid")
}

/// `n` vertices on a circle of unit length.
pub fn cycle(n: usize) -> Result<DiscreteManifold> {
    if n < 3 {
        return Err(Error::InvalidArgument("cycle needs at least 3 vertices".into()));
    }
    let h = 1.0 / n as f64;
    let edges = (0..n)
        .map(|i| Edge {
            tail: i,
            head: (i + 1) % n,
            length: h,
            weight: h,
        })
        .collect();
    DiscreteManifold::graph(1, vec![h; n], edges)
}

/// `n` vertices on a segment of unit length; endpoint volumes are halved.
pub fn path(n: usize) -> Result<DiscreteManifold> {
    if n < 2 {
        return Err(Error::InvalidArgument("path needs at least 2 vertices".into()));
    }
    let h = 1.0 / (n - 1) as f64;
    let mut vol = vec![h; n];
    vol[0] = h / 2.0;
    vol[n - 1] = h / 2.0;
    DiscreteManifold::graph(1, vol, path_edges(n, h))
}

/// Path with every volume, length and edge weight equal to `spacing`.
pub fn path_uniform(n: usize, spacing: f64) -> Result<DiscreteManifold> {
    if n < 2 {
        return Err(Error::InvalidArgument("path needs at least 2 vertices".into()));
    }
    DiscreteManifold::graph(1, vec![spacing; n], path_edges(n, spacing))
}

fn path_edges(n: usize, h: f64) -> Vec<Edge> {
    (0..n - 1)
        .map(|i| Edge {
            tail: i,
            head: i + 1,
            length: h,
            weight: h,
        })
        .collect()
}

/// `n x n` periodic grid on the unit square; vertex `(i, j)` has index
/// `i * n + j` and sits at `(i/n, j/n)`.
pub fn flat_torus(n: usize) -> Result<DiscreteManifold> {
    if n < 3 {
        return Err(Error::InvalidArgument("flat_torus needs n >= 3".into()));
    }
    let h = 1.0 / n as f64;
    let idx = |i: usize, j: usize| (i % n) * n + (j % n);
    let area = 0.5 * h * h;
    let mut tris = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            tris.push(Triangle::new([a, b, c], [[0.0, 0.0], [h, 0.0], [h, h]], area)?);
            tris.push(Triangle::new([a, c, d], [[0.0, 0.0], [h, h], [0.0, h]], area)?);
        }
    }
    DiscreteManifold::mesh(vec![h * h; n * n], tris)
}

/// Torus of revolution with radius ratio `R/r`, scaled so that the smooth
/// surface has area 1. Returns the manifold and the scaled `(R, r)`.
pub fn parametric_torus(n: usize, m: usize, ratio: f64) -> Result<(DiscreteManifold, (f64, f64))> {
    if n < 3 || m < 3 {
        return Err(Error::InvalidArgument("parametric_torus needs n, m >= 3".into()));
    }
    if !(ratio > 1.0) {
        return Err(Error::InvalidArgument("parametric_torus needs R/r > 1".into()));
    }
    // Area 4 pi^2 R r = 1.
    let r = (1.0 / (4.0 * PI * PI * ratio)).sqrt();
    let big_r = ratio * r;
    let mut pos = Vec::with_capacity(n * m);
    for i in 0..n {
        let u = 2.0 * PI * i as f64 / n as f64;
        for j in 0..m {
            let v = 2.0 * PI * j as f64 / m as f64;
            let rho = big_r + r * v.cos();
            pos.push([rho * u.cos(), rho * u.sin(), r * v.sin()]);
        }
    }
    let idx = |i: usize, j: usize| (i % n) * m + (j % m);
    let mut faces = Vec::with_capacity(2 * n * m);
    for i in 0..n {
        for j in 0..m {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    Ok((DiscreteManifold::mesh_from_positions(&pos, &faces)?, (big_r, r)))
}

/// Gaussian curvature of the scaled parametric torus at poloidal angle `v`.
pub fn torus_gaussian_curvature(radii: (f64, f64), v: f64) -> f64 {
    let (big_r, r) = radii;
    v.cos() / (r * (big_r + r * v.cos()))
}

struct Step;
impl FieldGenerator for Step {
    fn generate(&self, b: &Builtin, _: &[f64]) -> Result<ScalarField> {
        let xmax = b.coords.iter().map(|c| c[0]).fold(0.0, f64::max);
        let cut = if b.periodic { 0.5 } else { 0.5 * xmax };
        Ok(ScalarField::from_real(
            &b.coords
                .iter()
                .map(|c| if c[0] < cut { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        ))
    }
}

struct DiskIndicator;
impl FieldGenerator for DiskIndicator {
    fn generate(&self, b: &Builtin, p: &[f64]) -> Result<ScalarField> {
        let r = p.first().copied().unwrap_or(0.2);
        if !(r > 0.0) {
            return Err(Error::InvalidArgument("disk_indicator radius must be > 0".into()));
        }
        let vals: Vec<f64> = b
            .coords
            .iter()
            .map(|c| {
                let (dx, dy) = (c[0] - 0.5, c[1] - 0.5);
                if dx.hypot(dy) <= r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(ScalarField::from_real(&vals))
    }
}

/// `sin(2 pi k x)`, or with a second parameter `1` the complex wave
/// `exp(2 pi i k x)`.
struct Sinusoid;
impl FieldGenerator for Sinusoid {
    fn generate(&self, b: &Builtin, p: &[f64]) -> Result<ScalarField> {
        let k = p.first().copied().unwrap_or(1.0);
        let complex = p.get(1).copied().unwrap_or(0.0) != 0.0;
        Ok(ScalarField(
            b.coords
                .iter()
                .map(|c| {
                    let phase = 2.0 * PI * k * c[0];
                    if complex {
                        Complex64::from_polar(1.0, phase)
                    } else {
                        Complex64::new(phase.sin(), 0.0)
                    }
                })
                .collect(),
        ))
    }
}

/// Independent complex entries uniform in `[-1,1]^2`.
struct RandomField;
impl FieldGenerator for RandomField {
    fn generate(&self, b: &Builtin, p: &[f64]) -> Result<ScalarField> {
        let seed = p.first().copied().unwrap_or(0.0) as u64;
        Ok(random_field(b.manifold.n_vertices(), seed))
    }
}

pub fn random_field(n: usize, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField(
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )
}

/// Connected graph on `n` vertices: a random spanning tree plus up to `n`
/// extra edges, with lengths, weights and volumes drawn from fixed ranges.
pub fn random_graph(n: usize, dim: usize, seed: u64) -> Result<DiscreteManifold> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<Edge> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        seen.insert((j, i));
        edges.push(Edge {
            tail: j,
            head: i,
            length: rng.random_range(0.2..2.0),
            weight: rng.random_range(0.2..2.0),
        });
    }
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            edges.push(Edge {
                tail: a,
                head: b,
                length: rng.random_range(0.2..2.0),
                weight: rng.random_range(0.2..2.0),
            });
        }
    }
    let vol = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    DiscreteManifold::graph(dim, vol, edges)
}

/// One-form with independent complex entries uniform in `[-1,1]^2`.
pub fn random_one_form(m: &DiscreteManifold, seed: u64) -> OneForm {
    let k = m.site_components();
    let values = random_field(m.n_sites() * k, seed).0;
    OneForm::new(values, k)
}

pub fn manifolds() -> &'static Registry<dyn ManifoldGenerator> {
    static REG: OnceLock<Registry<dyn ManifoldGenerator>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn ManifoldGenerator> = Registry::new("builtin manifold");
        r.register("two_vertex", Arc::new(TwoVertex))
            .register("cycle", Arc::new(Cycle))
            .register("path", Arc::new(Path))
            .register("flat_torus", Arc::new(FlatTorus))
            .register("parametric_torus", Arc::new(ParametricTorus));
        r
    })
}

pub fn fields() -> &'static Registry<dyn FieldGenerator> {
    static REG: OnceLock<Registry<dyn FieldGenerator>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn FieldGenerator> = Registry::new("builtin field");
        r.register("step", Arc::new(Step))
            .register("disk_indicator", Arc::new(DiskIndicator))
            .register("sinusoid", Arc::new(Sinusoid))
            .register("random", Arc::new(RandomField));
        r
    })
}

/// Generates a builtin manifold from a selector string such as `cycle(512)`.
pub fn generate_builtin(selector: &str) -> Result<Builtin> {
    let sel = Selector::parse(selector)?;
    manifolds().get(&sel.name)?.generate(&sel.params)
}

/// Generates a builtin field on `b` from a selector such as `disk_indicator(0.2)`.
pub fn generate_field(b: &Builtin, selector: &str) -> Result<ScalarField> {
    let sel = Selector::parse(selector)?;
    fields().get(&sel.name)?.generate(b, &sel.params)
}
