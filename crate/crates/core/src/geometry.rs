//! Discrete Riemannian structures and their first-order calculus.
//!
//! Two backends share one interface:
//!
//! * **graph**: gradient sites are edges. A scalar field differentiates to one
//!   complex number per canonically oriented edge, `(df)_e = f(head) - f(tail)`,
//!   and the fiber norm of a covector value `a` on edge `e` is `|a| / len_e`.
//! * **mesh**: gradient sites are triangles. A scalar field differentiates to
//!   the constant gradient of its piecewise-linear interpolant, a complex
//!   2-vector expressed in the triangle's local orthonormal frame.
//!
//! In both cases the site inner product is
//! `<a, b>_sites = sum_s w_s (a_s, b_s)_s` and the vertex inner product is
//! `<f, g> = sum_x vol_x conj(f_x) g_x`. The codifferential is defined as the
//! exact adjoint of the exterior derivative for these two products.

use std::collections::{BinaryHeap, HashMap};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Graph,
    Mesh,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Graph => "graph",
            Mode::Mesh => "mesh",
        }
    }
}

/// An edge stored once with `tail < head`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    /// Site volume. In mesh mode this is one third of the adjacent
    /// triangle weights and only serves bookkeeping.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triangle {
    pub vertices: [usize; 3],
    /// Corner positions in a local flat frame of the triangle.
    pub corners: [[f64; 2]; 3],
    pub weight: f64,
    hat_gradients: [[f64; 2]; 3],
}

impl Triangle {
    pub fn new(vertices: [usize; 3], corners: [[f64; 2]; 3], weight: f64) -> Result<Self> {
        let e1 = sub(corners[1], corners[0]);
        let e2 = sub(corners[2], corners[0]);
        let det = e1[0] * e2[1] - e1[1] * e2[0];
        let scale = dot(e1, e1).max(dot(e2, e2));
        if !det.is_finite() || !(det.abs() > 1e-14 * scale) {
            return Err(Error::Validation(format!(
                "triangle {vertices:?} is degenerate (signed double area {det:e})"
            )));
        }
        let g1 = [e2[1] / det, -e2[0] / det];
        let g2 = [-e1[1] / det, e1[0] / det];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        Ok(Self {
            vertices,
            corners,
            weight,
            hat_gradients: [g0, g1, g2],
        })
    }

    /// Area of the flat triangle spanned by the corners.
    pub fn area(&self) -> f64 {
        let e1 = sub(self.corners[1], self.corners[0]);
        let e2 = sub(self.corners[2], self.corners[0]);
        0.5 * (e1[0] * e2[1] - e1[1] * e2[0]).abs()
    }

    /// Gradients of the three barycentric hat functions.
    pub fn hat_gradients(&self) -> &[[f64; 2]; 3] {
        &self.hat_gradients
    }

    fn scaled(&self, factor: f64, weight_factor: f64) -> Self {
        let corners = self.corners.map(|p| [p[0] * factor, p[1] * factor]);
        let hat_gradients = self.hat_gradients.map(|g| [g[0] / factor, g[1] / factor]);
        Self {
            vertices: self.vertices,
            corners,
            weight: self.weight * weight_factor,
            hat_gradients,
        }
    }
}

/// Flattens a triangle embedded in R^3 into a local 2-D frame that keeps
/// its edge lengths.
pub fn flatten_triangle(p: [[f64; 3]; 3]) -> [[f64; 2]; 3] {
    let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
    let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
    let l1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    let proj = (e1[0] * e2[0] + e1[1] * e2[1] + e1[2] * e2[2]) / l1;
    let cross = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let height = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt() / l1;
    [[0.0, 0.0], [l1, 0.0], [proj, height]]
}

/// A weighted graph or triangulated surface with volume weights.
///
/// Immutable after construction; every constructor validates connectivity,
/// positivity of all volumes and lengths, and incidence consistency.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteManifold {
    mode: Mode,
    dim: usize,
    vol: Vec<f64>,
    edges: Vec<Edge>,
    triangles: Vec<Triangle>,
    vertex_edges: Vec<Vec<usize>>,
}

impl DiscreteManifold {
    /// Builds a graph-mode manifold. Edges may be given in either
    /// orientation; they are stored as `(min, max)`.
    pub fn graph(dim: usize, vol: Vec<f64>, edges: Vec<Edge>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("dimension must be positive".into()));
        }
        check_volumes(&vol)?;
        let n = vol.len();
        let mut seen = HashMap::new();
        let mut canon = Vec::with_capacity(edges.len());
        for (i, e) in edges.into_iter().enumerate() {
            if e.tail >= n || e.head >= n {
                return Err(Error::Validation(format!(
                    "edges[{i}] references a vertex outside 0..{n}"
                )));
            }
            if e.tail == e.head {
                return Err(Error::Validation(format!("edges[{i}] is a self-loop")));
            }
            if !(e.length > 0.0 && e.length.is_finite()) {
                return Err(Error::Validation(format!("edges[{i}].length must be > 0")));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::Validation(format!("edges[{i}].weight must be > 0")));
            }
            let (tail, head) = (e.tail.min(e.head), e.tail.max(e.head));
            if seen.insert((tail, head), i).is_some() {
                return Err(Error::Validation(format!(
                    "edges[{i}] duplicates edge ({tail}, {head})"
                )));
            }
            canon.push(Edge {
                tail,
                head,
                length: e.length,
                weight: e.weight,
            });
        }
        let m = Self {
            mode: Mode::Graph,
            dim,
            vertex_edges: incidence(n, &canon),
            vol,
            edges: canon,
            triangles: Vec::new(),
        };
        m.check_connected()?;
        Ok(m)
    }

    /// Builds a mesh-mode surface (dimension 2) from triangles with local
    /// corner coordinates. Edge lengths are read off the corners and must
    /// agree between the triangles sharing an edge.
    pub fn mesh(vol: Vec<f64>, triangles: Vec<Triangle>) -> Result<Self> {
        check_volumes(&vol)?;
        let n = vol.len();
        if triangles.is_empty() && n > 1 {
            return Err(Error::Validation("mesh without triangles".into()));
        }
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        for (t, tri) in triangles.iter().enumerate() {
            let v = tri.vertices;
            if v.iter().any(|&x| x >= n) {
                return Err(Error::Validation(format!(
                    "triangles[{t}] references a vertex outside 0..{n}"
                )));
            }
            if v[0] == v[1] || v[1] == v[2] || v[0] == v[2] {
                return Err(Error::Validation(format!(
                    "triangles[{t}] repeats a vertex"
                )));
            }
            if !(tri.weight > 0.0 && tri.weight.is_finite()) {
                return Err(Error::Validation(format!(
                    "triangles[{t}].weight must be > 0"
                )));
            }
            for k in 0..3 {
                let (a, b) = (k, (k + 1) % 3);
                let len = norm(sub(tri.corners[b], tri.corners[a]));
                let key = (v[a].min(v[b]), v[a].max(v[b]));
                match index.get(&key) {
                    Some(&e) => {
                        let other = edges[e].length;
                        if (other - len).abs() > 1e-9 * other.max(len) {
                            return Err(Error::Validation(format!(
                                "triangles[{t}] disagrees on the length of edge {key:?} ({len} vs {other})"
                            )));
                        }
                        edges[e].weight += tri.weight / 3.0;
                    }
                    None => {
                        index.insert(key, edges.len());
                        edges.push(Edge {
                            tail: key.0,
                            head: key.1,
                            length: len,
                            weight: tri.weight / 3.0,
                        });
                    }
                }
            }
        }
        let m = Self {
            mode: Mode::Mesh,
            dim: 2,
            vertex_edges: incidence(n, &edges),
            vol,
            edges,
            triangles,
        };
        m.check_connected()?;
        Ok(m)
    }

    /// Mesh from embedded vertex positions and faces. Vertex volumes are the
    /// lumped masses `vol_x = sum_{T ni x} area_T / 3` and triangle weights
    /// are the areas.
    pub fn mesh_from_positions(positions: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<Self> {
        let n = positions.len();
        let mut vol = vec![0.0; n];
        let mut tris = Vec::with_capacity(faces.len());
        for (t, f) in faces.iter().enumerate() {
            if f.iter().any(|&x| x >= n) {
                return Err(Error::Validation(format!(
                    "faces[{t}] references a vertex outside 0..{n}"
                )));
            }
            let corners = flatten_triangle([positions[f[0]], positions[f[1]], positions[f[2]]]);
            let e1 = sub(corners[1], corners[0]);
            let e2 = sub(corners[2], corners[0]);
            let area = 0.5 * (e1[0] * e2[1] - e1[1] * e2[0]).abs();
            let tri = Triangle::new(*f, corners, area)
                .map_err(|e| Error::Validation(format!("faces[{t}]: {e}")))?;
            for &x in f {
                vol[x] += area / 3.0;
            }
            tris.push(tri);
        }
        if let Some(x) = vol.iter().position(|&v| v <= 0.0) {
            return Err(Error::Validation(format!(
                "vertex {x} is not used by any face"
            )));
        }
        Self::mesh(vol, tris)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vol.len()
    }

    pub fn volumes(&self) -> &[f64] {
        &self.vol
    }

    pub fn total_volume(&self) -> f64 {
        self.vol.iter().sum()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    /// Edges incident to each vertex.
    pub fn vertex_edges(&self) -> &[Vec<usize>] {
        &self.vertex_edges
    }

    /// Number of gradient sites: edges in graph mode, triangles in mesh mode.
    pub fn n_sites(&self) -> usize {
        match self.mode {
            Mode::Graph => self.edges.len(),
            Mode::Mesh => self.triangles.len(),
        }
    }

    /// Complex components per gradient site.
    pub fn site_components(&self) -> usize {
        match self.mode {
            Mode::Graph => 1,
            Mode::Mesh => 2,
        }
    }

    pub fn site_volume(&self, s: usize) -> f64 {
        match self.mode {
            Mode::Graph => self.edges[s].weight,
            Mode::Mesh => self.triangles[s].weight,
        }
    }

    pub fn site_volumes(&self) -> Vec<f64> {
        (0..self.n_sites()).map(|s| self.site_volume(s)).collect()
    }

    /// Longest edge.
    pub fn mesh_size(&self) -> f64 {
        self.edges.iter().map(|e| e.length).fold(0.0, f64::max)
    }

    /// Diameter estimate in the edge-length metric, by a double Dijkstra
    /// sweep from vertex 0. Exact on paths and cycles; a lower bound in
    /// general.
    pub fn diameter(&self) -> f64 {
        if self.n_vertices() < 2 {
            return 0.0;
        }
        let d0 = self.distances_from(0);
        let far = argmax(&d0);
        let d1 = self.distances_from(far);
        d1.into_iter().fold(0.0, f64::max)
    }

    fn distances_from(&self, src: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                o.0.total_cmp(&self.0)
            }
        }
        let mut dist = vec![f64::INFINITY; self.n_vertices()];
        dist[src] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Item(0.0, src));
        while let Some(Item(d, x)) = heap.pop() {
            if d > dist[x] {
                continue;
            }
            for &e in &self.vertex_edges[x] {
                let edge = &self.edges[e];
                let y = if edge.tail == x { edge.head } else { edge.tail };
                let nd = d + edge.length;
                if nd < dist[y] {
                    dist[y] = nd;
                    heap.push(Item(nd, y));
                }
            }
        }
        dist
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.n_vertices();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = n;
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.tail), find(&mut parent, e.head));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        if components > 1 {
            return Err(Error::Validation(format!(
                "manifold is not connected ({components} components)"
            )));
        }
        Ok(())
    }

    fn check_scalar(&self, f: &ScalarField) -> Result<()> {
        check_len("scalar field vertices", self.n_vertices(), f.len())
    }

    fn check_form(&self, a: &OneForm) -> Result<()> {
        check_len("one-form components", self.site_components(), a.components)?;
        check_len("one-form sites", self.n_sites(), a.n_sites())
    }

    /// `sum_x vol_x conj(f_x) g_x`.
    pub fn vertex_inner(&self, f: &ScalarField, g: &ScalarField) -> Result<Complex64> {
        self.check_scalar(f)?;
        self.check_scalar(g)?;
        Ok(f.0
            .iter()
            .zip(&g.0)
            .zip(&self.vol)
            .map(|((a, b), v)| a.conj() * b * v)
            .sum())
    }

    /// `sum_s w_s (a_s, b_s)_s`.
    pub fn site_inner(&self, a: &OneForm, b: &OneForm) -> Result<Complex64> {
        self.check_form(a)?;
        self.check_form(b)?;
        Ok((0..self.n_sites())
            .map(|s| self.site_volume(s) * self.fiber_pairing(s, a.site(s), b.site(s)))
            .sum())
    }

    /// Fiber Hermitian pairing at site `s`, conjugate-linear in `a`.
    pub fn fiber_pairing(&self, s: usize, a: &[Complex64], b: &[Complex64]) -> Complex64 {
        match self.mode {
            Mode::Graph => {
                let l = self.edges[s].length;
                a[0].conj() * b[0] / (l * l)
            }
            Mode::Mesh => a[0].conj() * b[0] + a[1].conj() * b[1],
        }
    }

    /// Fiber norm at site `s`.
    pub fn fiber_norm(&self, s: usize, a: &[Complex64]) -> f64 {
        match self.mode {
            Mode::Graph => a[0].norm() / self.edges[s].length,
            Mode::Mesh => a[0].norm().hypot(a[1].norm()),
        }
    }

    /// `||f||_1 = sum_x vol_x |f_x|`.
    pub fn l1_norm(&self, f: &ScalarField) -> f64 {
        f.0.iter().zip(&self.vol).map(|(a, v)| a.norm() * v).sum()
    }

    pub fn exterior_derivative(&self, f: &ScalarField) -> Result<OneForm> {
        self.check_scalar(f)?;
        let values = match self.mode {
            Mode::Graph => self.edges.iter().map(|e| f.0[e.head] - f.0[e.tail]).collect(),
            Mode::Mesh => {
                let mut out = Vec::with_capacity(2 * self.triangles.len());
                for t in &self.triangles {
                    let mut g = [Complex64::new(0.0, 0.0); 2];
                    for (k, &x) in t.vertices.iter().enumerate() {
                        let h = t.hat_gradients[k];
                        g[0] += f.0[x] * h[0];
                        g[1] += f.0[x] * h[1];
                    }
                    out.extend_from_slice(&g);
                }
                out
            }
        };
        Ok(OneForm::new(values, self.site_components()))
    }

    /// Adjoint of [`Self::exterior_derivative`]:
    /// `<df, a>_sites = <f, d^dagger a>` for all `f`, `a`.
    pub fn codifferential(&self, a: &OneForm) -> Result<ScalarField> {
        self.check_form(a)?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_vertices()];
        match self.mode {
            Mode::Graph => {
                for (s, e) in self.edges.iter().enumerate() {
                    let c = a.values[s] * (e.weight / (e.length * e.length));
                    out[e.head] += c;
                    out[e.tail] -= c;
                }
            }
            Mode::Mesh => {
                for (s, t) in self.triangles.iter().enumerate() {
                    let v = a.site(s);
                    for (k, &x) in t.vertices.iter().enumerate() {
                        let h = t.hat_gradients[k];
                        out[x] += (v[0] * h[0] + v[1] * h[1]) * t.weight;
                    }
                }
            }
        }
        for (o, v) in out.iter_mut().zip(&self.vol) {
            *o /= *v;
        }
        Ok(ScalarField(out))
    }

    /// Pointwise norms of a one-form, one per gradient site.
    pub fn site_norm(&self, a: &OneForm) -> Result<Vec<f64>> {
        self.check_form(a)?;
        Ok((0..self.n_sites()).map(|s| self.fiber_norm(s, a.site(s))).collect())
    }

    /// Conformal change `g -> e^{2 psi} g`.
    ///
    /// Vertex volumes scale by `e^{m psi(x)}`; each site uses the mean of
    /// its vertex exponents, `psi_bar`: lengths scale by `e^{psi_bar}`, site
    /// volumes by `e^{m psi_bar}`, and triangle corners by `e^{psi_bar}`
    /// (metric by `e^{2 psi_bar}`).
    pub fn rescale_metric(&self, r: &MetricRescale) -> Result<Self> {
        check_len("metric rescale vertices", self.n_vertices(), r.0.len())?;
        if r.0.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("conformal exponent must be finite".into()));
        }
        let m = self.dim as f64;
        let psi = &r.0;
        let vol = self
            .vol
            .iter()
            .zip(psi)
            .map(|(v, p)| v * (m * p).exp())
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let pb = 0.5 * (psi[e.tail] + psi[e.head]);
                Edge {
                    tail: e.tail,
                    head: e.head,
                    length: e.length * pb.exp(),
                    weight: e.weight * (m * pb).exp(),
                }
            })
            .collect();
        let triangles = self
            .triangles
            .iter()
            .map(|t| {
                let pb = t.vertices.iter().map(|&x| psi[x]).sum::<f64>() / 3.0;
                t.scaled(pb.exp(), (m * pb).exp())
            })
            .collect();
        Ok(Self {
            mode: self.mode,
            dim: self.dim,
            vol,
            edges,
            triangles,
            vertex_edges: self.vertex_edges.clone(),
        })
    }
}

fn check_volumes(vol: &[f64]) -> Result<()> {
    if vol.is_empty() {
        return Err(Error::Validation("manifold has no vertices".into()));
    }
    for (i, v) in vol.iter().enumerate() {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::Validation(format!(
                "vertices[{i}].volume must be > 0 (got {v})"
            )));
        }
    }
    Ok(())
}

fn incidence(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut inc = vec![Vec::new(); n];
    for (i, e) in edges.iter().enumerate() {
        inc[e.tail].push(i);
        inc[e.head].push(i);
    }
    inc
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Complex values, one per vertex.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarField(pub Vec<Complex64>);

impl ScalarField {
    pub fn from_real(values: &[f64]) -> Self {
        Self(values.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn constant(n: usize, c: Complex64) -> Self {
        Self(vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.0
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.re).collect()
    }

    pub fn imag_parts(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.im).collect()
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Self {
        Self(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Complex covector values per gradient site, stored site-major with
/// `components` entries per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneForm {
    values: Vec<Complex64>,
    components: usize,
}

impl OneForm {
    pub fn new(values: Vec<Complex64>, components: usize) -> Self {
        assert!(components > 0 && values.len().is_multiple_of(components));
        Self { values, components }
    }

    pub fn zeros(n_sites: usize, components: usize) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); n_sites * components], components)
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn n_sites(&self) -> usize {
        self.values.len() / self.components
    }

    pub fn site(&self, s: usize) -> &[Complex64] {
        &self.values[s * self.components..(s + 1) * self.components]
    }

    pub fn site_mut(&mut self, s: usize) -> &mut [Complex64] {
        &mut self.values[s * self.components..(s + 1) * self.components]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self::new(self.values.iter().map(|v| v * c).collect(), self.components)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Conformal exponent `psi` per vertex; the metric becomes `e^{2 psi} g`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRescale(pub Vec<f64>);

impl MetricRescale {
    pub fn constant(n: usize, psi: f64) -> Self {
        Self(vec![psi; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_vertex() -> DiscreteManifold {
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
        .unwrap()
    }

    fn unit_square() -> DiscreteManifold {
        // Corners kept in the global frame so gradients are comparable.
        let t0 = Triangle::new([0, 1, 2], [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], 0.5).unwrap();
        let t1 = Triangle::new([0, 2, 3], [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]], 0.5).unwrap();
        DiscreteManifold::mesh(vec![1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0], vec![t0, t1])
            .unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> DiscreteManifold {
        let mut edges = Vec::new();
        for i in 1..n {
            let j = rng.random_range(0..i);
            edges.push(Edge {
                tail: j,
                head: i,
                length: rng.random_range(0.2..2.0),
                weight: rng.random_range(0.2..2.0),
            });
        }
        for _ in 0..n {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b
                && !edges
                    .iter()
                    .any(|e| (e.tail.min(e.head), e.tail.max(e.head)) == (a.min(b), a.max(b)))
            {
                edges.push(Edge {
                    tail: a,
                    head: b,
                    length: rng.random_range(0.2..2.0),
                    weight: rng.random_range(0.2..2.0),
                });
            }
        }
        let vol = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        DiscreteManifold::graph(2, vol, edges).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> ScalarField {
        ScalarField((0..n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
    }

    fn random_form(rng: &mut ChaCha8Rng, sites: usize, k: usize) -> OneForm {
        OneForm::new(
            (0..sites * k)
                .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
            k,
        )
    }

    #[test]
    fn d_of_constant_vanishes() {
        let m = unit_square();
        let df = m.exterior_derivative(&ScalarField::constant(4, c(2.5, -1.0))).unwrap();
        assert!(df.values().iter().all(|v| v.norm() < 1e-15));
        let g = two_vertex();
        let df = g.exterior_derivative(&ScalarField::constant(2, c(3.0, 0.0))).unwrap();
        assert_eq!(df.values()[0], c(0.0, 0.0));
    }

    #[test]
    fn two_vertex_difference_and_codifferential() {
        let m = two_vertex();
        let df = m.exterior_derivative(&ScalarField::from_real(&[1.0, 0.0])).unwrap();
        assert_eq!(df.values(), &[c(-1.0, 0.0)]);
        // With a->b canonical, <df, a> = <f, d^dagger a> forces (-1, 1).
        let da = m.codifferential(&OneForm::new(vec![c(1.0, 0.0)], 1)).unwrap();
        assert_eq!(da.values(), &[c(-1.0, 0.0), c(1.0, 0.0)]);
        let zero = m.codifferential(&OneForm::zeros(1, 1)).unwrap();
        assert!(zero.values().iter().all(|v| *v == c(0.0, 0.0)));
    }

    #[test]
    fn p1_gradient_of_linear_field() {
        let m = unit_square();
        let df = m.exterior_derivative(&ScalarField::from_real(&[0.0, 1.0, 1.0, 0.0])).unwrap();
        for s in 0..2 {
            let g = df.site(s);
            assert!((g[0] - c(1.0, 0.0)).norm() < 1e-14);
            assert!(g[1].norm() < 1e-14);
        }
    }

    #[test]
    fn adjointness_on_random_graphs_and_meshes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_graph(&mut rng, 10);
            let f = random_field(&mut rng, 10);
            let a = random_form(&mut rng, m.n_sites(), 1);
            let lhs = m.site_inner(&m.exterior_derivative(&f).unwrap(), &a).unwrap();
            let rhs = m.vertex_inner(&f, &m.codifferential(&a).unwrap()).unwrap();
            assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()), "{lhs} vs {rhs}");
        }
        let m = unit_square();
        for _ in 0..20 {
            let f = random_field(&mut rng, 4);
            let a = random_form(&mut rng, 2, 2);
            let lhs = m.site_inner(&m.exterior_derivative(&f).unwrap(), &a).unwrap();
            let rhs = m.vertex_inner(&f, &m.codifferential(&a).unwrap()).unwrap();
            assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
        }
    }

    #[test]
    fn step_on_circle_has_inverse_spacing_norm() {
        let n = 10;
        let h = 0.1;
        let edges = (0..n)
            .map(|i| Edge {
                tail: i,
                head: (i + 1) % n,
                length: h,
                weight: h,
            })
            .collect();
        let m = DiscreteManifold::graph(1, vec![h; n], edges).unwrap();
        let f: Vec<f64> = (0..n).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        let norms = m.site_norm(&m.exterior_derivative(&ScalarField::from_real(&f)).unwrap()).unwrap();
        let jumps: Vec<usize> = (0..n).filter(|&s| norms[s] > 0.0).collect();
        assert_eq!(jumps.len(), 2);
        for s in jumps {
            assert!((norms[s] - 1.0 / h).abs() < 1e-12);
        }
    }

    #[test]
    fn site_norm_is_a_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = unit_square();
        for _ in 0..50 {
            let a = random_form(&mut rng, 2, 2);
            let b = random_form(&mut rng, 2, 2);
            let z = c(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let na = m.site_norm(&a).unwrap();
            let nb = m.site_norm(&b).unwrap();
            let sum = OneForm::new(a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect(), 2);
            let ns = m.site_norm(&sum).unwrap();
            let nz = m.site_norm(&a.scale(z)).unwrap();
            for s in 0..2 {
                assert!(ns[s] <= na[s] + nb[s] + 1e-15);
                assert!((nz[s] - z.norm() * na[s]).abs() <= 1e-14 * (1.0 + nz[s]));
            }
        }
        assert!(m.site_norm(&OneForm::zeros(2, 2)).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rescale_identity_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_graph(&mut rng, 8);
        assert_eq!(m.rescale_metric(&MetricRescale::constant(8, 0.0)).unwrap(), m);
        let a = m.rescale_metric(&MetricRescale::constant(8, 0.3)).unwrap();
        let ab = a.rescale_metric(&MetricRescale::constant(8, -0.7)).unwrap();
        let direct = m.rescale_metric(&MetricRescale::constant(8, -0.4)).unwrap();
        for (x, y) in ab.volumes().iter().zip(direct.volumes()) {
            assert!((x - y).abs() <= 1e-14 * y);
        }
        for (x, y) in ab.edges().iter().zip(direct.edges()) {
            assert!((x.length - y.length).abs() <= 1e-14 * y.length);
            assert!((x.weight - y.weight).abs() <= 1e-14 * y.weight);
        }
    }

    #[test]
    fn validation_errors() {
        assert!(DiscreteManifold::graph(1, vec![1.0, 0.0], vec![]).is_err());
        let disconnected = DiscreteManifold::graph(1, vec![1.0, 1.0], vec![]);
        assert!(matches!(disconnected, Err(Error::Validation(_))));
        let bad_edge = DiscreteManifold::graph(
            1,
            vec![1.0, 1.0],
            vec![Edge {
                tail: 0,
                head: 2,
                length: 1.0,
                weight: 1.0,
            }],
        );
        assert!(bad_edge.is_err());
        assert!(Triangle::new([0, 1, 2], [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1.0).is_err());
        let m = two_vertex();
        assert!(matches!(
            m.exterior_derivative(&ScalarField::from_real(&[1.0])),
            Err(Error::Mismatch { .. })
        ));
        // A single vertex is a valid (trivial) manifold.
        let single = DiscreteManifold::graph(1, vec![2.0], vec![]).unwrap();
        assert_eq!(single.n_sites(), 0);
    }

    #[test]
    fn flatten_keeps_lengths() {
        let p = [[0.3, -1.0, 2.0], [1.5, 0.2, 1.1], [-0.4, 0.9, 0.0]];
        let q = flatten_triangle(p);
        let d3 = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((d3(p[i], p[j]) - norm(sub(q[i], q[j]))).abs() < 1e-12);
        }
    }
}
