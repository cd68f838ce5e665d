//! File formats.
//!
//! Manifolds are JSON documents with a `schema_version`:
//!
//! ```json
//! { "schema_version": 1, "mode": "graph", "dimension": 1,
//!   "vertices": [{ "id": 0, "volume": 0.5 }, { "id": 1, "volume": 0.5 }],
//!   "edges": [{ "tail": 0, "head": 1, "length": 1.0, "weight": 1.0 }] }
//! ```
//!
//! Mesh documents list `triangles` with `vertices`, flat `corners` and a
//! `weight`, or alternatively embedded `positions` with `faces`, in which
//! case weights are triangle areas and vertex volumes are one third of the
//! adjacent areas. The same convention applies to OFF files.
//!
//! Fields are CSV with header `vertex_id,re,im`. Endomorphism fields are CSV
//! rows `vertex_id` followed by the `m*m` real entries in row-major order,
//! or `2*m*m` values when each entry is written as a `re,im` pair.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::curvature::EndomorphismField;
use crate::error::{Error, Result};
use crate::geometry::{DiscreteManifold, Edge, Mode, ScalarField, Triangle};

pub const MANIFOLD_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldDoc {
    pub schema_version: u32,
    pub mode: Mode,
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub vertices: Vec<VertexDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triangles: Vec<TriangleDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faces: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexDoc {
    pub id: usize,
    pub volume: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriangleDoc {
    pub vertices: [usize; 3],
    pub corners: [[f64; 2]; 3],
    /// Defaults to the corner area.
    #[serde(default)]
    pub weight: Option<f64>,
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path.is_empty() || path == "." {
            Error::Parse(format!("{what}: {inner}"))
        } else {
            Error::Parse(format!("{what}: field `{path}`: {inner}"))
        }
    })
}

impl ManifoldDoc {
    pub fn from_manifold(m: &DiscreteManifold) -> Self {
        let vertices = m
            .volumes()
            .iter()
            .enumerate()
            .map(|(id, &volume)| VertexDoc { id, volume })
            .collect();
        let (edges, triangles) = match m.mode() {
            Mode::Graph => (
                m.edges()
                    .iter()
                    .map(|e| EdgeDoc {
                        tail: e.tail,
                        head: e.head,
                        length: e.length,
                        weight: e.weight,
                    })
                    .collect(),
                Vec::new(),
            ),
            Mode::Mesh => (
                Vec::new(),
                m.triangles()
                    .iter()
                    .map(|t| TriangleDoc {
                        vertices: t.vertices,
                        corners: t.corners,
                        weight: Some(t.weight),
                    })
                    .collect(),
            ),
        };
        Self {
            schema_version: MANIFOLD_SCHEMA_VERSION,
            mode: m.mode(),
            dimension: Some(m.dim()),
            vertices,
            edges,
            triangles,
            positions: Vec::new(),
            faces: Vec::new(),
        }
    }

    pub fn build(&self) -> Result<DiscreteManifold> {
        if self.schema_version != MANIFOLD_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "schema_version: unsupported version {} (expected {MANIFOLD_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.mode {
            Mode::Graph => {
                if !self.triangles.is_empty() || !self.faces.is_empty() {
                    return Err(Error::Validation(
                        "triangles: graph documents take edges only".into(),
                    ));
                }
                let vol = self.volumes()?;
                let dim = self.dimension.unwrap_or(1);
                let edges = self
                    .edges
                    .iter()
                    .map(|e| Edge {
                        tail: e.tail,
                        head: e.head,
                        length: e.length,
                        weight: e.weight,
                    })
                    .collect();
                DiscreteManifold::graph(dim, vol, edges)
            }
            Mode::Mesh => {
                if let Some(d) = self.dimension.filter(|&d| d != 2) {
                    return Err(Error::Validation(format!(
                        "dimension: meshes are surfaces, got {d}"
                    )));
                }
                if !self.edges.is_empty() {
                    return Err(Error::Validation(
                        "edges: mesh documents derive edges from triangles".into(),
                    ));
                }
                if !self.positions.is_empty() || !self.faces.is_empty() {
                    if !self.triangles.is_empty() || !self.vertices.is_empty() {
                        return Err(Error::Validation(
                            "positions: give either positions/faces or vertices/triangles".into(),
                        ));
                    }
                    return DiscreteManifold::mesh_from_positions(&self.positions, &self.faces);
                }
                let vol = self.volumes()?;
                let tris = self
                    .triangles
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let area = corner_area(&t.corners);
                        Triangle::new(t.vertices, t.corners, t.weight.unwrap_or(area))
                            .map_err(|e| Error::Validation(format!("triangles[{i}]: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                DiscreteManifold::mesh(vol, tris)
            }
        }
    }

    fn volumes(&self) -> Result<Vec<f64>> {
        let n = self.vertices.len();
        let mut vol = vec![f64::NAN; n];
        for (i, v) in self.vertices.iter().enumerate() {
            if v.id >= n {
                return Err(Error::Validation(format!(
                    "vertices[{i}].id = {} is outside 0..{n}",
                    v.id
                )));
            }
            if !vol[v.id].is_nan() {
                return Err(Error::Validation(format!(
                    "vertices[{i}].id = {} is repeated",
                    v.id
                )));
            }
            if !(v.volume > 0.0 && v.volume.is_finite()) {
                return Err(Error::Validation(format!(
                    "vertices[{i}].volume must be > 0 (got {})",
                    v.volume
                )));
            }
            vol[v.id] = v.volume;
        }
        Ok(vol)
    }
}

fn corner_area(c: &[[f64; 2]; 3]) -> f64 {
    let (a, b) = ([c[1][0] - c[0][0], c[1][1] - c[0][1]], [c[2][0] - c[0][0], c[2][1] - c[0][1]]);
    0.5 * (a[0] * b[1] - a[1] * b[0]).abs()
}

pub fn parse_manifold_json(text: &str) -> Result<DiscreteManifold> {
    parse_json::<ManifoldDoc>(text, "manifold")?.build()
}

pub fn manifold_to_json(m: &DiscreteManifold) -> String {
    serde_json::to_string_pretty(&ManifoldDoc::from_manifold(m)).expect("manifold documents serialize")
}

/// OFF mesh (`OFF`, counts line, vertex lines, triangle lines). `#`
/// comments are ignored.
pub fn parse_off(text: &str) -> Result<DiscreteManifold> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    match tokens.next() {
        Some("OFF") => {}
        other => {
            return Err(Error::Parse(format!(
                "OFF: expected header `OFF`, found {:?}",
                other.unwrap_or("end of file")
            )))
        }
    }
    let mut next = |what: &str| -> Result<&str> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("OFF: unexpected end of file reading {what}")))
    };
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
        s.parse()
            .map_err(|_| Error::Parse(format!("OFF: {what}: cannot parse `{s}`")))
    }
    let nv: usize = num(next("vertex count")?, "vertex count")?;
    let nf: usize = num(next("face count")?, "face count")?;
    let _edges: usize = num(next("edge count")?, "edge count")?;
    let mut pos = Vec::with_capacity(nv);
    for i in 0..nv {
        let mut p = [0.0; 3];
        for (k, v) in p.iter_mut().enumerate() {
            let what = format!("vertex {i} coordinate {k}");
            *v = num(next(&what)?, &what)?;
        }
        pos.push(p);
    }
    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let what = format!("face {i} size");
        let k: usize = num(next(&what)?, &what)?;
        if k != 3 {
            return Err(Error::Validation(format!("OFF: face {i} has {k} vertices, only triangles are supported")));
        }
        let mut f = [0usize; 3];
        for (j, v) in f.iter_mut().enumerate() {
            let what = format!("face {i} vertex {j}");
            *v = num(next(&what)?, &what)?;
        }
        faces.push(f);
    }
    DiscreteManifold::mesh_from_positions(&pos, &faces)
}

/// Reads a manifold from a `.json` or `.off` file.
pub fn read_manifold(path: &Path) -> Result<DiscreteManifold> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read manifold file {}: {e}", path.display())))?;
    let off = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("off"));
    if off {
        parse_off(&text)
    } else {
        parse_manifold_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldRow {
    vertex_id: usize,
    re: f64,
    #[serde(default)]
    im: f64,
}

fn csv_error(what: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| format!(" (line {})", p.line())).unwrap_or_default();
    Error::Parse(format!("{what}{line}: {e}"))
}

/// Field CSV with header `vertex_id,re,im`; every vertex exactly once.
pub fn parse_field_csv(text: &str, n_vertices: usize) -> Result<ScalarField> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut values: Vec<Option<Complex64>> = vec![None; n_vertices];
    for (i, row) in rdr.deserialize::<FieldRow>().enumerate() {
        let row = row.map_err(|e| csv_error("field CSV", e))?;
        let slot = values.get_mut(row.vertex_id).ok_or_else(|| {
            Error::Validation(format!(
                "field CSV row {}: vertex_id {} is outside 0..{n_vertices}",
                i + 1,
                row.vertex_id
            ))
        })?;
        if slot.is_some() {
            return Err(Error::Validation(format!(
                "field CSV row {}: vertex_id {} is repeated",
                i + 1,
                row.vertex_id
            )));
        }
        if !row.re.is_finite() || !row.im.is_finite() {
            return Err(Error::Validation(format!("field CSV row {}: non-finite value", i + 1)));
        }
        *slot = Some(Complex64::new(row.re, row.im));
    }
    let missing: Vec<usize> = (0..n_vertices).filter(|&x| values[x].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "field CSV: {} vertices have no value (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    Ok(ScalarField(values.into_iter().map(Option::unwrap).collect()))
}

pub fn field_to_csv(f: &ScalarField) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (x, z) in f.0.iter().enumerate() {
        w.serialize(FieldRow {
            vertex_id: x,
            re: z.re,
            im: z.im,
        })
        .expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV is UTF-8")
}

/// Endomorphism CSV for an `m`-dimensional fiber over `n_points` points.
/// A header row is optional.
pub fn parse_endomorphism_csv(text: &str, dim: usize, n_points: usize) -> Result<EndomorphismField> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let real = dim * dim;
    let mut mats: Vec<Option<DMatrix<Complex64>>> = vec![None; n_points];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error("endomorphism CSV", e))?;
        let line = i + 1;
        let first = rec.get(0).unwrap_or("");
        let Ok(x) = first.parse::<usize>() else {
            if i == 0 {
                continue;
            }
            return Err(Error::Parse(format!("endomorphism CSV line {line}: bad vertex_id `{first}`")));
        };
        let vals = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(k, s)| {
                s.parse::<f64>().map_err(|_| {
                    Error::Parse(format!("endomorphism CSV line {line} column {}: cannot parse `{s}`", k + 2))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let entries: Vec<Complex64> = if vals.len() == real {
            vals.iter().map(|&v| Complex64::new(v, 0.0)).collect()
        } else if vals.len() == 2 * real {
            vals.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()
        } else {
            return Err(Error::Validation(format!(
                "endomorphism CSV line {line}: expected {real} or {} entries for a {dim}x{dim} matrix, got {}",
                2 * real,
                vals.len()
            )));
        };
        let slot = mats.get_mut(x).ok_or_else(|| {
            Error::Validation(format!("endomorphism CSV line {line}: vertex_id {x} is outside 0..{n_points}"))
        })?;
        if slot.is_some() {
            return Err(Error::Validation(format!("endomorphism CSV line {line}: vertex_id {x} is repeated")));
        }
        *slot = Some(DMatrix::from_row_slice(dim, dim, &entries));
    }
    if let Some(x) = mats.iter().position(Option::is_none) {
        return Err(Error::Validation(format!("endomorphism CSV: vertex {x} has no matrix")));
    }
    EndomorphismField::new(dim, mats.into_iter().map(Option::unwrap).collect())
}

/// Writes `vertex_id` followed by row-major `re,im` pairs.
pub fn endomorphism_to_csv(r: &EndomorphismField) -> String {
    let m = r.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["vertex_id".to_string()];
    for i in 0..m {
        for j in 0..m {
            header.push(format!("re_{i}{j}"));
            header.push(format!("im_{i}{j}"));
        }
    }
    w.write_record(&header).expect("in-memory CSV");
    for (x, mat) in r.matrices().iter().enumerate() {
        let mut rec = vec![x.to_string()];
        for i in 0..m {
            for j in 0..m {
                rec.push(mat[(i, j)].re.to_string());
                rec.push(mat[(i, j)].im.to_string());
            }
        }
        w.write_record(&rec).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;

    #[test]
    fn graph_round_trip() {
        let m = builtin::random_graph(9, 2, 4).unwrap();
        let back = parse_manifold_json(&manifold_to_json(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mesh_round_trip() {
        let (m, _) = builtin::parametric_torus(5, 4, 2.0).unwrap();
        let back = parse_manifold_json(&manifold_to_json(&m)).unwrap();
        assert_eq!(back.volumes(), m.volumes());
        assert_eq!(back.triangles(), m.triangles());
    }

    #[test]
    fn errors_name_the_field() {
        let bad_type = r#"{"schema_version": 1, "mode": "graph",
            "vertices": [{"id": 0, "volume": 1}, {"id": 1, "volume": 1}],
            "edges": [{"tail": 0, "head": 1, "length": "long", "weight": 1}]}"#;
        let e = parse_manifold_json(bad_type).unwrap_err().to_string();
        assert!(e.contains("edges[0].length"), "{e}");

        let bad_value = r#"{"schema_version": 1, "mode": "graph",
            "vertices": [{"id": 0, "volume": 1}, {"id": 1, "volume": -1}],
            "edges": [{"tail": 0, "head": 1, "length": 1, "weight": 1}]}"#;
        let e = parse_manifold_json(bad_value).unwrap_err().to_string();
        assert!(e.contains("vertices[1].volume"), "{e}");

        let bad_length = r#"{"schema_version": 1, "mode": "graph",
            "vertices": [{"id": 0, "volume": 1}, {"id": 1, "volume": 1}],
            "edges": [{"tail": 0, "head": 1, "length": 0, "weight": 1}]}"#;
        let e = parse_manifold_json(bad_length).unwrap_err().to_string();
        assert!(e.contains("edges[0].length"), "{e}");

        let unknown = r#"{"schema_version": 1, "mode": "graph", "verts": []}"#;
        let e = parse_manifold_json(unknown).unwrap_err().to_string();
        assert!(e.contains("verts"), "{e}");

        let version = r#"{"schema_version": 7, "mode": "graph", "vertices": []}"#;
        let e = parse_manifold_json(version).unwrap_err().to_string();
        assert!(e.contains("schema_version"), "{e}");
    }

    #[test]
    fn positions_document() {
        let doc = r#"{"schema_version": 1, "mode": "mesh",
            "positions": [[0,0,0],[1,0,0],[1,1,0],[0,1,0]],
            "faces": [[0,1,2],[0,2,3]]}"#;
        let m = parse_manifold_json(doc).unwrap();
        assert_eq!(m.triangles().len(), 2);
        assert!((m.total_volume() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn off_square() {
        let text = "OFF\n# unit square\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n";
        let m = parse_off(text).unwrap();
        assert_eq!(m.volumes(), &[1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0]);
        assert!(parse_off("OFF\n4 1 0\n0 0 0\n").is_err());
        assert!(parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").is_err());
        assert!(parse_off("PLY\n").is_err());
    }

    #[test]
    fn field_csv_round_trip() {
        let f = builtin::random_field(6, 2);
        let back = parse_field_csv(&field_to_csv(&f), 6).unwrap();
        assert_eq!(back, f);
        let shuffled = "vertex_id,re,im\n1, 2.0, 0\n0, 1.0, -1\n";
        let g = parse_field_csv(shuffled, 2).unwrap();
        assert_eq!(g.0, vec![Complex64::new(1.0, -1.0), Complex64::new(2.0, 0.0)]);
        assert!(parse_field_csv("vertex_id,re,im\n0,1,0\n", 2).is_err());
        assert!(parse_field_csv("vertex_id,re,im\n0,1,0\n0,1,0\n", 1).is_err());
        assert!(parse_field_csv("vertex_id,re,im\n0,x,0\n", 1).is_err());
    }

    #[test]
    fn endomorphism_csv() {
        let text = "vertex_id,r00,r01,r10,r11\n0,1,2,2,1\n1,0,0,0,-3\n";
        let r = parse_endomorphism_csv(text, 2, 2).unwrap();
        assert_eq!(r.get(0)[(0, 1)], Complex64::new(2.0, 0.0));
        let back = parse_endomorphism_csv(&endomorphism_to_csv(&r), 2, 2).unwrap();
        assert_eq!(back, r);
        assert!(parse_endomorphism_csv("0,1,2,3,1\n", 2, 1).is_err());
        assert!(parse_endomorphism_csv("0,1,2\n", 2, 1).is_err());
    }
}
