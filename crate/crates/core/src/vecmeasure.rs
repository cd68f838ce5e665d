//! Vector-valued measures on finite point sets.
//!
//! A measure is a finite set of atoms, each carrying a vector in `R^m` or
//! `C^m`. For atomic measures the supremum over partitions defining the
//! total variation is attained by the partition into single atoms, so
//! `TV = sum_atoms |nu(atom)|`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Real,
    Complex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteVectorMeasure {
    dim: usize,
    field: Field,
    atoms: BTreeMap<usize, Vec<Complex64>>,
}

impl FiniteVectorMeasure {
    pub fn new(dim: usize, field: Field) -> Self {
        assert!(dim > 0, "vector measures need dimension >= 1");
        Self {
            dim,
            field,
            atoms: BTreeMap::new(),
        }
    }

    /// Adds `value` to the atom at `point`.
    pub fn insert(&mut self, point: usize, value: Vec<Complex64>) -> Result<()> {
        check_len("measure atom components", self.dim, value.len())?;
        if self.field == Field::Real && value.iter().any(|v| v.im != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "atom at point {point} has an imaginary part in a real measure"
            )));
        }
        match self.atoms.get_mut(&point) {
            Some(a) => a.iter_mut().zip(&value).for_each(|(x, y)| *x += y),
            None => {
                self.atoms.insert(point, value);
            }
        }
        Ok(())
    }

    pub fn from_real_atoms(dim: usize, atoms: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Result<Self> {
        let mut nu = Self::new(dim, Field::Real);
        for (p, v) in atoms {
            nu.insert(p, v.into_iter().map(|x| Complex64::new(x, 0.0)).collect())?;
        }
        Ok(nu)
    }

    pub fn from_complex_atoms(
        dim: usize,
        atoms: impl IntoIterator<Item = (usize, Vec<Complex64>)>,
    ) -> Result<Self> {
        let mut nu = Self::new(dim, Field::Complex);
        for (p, v) in atoms {
            nu.insert(p, v)?;
        }
        Ok(nu)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn atoms(&self) -> &BTreeMap<usize, Vec<Complex64>> {
        &self.atoms
    }

    /// `nu(B)` for a set of points `B`.
    pub fn measure_of(&self, points: &[usize]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.dim];
        for p in points {
            if let Some(a) = self.atoms.get(p) {
                out.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            }
        }
        out
    }

    pub fn total_variation(&self) -> f64 {
        self.atoms.values().map(|a| vector_norm(a)).sum()
    }

    /// `(Re nu, Im nu)` as a real measure of twice the dimension.
    pub fn complex_to_real(&self) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|(&p, a)| {
                let v = a
                    .iter()
                    .map(|z| Complex64::new(z.re, 0.0))
                    .chain(a.iter().map(|z| Complex64::new(z.im, 0.0)))
                    .collect();
                (p, v)
            })
            .collect();
        Self {
            dim: 2 * self.dim,
            field: Field::Real,
            atoms,
        }
    }

    /// `d nu = sigma d|nu|`; atoms with zero vector are dropped.
    pub fn polar(&self) -> PolarMeasure {
        let mut mass = BTreeMap::new();
        let mut sigma = BTreeMap::new();
        for (&p, a) in &self.atoms {
            let n = vector_norm(a);
            if n > 0.0 {
                mass.insert(p, n);
                sigma.insert(p, a.iter().map(|z| z / n).collect());
            }
        }
        PolarMeasure {
            dim: self.dim,
            field: self.field,
            mass,
            sigma,
        }
    }

    /// `sum_atoms (f(p), nu(p))`, conjugate-linear in `f`. Points missing
    /// from `f` contribute nothing.
    pub fn pair(&self, f: &BTreeMap<usize, Vec<Complex64>>) -> Result<Complex64> {
        let mut acc = Complex64::new(0.0, 0.0);
        for (p, a) in &self.atoms {
            if let Some(v) = f.get(p) {
                check_len("test field components", self.dim, v.len())?;
                acc += v.iter().zip(a).map(|(x, y)| x.conj() * y).sum::<Complex64>();
            }
        }
        Ok(acc)
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        out.atoms.values_mut().for_each(|a| a.iter_mut().for_each(|z| *z *= c));
        if c.im != 0.0 {
            out.field = Field::Complex;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_len("measure dimension", self.dim, other.dim)?;
        let mut out = self.clone();
        if other.field == Field::Complex {
            out.field = Field::Complex;
        }
        for (&p, a) in &other.atoms {
            out.insert(p, a.clone())?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let nu: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if nu.dim == 0 {
            return Err(Error::Validation("measure dimension must be >= 1".into()));
        }
        for (p, a) in &nu.atoms {
            if a.len() != nu.dim {
                return Err(Error::Validation(format!(
                    "atom at point {p} has {} components, expected {}",
                    a.len(),
                    nu.dim
                )));
            }
        }
        Ok(nu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarMeasure {
    pub dim: usize,
    pub field: Field,
    pub mass: BTreeMap<usize, f64>,
    pub sigma: BTreeMap<usize, Vec<Complex64>>,
}

impl PolarMeasure {
    pub fn total_mass(&self) -> f64 {
        self.mass.values().sum()
    }

    /// `sigma |nu|` as a vector measure.
    pub fn reconstruct(&self) -> FiniteVectorMeasure {
        let atoms = self
            .mass
            .iter()
            .map(|(&p, &m)| (p, self.sigma[&p].iter().map(|z| z * m).collect()))
            .collect();
        FiniteVectorMeasure {
            dim: self.dim,
            field: self.field,
            atoms,
        }
    }
}

fn vector_norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest atom count [`partition_supremum`] accepts.
pub const PARTITION_ATOM_LIMIT: usize = 10;

/// All set partitions of `0..n` as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    fn rec(i: usize, n: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<Vec<usize>>>) {
        if i == n {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut blocks = vec![Vec::new(); k];
            for (j, &l) in labels.iter().enumerate() {
                blocks[l].push(j);
            }
            out.push(blocks);
            return;
        }
        let next = labels.iter().max().map_or(0, |m| m + 1);
        for l in 0..=next {
            labels.push(l);
            rec(i + 1, n, labels, out);
            labels.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), &mut out);
    out
}

/// Brute-force supremum over partitions of the atom set of `sum_blocks |nu(block)|`.
pub fn partition_supremum(nu: &FiniteVectorMeasure) -> Result<f64> {
    if nu.atoms().len() > PARTITION_ATOM_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "partition supremum enumerates Bell-many partitions; at most {PARTITION_ATOM_LIMIT} atoms (got {})",
            nu.atoms().len()
        )));
    }
    let pts: Vec<usize> = nu.atoms().keys().copied().collect();
    Ok(set_partitions(pts.len())
        .into_iter()
        .map(|blocks| {
            blocks
                .iter()
                .map(|b| {
                    let ids: Vec<usize> = b.iter().map(|&j| pts[j]).collect();
                    vector_norm(&nu.measure_of(&ids))
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}
