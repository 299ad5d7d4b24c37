//! Flat-vector linear algebra.
//!
//! All reductions sum strictly left to right in index order. No pairwise or
//! compensated summation is used anywhere in the crate, so every result is
//! bitwise reproducible regardless of how callers schedule work.

use std::ops::{Deref, Index};

use crate::error::{Error, Result};

/// Flat parameter (or gradient) vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, v| acc + v * v)
}

pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_slice(a, b))
}

/// Returns `y + alpha * x`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    check_len(y.len(), x.len())?;
    Ok(ParamVector(
        y.iter().zip(x.iter()).map(|(yi, xi)| yi + alpha * xi).collect(),
    ))
}

/// Ordered set of equal-length column vectors.
///
/// Column order is part of the contract: callers push unlearning clients,
/// then remaining clients, then auxiliary objectives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientMatrix {
    dim: usize,
    columns: Vec<ParamVector>,
}

impl GradientMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            columns: Vec::new(),
        }
    }

    pub fn from_columns(columns: Vec<ParamVector>) -> Result<Self> {
        let dim = columns.first().map_or(0, ParamVector::len);
        for c in &columns {
            check_len(dim, c.len())?;
        }
        Ok(Self { dim, columns })
    }

    pub fn push(&mut self, column: ParamVector) -> Result<()> {
        if self.columns.is_empty() && self.dim == 0 {
            self.dim = column.len();
        }
        check_len(self.dim, column.len())?;
        self.columns.push(column);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[ParamVector] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &ParamVector {
        &self.columns[i]
    }

    pub fn max_column_norm(&self) -> f64 {
        self.columns.iter().map(ParamVector::norm).fold(0.0, f64::max)
    }

    /// `G * weights`, accumulated column by column in order.
    pub fn combine(&self, weights: &[f64]) -> Result<ParamVector> {
        check_len(self.ncols(), weights.len())?;
        let mut out = vec![0.0; self.dim];
        for (col, &w) in self.columns.iter().zip(weights) {
            for (o, v) in out.iter_mut().zip(col.iter()) {
                *o += w * v;
            }
        }
        Ok(ParamVector(out))
    }
}

impl Index<usize> for GradientMatrix {
    type Output = ParamVector;

    fn index(&self, i: usize) -> &ParamVector {
        &self.columns[i]
    }
}

/// Dense symmetric k×k matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    k: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|i| dot_slice(&self.data[i * self.k..(i + 1) * self.k], x))
            .collect()
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot_slice(x, &self.mul_vec(x))
    }
}

/// Pairwise inner products of the columns. Only the upper triangle is
/// computed; the lower triangle is mirrored so the result is exactly symmetric.
pub fn gram(g: &GradientMatrix) -> Result<SymMatrix> {
    let k = g.ncols();
    if k == 0 {
        return Err(Error::Empty {
            what: "gradient matrix",
        });
    }
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = dot_slice(&g[i], &g[j]);
            data[i * k + j] = v;
            data[j * k + i] = v;
        }
    }
    Ok(SymMatrix { k, data })
}
