//! Null-space projection and the post-training anchor direction.

use crate::error::{Error, Result};
use crate::numkit::{axpy, dot_slice, GradientMatrix, ParamVector};

pub const DEFAULT_DROP_TOL: f64 = 1e-8;

/// Orthonormal basis of the column span by modified Gram–Schmidt.
///
/// A column whose residual falls below `drop_tol` times its original norm is
/// treated as dependent and skipped. Each accepted vector is orthogonalized
/// twice, which keeps `BᵀB = I` to ~1e-15 even for nearly collinear inputs.
pub fn orthonormal_basis(vectors: &GradientMatrix, drop_tol: f64) -> Result<GradientMatrix> {
    if vectors.is_empty() {
        return Err(Error::Empty {
            what: "basis input",
        });
    }
    let mut basis: Vec<ParamVector> = Vec::new();
    for col in vectors.columns() {
        let original = col.norm();
        if original == 0.0 {
            continue;
        }
        let mut residual = col.as_slice().to_vec();
        for _ in 0..2 {
            for b in &basis {
                let c = dot_slice(&residual, b);
                for (r, bi) in residual.iter_mut().zip(b.iter()) {
                    *r -= c * bi;
                }
            }
        }
        let norm = dot_slice(&residual, &residual).sqrt();
        if norm < drop_tol * original {
            continue;
        }
        basis.push(ParamVector::new(residual.into_iter().map(|r| r / norm).collect()));
    }
    if basis.is_empty() {
        return Err(Error::EmptyBasis);
    }
    GradientMatrix::from_columns(basis)
}

/// Removes the component of `g` lying in the span of an orthonormal basis.
pub fn project_null(g: &ParamVector, basis: &GradientMatrix) -> Result<ParamVector> {
    if !basis.is_empty() && basis.dim() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            actual: g.len(),
        });
    }
    let mut out = g.as_slice().to_vec();
    for b in basis.columns() {
        let c = dot_slice(&out, b);
        for (o, bi) in out.iter_mut().zip(b.iter()) {
            *o -= c * bi;
        }
    }
    Ok(ParamVector::new(out))
}

/// Unit vector pointing from the reference model `origin` to `current`.
pub fn anchor_direction(current: &ParamVector, origin: &ParamVector) -> Result<ParamVector> {
    let diff = axpy(-1.0, origin, current)?;
    let dist = diff.norm();
    if !(dist > 1e-12) {
        return Err(Error::DegenerateAnchor);
    }
    Ok(diff.scaled(1.0 / dist))
}
