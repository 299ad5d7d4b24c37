//! Min-norm point of the convex hull of gradient columns.
//!
//! Solves `min ½ λᵀ M λ` over the probability simplex with `M = GᵀG`, using
//! Frank–Wolfe with away steps and exact line minimization along each step.
//! Away steps give linear convergence on the simplex, which plain Frank–Wolfe
//! lacks when the optimum sits inside a face.
//!
//! Near the optimum the objective changes by less than its own rounding error
//! long before the duality gap reaches `tol`. When the iterations stall there,
//! the final support is polished by solving the equality-constrained KKT
//! system on it directly; the polished point is kept only if it is feasible
//! and has a smaller duality gap.

use crate::error::{Error, Result};
use crate::numkit::{dot_slice, gram, GradientMatrix, ParamVector, SymMatrix};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1000;
/// Relative threshold on `‖g_d‖ / max_i ‖g_i‖` below which a point is
/// treated as Pareto stationary.
pub const STATIONARY_RTOL: f64 = 1e-6;

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "not a point on the simplex: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn vertex(k: usize, i: usize) -> Self {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct MgdaResult {
    pub weights: SimplexWeights,
    pub direction: ParamVector,
    pub direction_norm: f64,
    pub stationary: bool,
    pub iterations: usize,
    /// Objective `½ λᵀMλ` after every Frank–Wolfe iteration, starting with the
    /// initial point. The support polish, if it ran, is not part of the trace.
    pub objective_trace: Vec<f64>,
}

/// Frank–Wolfe with away steps on `½ λᵀ M λ`. Returns the weights, the
/// iteration count and the objective trace.
pub fn solve_simplex_qp(m: &SymMatrix, tol: f64, max_iter: usize) -> (Vec<f64>, usize, Vec<f64>) {
    let k = m.size();
    // Start from the best vertex: the shortest column.
    let start = (0..k)
        .min_by(|&a, &b| m.get(a, a).total_cmp(&m.get(b, b)))
        .unwrap_or(0);
    let mut lambda = vec![0.0; k];
    lambda[start] = 1.0;
    let mut trace = vec![0.5 * m.get(start, start)];
    if k == 1 {
        return (lambda, 0, trace);
    }

    let mut iterations = 0;
    for _ in 0..max_iter {
        let grad = m.mul_vec(&lambda);
        let current = dot_slice(&lambda, &grad);

        let toward = (0..k)
            .min_by(|&a, &b| grad[a].total_cmp(&grad[b]))
            .unwrap();
        let away = (0..k)
            .filter(|&i| lambda[i] > 0.0)
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]))
            .unwrap();
        let fw_gap = current - grad[toward];
        let away_gap = grad[away] - current;
        if fw_gap <= tol {
            break;
        }
        iterations += 1;

        let mut dir = lambda.iter().map(|v| -v).collect::<Vec<_>>();
        let max_step;
        if fw_gap >= away_gap {
            dir[toward] += 1.0;
            max_step = 1.0;
        } else {
            dir.iter_mut().for_each(|d| *d = -*d);
            dir[away] -= 1.0;
            let la = lambda[away];
            max_step = if la < 1.0 { la / (1.0 - la) } else { f64::INFINITY };
        }

        let slope = dot_slice(&grad, &dir);
        let curvature = m.quad_form(&dir);
        let step = if curvature > 0.0 {
            (-slope / curvature).clamp(0.0, max_step)
        } else {
            max_step
        };
        if !(step > 0.0) {
            break;
        }

        let mut next: Vec<f64> = lambda
            .iter()
            .zip(&dir)
            .map(|(l, d)| (l + step * d).max(0.0))
            .collect();
        if step == max_step && fw_gap < away_gap {
            next[away] = 0.0;
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);

        let value = 0.5 * m.quad_form(&next);
        let previous = *trace.last().unwrap();
        if value > previous {
            // Rounding pushed us uphill; the current point is as good as it gets.
            break;
        }
        lambda = next;
        trace.push(value);
    }
    if duality_gap(m, &lambda) > tol {
        let refined = refine_active_set(m, &lambda, tol, max_iter);
        if duality_gap(m, &refined) < duality_gap(m, &lambda) {
            lambda = refined;
        }
    }
    (lambda, iterations, trace)
}

/// `λᵀMλ - min_i (Mλ)_i`, an upper bound on the suboptimality of `½λᵀMλ`
/// (times two) and zero exactly at the min-norm point.
pub fn duality_gap(m: &SymMatrix, lambda: &[f64]) -> f64 {
    let grad = m.mul_vec(lambda);
    let current = dot_slice(lambda, &grad);
    current - grad.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Affine minimizer of `½λᵀMλ` subject to `Σλ = 1` on `support`, via the
/// KKT system `[M_SS 1; 1ᵀ 0] [λ_S; -μ] = [0; 1]`. `None` when singular.
fn affine_minimizer(m: &SymMatrix, support: &[usize]) -> Option<Vec<f64>> {
    let s = support.len();
    let n = s + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r][c] = m.get(i, j);
        }
        a[r][s] = 1.0;
        a[s][r] = 1.0;
    }
    a[s][n] = 1.0;
    let scale = support.iter().map(|&i| m.get(i, i)).fold(0.0, f64::max);
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..=n {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = a[row][n];
        for c in row + 1..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    x.truncate(s);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Wolfe's min-norm-point iterations started from a feasible `lambda`: move
/// to the affine minimizer of the current support (stopping at the simplex
/// boundary and dropping the coordinates that hit zero), then add the most
/// violating vertex, until the duality gap reaches `tol`.
fn refine_active_set(m: &SymMatrix, lambda: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let k = lambda.len();
    let mut lam = lambda.to_vec();
    let mut support: Vec<usize> = (0..k).filter(|&i| lam[i] > 0.0).collect();
    if affine_minimizer(m, &support).is_none() {
        // Dependent support: restart from the single best vertex.
        let best = (0..k).max_by(|&a, &b| lam[a].total_cmp(&lam[b])).unwrap();
        lam = vec![0.0; k];
        lam[best] = 1.0;
        support = vec![best];
    }
    for _ in 0..max_iter {
        let Some(x) = affine_minimizer(m, &support) else {
            break;
        };
        if x.iter().all(|&v| v > 0.0) {
            lam = vec![0.0; k];
            for (&i, &v) in support.iter().zip(&x) {
                lam[i] = v;
            }
            let grad = m.mul_vec(&lam);
            let current = dot_slice(&lam, &grad);
            let entering = (0..k)
                .filter(|i| !support.contains(i))
                .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
            match entering {
                Some(j) if current - grad[j] > tol => {
                    support.push(j);
                    support.sort_unstable();
                }
                _ => break,
            }
        } else {
            // Walk toward x until the first support coordinate reaches zero.
            let mut theta = 1.0f64;
            for (&i, &v) in support.iter().zip(&x) {
                if v <= 0.0 {
                    theta = theta.min(lam[i] / (lam[i] - v));
                }
            }
            for (&i, &v) in support.iter().zip(&x) {
                lam[i] += theta * (v - lam[i]);
            }
            let before = support.len();
            support.retain(|&i| lam[i] > 1e-15);
            for i in 0..k {
                if !support.contains(&i) {
                    lam[i] = 0.0;
                }
            }
            if support.len() == before {
                // Rounding kept every coordinate positive; drop the smallest.
                let (pos, _) = support
                    .iter()
                    .enumerate()
                    .min_by(|a, b| lam[*a.1].total_cmp(&lam[*b.1]))
                    .unwrap();
                lam[support[pos]] = 0.0;
                support.remove(pos);
            }
            let total: f64 = lam.iter().sum();
            lam.iter_mut().for_each(|v| *v /= total);
        }
    }
    lam
}

pub fn min_norm(g: &GradientMatrix, tol: f64, max_iter: usize) -> Result<MgdaResult> {
    if !(tol > 0.0) {
        return Err(Error::Config("min-norm tolerance must be positive".into()));
    }
    let m = gram(g)?;
    if !m.is_finite() {
        return Err(Error::NonFinite("Gram matrix"));
    }
    let (lambda, iterations, trace) = solve_simplex_qp(&m, tol, max_iter);
    let direction = g.combine(&lambda)?;
    let direction_norm = direction.norm();
    let stationary = direction_norm <= STATIONARY_RTOL * g.max_column_norm();
    Ok(MgdaResult {
        weights: SimplexWeights(lambda),
        direction,
        direction_norm,
        stationary,
        iterations,
        objective_trace: trace,
    })
}

/// Whether subtracting `d` does not increase any column's objective to first
/// order, up to a relative slack of 1e-12.
pub fn is_common_descent(g: &GradientMatrix, d: &ParamVector) -> Result<bool> {
    Ok(non_descent_columns(g, d)?.is_empty())
}

/// Columns whose inner product with `d` is materially negative.
pub fn non_descent_columns(g: &GradientMatrix, d: &ParamVector) -> Result<Vec<usize>> {
    if g.dim() != d.len() && g.ncols() > 0 {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            actual: d.len(),
        });
    }
    let dn = d.norm();
    Ok(g.columns()
        .iter()
        .enumerate()
        .filter(|(_, col)| dot_slice(col, d) < -1e-12 * col.norm() * dn)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(cols: &[&[f64]]) -> GradientMatrix {
        GradientMatrix::from_columns(cols.iter().map(|c| ParamVector::new(c.to_vec())).collect())
            .unwrap()
    }

    #[test]
    fn orthogonal_pair() {
        let r = min_norm(&matrix(&[&[1.0, 0.0], &[0.0, 1.0]]), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((r.weights.values()[0] - 0.5).abs() < 1e-9);
        assert!((r.direction[0] - 0.5).abs() < 1e-9 && (r.direction[1] - 0.5).abs() < 1e-9);
        assert!((r.direction_norm - 2f64.sqrt() / 2.0).abs() < 1e-9);
        assert!(!r.stationary);
    }

    #[test]
    fn two_column_closed_form() {
        let g1 = [3.0, 1.0, -0.5];
        let g2 = [-1.0, 2.0, 0.25];
        let diff: Vec<f64> = g2.iter().zip(&g1).map(|(a, b)| a - b).collect();
        let num: f64 = diff.iter().zip(&g2).map(|(a, b)| a * b).sum();
        let den: f64 = diff.iter().map(|a| a * a).sum();
        let expected = (num / den).clamp(0.0, 1.0);
        let r = min_norm(&matrix(&[&g1, &g2]), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((r.weights.values()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn duplicate_columns() {
        let g = [1.0, -2.0, 2.0];
        let r = min_norm(&matrix(&[&g, &g]), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((r.direction_norm - 3.0).abs() < 1e-12);
    }

    #[test]
    fn opposed_columns_are_stationary() {
        let r = min_norm(&matrix(&[&[1.0, 0.0], &[-1.0, 0.0]]), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(r.direction_norm < 1e-9);
        assert!(r.stationary);
    }

    #[test]
    fn single_column_passthrough() {
        let r = min_norm(&matrix(&[&[2.0, 1.0]]), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.weights.values(), &[1.0]);
        assert_eq!(r.direction.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn non_finite_gram_rejected() {
        let g = matrix(&[&[f64::NAN, 0.0], &[0.0, 1.0]]);
        assert!(matches!(min_norm(&g, DEFAULT_TOL, 10), Err(Error::NonFinite(_))));
    }

    #[test]
    fn common_descent_checks() {
        let g = matrix(&[&[1.0, 0.2], &[0.5, 1.0]]);
        let r = min_norm(&g, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(is_common_descent(&g, &r.direction).unwrap());
        let flipped = g.column(0).scaled(-1.0);
        assert!(non_descent_columns(&g, &flipped).unwrap().contains(&0));
    }

    proptest! {
        #[test]
        fn objective_is_monotone_and_inequality_holds(
            cols in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 6), 2..6)
        ) {
            let g = GradientMatrix::from_columns(cols.into_iter().map(ParamVector::new).collect()).unwrap();
            let r = min_norm(&g, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            for w in r.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let sum: f64 = r.weights.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let d2 = r.direction_norm * r.direction_norm;
            for col in g.columns() {
                prop_assert!(dot_slice(col, &r.direction) >= d2 - 1e-8);
            }
        }

        #[test]
        fn positive_scaling_keeps_weights(
            cols in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 5), 3),
            alpha in 0.1f64..10.0,
        ) {
            let g = GradientMatrix::from_columns(cols.iter().cloned().map(ParamVector::new).collect()).unwrap();
            let gs = GradientMatrix::from_columns(cols.iter().map(|c| ParamVector::new(c.clone()).scaled(alpha)).collect()).unwrap();
            let a = min_norm(&g, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let b = min_norm(&gs, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert!((alpha * a.direction_norm - b.direction_norm).abs() <= 1e-5 * b.direction_norm.max(1e-3));
        }

        #[test]
        fn badly_scaled_columns_reach_the_min_norm_point(
            raw in proptest::collection::vec(
                (proptest::collection::vec(-1.0f64..1.0, 40), -4.0f64..1.0), 2..12)
        ) {
            let cols = raw
                .into_iter()
                .map(|(v, e)| ParamVector::new(v).scaled(10f64.powf(e)))
                .collect();
            let g = GradientMatrix::from_columns(cols).unwrap();
            let r = min_norm(&g, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let d2 = r.direction_norm * r.direction_norm;
            for col in g.columns() {
                prop_assert!(dot_slice(col, &r.direction) >= d2 - 1e-10 - 1e-9 * d2);
            }
        }
    }
}
