//! Dyadic Armijo backtracking for multi-objective descent steps.

use crate::error::Result;
use crate::numkit::{axpy, dot_slice, GradientMatrix, ParamVector};

pub const DEFAULT_BETA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Grid `2^s η, …, 2^-s η`.
    Improvement,
    /// Grid `η, …, 2^-s η`.
    Expansion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    pub eta_base: f64,
    pub breadth: u32,
    pub beta: f64,
    pub mode: SearchMode,
}

impl LineSearchConfig {
    pub fn start_step(&self) -> f64 {
        match self.mode {
            SearchMode::Improvement => self.eta_base * 2f64.powi(self.breadth as i32),
            SearchMode::Expansion => self.eta_base,
        }
    }

    pub fn floor_step(&self) -> f64 {
        self.eta_base * 2f64.powi(-(self.breadth as i32))
    }

    /// Trial steps in the order they are tried.
    pub fn grid(&self) -> Vec<f64> {
        let top = match self.mode {
            SearchMode::Improvement => self.breadth as i32,
            SearchMode::Expansion => 0,
        };
        (-(self.breadth as i32)..=top)
            .rev()
            .map(|e| self.eta_base * 2f64.powi(e))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    pub accepted: bool,
    /// Accepted step; the last tried step when nothing was accepted.
    pub step: f64,
    /// Objective values at `ω - step·d`, in evaluation-set order.
    pub trial_losses: Vec<f64>,
    /// Directional derivatives `g_iᵀd`, in evaluation-set order.
    pub slopes: Vec<f64>,
    pub trials_used: usize,
    /// Parameters at the last tried step.
    pub trial_point: ParamVector,
}

/// Sufficient-decrease test `F(ω - ηd) ≤ F(ω) - β η gᵀd`.
///
/// Both the search and any post-hoc audit call this function, so a logged
/// acceptance re-checks with the same arithmetic.
pub fn armijo_holds(base: f64, trial: f64, slope: f64, beta: f64, step: f64) -> bool {
    trial <= base - beta * step * slope
}

/// Backtracks along `-d` over the configured grid and returns the first step
/// that satisfies the sufficient-decrease test for every objective in
/// `eval_set` (indices into the columns of `grads` and into `base_losses`).
///
/// `loss_eval` maps a trial point to the objective values of `eval_set`, in
/// the same order.
pub fn armijo_search<F>(
    omega: &ParamVector,
    d: &ParamVector,
    cfg: &LineSearchConfig,
    eval_set: &[usize],
    base_losses: &[f64],
    grads: &GradientMatrix,
    mut loss_eval: F,
) -> Result<LineSearchOutcome>
where
    F: FnMut(&ParamVector) -> Result<Vec<f64>>,
{
    let slopes: Vec<f64> = eval_set.iter().map(|&i| dot_slice(&grads[i], d)).collect();
    let base: Vec<f64> = eval_set.iter().map(|&i| base_losses[i]).collect();
    let mut outcome = LineSearchOutcome {
        accepted: false,
        step: cfg.floor_step(),
        trial_losses: Vec::new(),
        slopes,
        trials_used: 0,
        trial_point: omega.clone(),
    };
    for step in cfg.grid() {
        let candidate = axpy(-step, d, omega)?;
        let losses = loss_eval(&candidate)?;
        outcome.trials_used += 1;
        let ok = losses.iter().all(|v| v.is_finite())
            && losses
                .iter()
                .zip(&base)
                .zip(&outcome.slopes)
                .all(|((&t, &b), &s)| armijo_holds(b, t, s, cfg.beta, step));
        outcome.step = step;
        outcome.trial_losses = losses;
        outcome.trial_point = candidate;
        if ok {
            outcome.accepted = true;
            break;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamVector {
        ParamVector::new(vec![v])
    }

    fn quad(w: &ParamVector) -> Result<Vec<f64>> {
        Ok(vec![0.5 * w[0] * w[0]])
    }

    #[test]
    fn grids() {
        let imp = LineSearchConfig {
            eta_base: 1.0,
            breadth: 2,
            beta: 0.1,
            mode: SearchMode::Improvement,
        };
        assert_eq!(imp.grid(), vec![4.0, 2.0, 1.0, 0.5, 0.25]);
        let exp = LineSearchConfig {
            mode: SearchMode::Expansion,
            ..imp
        };
        assert_eq!(exp.grid(), vec![1.0, 0.5, 0.25]);
        assert_eq!(exp.start_step(), 1.0);
        assert_eq!(imp.start_step(), 4.0);
        assert_eq!(imp.floor_step(), 0.25);
    }

    #[test]
    fn quadratic_hand_example() {
        // F = ½ω², ω = 1, d = g = 1: step 2 lands at F = ½ (reject), step 1 at F = 0.
        let g = GradientMatrix::from_columns(vec![one(1.0)]).unwrap();
        let cfg = LineSearchConfig {
            eta_base: 1.0,
            breadth: 1,
            beta: 0.1,
            mode: SearchMode::Improvement,
        };
        let out = armijo_search(&one(1.0), &one(1.0), &cfg, &[0], &[0.5], &g, quad).unwrap();
        assert!(out.accepted);
        assert_eq!(out.step, 1.0);
        assert_eq!(out.trials_used, 2);
        assert_eq!(out.trial_losses, vec![0.0]);
    }

    #[test]
    fn ascent_direction_never_accepted() {
        let g = GradientMatrix::from_columns(vec![one(1.0)]).unwrap();
        let cfg = LineSearchConfig {
            eta_base: 0.5,
            breadth: 3,
            beta: 0.05,
            mode: SearchMode::Improvement,
        };
        let out = armijo_search(&one(1.0), &one(-1.0), &cfg, &[0], &[0.5], &g, quad).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.trials_used, 7);
        assert_eq!(out.step, cfg.floor_step());
    }

    #[test]
    fn tiny_beta_accepts_true_descent() {
        // Two smooth objectives sharing a descent direction.
        let f = |w: &ParamVector| -> Result<Vec<f64>> {
            Ok(vec![(w[0] - 1.0).powi(2) + w[1] * w[1], w[0] * w[0] + (w[1] - 2.0).powi(2)])
        };
        let w = ParamVector::new(vec![3.0, 3.0]);
        let g = GradientMatrix::from_columns(vec![
            ParamVector::new(vec![4.0, 6.0]),
            ParamVector::new(vec![6.0, 2.0]),
        ])
        .unwrap();
        let d = crate::mgda::min_norm(&g, 1e-12, 1000).unwrap().direction;
        let base = f(&w).unwrap();
        let cfg = LineSearchConfig {
            eta_base: 1.0,
            breadth: 3,
            beta: 1e-9,
            mode: SearchMode::Expansion,
        };
        let out = armijo_search(&w, &d, &cfg, &[0, 1], &base, &g, f).unwrap();
        assert!(out.accepted);
        for (t, b) in out.trial_losses.iter().zip(&base) {
            assert!(t < b);
        }
    }

    #[test]
    fn callback_errors_propagate() {
        let g = GradientMatrix::from_columns(vec![one(1.0)]).unwrap();
        let cfg = LineSearchConfig {
            eta_base: 1.0,
            breadth: 1,
            beta: 0.1,
            mode: SearchMode::Expansion,
        };
        let out = armijo_search(&one(1.0), &one(1.0), &cfg, &[0], &[0.5], &g, |_| {
            Err(crate::error::Error::EmptyBatch)
        });
        assert!(out.is_err());
    }
}
