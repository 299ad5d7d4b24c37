//! Post-hoc checks over a round log: every accepted step satisfies the
//! sufficient-decrease test exactly as the search evaluated it, and the
//! improvement/expansion state machine was respected.

use crate::federation::{Outcome, RoundMode, RoundRecord, Stage};
use crate::line_search::armijo_holds;

/// Human-readable violations; empty when the log is clean.
pub fn audit_records(records: &[RoundRecord]) -> Vec<String> {
    let mut problems = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.outcome == Outcome::Accepted {
            let Some(step) = r.step else {
                problems.push(format!("row {i}: accepted without a step"));
                continue;
            };
            if r.armijo.is_empty() {
                problems.push(format!("row {i}: accepted without Armijo terms"));
            }
            for a in &r.armijo {
                if !armijo_holds(a.base, a.trial, a.slope, r.beta, step) {
                    problems.push(format!(
                        "row {i} ({:?}): `{}` fails sufficient decrease at step {step}",
                        r.stage, a.label
                    ));
                }
            }
        }
        if r.mode == RoundMode::Expansion {
            let prev = i.checked_sub(1).map(|p| &records[p]);
            let ok = matches!(prev, Some(p) if p.stage == Stage::Unlearn
                && p.mode == RoundMode::Improvement
                && p.outcome.is_failure());
            if !ok {
                problems.push(format!("row {i}: expansion not preceded by a failed improvement"));
            }
        }
    }
    problems
}
