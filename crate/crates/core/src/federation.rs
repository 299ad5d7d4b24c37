//! Three-stage federated unlearning: FedAvg pretraining, an unlearning stage
//! that alternates Pareto improvement and expansion rounds, and
//! anchor-constrained post-training.
//!
//! The round functions only see clients through [`ClientObjectives`], so the
//! same server logic drives both model-backed clients and scripted toys.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, Variant};
use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::geometry::{anchor_direction, orthonormal_basis, project_null};
use crate::line_search::{armijo_search, LineSearchConfig, LineSearchOutcome, SearchMode};
use crate::losses::{fairness_grad, fairness_value, LossKind, LossSpec, PreferenceVector};
use crate::mgda::{min_norm, MgdaResult};
use crate::model::{self, Batch, ModelSpec};
use crate::numkit::{axpy, dot_slice, GradientMatrix, ParamVector};

/// Columns shorter than this fraction of the longest column are treated as
/// already-satisfied objectives and left out of the min-norm problem.
pub const NEGLIGIBLE_COLUMN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Unlearning,
    Remaining,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub train: Batch,
    pub test: Batch,
    /// 0 for unlearning clients, 1 for remaining clients.
    pub preference: f64,
}

impl ClientState {
    pub fn new(id: usize, role: Role, train: Batch, test: Batch) -> Self {
        let preference = match role {
            Role::Unlearning => 0.0,
            Role::Remaining => 1.0,
        };
        Self {
            id,
            role,
            train,
            test,
            preference,
        }
    }
}

/// Clients `0..unlearn_count` request unlearning; the rest remain.
pub fn make_clients(dataset: &FederatedDataset, unlearn_count: usize) -> Vec<ClientState> {
    dataset
        .train_shards
        .iter()
        .zip(&dataset.test_shards)
        .enumerate()
        .map(|(id, (train, test))| {
            let role = if id < unlearn_count {
                Role::Unlearning
            } else {
                Role::Remaining
            };
            ClientState::new(id, role, train.clone(), test.clone())
        })
        .collect()
}

/// Local objectives as seen by the server: a scalar loss (forward only) and,
/// when asked, its gradient.
pub trait ClientObjectives: Sync {
    fn roles(&self) -> &[Role];
    fn loss_and_grad(&self, client: usize, omega: &ParamVector) -> Result<(f64, ParamVector)>;
    fn loss(&self, client: usize, omega: &ParamVector) -> Result<f64>;
}

/// Clients backed by the classifier: unlearning clients evaluate the
/// unlearning loss on their training shard, remaining clients cross-entropy.
pub struct ModelClients<'a> {
    pub spec: &'a ModelSpec,
    pub clients: &'a [ClientState],
    pub unlearn_loss: LossSpec,
    roles: Vec<Role>,
}

impl<'a> ModelClients<'a> {
    pub fn new(spec: &'a ModelSpec, clients: &'a [ClientState], unlearn_loss: LossSpec) -> Self {
        let roles = clients.iter().map(|c| c.role).collect();
        Self {
            spec,
            clients,
            unlearn_loss,
            roles,
        }
    }

    fn loss_spec(&self, client: usize) -> LossSpec {
        match self.roles[client] {
            Role::Unlearning => self.unlearn_loss,
            Role::Remaining => LossSpec::ce(),
        }
    }
}

impl ClientObjectives for ModelClients<'_> {
    fn roles(&self) -> &[Role] {
        &self.roles
    }

    fn loss_and_grad(&self, client: usize, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        model::loss_and_grad(omega, self.spec, &self.clients[client].train, &self.loss_spec(client))
    }

    fn loss(&self, client: usize, omega: &ParamVector) -> Result<f64> {
        model::loss(omega, self.spec, &self.clients[client].train, &self.loss_spec(client))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundMode {
    Improvement,
    Expansion,
    PostTrain,
}

impl RoundMode {
    pub fn label(self) -> &'static str {
        match self {
            RoundMode::Improvement => "improvement",
            RoundMode::Expansion => "expansion",
            RoundMode::PostTrain => "posttrain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Line search accepted a step.
    Accepted,
    /// No grid step satisfied the sufficient-decrease test.
    Rejected,
    /// The min-norm direction vanished (Pareto stationary).
    Stationary,
    /// Expansion found no acceptable step and took the floor step.
    DeadEnd,
    /// Expansion had no usable direction; no update.
    Skipped,
    /// Fixed-step update without line search.
    Fixed,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Accepted => "accepted",
            Outcome::Rejected => "rejected",
            Outcome::Stationary => "stationary",
            Outcome::DeadEnd => "dead_end",
            Outcome::Skipped => "skipped",
            Outcome::Fixed => "fixed",
        }
    }

    /// Whether an improvement round with this outcome hands over to expansion.
    pub fn is_failure(self) -> bool {
        matches!(self, Outcome::Rejected | Outcome::Stationary)
    }
}

/// One objective's sufficient-decrease bookkeeping at the last tried step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmijoTerm {
    pub label: String,
    pub base: f64,
    pub trial: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Unlearn,
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub stage: Stage,
    pub mode: RoundMode,
    pub outcome: Outcome,
    pub eta_base: f64,
    pub beta: f64,
    /// Step actually applied; `None` when the parameters did not move.
    pub step: Option<f64>,
    pub trials: usize,
    pub direction_norm: f64,
    pub objectives: Vec<String>,
    pub lambda: Vec<f64>,
    /// Local loss of every client at the start of the round, in id order.
    pub losses: Vec<f64>,
    pub armijo: Vec<ArmijoTerm>,
    /// Largest `|dᵀg_r| / (‖d‖‖g_r‖)` over remaining clients (expansion only).
    pub remaining_alignment: Option<f64>,
    pub asr: Option<f64>,
    pub racc_mean: Option<f64>,
    pub racc_std: Option<f64>,
    pub distance: f64,
    pub flags: Vec<String>,
}

impl RoundRecord {
    fn new(round: usize, stage: Stage, mode: RoundMode, settings: &Settings, eta: f64) -> Self {
        Self {
            round,
            stage,
            mode,
            outcome: Outcome::Skipped,
            eta_base: eta,
            beta: settings.beta,
            step: None,
            trials: 0,
            direction_norm: 0.0,
            objectives: Vec::new(),
            lambda: Vec::new(),
            losses: Vec::new(),
            armijo: Vec::new(),
            remaining_alignment: None,
            asr: None,
            racc_mean: None,
            racc_std: None,
            distance: 0.0,
            flags: Vec::new(),
        }
    }
}

/// Server-side hyperparameters of the unlearning and post-training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub eta: f64,
    pub beta: f64,
    pub s: u32,
    pub delta: f64,
    pub lr_decay: f64,
    pub mgda_tol: f64,
    pub mgda_max_iter: usize,
    pub drop_tol: f64,
    pub unlearn_rounds: usize,
    pub post_rounds: usize,
    pub early_stop_rounds: usize,
    pub dead_end_limit: usize,
    pub variant: Variant,
}

impl Settings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            eta: cfg.eta,
            beta: cfg.beta,
            s: cfg.s,
            delta: cfg.delta,
            lr_decay: cfg.lr_decay,
            mgda_tol: cfg.mgda_tol,
            mgda_max_iter: cfg.mgda_max_iter,
            drop_tol: cfg.drop_tol,
            unlearn_rounds: cfg.unlearn_rounds,
            post_rounds: cfg.post_rounds(),
            early_stop_rounds: cfg.early_stop_rounds,
            dead_end_limit: cfg.dead_end_limit,
            variant: cfg.ablation,
        }
    }

    pub fn unlearn_loss(&self) -> Result<LossSpec> {
        let kind = match self.variant {
            Variant::M7 => LossKind::Uce,
            Variant::M8 => LossKind::KlUniform,
            _ => LossKind::Mbs,
        };
        LossSpec::new(kind, self.delta)
    }

    /// Base step for global round `t`, decayed per round.
    pub fn eta_at(&self, t: usize) -> f64 {
        self.eta * self.lr_decay.powi(t as i32)
    }

    fn search(&self, eta: f64, mode: SearchMode) -> LineSearchConfig {
        LineSearchConfig {
            eta_base: eta,
            breadth: self.s,
            beta: self.beta,
            mode,
        }
    }
}

/// Result of one server round.
#[derive(Debug, Clone)]
pub struct RoundStep {
    /// Parameters after the round; `None` when nothing moved.
    pub next: Option<ParamVector>,
    pub record: RoundRecord,
}

enum ColumnKind {
    Client(usize),
    Fairness {
        members: Vec<usize>,
        pref: PreferenceVector,
    },
    Anchor,
}

struct Column {
    label: String,
    kind: ColumnKind,
    grad: ParamVector,
    base: f64,
}

fn client_label(roles: &[Role], i: usize) -> String {
    match roles[i] {
        Role::Unlearning => format!("u{i}"),
        Role::Remaining => format!("r{i}"),
    }
}

fn ids_with(roles: &[Role], role: Role) -> Vec<usize> {
    (0..roles.len()).filter(|&i| roles[i] == role).collect()
}

fn eval_all<O: ClientObjectives + ?Sized>(
    obj: &O,
    clients: &[usize],
    omega: &ParamVector,
) -> Result<Vec<(f64, ParamVector)>> {
    clients
        .par_iter()
        .map(|&i| obj.loss_and_grad(i, omega))
        .collect()
}

/// Drops negligible columns (recording why) and keeps the rest in order.
fn prune(columns: Vec<Column>, flags: &mut Vec<String>) -> Vec<Column> {
    let max = columns.iter().map(|c| c.grad.norm()).fold(0.0, f64::max);
    columns
        .into_iter()
        .filter(|c| {
            let keep = max > 0.0 && c.grad.norm() > NEGLIGIBLE_COLUMN * max;
            if !keep {
                flags.push(format!("satisfied:{}", c.label));
            }
            keep
        })
        .collect()
}

fn solve(columns: &[Column], settings: &Settings) -> Result<(GradientMatrix, MgdaResult)> {
    let g = GradientMatrix::from_columns(columns.iter().map(|c| c.grad.clone()).collect())?;
    let r = min_norm(&g, settings.mgda_tol, settings.mgda_max_iter)?;
    Ok((g, r))
}

/// Objective values of `eval` columns at a trial point.
fn evaluate_columns<O: ClientObjectives + ?Sized>(
    obj: &O,
    columns: &[Column],
    eval: &[usize],
    anchor: Option<&ParamVector>,
    point: &ParamVector,
) -> Result<Vec<f64>> {
    let mut needed: Vec<usize> = Vec::new();
    for &e in eval {
        match &columns[e].kind {
            ColumnKind::Client(i) => needed.push(*i),
            ColumnKind::Fairness { members, .. } => needed.extend(members),
            ColumnKind::Anchor => {}
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let values: Vec<f64> = needed
        .par_iter()
        .map(|&i| obj.loss(i, point))
        .collect::<Result<_>>()?;
    let lookup = |i: usize| values[needed.binary_search(&i).unwrap()];
    eval.iter()
        .map(|&e| match &columns[e].kind {
            ColumnKind::Client(i) => Ok(lookup(*i)),
            ColumnKind::Fairness { members, pref } => {
                let f: Vec<f64> = members.iter().map(|&i| lookup(i)).collect();
                Ok(fairness_value(&f, pref).unwrap_or(f64::INFINITY))
            }
            ColumnKind::Anchor => {
                let origin = anchor.expect("anchor column without origin");
                Ok(-point.sub(origin)?.norm())
            }
        })
        .collect()
}

fn fill_search(record: &mut RoundRecord, columns: &[Column], eval: &[usize], ls: &LineSearchOutcome) {
    record.trials = ls.trials_used;
    record.armijo = eval
        .iter()
        .zip(&ls.trial_losses)
        .zip(&ls.slopes)
        .map(|((&e, &trial), &slope)| ArmijoTerm {
            label: columns[e].label.clone(),
            base: columns[e].base,
            trial,
            slope,
        })
        .collect();
}

fn fill_direction(record: &mut RoundRecord, columns: &[Column], r: &MgdaResult) {
    record.objectives = columns.iter().map(|c| c.label.clone()).collect();
    record.lambda = r.weights.values().to_vec();
    record.direction_norm = r.direction_norm;
}

/// Pareto improvement: min-norm direction over every client objective plus
/// the fairness angle, accepted by Armijo search over `[2^-s η, 2^s η]`.
pub fn improvement_round<O: ClientObjectives + ?Sized>(
    obj: &O,
    omega: &ParamVector,
    settings: &Settings,
    round: usize,
) -> Result<RoundStep> {
    let eta = settings.eta_at(round);
    let mut record = RoundRecord::new(round, Stage::Unlearn, RoundMode::Improvement, settings, eta);
    let roles = obj.roles();
    let m = roles.len();
    let all: Vec<usize> = (0..m).collect();
    let evals = eval_all(obj, &all, omega)?;
    record.losses = evals.iter().map(|e| e.0).collect();

    let mut columns = Vec::new();
    for i in ids_with(roles, Role::Unlearning)
        .into_iter()
        .chain(ids_with(roles, Role::Remaining))
    {
        columns.push(Column {
            label: client_label(roles, i),
            kind: ColumnKind::Client(i),
            grad: evals[i].1.clone(),
            base: evals[i].0,
        });
    }
    if settings.variant != Variant::M2 {
        let pref = if settings.variant == Variant::M3 {
            PreferenceVector::ones(m)
        } else {
            PreferenceVector::new(
                roles
                    .iter()
                    .map(|r| if *r == Role::Remaining { 1.0 } else { 0.0 })
                    .collect(),
            )?
        };
        let grads =
            GradientMatrix::from_columns(evals.iter().map(|e| e.1.clone()).collect())?;
        match fairness_grad(&record.losses, &pref, &grads) {
            Ok(g) => columns.push(Column {
                label: "fair".into(),
                base: fairness_value(&record.losses, &pref)?,
                kind: ColumnKind::Fairness {
                    members: all.clone(),
                    pref,
                },
                grad: g,
            }),
            Err(Error::DegenerateLoss) => record.flags.push("degenerate_fairness".into()),
            Err(e) => return Err(e),
        }
    }
    let columns = prune(columns, &mut record.flags);
    if columns.is_empty() {
        record.outcome = Outcome::Stationary;
        return Ok(RoundStep { next: None, record });
    }

    let (g, r) = solve(&columns, settings)?;
    fill_direction(&mut record, &columns, &r);
    if r.stationary {
        record.outcome = Outcome::Stationary;
        return Ok(RoundStep { next: None, record });
    }

    let eval: Vec<usize> = (0..columns.len()).collect();
    let bases: Vec<f64> = columns.iter().map(|c| c.base).collect();
    let cfg = settings.search(eta, SearchMode::Improvement);
    let ls = armijo_search(omega, &r.direction, &cfg, &eval, &bases, &g, |p| {
        evaluate_columns(obj, &columns, &eval, None, p)
    })?;
    fill_search(&mut record, &columns, &eval, &ls);
    if ls.accepted {
        record.outcome = Outcome::Accepted;
        record.step = Some(ls.step);
        Ok(RoundStep {
            next: Some(ls.trial_point),
            record,
        })
    } else {
        record.outcome = Outcome::Rejected;
        Ok(RoundStep { next: None, record })
    }
}

/// Pareto expansion: unlearning gradients projected onto the null space of
/// the remaining gradients, combined with an equal-preference fairness angle
/// over unlearning losses, searched over `[2^-s η, η]` against unlearning
/// objectives only.
pub fn expansion_round<O: ClientObjectives + ?Sized>(
    obj: &O,
    omega: &ParamVector,
    settings: &Settings,
    round: usize,
) -> Result<RoundStep> {
    let eta = settings.eta_at(round);
    let mut record = RoundRecord::new(round, Stage::Unlearn, RoundMode::Expansion, settings, eta);
    let roles = obj.roles();
    let all: Vec<usize> = (0..roles.len()).collect();
    let evals = eval_all(obj, &all, omega)?;
    record.losses = evals.iter().map(|e| e.0).collect();
    let unlearning = ids_with(roles, Role::Unlearning);
    let remaining = ids_with(roles, Role::Remaining);

    let remaining_grads =
        GradientMatrix::from_columns(remaining.iter().map(|&i| evals[i].1.clone()).collect())?;
    let basis = if settings.variant == Variant::M5 {
        None
    } else {
        match orthonormal_basis(&remaining_grads, settings.drop_tol) {
            Ok(b) => Some(b),
            Err(Error::EmptyBasis) => {
                record.flags.push("empty_remaining_basis".into());
                None
            }
            Err(e) => return Err(e),
        }
    };
    let projected: Vec<ParamVector> = unlearning
        .iter()
        .map(|&i| match &basis {
            Some(b) => project_null(&evals[i].1, b),
            None => Ok(evals[i].1.clone()),
        })
        .collect::<Result<_>>()?;

    let mut columns: Vec<Column> = unlearning
        .iter()
        .zip(&projected)
        .map(|(&i, g)| Column {
            label: client_label(roles, i),
            kind: ColumnKind::Client(i),
            grad: g.clone(),
            base: evals[i].0,
        })
        .collect();
    let use_fairness = !matches!(settings.variant, Variant::M2 | Variant::M4);
    if use_fairness && !unlearning.is_empty() {
        let pref = PreferenceVector::ones(unlearning.len());
        let f: Vec<f64> = unlearning.iter().map(|&i| evals[i].0).collect();
        let grads = GradientMatrix::from_columns(projected.clone())?;
        match fairness_grad(&f, &pref, &grads) {
            Ok(g) => columns.push(Column {
                label: "fair".into(),
                base: fairness_value(&f, &pref)?,
                kind: ColumnKind::Fairness {
                    members: unlearning.clone(),
                    pref,
                },
                grad: g,
            }),
            Err(Error::DegenerateLoss) => record.flags.push("degenerate_fairness".into()),
            Err(e) => return Err(e),
        }
    }
    let columns = prune(columns, &mut record.flags);
    let eval: Vec<usize> = (0..columns.len())
        .filter(|&c| matches!(columns[c].kind, ColumnKind::Client(_)))
        .collect();
    if eval.is_empty() {
        record.outcome = Outcome::Skipped;
        record.flags.push("no_unlearning_direction".into());
        return Ok(RoundStep { next: None, record });
    }

    let (g, r) = solve(&columns, settings)?;
    fill_direction(&mut record, &columns, &r);
    if r.stationary {
        record.outcome = Outcome::Skipped;
        return Ok(RoundStep { next: None, record });
    }
    let d = &r.direction;
    let dn = d.norm();
    record.remaining_alignment = Some(
        remaining_grads
            .columns()
            .iter()
            .filter(|gr| gr.norm() > 0.0)
            .map(|gr| dot_slice(gr, d).abs() / (dn * gr.norm()))
            .fold(0.0, f64::max),
    );

    let mode = if settings.variant == Variant::M6 {
        SearchMode::Improvement
    } else {
        SearchMode::Expansion
    };
    let cfg = settings.search(eta, mode);
    let bases: Vec<f64> = columns.iter().map(|c| c.base).collect();
    let ls = armijo_search(omega, d, &cfg, &eval, &bases, &g, |p| {
        evaluate_columns(obj, &columns, &eval, None, p)
    })?;
    fill_search(&mut record, &columns, &eval, &ls);
    // A rejected search ends on the floor step, which is taken anyway.
    record.outcome = if ls.accepted {
        Outcome::Accepted
    } else {
        Outcome::DeadEnd
    };
    record.step = Some(ls.step);
    Ok(RoundStep {
        next: Some(ls.trial_point),
        record,
    })
}

/// Post-training: remaining-client gradients plus the gradient of the anchor
/// surrogate `-‖ω - ω⁰‖`, so accepted steps never shrink the distance to the
/// pre-unlearning model to first order.
pub fn posttrain_round<O: ClientObjectives + ?Sized>(
    obj: &O,
    omega: &ParamVector,
    origin: &ParamVector,
    settings: &Settings,
    round: usize,
    use_anchor: bool,
) -> Result<RoundStep> {
    let eta = settings.eta_at(round);
    let mut record = RoundRecord::new(round, Stage::Post, RoundMode::PostTrain, settings, eta);
    let roles = obj.roles();
    let remaining = ids_with(roles, Role::Remaining);
    let evals = eval_all(obj, &remaining, omega)?;
    let mut losses = vec![f64::NAN; roles.len()];
    let unlearning = ids_with(roles, Role::Unlearning);
    let unlearn_losses: Vec<f64> = unlearning
        .par_iter()
        .map(|&i| obj.loss(i, omega))
        .collect::<Result<_>>()?;
    for (&i, l) in unlearning.iter().zip(unlearn_losses) {
        losses[i] = l;
    }
    let mut columns = Vec::new();
    for (&i, (loss, grad)) in remaining.iter().zip(&evals) {
        losses[i] = *loss;
        columns.push(Column {
            label: client_label(roles, i),
            kind: ColumnKind::Client(i),
            grad: grad.clone(),
            base: *loss,
        });
    }
    record.losses = losses;
    if use_anchor {
        match anchor_direction(omega, origin) {
            Ok(a) => columns.push(Column {
                label: "anchor".into(),
                base: -omega.sub(origin)?.norm(),
                kind: ColumnKind::Anchor,
                grad: a.scaled(-1.0),
            }),
            Err(Error::DegenerateAnchor) => record.flags.push("degenerate_anchor".into()),
            Err(e) => return Err(e),
        }
    }
    let columns = prune(columns, &mut record.flags);
    if columns.is_empty() {
        record.outcome = Outcome::Stationary;
        return Ok(RoundStep { next: None, record });
    }
    let (g, r) = solve(&columns, settings)?;
    fill_direction(&mut record, &columns, &r);
    if r.stationary {
        record.outcome = Outcome::Stationary;
        return Ok(RoundStep { next: None, record });
    }
    let eval: Vec<usize> = (0..columns.len()).collect();
    let bases: Vec<f64> = columns.iter().map(|c| c.base).collect();
    let cfg = settings.search(eta, SearchMode::Improvement);
    let ls = armijo_search(omega, &r.direction, &cfg, &eval, &bases, &g, |p| {
        evaluate_columns(obj, &columns, &eval, Some(origin), p)
    })?;
    fill_search(&mut record, &columns, &eval, &ls);
    if ls.accepted {
        record.outcome = Outcome::Accepted;
        record.step = Some(ls.step);
        Ok(RoundStep {
            next: Some(ls.trial_point),
            record,
        })
    } else {
        record.outcome = Outcome::Rejected;
        Ok(RoundStep { next: None, record })
    }
}

/// Baseline update: data-size-weighted sum of unlearning gradients, fixed step.
pub fn naive_round<O: ClientObjectives + ?Sized>(
    obj: &O,
    omega: &ParamVector,
    weights: &[f64],
    settings: &Settings,
    round: usize,
) -> Result<RoundStep> {
    let eta = settings.eta_at(round);
    let mut record = RoundRecord::new(round, Stage::Unlearn, RoundMode::Improvement, settings, eta);
    let roles = obj.roles();
    let all: Vec<usize> = (0..roles.len()).collect();
    let evals = eval_all(obj, &all, omega)?;
    record.losses = evals.iter().map(|e| e.0).collect();
    let unlearning = ids_with(roles, Role::Unlearning);
    let g = GradientMatrix::from_columns(unlearning.iter().map(|&i| evals[i].1.clone()).collect())?;
    let d = g.combine(weights)?;
    record.objectives = unlearning.iter().map(|&i| client_label(roles, i)).collect();
    record.lambda = weights.to_vec();
    record.direction_norm = d.norm();
    if record.direction_norm == 0.0 {
        record.outcome = Outcome::Stationary;
        return Ok(RoundStep { next: None, record });
    }
    record.outcome = Outcome::Fixed;
    record.step = Some(eta);
    Ok(RoundStep {
        next: Some(axpy(-eta, &d, omega)?),
        record,
    })
}

/// Runs the unlearning state machine: improvement rounds until one fails
/// (rejected or stationary), then a single expansion round, then back to
/// improvement. Stops early once every unlearning loss has been exactly zero
/// for `early_stop_rounds` rounds, or after `dead_end_limit` consecutive
/// expansion dead ends. `naive_weights` drives the fixed-step baseline.
///
/// `annotate` sees each record together with the parameters the round
/// started from, before the update is applied. Records already produced are
/// handed to `sink` even when a later round fails.
pub fn run_unlearning<O: ClientObjectives + ?Sized>(
    obj: &O,
    omega0: &ParamVector,
    settings: &Settings,
    naive_weights: &[f64],
    mut annotate: impl FnMut(&mut RoundRecord, &ParamVector) -> Result<()>,
    sink: &mut Vec<RoundRecord>,
) -> Result<(ParamVector, Option<String>)> {
    let unlearning = ids_with(obj.roles(), Role::Unlearning);
    let mut omega = omega0.clone();
    if unlearning.is_empty() {
        return Ok((omega, None));
    }
    let mut mode = RoundMode::Improvement;
    let mut dead_ends = 0usize;
    let mut zero_streak = 0usize;
    for t in 0..settings.unlearn_rounds {
        let RoundStep { next, mut record } = match (settings.variant, mode) {
            (Variant::M1, _) => naive_round(obj, &omega, naive_weights, settings, t),
            (_, RoundMode::Expansion) => expansion_round(obj, &omega, settings, t),
            _ => improvement_round(obj, &omega, settings, t),
        }
        .and_then(|mut step| {
            annotate(&mut step.record, &omega)?;
            Ok(step)
        })
        .map_err(|e| Error::RoundAbort {
            round: t,
            source: Box::new(e),
        })?;
        let all_zero = unlearning.iter().all(|&i| record.losses[i] == 0.0);
        mode = if record.mode == RoundMode::Improvement
            && settings.variant != Variant::M1
            && record.outcome.is_failure()
        {
            RoundMode::Expansion
        } else {
            RoundMode::Improvement
        };
        if record.mode == RoundMode::Expansion {
            dead_ends = match record.outcome {
                Outcome::DeadEnd | Outcome::Skipped => dead_ends + 1,
                _ => 0,
            };
        }
        zero_streak = if all_zero { zero_streak + 1 } else { 0 };
        let stop = if zero_streak >= settings.early_stop_rounds {
            Some(format!("unlearning losses zero for {zero_streak} rounds"))
        } else if dead_ends >= settings.dead_end_limit {
            Some(format!("{dead_ends} consecutive expansion dead ends"))
        } else {
            None
        };
        if stop.is_some() {
            record.flags.push("stage_end".into());
        }
        sink.push(record);
        if let Some(w) = next {
            omega = w;
        }
        if stop.is_some() {
            return Ok((omega, stop));
        }
    }
    Ok((omega, None))
}

/// FedAvg hyperparameters for pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSettings {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl PretrainSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            rounds: cfg.pretrain_rounds,
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            lr: cfg.pretrain_lr,
            lr_decay: cfg.lr_decay,
            seed: cfg.seed.wrapping_add(3),
        }
    }
}

fn local_sgd(
    start: &ParamVector,
    spec: &ModelSpec,
    shard: &Batch,
    settings: &PretrainSettings,
    lr: f64,
    rng_seed: u64,
) -> Result<ParamVector> {
    let mut w = start.clone();
    let ce = LossSpec::ce();
    if shard.len() <= settings.batch_size {
        // One minibatch covers the shard; sample order is irrelevant.
        for _ in 0..settings.local_epochs {
            let (_, g) = model::loss_and_grad(&w, spec, shard, &ce)?;
            w = axpy(-lr, &g, &w)?;
        }
        return Ok(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..settings.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch = shard.select(chunk);
            let (_, g) = model::loss_and_grad(&w, spec, &batch, &ce)?;
            w = axpy(-lr, &g, &w)?;
        }
    }
    Ok(w)
}

/// FedAvg with local SGD and size-weighted averaging; returns the trained
/// model and the global training loss after each round.
pub fn pretrain(
    spec: &ModelSpec,
    init: &ParamVector,
    shards: &[&Batch],
    settings: &PretrainSettings,
) -> Result<(ParamVector, Vec<f64>)> {
    let total: usize = shards.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::Empty {
            what: "pretraining data",
        });
    }
    let mut w = init.clone();
    let mut trace = Vec::with_capacity(settings.rounds);
    for round in 0..settings.rounds {
        let lr = settings.lr * settings.lr_decay.powi(round as i32);
        let locals: Vec<ParamVector> = shards
            .par_iter()
            .enumerate()
            .map(|(c, shard)| {
                let seed = settings
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((round as u64) << 20)
                    .wrapping_add(c as u64);
                local_sgd(&w, spec, shard, settings, lr, seed)
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::Diverged {
                round,
                what: e.to_string(),
            })?;
        let mut avg = vec![0.0; w.len()];
        for (local, shard) in locals.iter().zip(shards) {
            let weight = shard.len() as f64 / total as f64;
            for (a, v) in avg.iter_mut().zip(local.iter()) {
                *a += weight * v;
            }
        }
        w = ParamVector::new(avg);
        if !w.is_finite() {
            return Err(Error::Diverged {
                round,
                what: "non-finite parameters after averaging".into(),
            });
        }
        let mut loss = 0.0;
        for shard in shards {
            loss += model::loss(&w, spec, shard, &LossSpec::ce())? * shard.len() as f64 / total as f64;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                round,
                what: format!("global loss {loss}"),
            });
        }
        trace.push(loss);
    }
    Ok((w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic client objectives `½‖ω - c_i‖²` (scaled per client).
    pub(crate) struct Quadratics {
        pub centers: Vec<Vec<f64>>,
        pub roles: Vec<Role>,
    }

    impl ClientObjectives for Quadratics {
        fn roles(&self) -> &[Role] {
            &self.roles
        }

        fn loss_and_grad(&self, client: usize, omega: &ParamVector) -> Result<(f64, ParamVector)> {
            let c = &self.centers[client];
            let diff: Vec<f64> = omega.iter().zip(c).map(|(w, c)| w - c).collect();
            let loss = 0.5 * dot_slice(&diff, &diff);
            Ok((loss, ParamVector::new(diff)))
        }

        fn loss(&self, client: usize, omega: &ParamVector) -> Result<f64> {
            Ok(self.loss_and_grad(client, omega)?.0)
        }
    }

    fn settings() -> Settings {
        Settings {
            eta: 0.1,
            beta: 0.05,
            s: 2,
            delta: 1e-3,
            lr_decay: 1.0,
            mgda_tol: 1e-12,
            mgda_max_iter: 1000,
            drop_tol: 1e-8,
            unlearn_rounds: 10,
            post_rounds: 10,
            early_stop_rounds: 3,
            dead_end_limit: 3,
            variant: Variant::M2,
        }
    }

    #[test]
    fn non_conflicting_gradients_accept_and_decrease() {
        let toy = Quadratics {
            centers: vec![vec![0.0, 0.0], vec![0.2, 0.1]],
            roles: vec![Role::Unlearning, Role::Remaining],
        };
        let w = ParamVector::new(vec![3.0, 2.0]);
        let step = improvement_round(&toy, &w, &settings(), 0).unwrap();
        assert_eq!(step.record.outcome, Outcome::Accepted);
        let next = step.next.unwrap();
        for i in 0..2 {
            assert!(toy.loss(i, &next).unwrap() < toy.loss(i, &w).unwrap());
        }
    }

    #[test]
    fn exactly_opposed_gradients_are_stationary() {
        // ω sits midway between the two minimizers: g_u = -g_r.
        let toy = Quadratics {
            centers: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            roles: vec![Role::Unlearning, Role::Remaining],
        };
        let step = improvement_round(&toy, &ParamVector::zeros(2), &settings(), 0).unwrap();
        assert_eq!(step.record.outcome, Outcome::Stationary);
        assert!(step.next.is_none());
    }

    #[test]
    fn expansion_direction_is_orthogonal_to_remaining_gradient() {
        let toy = Quadratics {
            centers: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            roles: vec![Role::Unlearning, Role::Remaining],
        };
        // g_u = (0, 2) and g_r = (1, 1) at this point.
        let w = ParamVector::new(vec![1.0, 2.0]);
        let step = expansion_round(&toy, &w, &settings(), 0).unwrap();
        let next = step.next.unwrap();
        let moved = w.sub(&next).unwrap();
        assert!(moved.norm() > 0.0);
        assert!(dot_slice(&moved, &[1.0, 1.0]).abs() < 1e-12);
        assert!(step.record.remaining_alignment.unwrap() < 1e-12);
    }
}
