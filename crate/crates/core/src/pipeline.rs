//! Stage sequencing for a full run: data and model setup, pretraining, the
//! unlearning state machine, post-training, and end-of-stage metrics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, PartitionKind, RunConfig, Variant};
use crate::data::{build_federated, load_idx, synth_train_test, FederatedDataset, PartitionScheme};
use crate::error::{Error, Result};
use crate::federation::{
    make_clients, posttrain_round, pretrain, run_unlearning, ClientState, ModelClients,
    PretrainSettings, Role, RoundRecord, RoundStep, Settings,
};
use crate::metrics;
use crate::model::{init_params, Batch, ModelSpec};
use crate::numkit::ParamVector;

const PARTITION_SEED: u64 = 1;
const INIT_SEED: u64 = 2;
const MIA_SEED: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Pretrain,
    Unlearn,
    Posttrain,
}

/// Data, model shape and clients of one run; everything derived from the
/// config and its seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub dataset: FederatedDataset,
    pub spec: ModelSpec,
    pub clients: Vec<ClientState>,
}

impl Experiment {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (source, global_test) = match cfg.dataset {
            DatasetKind::Synthetic => synth_train_test(
                cfg.classes,
                cfg.dim,
                cfg.per_class,
                cfg.test_per_class,
                cfg.spread,
                cfg.seed,
            )?,
            DatasetKind::Idx => {
                let train = load_idx(
                    cfg.idx_train_images.as_deref().expect("validated"),
                    cfg.idx_train_labels.as_deref().expect("validated"),
                )?;
                let test = match (&cfg.idx_test_images, &cfg.idx_test_labels) {
                    (Some(i), Some(l)) => load_idx(i, l)?,
                    _ => return Err(Error::MissingKey("idx_test_images/idx_test_labels".into())),
                };
                (train, test)
            }
        };
        let scheme = match cfg.partition {
            PartitionKind::Dirichlet => PartitionScheme::Dirichlet { alpha: cfg.alpha },
            PartitionKind::Pathological => PartitionScheme::Pathological,
        };
        let dataset = build_federated(
            &source,
            global_test,
            cfg.classes,
            scheme,
            cfg.clients,
            cfg.test_fraction,
            cfg.seed.wrapping_add(PARTITION_SEED),
        )?;
        let spec = ModelSpec::new(
            cfg.layer_sizes(source.dim()),
            cfg.activation,
            cfg.seed.wrapping_add(INIT_SEED),
        )?;
        let clients = make_clients(&dataset, cfg.unlearn_clients);
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            spec,
            clients,
        })
    }

    pub fn forget_shards(&self) -> Vec<&Batch> {
        self.with_role(Role::Unlearning).map(|c| &c.train).collect()
    }

    pub fn remaining_test_shards(&self) -> Vec<&Batch> {
        self.with_role(Role::Remaining).map(|c| &c.test).collect()
    }

    fn with_role(&self, role: Role) -> impl Iterator<Item = &ClientState> {
        self.clients.iter().filter(move |c| c.role == role)
    }

    /// Members are the forget clients' training samples; nonmembers come from
    /// the global test split restricted to the members' classes. The larger
    /// pool is subsampled (fixed seed) so both have equal size.
    pub fn mia_pools(&self) -> Option<(Batch, Batch)> {
        let forget = self.forget_shards();
        if forget.is_empty() {
            return None;
        }
        let dim = self.dataset.global_test.dim();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for shard in forget {
            features.extend_from_slice(shard.features());
            labels.extend_from_slice(shard.labels());
        }
        let members = Batch::new(features, labels, dim).ok()?;
        let mut present = vec![false; self.dataset.class_count];
        for &l in members.labels() {
            present[l] = true;
        }
        let test = &self.dataset.global_test;
        let pool: Vec<usize> = (0..test.len()).filter(|&i| present[test.labels()[i]]).collect();
        if pool.is_empty() {
            return None;
        }
        let n = members.len().min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(MIA_SEED));
        let mut pick = |len: usize| {
            let mut idx = sample(&mut rng, len, n).into_vec();
            idx.sort_unstable();
            idx
        };
        let member_idx = pick(members.len());
        let nonmember_idx: Vec<usize> = pick(pool.len()).into_iter().map(|i| pool[i]).collect();
        Some((members.select(&member_idx), test.select(&nonmember_idx)))
    }

    pub fn metrics(&self, omega: &ParamVector) -> Result<StageMetrics> {
        let forget = self.forget_shards();
        let asr = if forget.is_empty() {
            None
        } else {
            Some(metrics::asr(omega, &self.spec, &forget)?)
        };
        let (racc_mean, racc_std) = metrics::r_acc(omega, &self.spec, &self.remaining_test_shards())?;
        let mia_auc = match self.mia_pools() {
            Some((m, n)) => Some(metrics::mia_auc(omega, &self.spec, &m, &n)?),
            None => None,
        };
        Ok(StageMetrics {
            asr,
            racc_mean,
            racc_std,
            mia_auc,
        })
    }

    fn fill_snapshot(&self, record: &mut RoundRecord, omega: &ParamVector, origin: &ParamVector) -> Result<()> {
        let forget = self.forget_shards();
        if !forget.is_empty() {
            record.asr = Some(metrics::asr(omega, &self.spec, &forget)?);
        }
        let (m, s) = metrics::r_acc(omega, &self.spec, &self.remaining_test_shards())?;
        record.racc_mean = Some(m);
        record.racc_std = Some(s);
        record.distance = omega.sub(origin)?.norm();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMetrics {
    pub asr: Option<f64>,
    pub racc_mean: f64,
    pub racc_std: f64,
    pub mia_auc: Option<f64>,
}

/// Everything a run produced. On abort, `error` is set and the fields hold
/// whatever completed before the failing round.
#[derive(Debug, Default)]
pub struct PipelineRun {
    pub variant: Variant,
    pub pretrain_losses: Vec<f64>,
    pub records: Vec<RoundRecord>,
    pub model_pre: Option<ParamVector>,
    pub model_unlearned: Option<ParamVector>,
    pub model_final: Option<ParamVector>,
    pub pre_metrics: Option<StageMetrics>,
    pub unlearned_metrics: Option<StageMetrics>,
    pub final_metrics: Option<StageMetrics>,
    /// Why the unlearning stage ended before its round budget, if it did.
    pub unlearn_stop: Option<String>,
    pub error: Option<Error>,
}

/// Inputs that let a run resume from a saved stage.
#[derive(Debug, Clone, Default)]
pub struct StageInputs {
    /// Starting model: ω⁰ for `Unlearn`, the unlearned model for `Posttrain`,
    /// or a replacement for pretraining under `All`.
    pub init: Option<ParamVector>,
    /// Pre-unlearning model used as the post-training anchor.
    pub anchor: Option<ParamVector>,
}

pub fn run_pipeline(exp: &Experiment, stage: StageSelection, inputs: StageInputs) -> PipelineRun {
    let mut run = PipelineRun {
        variant: exp.cfg.ablation,
        ..Default::default()
    };
    if let Err(e) = drive(exp, stage, inputs, &mut run) {
        run.error = Some(e);
    }
    run
}

fn check_len(exp: &Experiment, w: &ParamVector) -> Result<()> {
    if w.len() != exp.spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: exp.spec.param_count(),
            actual: w.len(),
        });
    }
    Ok(())
}

fn drive(exp: &Experiment, stage: StageSelection, inputs: StageInputs, run: &mut PipelineRun) -> Result<()> {
    let settings = Settings::from_config(&exp.cfg);
    for w in inputs.init.iter().chain(&inputs.anchor) {
        check_len(exp, w)?;
    }

    if stage == StageSelection::Posttrain {
        let start = inputs.init.ok_or_else(|| Error::Config("post-training needs an initial model".into()))?;
        let anchor = inputs
            .anchor
            .ok_or_else(|| Error::Config("post-training needs the pre-unlearning model".into()))?;
        run.model_pre = Some(anchor.clone());
        run.model_unlearned = Some(start.clone());
        run.unlearned_metrics = Some(exp.metrics(&start)?);
        let last = post_stage(exp, &settings, start, &anchor, run)?;
        run.final_metrics = Some(exp.metrics(&last)?);
        run.model_final = Some(last);
        return Ok(());
    }

    let omega0 = match (stage, inputs.init) {
        (StageSelection::Unlearn | StageSelection::Posttrain, None) => {
            return Err(Error::Config("the unlearning stage needs an initial model".into()))
        }
        (StageSelection::Pretrain, _) | (StageSelection::All, None) => {
            let shards: Vec<&Batch> = exp.clients.iter().map(|c| &c.train).collect();
            let (w, trace) = pretrain(
                &exp.spec,
                &init_params(&exp.spec),
                &shards,
                &PretrainSettings::from_config(&exp.cfg),
            )?;
            run.pretrain_losses = trace;
            w
        }
        (_, Some(w)) => w,
    };
    run.pre_metrics = Some(exp.metrics(&omega0)?);
    run.model_pre = Some(omega0.clone());
    if stage == StageSelection::Pretrain {
        return Ok(());
    }

    let unlearned = unlearn_stage(exp, &settings, &omega0, run)?;
    run.unlearned_metrics = Some(exp.metrics(&unlearned)?);
    run.model_unlearned = Some(unlearned.clone());
    if stage == StageSelection::Unlearn {
        return Ok(());
    }

    let last = post_stage(exp, &settings, unlearned, &omega0, run)?;
    run.final_metrics = Some(exp.metrics(&last)?);
    run.model_final = Some(last);
    Ok(())
}

fn abort(round: usize, e: Error) -> Error {
    Error::RoundAbort {
        round,
        source: Box::new(e),
    }
}

fn unlearn_stage(exp: &Experiment, settings: &Settings, omega0: &ParamVector, run: &mut PipelineRun) -> Result<ParamVector> {
    let obj = ModelClients::new(&exp.spec, &exp.clients, settings.unlearn_loss()?);
    let sizes: Vec<f64> = exp
        .clients
        .iter()
        .filter(|c| c.role == Role::Unlearning)
        .map(|c| c.train.len() as f64)
        .collect();
    let total: f64 = sizes.iter().sum();
    let naive_weights: Vec<f64> = sizes.iter().map(|n| n / total).collect();
    let (omega, stop) = run_unlearning(
        &obj,
        omega0,
        settings,
        &naive_weights,
        |record, omega| exp.fill_snapshot(record, omega, omega0),
        &mut run.records,
    )?;
    run.unlearn_stop = stop;
    Ok(omega)
}

fn post_stage(
    exp: &Experiment,
    settings: &Settings,
    start: ParamVector,
    origin: &ParamVector,
    run: &mut PipelineRun,
) -> Result<ParamVector> {
    let obj = ModelClients::new(&exp.spec, &exp.clients, settings.unlearn_loss()?);
    let mut omega = start;
    for t in 0..settings.post_rounds {
        let RoundStep { next, record } = (|| -> Result<RoundStep> {
            let mut step = posttrain_round(&obj, &omega, origin, settings, t, true)?;
            exp.fill_snapshot(&mut step.record, &omega, origin)?;
            Ok(step)
        })()
        .map_err(|e| abort(t, e))?;
        run.records.push(record);
        if let Some(w) = next {
            omega = w;
        }
    }
    Ok(omega)
}
