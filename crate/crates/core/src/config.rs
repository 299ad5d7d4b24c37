//! Run configuration: a flat TOML key-value document.
//!
//! Parsing is strict. Unknown keys, missing required keys and out-of-range
//! values each produce a distinct error variant. The resolved configuration
//! (all defaults filled in) round-trips through [`RunConfig::to_resolved`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;

pub const REQUIRED_KEYS: &[&str] = &["dataset", "clients", "unlearn_clients"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Dirichlet,
    Pathological,
}

/// Single-component ablations of the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    #[serde(rename = "none")]
    Full,
    /// Plain weighted sum of unlearning gradients, fixed step.
    M1,
    /// No fairness objective in either phase.
    M2,
    /// All-ones preference during improvement.
    M3,
    /// No fairness objective during expansion.
    M4,
    /// No null-space projection during expansion.
    M5,
    /// Expansion searches the improvement interval.
    M6,
    /// Unlearning cross-entropy instead of the boundary-shift loss.
    M7,
    /// KL-to-uniform instead of the boundary-shift loss.
    M8,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
        Variant::M8,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "none",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::M6 => "M6",
            Variant::M7 => "M7",
            Variant::M8 => "M8",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.label().eq_ignore_ascii_case(s) || (s == "full" && *v == Variant::Full))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    S,
    Alpha,
    UnlearnCount,
    Seed,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(SweepAxis::S),
            "alpha" => Ok(SweepAxis::Alpha),
            "unlearn_count" => Ok(SweepAxis::UnlearnCount),
            "seed" => Ok(SweepAxis::Seed),
            other => Err(Error::OutOfRange {
                key: "sweep_axis".into(),
                reason: format!("unknown axis `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx_train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx_train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx_test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx_test_labels: Option<PathBuf>,

    pub partition: PartitionKind,
    pub alpha: f64,
    pub clients: usize,
    pub unlearn_clients: usize,
    pub test_fraction: f64,

    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,

    pub pretrain_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub lr_decay: f64,

    pub eta: f64,
    pub beta: f64,
    pub s: u32,
    pub delta: f64,
    pub unlearn_rounds: usize,
    /// Defaults to `unlearn_rounds` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_rounds: Option<usize>,
    pub early_stop_rounds: usize,
    pub dead_end_limit: usize,
    pub mgda_tol: f64,
    pub mgda_max_iter: usize,
    pub drop_tol: f64,
    pub ablation: Variant,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_axis: Option<SweepAxis>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep_values: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            classes: 3,
            dim: 2,
            per_class: 600,
            test_per_class: 150,
            spread: 0.15,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            partition: PartitionKind::Dirichlet,
            alpha: 0.5,
            clients: 10,
            unlearn_clients: 2,
            test_fraction: 0.2,
            hidden: vec![16],
            activation: Activation::Relu,
            seed: 0,
            pretrain_rounds: 200,
            local_epochs: 1,
            batch_size: 200,
            pretrain_lr: 0.5,
            lr_decay: 0.999,
            eta: 0.05,
            beta: crate::line_search::DEFAULT_BETA,
            s: 3,
            delta: crate::losses::DEFAULT_DELTA,
            unlearn_rounds: 100,
            post_rounds: None,
            early_stop_rounds: 3,
            dead_end_limit: 3,
            mgda_tol: crate::mgda::DEFAULT_TOL,
            mgda_max_iter: crate::mgda::DEFAULT_MAX_ITER,
            drop_tol: crate::geometry::DEFAULT_DROP_TOL,
            ablation: Variant::Full,
            sweep_axis: None,
            sweep_values: Vec::new(),
            sweep_seeds: Vec::new(),
        }
    }
}

fn known_keys() -> Vec<String> {
    let mut full = RunConfig::default();
    full.idx_train_images = Some(PathBuf::new());
    full.idx_train_labels = Some(PathBuf::new());
    full.idx_test_images = Some(PathBuf::new());
    full.idx_test_labels = Some(PathBuf::new());
    full.post_rounds = Some(0);
    full.sweep_axis = Some(SweepAxis::S);
    full.sweep_values = vec![0.0];
    full.sweep_seeds = vec![0];
    let table = toml::Table::try_from(&full).expect("config serializes");
    table.keys().cloned().collect()
}

fn out_of_range(key: &str, reason: impl Into<String>) -> Error {
    Error::OutOfRange {
        key: key.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed document: {e}")))?;
        let known = known_keys();
        if let Some(key) = table.keys().find(|k| !known.contains(k)) {
            return Err(Error::UnknownKey(key.clone()));
        }
        if let Some(key) = REQUIRED_KEYS.iter().find(|k| !table.contains_key(**k)) {
            return Err(Error::MissingKey(key.to_string()));
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            match e.span().and_then(|sp| text.get(sp)) {
                Some(snippet) => Error::Config(format!("{msg} near `{snippet}`")),
                None => Error::Config(msg),
            }
        })?;
        if cfg.post_rounds.is_none() {
            cfg.post_rounds = Some(cfg.unlearn_rounds);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn post_rounds(&self) -> usize {
        self.post_rounds.unwrap_or(self.unlearn_rounds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(out_of_range("classes", "need at least 2 classes"));
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.dim < 2 {
                return Err(out_of_range("dim", "need at least 2 dimensions"));
            }
            if self.per_class == 0 || self.test_per_class == 0 {
                return Err(out_of_range("per_class", "sample counts must be positive"));
            }
            if !(self.spread >= 0.0) || !self.spread.is_finite() {
                return Err(out_of_range("spread", "must be a nonnegative number"));
            }
        } else if self.idx_train_images.is_none() || self.idx_train_labels.is_none() {
            return Err(Error::MissingKey("idx_train_images/idx_train_labels".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(out_of_range("alpha", "must be positive"));
        }
        if self.clients < 2 {
            return Err(out_of_range("clients", "need at least 2 clients"));
        }
        if self.unlearn_clients >= self.clients {
            return Err(out_of_range(
                "unlearn_clients",
                "at least one remaining client is required",
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(out_of_range("test_fraction", "must lie in (0, 1)"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(out_of_range("hidden", "layer widths must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(out_of_range("local_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(out_of_range("batch_size", "must be positive"));
        }
        for (key, v) in [("pretrain_lr", self.pretrain_lr), ("eta", self.eta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(out_of_range(key, "must be positive"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(out_of_range("lr_decay", "must lie in (0, 1]"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(out_of_range("beta", "must lie in (0, 1)"));
        }
        if self.s == 0 {
            return Err(out_of_range("s", "s is a positive integer"));
        }
        if self.s > 30 {
            return Err(out_of_range("s", "search breadth above 30 is not supported"));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(out_of_range("delta", "margin must be positive"));
        }
        if self.early_stop_rounds == 0 || self.dead_end_limit == 0 {
            return Err(out_of_range(
                "early_stop_rounds",
                "patience counters must be positive",
            ));
        }
        if !(self.mgda_tol > 0.0) || self.mgda_max_iter == 0 {
            return Err(out_of_range("mgda_tol", "solver tolerance and cap must be positive"));
        }
        if !(self.drop_tol > 0.0 && self.drop_tol < 1.0) {
            return Err(out_of_range("drop_tol", "must lie in (0, 1)"));
        }
        if self.sweep_axis.is_some() {
            let values_empty = match self.sweep_axis {
                Some(SweepAxis::Seed) => self.sweep_seeds.is_empty() && self.sweep_values.is_empty(),
                _ => self.sweep_values.is_empty(),
            };
            if values_empty {
                return Err(out_of_range("sweep_values", "sweep axis has no values"));
            }
        }
        Ok(())
    }

    /// Fully resolved TOML echo; parsing it back yields an identical config.
    pub fn to_resolved(&self) -> String {
        let mut resolved = self.clone();
        resolved.post_rounds = Some(self.post_rounds());
        toml::to_string(&resolved).expect("config serializes")
    }

    /// Hidden widths plus the input and output sizes.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.classes);
        sizes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = \"synthetic\"\nclients = 10\nunlearn_clients = 2\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(cfg.eta, 0.05);
        assert_eq!(cfg.beta, 0.05);
        assert_eq!(cfg.s, 3);
        assert_eq!(cfg.delta, 1e-3);
        assert_eq!(cfg.unlearn_rounds, 100);
        assert_eq!(cfg.post_rounds(), 100);
        assert_eq!(cfg.lr_decay, 0.999);
        assert_eq!(cfg.local_epochs, 1);
        let resolved = cfg.to_resolved();
        for key in ["eta = 0.05", "beta = 0.05", "s = 3", "delta = 0.001", "unlearn_rounds = 100", "post_rounds = 100"] {
            assert!(resolved.contains(key), "missing `{key}` in\n{resolved}");
        }
        assert_eq!(RunConfig::parse_str(&resolved).unwrap(), cfg);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            RunConfig::parse_str(&format!("{MINIMAL}s = 0\n")),
            Err(Error::OutOfRange { key, .. }) if key == "s"
        ));
        assert!(matches!(
            RunConfig::parse_str(&format!("{MINIMAL}delta = 0.0\n")),
            Err(Error::OutOfRange { key, .. }) if key == "delta"
        ));
        assert!(matches!(
            RunConfig::parse_str(&format!("{MINIMAL}delta = -1.0\n")),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            RunConfig::parse_str(&format!("{MINIMAL}learning_rate = 0.1\n")),
            Err(Error::UnknownKey(k)) if k == "learning_rate"
        ));
        assert!(matches!(
            RunConfig::parse_str("dataset = \"synthetic\"\nclients = 10\n"),
            Err(Error::MissingKey(k)) if k == "unlearn_clients"
        ));
        assert!(matches!(
            RunConfig::parse_str(&format!("{MINIMAL}ablation = \"M9\"\n")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_str(&format!("{MINIMAL}sweep_axis = \"s\"\nsweep_values = []\n")),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn variants_parse() {
        assert_eq!("M5".parse::<Variant>().unwrap(), Variant::M5);
        assert_eq!("none".parse::<Variant>().unwrap(), Variant::Full);
        assert!(matches!("M9".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        let cfg = RunConfig::parse_str(&format!("{MINIMAL}ablation = \"M7\"\n")).unwrap();
        assert_eq!(cfg.ablation, Variant::M7);
    }
}
