//! Unlearning efficacy, retained utility, and membership leakage.

use crate::error::{Error, Result};
use crate::model::{predict, probabilities, Batch, ModelSpec};
use crate::numkit::ParamVector;

/// Fraction of forget samples the model still classifies correctly.
pub fn asr(params: &ParamVector, spec: &ModelSpec, forget: &[&Batch]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for shard in forget {
        let preds = predict(params, spec, shard)?;
        correct += preds
            .iter()
            .zip(shard.labels())
            .filter(|(p, l)| p == l)
            .count();
        total += shard.len();
    }
    if total == 0 {
        return Err(Error::Empty { what: "forget set" });
    }
    Ok(correct as f64 / total as f64)
}

pub fn accuracy(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty { what: "test shard" });
    }
    let preds = predict(params, spec, batch)?;
    let hits = preds.iter().zip(batch.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Mean and population standard deviation of the given values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-client test accuracy of the remaining clients, summarized as
/// (unweighted mean, population std).
pub fn r_acc(params: &ParamVector, spec: &ModelSpec, test_shards: &[&Batch]) -> Result<(f64, f64)> {
    if test_shards.is_empty() {
        return Err(Error::Empty {
            what: "remaining client set",
        });
    }
    let accs = test_shards
        .iter()
        .map(|b| accuracy(params, spec, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&accs))
}

/// Attack score per sample: the maximum softmax probability.
pub fn confidence_scores(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Vec<f64>> {
    Ok(probabilities(params, spec, batch)?
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Mann–Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half. Computed from midranks.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Empty { what: "score set" });
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied block i..=j shares the midrank.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Confidence-threshold membership inference AUC of members vs nonmembers.
pub fn mia_auc(params: &ParamVector, spec: &ModelSpec, members: &Batch, nonmembers: &Batch) -> Result<f64> {
    let m = confidence_scores(params, spec, members)?;
    let n = confidence_scores(params, spec, nonmembers)?;
    auc(&m, &n)
}
