//! Independent oracles shared by the integration suites. Nothing here calls
//! the library's forward pass or loss code.
#![allow(dead_code)]

use fedunlearn::losses::{LossKind, LossSpec};
use fedunlearn::model::{Activation, Batch, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const KINK_GUARD: f64 = 1e-6;

/// Everything about one sample's forward pass that decides which branch of
/// a piecewise definition is active.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    hidden_signs: Vec<bool>,
    runner_up: usize,
    margin_active: bool,
}

pub struct Forward {
    pub logits: Vec<f64>,
    pub pre_activations: Vec<f64>,
}

/// Textbook per-layer matrix-vector products over the flat layout
/// `[W₀ (out×in, row-major), b₀, W₁, b₁, …]`.
pub fn naive_forward(w: &[f64], sizes: &[usize], act: Activation, x: &[f64]) -> Forward {
    let mut h = x.to_vec();
    let mut offset = 0;
    let mut pre_all = Vec::new();
    for l in 0..sizes.len() - 1 {
        let (fin, fout) = (sizes[l], sizes[l + 1]);
        let weights = &w[offset..offset + fin * fout];
        let bias = &w[offset + fin * fout..offset + fin * fout + fout];
        offset += fin * fout + fout;
        let mut z = vec![0.0; fout];
        for o in 0..fout {
            z[o] = bias[o] + (0..fin).map(|i| weights[o * fin + i] * h[i]).sum::<f64>();
        }
        if l + 2 < sizes.len() {
            pre_all.extend_from_slice(&z);
            h = z
                .iter()
                .map(|&v| match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                })
                .collect();
        } else {
            h = z;
        }
    }
    Forward {
        logits: h,
        pre_activations: pre_all,
    }
}

fn runner_up(z: &[f64], c: usize) -> usize {
    let mut best = usize::MAX;
    for k in 0..z.len() {
        if k != c && (best == usize::MAX || z[k] > z[best]) {
            best = k;
        }
    }
    best
}

pub fn naive_sample_loss(kind: LossKind, delta: f64, z: &[f64], c: usize) -> f64 {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / s).collect();
    match kind {
        LossKind::Ce => -p[c].max(1e-12).ln(),
        LossKind::Mbs => (z[c] - z[runner_up(z, c)] - delta).max(0.0),
        LossKind::Uce => -(1.0 - p[c]).max(1e-12).ln(),
        LossKind::KlUniform => {
            let n = z.len() as f64;
            p.iter().filter(|&&q| q > 0.0).map(|q| q * (n * q).ln()).sum()
        }
    }
}

pub fn naive_loss(w: &[f64], spec: &ModelSpec, batch: &Batch, loss: &LossSpec) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let f = naive_forward(w, &spec.layer_sizes, spec.activation, batch.row(i));
        total += naive_sample_loss(loss.kind, loss.delta, &f.logits, batch.labels()[i]);
    }
    total / batch.len() as f64
}

fn pattern(w: &[f64], spec: &ModelSpec, batch: &Batch, delta: f64) -> (Vec<Pattern>, bool) {
    let mut near_kink = false;
    let pats = (0..batch.len())
        .map(|i| {
            let f = naive_forward(w, &spec.layer_sizes, spec.activation, batch.row(i));
            let c = batch.labels()[i];
            let r = runner_up(&f.logits, c);
            let margin = f.logits[c] - f.logits[r] - delta;
            let relu = spec.activation == Activation::Relu;
            if relu && f.pre_activations.iter().any(|v| v.abs() < KINK_GUARD) {
                near_kink = true;
            }
            if margin.abs() < KINK_GUARD {
                near_kink = true;
            }
            let mut sorted: Vec<f64> = (0..f.logits.len()).filter(|&k| k != c).map(|k| f.logits[k]).collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() > 1 && (sorted[0] - sorted[1]).abs() < KINK_GUARD {
                near_kink = true;
            }
            Pattern {
                hidden_signs: if relu {
                    f.pre_activations.iter().map(|&v| v > 0.0).collect()
                } else {
                    Vec::new()
                },
                runner_up: r,
                margin_active: margin > 0.0,
            }
        })
        .collect();
    (pats, near_kink)
}

/// Whether coordinate `j` sits within the finite-difference stencil of a
/// ReLU or max kink: the branch pattern differs between `ω ± εe_j`, or some
/// branch quantity is within 1e-6 of switching at either end.
pub fn kink_adjacent(w: &[f64], spec: &ModelSpec, batch: &Batch, delta: f64, j: usize) -> bool {
    let mut plus = w.to_vec();
    plus[j] += FD_EPS;
    let mut minus = w.to_vec();
    minus[j] -= FD_EPS;
    let (pp, kp) = pattern(&plus, spec, batch, delta);
    let (pm, km) = pattern(&minus, spec, batch, delta);
    kp || km || pp != pm
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, w: &[f64], j: usize) -> f64 {
    let mut plus = w.to_vec();
    plus[j] += FD_EPS;
    let mut minus = w.to_vec();
    minus[j] -= FD_EPS;
    (f(&plus) - f(&minus)) / (2.0 * FD_EPS)
}

pub fn within_fd_tolerance(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(1.0)
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, labels, dim).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Picks up to `want` distinct coordinates (seeded) that pass `keep`.
pub fn pick_coordinates(rng: &mut ChaCha8Rng, n: usize, want: usize, mut keep: impl FnMut(usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.into_iter().filter(|&j| keep(j)).take(want).collect()
}

/// The acceptance-suite synthetic setup: 3 Gaussian classes in 2-D with 600
/// samples each, 10 clients, Dirichlet 0.5, 2 unlearning clients, 2-16-3 MLP.
pub fn desk_config(seed: u64) -> fedunlearn::config::RunConfig {
    fedunlearn::config::RunConfig::parse_str(&format!(
        "dataset = \"synthetic\"\nclasses = 3\ndim = 2\nper_class = 600\nclients = 10\n\
         unlearn_clients = 2\npartition = \"dirichlet\"\nalpha = 0.5\nhidden = [16]\n\
         eta = 0.05\ns = 3\nunlearn_rounds = 100\npost_rounds = 100\nseed = {seed}\n"
    ))
    .unwrap()
}
