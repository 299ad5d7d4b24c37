//! Dataset construction: synthetic Gaussian blobs, IDX image files, and
//! label-skewed client partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How the source training set is split across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    /// Per-class proportions drawn from `Dir(alpha · 1_m)`.
    Dirichlet { alpha: f64 },
    /// Every class dealt round-robin to all clients (approximately IID).
    Pathological,
}

impl std::fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionScheme::Dirichlet { alpha } => write!(f, "dirichlet(alpha={alpha})"),
            PartitionScheme::Pathological => write!(f, "pathological"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub train_shards: Vec<Batch>,
    pub test_shards: Vec<Batch>,
    pub global_test: Batch,
    pub class_count: usize,
    pub scheme: PartitionScheme,
    pub seed: u64,
    /// Source-set indices owned by each client (train and test together).
    pub assignment: Vec<Vec<usize>>,
}

impl FederatedDataset {
    pub fn clients(&self) -> usize {
        self.train_shards.len()
    }
}

/// Means of the synthetic blobs: seeded uniform draws in `[-1, 1]^d`,
/// rescaled so that the closest pair sits exactly one unit apart.
pub fn blob_means(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..classes {
        for j in i + 1..classes {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = if min_dist > 0.0 && min_dist.is_finite() {
        1.0 / min_dist
    } else {
        1.0
    };
    means
        .into_iter()
        .map(|m| m.into_iter().map(|v| v * scale).collect())
        .collect()
}

/// `classes` isotropic Gaussian blobs with `per_class` samples each, emitted
/// class by class. `spread` is the per-coordinate standard deviation.
pub fn synth_gaussians(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Batch> {
    if classes < 2 || dim < 2 {
        return Err(Error::Config(
            "synthetic data needs at least 2 classes and 2 dimensions".into(),
        ));
    }
    if !(spread >= 0.0) {
        return Err(Error::OutOfRange {
            key: "spread".into(),
            reason: "must be nonnegative".into(),
        });
    }
    let means = blob_means(classes, dim, seed);
    synth_from_means(&means, per_class, spread, seed.wrapping_add(0x5eed))
}

fn synth_from_means(means: &[Vec<f64>], per_class: usize, spread: f64, seed: u64) -> Result<Batch> {
    let dim = means[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for m in mean {
                features.push(m + spread * noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Batch::new(features, labels, dim)
}

/// Train and held-out test sets drawn from the same blobs.
pub fn synth_train_test(
    classes: usize,
    dim: usize,
    per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Batch, Batch)> {
    let train = synth_gaussians(classes, dim, per_class, spread, seed)?;
    let means = blob_means(classes, dim, seed);
    let test = synth_from_means(&means, test_per_class, spread, seed.wrapping_add(0x7e57))?;
    Ok((train, test))
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // Every gamma draw underflowed (tiny alpha): all mass on one client.
        let pick = rng.random_range(0..m);
        draws = vec![0.0; m];
        draws[pick] = 1.0;
    }
    draws
}

fn class_indices(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Moves samples from the largest shard into shards holding fewer than
/// `min_size`, one at a time.
fn repair_small_shards(shards: &mut [Vec<usize>], min_size: usize) {
    loop {
        let Some(small) = shards.iter().position(|s| s.len() < min_size) else {
            return;
        };
        let largest = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[small].push(moved);
    }
}

fn check_partition_args(n: usize, m: usize, min_size: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::OutOfRange {
            key: "clients".into(),
            reason: "at least two clients are required".into(),
        });
    }
    if n < m * min_size {
        return Err(Error::Config(format!(
            "{n} samples cannot give {m} clients at least {min_size} each"
        )));
    }
    Ok(())
}

/// Dirichlet label-skew partition. Every shard ends up non-empty.
pub fn dirichlet_partition(labels: &[usize], alpha: f64, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    dirichlet_partition_min(labels, alpha, m, seed, 1)
}

pub fn dirichlet_partition_min(
    labels: &[usize],
    alpha: f64,
    m: usize,
    seed: u64,
    min_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::OutOfRange {
            key: "alpha".into(),
            reason: format!("must be positive, got {alpha}"),
        });
    }
    check_partition_args(labels.len(), m, min_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); m];
    for mut idx in class_indices(labels) {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = sample_dirichlet(&mut rng, alpha, m);
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == m {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            shards[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    repair_small_shards(&mut shards, min_size);
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Each class shuffled and dealt round-robin across clients.
pub fn pathological_partition(labels: &[usize], m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_partition_args(labels.len(), m, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); m];
    let mut next = 0;
    for mut idx in class_indices(labels) {
        idx.shuffle(&mut rng);
        for i in idx {
            shards[next % m].push(i);
            next += 1;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Splits the source set across `m` clients and carves a per-client test
/// shard (`test_fraction` of each client's samples, at least one) from the
/// same draw.
pub fn build_federated(
    source: &Batch,
    global_test: Batch,
    class_count: usize,
    scheme: PartitionScheme,
    m: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    source.check_labels(class_count)?;
    global_test.check_labels(class_count)?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::OutOfRange {
            key: "test_fraction".into(),
            reason: "must lie in [0, 1)".into(),
        });
    }
    let min_size = if test_fraction > 0.0 { 2 } else { 1 };
    let assignment = match scheme {
        PartitionScheme::Dirichlet { alpha } => {
            dirichlet_partition_min(source.labels(), alpha, m, seed, min_size)?
        }
        PartitionScheme::Pathological => {
            check_partition_args(source.len(), m, min_size)?;
            pathological_partition(source.labels(), m, seed)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5917));
    let mut train_shards = Vec::with_capacity(m);
    let mut test_shards = Vec::with_capacity(m);
    for idx in &assignment {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let n_test = if test_fraction > 0.0 {
            ((shuffled.len() as f64 * test_fraction).round() as usize).clamp(1, shuffled.len() - 1)
        } else {
            0
        };
        let (test, train) = shuffled.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        train_shards.push(source.select(&train));
        test_shards.push(source.select(&test));
    }
    Ok(FederatedDataset {
        train_shards,
        test_shards,
        global_test,
        class_count,
        scheme,
        seed,
        assignment,
    })
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", offset + 4),
        })
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// each image flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Batch> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let magic = read_u32_be(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_u32_be(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }

    let count = read_u32_be(&images, 4, images_path)? as usize;
    let rows = read_u32_be(&images, 8, images_path)? as usize;
    let cols = read_u32_be(&images, 12, images_path)? as usize;
    let label_count = read_u32_be(&labels, 4, labels_path)? as usize;
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let dim = rows * cols;
    let pixels = images.get(16..16 + count * dim).ok_or_else(|| Error::Truncated {
        path: images_path.to_path_buf(),
        detail: format!("expected {} pixel bytes, found {}", count * dim, images.len().saturating_sub(16)),
    })?;
    let label_bytes = labels.get(8..8 + count).ok_or_else(|| Error::Truncated {
        path: labels_path.to_path_buf(),
        detail: format!("expected {count} label bytes, found {}", labels.len().saturating_sub(8)),
    })?;

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| usize::from(l)).collect();
    Batch::new(features, labels, dim)
}
