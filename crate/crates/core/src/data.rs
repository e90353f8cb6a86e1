//! Datasets, IDX decoding, synthetic blobs, train/test splitting and client
//! partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Row-major labeled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(FlError::EmptyInput("dataset has no rows".into()));
        }
        if dim == 0 {
            return Err(FlError::InvalidArgument("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(FlError::InvalidArgument(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FlError::InvalidArgument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(FlError::InvalidArgument(format!(
                    "row index {i} out of range for {} rows",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, self.dim, labels, self.num_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Raw IDX image tensor (`count × rows × cols` unsigned bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(FlError::Length {
        needed: offset + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let observed = read_be_u32(bytes, 0)?;
    if observed != expected {
        return Err(FlError::Format { expected, observed });
    }
    Ok(())
}

fn checked_payload(bytes: &[u8], header: usize, body: usize) -> Result<&[u8]> {
    let needed = header + body;
    if bytes.len() < needed {
        return Err(FlError::Length {
            needed,
            available: bytes.len(),
        });
    }
    Ok(&bytes[header..needed])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let pixels = checked_payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    Ok(checked_payload(bytes, 8, count)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from decoded IDX images and labels, scaling pixels by 1/255.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(FlError::Consistency {
            images: images.count,
            labels: labels.len(),
        });
    }
    if images.count == 0 {
        return Err(FlError::EmptyInput("IDX files contain no samples".into()));
    }
    let dim = images.rows * images.cols;
    let features = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, dim, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = std::fs::read(images_path).map_err(|e| FlError::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| FlError::io(labels_path, e))?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    dataset_from_idx(&images, &labels)
}

/// Center of class `k`: the `k mod dim` unit vector, stretched by
/// `1 + k / dim` when there are more classes than dimensions.
pub fn blob_center(k: usize, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    c[k % dim] = 1.0 + (k / dim) as f64;
    c
}

/// Isotropic Gaussian clusters, one per class, `per_class` rows each.
pub fn synth_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || dim == 0 {
        return Err(FlError::InvalidArgument(format!(
            "synth_blobs needs >=2 classes and positive sizes, got classes={num_classes} per_class={per_class} dim={dim}"
        )));
    }
    let noise = Normal::new(0.0, spread)
        .ok()
        .filter(|_| spread > 0.0 && spread.is_finite())
        .ok_or_else(|| FlError::InvalidArgument(format!("spread must be positive, got {spread}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let center = blob_center(k, dim);
        for _ in 0..per_class {
            features.extend(center.iter().map(|&c| c + noise.sample(&mut rng)));
            labels.push(k);
        }
    }
    Dataset::new(features, dim, labels, num_classes)
}

/// Train size for a split: `ceil(ratio * n)`, kept within `1..n`.
pub fn train_split_size(n: usize, ratio: f64) -> usize {
    let raw = (ratio * n as f64 - 1e-9).ceil() as usize;
    raw.clamp(1, n - 1)
}

/// Index-level split, exposed so callers can verify coverage.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(FlError::EmptySplit(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FlError::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(train_split_size(n, ratio));
    Ok((idx, test))
}

pub fn split_train_test(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(data.len(), ratio, seed)?;
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// Client shards as index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// True when shards are non-empty, pairwise disjoint and cover `0..n`.
    pub fn is_disjoint_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for shard in &self.shards {
            if shard.is_empty() {
                return false;
            }
            for &i in shard {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn materialize(&self, parent: &Dataset) -> Result<Vec<Dataset>> {
        self.shards.iter().map(|s| parent.subset(s)).collect()
    }

    /// Per-client class counts.
    pub fn histograms(&self, parent: &Dataset) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|shard| {
                let mut h = vec![0; parent.num_classes()];
                for &i in shard {
                    h[parent.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }
}

fn check_clients(n: usize, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(FlError::InvalidArgument("need at least one client".into()));
    }
    if n < clients {
        return Err(FlError::InsufficientData { samples: n, clients });
    }
    Ok(())
}

/// Global shuffle, then round-robin deal.
pub fn partition_iid(train: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
    check_clients(train.len(), clients)?;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut shards = vec![Vec::with_capacity(train.len() / clients + 1); clients];
    for (pos, i) in idx.into_iter().enumerate() {
        shards[pos % clients].push(i);
    }
    Ok(Partition { shards })
}

fn dirichlet(rng: &mut ChaCha8Rng, concentration: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Dirichlet label skew: each class is split across clients by its own
/// symmetric Dirichlet draw, then empty shards borrow from the largest one.
pub fn partition_label_skew(train: &Dataset, clients: usize, concentration: f64, seed: u64) -> Result<Partition> {
    check_clients(train.len(), clients)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(FlError::InvalidArgument(format!(
            "Dirichlet concentration must be positive, got {concentration}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); train.num_classes()];
    for (i, &l) in train.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut shards = vec![Vec::new(); clients];
    for mut members in by_class {
        members.shuffle(&mut rng);
        let props = dirichlet(&mut rng, concentration, clients);
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            shards[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        let moved = shards[donor].pop().expect("donor has surplus since n >= clients");
        shards[empty].push(moved);
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(Partition { shards })
}
