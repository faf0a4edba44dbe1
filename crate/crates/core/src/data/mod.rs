//! Labeled image datasets: IDX ingestion, synthetic digit domains and
//! stratified sampling.

mod idx;
mod synth;

pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, load_idx_with_classes, parse_idx_images, parse_idx_labels,
    resize_bilinear, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use synth::{synth_domain, Background, DomainStyle, Polarity};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images paired with integer labels from one domain.
///
/// Pixels lie in `[-1, 1]` and labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    domain_name: String,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, domain_name: impl Into<String>, num_classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.dim(0) != labels.len() {
            return Err(Error::dimension("dataset", images.shape(), &[labels.len()]));
        }
        if num_classes < 2 {
            return Err(Error::argument(format!(
                "datasets need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(&bad) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::argument(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            images,
            labels,
            domain_name: domain_name.into(),
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single image, e.g. `[3, 32, 32]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain_name: self.domain_name.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Images and labels at `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.select_outer(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Splits `total` across classes in proportion to `counts` (largest
/// remainder; ties to the lower class index). Each share is within one of
/// its exact proportional value.
fn allocate(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut shares: Vec<usize> = counts.iter().map(|&c| total * c / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(total * counts[c] % n));
    let mut left = total - shares.iter().sum::<usize>();
    for c in order {
        if left == 0 {
            break;
        }
        if shares[c] < counts[c] {
            shares[c] += 1;
            left -= 1;
        }
    }
    shares
}

fn stratified_pick(ds: &LabeledDataset, shares: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for (class_indices, &share) in ds.indices_by_class().iter().zip(shares) {
        let mut idx = class_indices.clone();
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..share]);
        rest.extend_from_slice(&idx[share..]);
    }
    picked.sort_unstable();
    rest.sort_unstable();
    (picked, rest)
}

/// Class-stratified random subset of `n` samples, kept in original order.
pub fn subsample(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::argument(format!("cannot subsample {n} of {} samples", ds.len())));
    }
    let shares = allocate(&ds.class_counts(), n);
    let (picked, _) = stratified_pick(ds, &shares, seed);
    ds.select(&picked)
}

/// Stratified disjoint split into (train, validation) parts.
pub fn train_val_split(ds: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::argument(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (ds.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= ds.len() {
        return Err(Error::argument(format!(
            "fraction {val_fraction} of {} samples leaves an empty part",
            ds.len()
        )));
    }
    let shares = allocate(&ds.class_counts(), n_val);
    let (val, train) = stratified_pick(ds, &shares, seed);
    Ok((ds.select(&train)?, ds.select(&val)?))
}
