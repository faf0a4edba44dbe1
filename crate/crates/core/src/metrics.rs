//! Adversarial accuracy, transferability γ and input-gradient-norm
//! histograms.

use serde::{Deserialize, Serialize};

use crate::attack::{correct_subset, input_gradient, perturb, AdversarialBatch};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{accuracy, Strategy};

pub const DEFAULT_HIST_BINS: usize = 50;
pub const DEFAULT_DISPLAY_CUTOFF: f64 = 0.05;

/// Fraction of the perturbed samples `target` still assigns their true label.
pub fn adversarial_accuracy(target: &Model, adv: &AdversarialBatch) -> Result<f64> {
    if adv.is_empty() {
        return Err(Error::Empty("adversarial batch".into()));
    }
    let pred = target.predict(&adv.perturbed)?;
    let kept = pred.iter().zip(&adv.true_labels).filter(|(p, y)| p == y).count();
    Ok(kept as f64 / adv.len() as f64)
}

/// `(a_b - a_w) / a_w`. Negative values mean the transferred attack is the
/// stronger one.
pub fn transferability_gamma(a_w: f64, a_b: f64) -> Result<f64> {
    if a_w == 0.0 {
        return Err(Error::UndefinedGamma);
    }
    Ok((a_b - a_w) / a_w)
}

/// Histogram of per-sample `‖∇_x ℓ‖₂` at clean inputs.
///
/// `success_counts` and `failure_counts` cover only the attacked samples;
/// test samples outside the attacked subset appear in `counts` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormHistogram {
    /// `bins + 1` uniform edges over `[0, max norm]` (`[0, 1]` if all norms are zero).
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub cumulative: Vec<f64>,
    pub success_counts: Vec<usize>,
    pub failure_counts: Vec<usize>,
    pub norms: Vec<f64>,
    /// Lower bound for plotting; bins entirely below it are usually hidden.
    pub display_cutoff: f64,
}

impl GradNormHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn median(&self) -> f64 {
        median(&self.norms)
    }

    /// Bin holding the median norm.
    pub fn median_bin(&self) -> usize {
        self.bin_of(self.median())
    }

    fn bin_of(&self, v: f64) -> usize {
        let bins = self.bins();
        let width = (self.edges[bins] - self.edges[0]) / bins as f64;
        (((v - self.edges[0]) / width) as usize).min(bins - 1)
    }

    /// Index of the first bin whose upper edge exceeds the display cutoff.
    pub fn first_displayed_bin(&self) -> usize {
        (0..self.bins())
            .find(|&b| self.edges[b + 1] > self.display_cutoff)
            .unwrap_or(self.bins() - 1)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Bins `norms` uniformly over `[0, max]`, splitting attacked samples by
/// whether they were fooled. `attacked` holds `(test index, fooled)` pairs.
pub fn histogram_from_norms(norms: Vec<f64>, attacked: &[(usize, bool)], bins: usize) -> Result<GradNormHistogram> {
    histogram_in_range(norms, attacked, bins, None)
}

/// Like [`histogram_from_norms`], but with the top edge fixed at `upper` when
/// given, so histograms of different models share bins. Larger norms land in
/// the last bin.
pub fn histogram_in_range(
    norms: Vec<f64>,
    attacked: &[(usize, bool)],
    bins: usize,
    upper: Option<f64>,
) -> Result<GradNormHistogram> {
    if bins < 2 {
        return Err(Error::argument(format!("histograms need at least 2 bins, got {bins}")));
    }
    if norms.is_empty() {
        return Err(Error::Empty("gradient norms".into()));
    }
    if let Some(u) = upper {
        if !(u > 0.0 && u.is_finite()) {
            return Err(Error::argument(format!("histogram range must be positive, got {u}")));
        }
    }
    let max = norms.iter().copied().fold(0.0, f64::max);
    let top = upper.unwrap_or(if max > 0.0 { max } else { 1.0 });
    let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
    let mut hist = GradNormHistogram {
        edges,
        counts: vec![0; bins],
        cumulative: vec![0.0; bins],
        success_counts: vec![0; bins],
        failure_counts: vec![0; bins],
        norms,
        display_cutoff: DEFAULT_DISPLAY_CUTOFF,
    };
    for i in 0..hist.norms.len() {
        let b = hist.bin_of(hist.norms[i]);
        hist.counts[b] += 1;
    }
    for &(i, fooled) in attacked {
        let b = hist.bin_of(hist.norms[i]);
        if fooled {
            hist.success_counts[b] += 1;
        } else {
            hist.failure_counts[b] += 1;
        }
    }
    let total = hist.norms.len() as f64;
    let mut running = 0;
    for b in 0..bins {
        running += hist.counts[b];
        hist.cumulative[b] = running as f64 / total;
    }
    Ok(hist)
}

/// Per-sample clean input-gradient norms of `model` on `testset`.
pub fn gradient_norms(model: &Model, testset: &LabeledDataset) -> Result<Vec<f64>> {
    if testset.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let grad = input_gradient(model, testset.images(), testset.labels())?;
    let per = grad.numel() / testset.len();
    Ok(grad
        .data()
        .chunks(per)
        .map(|g| g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect())
}

/// Gradient-norm histogram over the whole test set; attacked samples are
/// split by whether `adv` fools `model`.
pub fn gradient_norm_histogram(
    model: &Model,
    testset: &LabeledDataset,
    adv: Option<&AdversarialBatch>,
    bins: usize,
) -> Result<GradNormHistogram> {
    gradient_norm_histogram_in_range(model, testset, adv, bins, None)
}

pub fn gradient_norm_histogram_in_range(
    model: &Model,
    testset: &LabeledDataset,
    adv: Option<&AdversarialBatch>,
    bins: usize,
    upper: Option<f64>,
) -> Result<GradNormHistogram> {
    if bins < 2 {
        return Err(Error::argument(format!("histograms need at least 2 bins, got {bins}")));
    }
    let norms = gradient_norms(model, testset)?;
    let attacked = match adv {
        Some(adv) if !adv.is_empty() => {
            let pred = model.predict(&adv.perturbed)?;
            adv.indices
                .iter()
                .zip(pred.iter().zip(&adv.true_labels))
                .map(|(&i, (p, y))| (i, p != y))
                .collect()
        }
        _ => Vec::new(),
    };
    histogram_in_range(norms, &attacked, bins, upper)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub epsilon: f32,
    /// Accuracy on the full test set.
    pub clean_accuracy: f64,
    /// Number of correctly classified test samples that were attacked.
    pub subset_size: usize,
    pub a_w: f64,
    pub a_b: Option<f64>,
    /// `None` when there is no black-box result or `a_w` is zero.
    pub gamma: Option<f64>,
    pub strategy: Strategy,
    pub target_id: String,
    pub source_id: Option<String>,
}

/// White-box (and, given a source, black-box) attacks on `target` at every
/// ε in the grid, sorted by ε.
pub fn compile_report(
    target: &Model,
    source: Option<&Model>,
    testset: &LabeledDataset,
    eps_grid: &[f32],
    strategy: Strategy,
) -> Result<Vec<AttackReport>> {
    if eps_grid.is_empty() {
        return Err(Error::argument("epsilon grid is empty"));
    }
    if let Some(&bad) = eps_grid.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::argument(format!("epsilon must be finite and >= 0, got {bad}")));
    }
    if let Some(src) = source {
        if src.num_classes() != target.num_classes() {
            return Err(Error::LabelSpace {
                source_classes: src.num_classes(),
                target_classes: target.num_classes(),
            });
        }
    }
    let mut grid = eps_grid.to_vec();
    grid.sort_by(f32::total_cmp);

    let clean_accuracy = accuracy(target, testset)?;
    let (subset, indices) = correct_subset(target, testset)?;
    let x = subset.images();
    let y = subset.labels();
    // the gradient does not depend on ε, so each model is differentiated once
    let needs_grad = grid.iter().any(|&e| e > 0.0);
    let grad_w = if needs_grad {
        Some(input_gradient(target, x, y)?)
    } else {
        None
    };
    let grad_b = match (source, needs_grad) {
        (Some(src), true) => Some(input_gradient(src, x, y)?),
        _ => None,
    };
    let batch = |crafter: &Model, grad: &Option<crate::tensor::Tensor>, eps: f32| -> Result<AdversarialBatch> {
        let perturbed = match grad {
            Some(g) if eps > 0.0 => perturb(x, g, eps, true)?,
            _ => x.clone(),
        };
        Ok(AdversarialBatch {
            originals: x.clone(),
            perturbed,
            true_labels: y.to_vec(),
            indices: indices.clone(),
            crafting_model_id: crafter.id(),
            epsilon: eps,
        })
    };

    let mut reports = Vec::with_capacity(grid.len());
    for eps in grid {
        let a_w = adversarial_accuracy(target, &batch(target, &grad_w, eps)?)?;
        let a_b = match source {
            Some(src) => Some(adversarial_accuracy(target, &batch(src, &grad_b, eps)?)?),
            None => None,
        };
        let gamma = match a_b {
            Some(a_b) if a_w > 0.0 => Some(transferability_gamma(a_w, a_b)?),
            _ => None,
        };
        reports.push(AttackReport {
            epsilon: eps,
            clean_accuracy,
            subset_size: subset.len(),
            a_w,
            a_b,
            gamma,
            strategy,
            target_id: target.id(),
            source_id: source.map(Model::id),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_formula() {
        assert_eq!(transferability_gamma(0.5, 0.75).unwrap(), 0.5);
        assert_eq!(transferability_gamma(0.3, 0.3).unwrap(), 0.0);
        assert!(transferability_gamma(0.5, 0.2).unwrap() < 0.0);
        assert!(matches!(transferability_gamma(0.0, 0.2), Err(Error::UndefinedGamma)));
    }

    #[test]
    fn histogram_mass_is_conserved() {
        let norms = vec![0.0, 0.1, 0.2, 0.2, 1.0];
        let h = histogram_from_norms(norms, &[(0, true), (4, false)], 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(*h.cumulative.last().unwrap(), 1.0);
        assert!(h.cumulative.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(h.success_counts, vec![1, 0, 0, 0]);
        assert_eq!(h.failure_counts, vec![0, 0, 0, 1]);
        assert_eq!(h.median(), 0.2);
    }

    #[test]
    fn all_zero_norms_fill_first_bin() {
        let h = histogram_from_norms(vec![0.0; 7], &[], 5).unwrap();
        assert_eq!(h.counts, vec![7, 0, 0, 0, 0]);
        assert_eq!(h.edges.last(), Some(&1.0));
        assert_eq!(h.median_bin(), 0);
    }

    #[test]
    fn histogram_rejects_degenerate_input() {
        assert!(histogram_from_norms(vec![1.0], &[], 1).is_err());
        assert!(matches!(histogram_from_norms(vec![], &[], 3), Err(Error::Empty(_))));
    }

    #[test]
    fn fixed_range_clamps_into_last_bin() {
        let h = histogram_in_range(vec![0.1, 0.6, 5.0], &[], 2, Some(1.0)).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 2]);
        assert!(histogram_in_range(vec![0.1], &[], 2, Some(0.0)).is_err());
    }

    #[test]
    fn display_cutoff_bin() {
        let h = histogram_from_norms(vec![0.0, 1.0], &[], 10).unwrap();
        assert_eq!(h.first_displayed_bin(), 0);
        let h = histogram_from_norms(vec![0.0, 10.0], &[], 1000).unwrap();
        assert_eq!(h.first_displayed_bin(), 5);
    }
}
