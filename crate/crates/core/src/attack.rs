//! Fast Gradient Sign Method crafting in white-box and query-free black-box
//! modes.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Model, Tracking};
use crate::ops::Reduction;
use crate::tensor::Tensor;

/// Samples per tape when computing input gradients.
const GRAD_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    WhiteBox,
    BlackBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// ∞-norm budget on the `[-1, 1]` pixel scale.
    pub epsilon: f32,
    pub mode: AttackMode,
    pub clip_to_valid_range: bool,
}

impl AttackSpec {
    pub fn white_box(epsilon: f32) -> Self {
        Self {
            epsilon,
            mode: AttackMode::WhiteBox,
            clip_to_valid_range: true,
        }
    }

    pub fn black_box(epsilon: f32) -> Self {
        Self {
            epsilon,
            mode: AttackMode::BlackBox,
            clip_to_valid_range: true,
        }
    }
}

fn check_epsilon(epsilon: f32) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::argument(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    Ok(())
}

/// Clean inputs with their FGSM counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub true_labels: Vec<usize>,
    /// Positions of the samples in the test set they were drawn from.
    pub indices: Vec<usize>,
    pub crafting_model_id: String,
    pub epsilon: f32,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    /// Largest per-sample ∞-norm of `perturbed - originals`.
    pub fn max_perturbation(&self) -> f32 {
        self.perturbed
            .data()
            .iter()
            .zip(self.originals.data())
            .map(|(p, o)| (p - o).abs())
            .fold(0.0, f32::max)
    }
}

/// `∇_x ℓ(y, f(x))` for every sample, each with respect to its own loss.
/// Parameters are not tracked.
pub fn input_gradient(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if batch.rank() == 0 || batch.dim(0) != labels.len() {
        return Err(Error::dimension("input_gradient", batch.shape(), &[labels.len()]));
    }
    let n = labels.len();
    let mut parts = Vec::with_capacity(n.div_ceil(GRAD_CHUNK));
    let mut start = 0;
    while start < n {
        let end = (start + GRAD_CHUNK).min(n);
        let chunk = batch.slice_outer(start, end)?;
        let mut pass = model.forward_tracked(&chunk, Tracking::INPUT)?;
        // summed loss: each sample's gradient is that of its own loss
        let loss = pass
            .tape
            .cross_entropy(pass.logits, &labels[start..end], Reduction::Sum)?;
        let mut grads = pass.tape.backward(loss)?;
        parts.push(grads.take(pass.input).expect("input is tracked"));
        start = end;
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(batch.shape()));
    }
    Tensor::concat_outer(&parts)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + epsilon * sgn(grad)`, optionally clipped to `[-1, 1]`.
pub fn perturb(x: &Tensor, grad: &Tensor, epsilon: f32, clip: bool) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    if x.shape() != grad.shape() {
        return Err(Error::dimension("perturb", x.shape(), grad.shape()));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let out = v + epsilon * sign(g);
            if clip {
                out.clamp(-1.0, 1.0)
            } else {
                out
            }
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// One untracked FGSM step that ascends the loss of the true labels.
pub fn fgsm(model: &Model, batch: &Tensor, labels: &[usize], epsilon: f32, clip: bool) -> Result<AdversarialBatch> {
    check_epsilon(epsilon)?;
    let perturbed = if epsilon == 0.0 {
        batch.clone()
    } else {
        perturb(batch, &input_gradient(model, batch, labels)?, epsilon, clip)?
    };
    Ok(AdversarialBatch {
        originals: batch.clone(),
        perturbed,
        true_labels: labels.to_vec(),
        indices: (0..labels.len()).collect(),
        crafting_model_id: model.id(),
        epsilon,
    })
}

/// Test samples the target classifies correctly, with their indices.
pub fn correct_subset(target: &Model, testset: &LabeledDataset) -> Result<(LabeledDataset, Vec<usize>)> {
    if testset.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let pred = target.predict(testset.images())?;
    let indices: Vec<usize> = (0..testset.len()).filter(|&i| pred[i] == testset.labels()[i]).collect();
    if indices.is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok((testset.select(&indices)?, indices))
}

fn craft(crafter: &Model, subset: &LabeledDataset, indices: Vec<usize>, spec: &AttackSpec) -> Result<AdversarialBatch> {
    let mut adv = fgsm(
        crafter,
        subset.images(),
        subset.labels(),
        spec.epsilon,
        spec.clip_to_valid_range,
    )?;
    adv.indices = indices;
    Ok(adv)
}

/// FGSM on the target itself, over the test samples it gets right.
pub fn attack_white_box(target: &Model, testset: &LabeledDataset, spec: &AttackSpec) -> Result<AdversarialBatch> {
    if spec.mode != AttackMode::WhiteBox {
        return Err(Error::argument("attack_white_box needs a white-box attack spec"));
    }
    check_epsilon(spec.epsilon)?;
    let (subset, indices) = correct_subset(target, testset)?;
    craft(target, &subset, indices, spec)
}

/// FGSM crafted on `source` against the samples `target` gets right. The
/// target is only queried once, for clean predictions.
pub fn attack_black_box(
    source: &Model,
    target: &Model,
    testset: &LabeledDataset,
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    if spec.mode != AttackMode::BlackBox {
        return Err(Error::argument("attack_black_box needs a black-box attack spec"));
    }
    check_epsilon(spec.epsilon)?;
    if source.num_classes() != target.num_classes() {
        return Err(Error::LabelSpace {
            source_classes: source.num_classes(),
            target_classes: target.num_classes(),
        });
    }
    let (subset, indices) = correct_subset(target, testset)?;
    craft(source, &subset, indices, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_dtn, LayerSpec};

    fn logistic() -> Model {
        let mut m = Model::from_specs(
            "custom",
            &[1, 1, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 1,
                    out_features: 2,
                },
            ],
            0,
        )
        .unwrap();
        // logits (0, 2x): p(y=1) = sigmoid(2x)
        m.set_params(vec![Tensor::new([1, 2], vec![0.0, 2.0]).unwrap(), Tensor::zeros([2])])
            .unwrap();
        m
    }

    #[test]
    fn logistic_step_moves_against_the_label() {
        let x = Tensor::new([1, 1, 1, 1], vec![0.5]).unwrap();
        let adv = fgsm(&logistic(), &x, &[1], 0.1, true).unwrap();
        assert_eq!(adv.perturbed.data(), &[0.5f32 - 0.1f32]);
        assert_eq!(adv.perturbed.data(), &[0.4]);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let x = Tensor::from_fn([2, 1, 1, 1], |i| i as f32 * 0.3 - 0.1);
        let adv = fgsm(&logistic(), &x, &[0, 1], 0.0, true).unwrap();
        assert!(adv.perturbed.bit_eq(&x));
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(matches!(
            fgsm(&logistic(), &x, &[0], -0.1, true),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_pixel_alone() {
        let x = Tensor::new([1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let g = Tensor::new([1, 3], vec![0.0, -1.0, 3.0]).unwrap();
        let out = perturb(&x, &g, 0.25, true).unwrap();
        assert_eq!(out.data(), &[0.2, -0.65, 1.0]);
        let out = perturb(&x, &g, 0.25, false).unwrap();
        assert_eq!(out.data()[2], 0.9 + 0.25);
    }

    #[test]
    fn label_space_mismatch_names_both_counts() {
        let testset = crate::data::synth_domain(&crate::data::DomainStyle::plain(), 10, 10, 0).unwrap();
        let err = attack_black_box(
            &build_dtn(5, 0).unwrap(),
            &build_dtn(10, 0).unwrap(),
            &testset,
            &AttackSpec::black_box(0.1),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::LabelSpace {
                source_classes: 5,
                target_classes: 10
            }
        ));
    }

    #[test]
    fn mode_is_checked() {
        let testset = crate::data::synth_domain(&crate::data::DomainStyle::plain(), 10, 10, 0).unwrap();
        let m = build_dtn(10, 0).unwrap();
        assert!(attack_white_box(&m, &testset, &AttackSpec::black_box(0.1)).is_err());
        assert!(attack_black_box(&m, &m, &testset, &AttackSpec::white_box(0.1)).is_err());
    }
}
