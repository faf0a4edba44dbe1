//! Mini-batch SGD with momentum and early stopping, plus the three transfer
//! strategies: Scratch, fine-tuning (FT) and common initialization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{train_val_split, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{build_dtn, Model, Tracking};
use crate::ops::Reduction;
use crate::tensor::Tensor;

pub const LEARNING_RATE_GRID: [f32; 3] = [0.1, 0.01, 1e-3];
pub const WEIGHT_DECAY_GRID: [f32; 3] = [5e-4, 2.5e-5, 5e-6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    /// Clamped to the training-set size.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fraction held out for model selection. Zero validates on the
    /// training data itself.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 128,
            patience: 50,
            max_epochs: 300,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Scratch,
    Ft,
    CommonInit,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::Ft => "ft",
            Strategy::CommonInit => "common_init",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Strategy::Scratch),
            "ft" => Ok(Strategy::Ft),
            "common_init" => Ok(Strategy::CommonInit),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected scratch, ft or common_init)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the restored epoch; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub strategy: Strategy,
}

impl TrainedModel {
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e].val_accuracy)
    }
}

/// Independent sub-seed for a named stream of a run (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_HEAD_A: u64 = 4;
const STREAM_HEAD_B: u64 = 5;

/// Fraction of `ds` that `model` classifies correctly.
pub fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("accuracy of an empty dataset".into()));
    }
    let pred = model.predict(ds.images())?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// One SGD step with momentum and coupled weight decay:
/// `v = momentum * v + g + weight_decay * theta; theta -= lr * v`.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    cfg: &TrainConfig,
) {
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((theta, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
            *theta -= cfg.learning_rate * *v;
        }
    }
}

/// Trains `model` on `data`, restoring the parameters of the first epoch
/// with the highest validation accuracy.
pub fn train(model: Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_tagged(model, data, cfg, Strategy::Scratch)
}

fn train_tagged(
    mut model: Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.num_classes() != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset {:?} has {} classes but the model outputs {}",
            data.domain_name(),
            data.num_classes(),
            model.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let (train_set, val_set) = if cfg.val_fraction > 0.0 {
        train_val_split(data, cfg.val_fraction, derive_seed(cfg.seed, STREAM_SPLIT))?
    } else {
        (data.clone(), data.clone())
    };

    let n = train_set.len();
    let batch_size = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut grads: Vec<Tensor> = velocity.clone();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let (images, labels) = train_set.batch(chunk)?;
            let mut pass = model.forward_tracked(&images, Tracking::PARAMS)?;
            let loss = pass.tape.cross_entropy(pass.logits, &labels, Reduction::Mean)?;
            loss_sum += f64::from(pass.tape.value(loss)?.item()?) * chunk.len() as f64;
            let mut g = pass.tape.backward(loss)?;
            for buf in grads.iter_mut() {
                buf.data_mut().fill(0.0);
            }
            for (buf, &v) in grads.iter_mut().zip(&pass.params) {
                let gv = g.take(v).expect("parameter leaves are tracked");
                for (b, x) in buf.data_mut().iter_mut().zip(gv.data()) {
                    *b += x;
                }
            }
            sgd_step(model.params_mut(), &grads, &mut velocity, cfg);
        }
        let val_accuracy = accuracy(&model, &val_set)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_accuracy,
        });
        match &best {
            Some((_, acc, _)) if val_accuracy <= *acc => {}
            _ => {
                best = Some((
                    epoch,
                    val_accuracy,
                    model.params().iter().map(|p| p.value.clone()).collect(),
                ))
            }
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let best_epoch = match best {
        Some((epoch, _, values)) => {
            model.set_params(values)?;
            Some(epoch)
        }
        None => None,
    };
    Ok(TrainedModel {
        model,
        history,
        best_epoch,
        strategy,
    })
}

/// A fresh DTN trained on Domain B alone.
pub fn run_scratch(domain_b: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let model = build_dtn(domain_b.num_classes(), derive_seed(cfg.seed, STREAM_INIT))?;
    train_tagged(model, domain_b, cfg, Strategy::Scratch)
}

/// Trains Model A on Domain A from scratch, then fine-tunes a copy of it on
/// Domain B. The head is re-initialized only if the class counts differ.
pub fn run_finetune(
    domain_a: &LabeledDataset,
    domain_b: &LabeledDataset,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
) -> Result<(TrainedModel, TrainedModel)> {
    let mut a = run_scratch(domain_a, cfg_a)?;
    a.strategy = Strategy::Ft;
    let b = finetune_from(&a.model, domain_b, cfg_b)?;
    Ok((a, b))
}

/// Fine-tunes a copy of an already trained Model A on Domain B.
pub fn finetune_from(source: &Model, domain_b: &LabeledDataset, cfg_b: &TrainConfig) -> Result<TrainedModel> {
    let init = if source.num_classes() == domain_b.num_classes() {
        source.clone()
    } else {
        source.reinit_classifier_head(domain_b.num_classes(), derive_seed(cfg_b.seed, STREAM_HEAD_B))?
    };
    train_tagged(init, domain_b, cfg_b, Strategy::Ft)
}

/// Trains Model C on Domain C, then fine-tunes A and B independently from
/// it, each with a freshly initialized head.
pub fn run_common_init(
    domain_c: &LabeledDataset,
    domain_a: &LabeledDataset,
    domain_b: &LabeledDataset,
    cfg_c: &TrainConfig,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
) -> Result<(TrainedModel, TrainedModel)> {
    let c = run_scratch(domain_c, cfg_c)?;
    common_init_from(&c.model, domain_a, domain_b, cfg_a, cfg_b)
}

/// The fine-tuning half of [`run_common_init`] for an existing Model C.
pub fn common_init_from(
    c: &Model,
    domain_a: &LabeledDataset,
    domain_b: &LabeledDataset,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
) -> Result<(TrainedModel, TrainedModel)> {
    let init_a = c.reinit_classifier_head(domain_a.num_classes(), derive_seed(cfg_a.seed, STREAM_HEAD_A))?;
    let init_b = c.reinit_classifier_head(domain_b.num_classes(), derive_seed(cfg_b.seed, STREAM_HEAD_B))?;
    let a = train_tagged(init_a, domain_a, cfg_a, Strategy::CommonInit)?;
    let b = train_tagged(init_b, domain_b, cfg_b, Strategy::CommonInit)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;

    fn linear(seed: u64) -> Model {
        Model::from_specs(
            "custom",
            &[2, 1, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 2,
                    out_features: 2,
                },
            ],
            seed,
        )
        .unwrap()
    }

    fn separable(n: usize) -> LabeledDataset {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let t = i as f32 / n as f32;
            let y = i % 2;
            let sign = if y == 0 { -1.0 } else { 1.0 };
            data.extend([sign * (0.2 + 0.6 * t), 0.8 - 1.6 * t]);
            labels.push(y);
        }
        LabeledDataset::new(Tensor::new([n, 2, 1, 1], data).unwrap(), labels, "toy", 2).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let model = linear(3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 5,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let out = train(model.clone(), &separable(20), &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.history.len(), 5);
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            max_epochs: 200,
            batch_size: 8,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let ds = separable(40);
        let out = train(linear(1), &ds, &cfg).unwrap();
        assert_eq!(accuracy(&out.model, &ds).unwrap(), 1.0);
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let model = build_dtn(3, 0).unwrap();
        let ds = separable(4);
        assert!(matches!(
            train(model, &ds, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_decay_alone_contracts() {
        let cfg = TrainConfig {
            weight_decay: 0.01,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut params = [Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].l2_norm();
        let grads = vec![Tensor::zeros([3])];
        let mut vel = vec![Tensor::zeros([3])];
        sgd_step(params.iter_mut(), &grads, &mut vel, &cfg);
        assert!(params[0].l2_norm() < before);
    }

    #[test]
    fn best_epoch_is_first_maximum() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 30,
            batch_size: 4,
            patience: 5,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let ds = separable(16);
        let out = train(linear(2), &ds, &cfg).unwrap();
        let best = out.best_epoch.unwrap();
        let max = out.history.iter().map(|h| h.val_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(out.history[best].val_accuracy, max);
        assert!(out.history[..best].iter().all(|h| h.val_accuracy < max));
        assert_eq!(accuracy(&out.model, &ds).unwrap(), max);
        // patience stops the run early once full accuracy is reached
        assert!(out.history.len() <= best + 1 + cfg.patience);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn strategy_round_trips_through_text() {
        for s in [Strategy::Scratch, Strategy::Ft, Strategy::CommonInit] {
            assert_eq!(s.tag().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.tag()));
        }
        assert!("nope".parse::<Strategy>().is_err());
    }
}
