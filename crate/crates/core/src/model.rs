//! Sequential classifiers built from [`LayerSpec`]s, including the DTN
//! digit classifier.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const DTN_ARCH: &str = "dtn";
/// Per-sample input shape of the DTN: 3×32×32.
pub const DTN_INPUT: [usize; 3] = [3, 32, 32];

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool,
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::dimension("layer", input, &self.expected_input());
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let [c, h, w] = input else { return Err(mismatch()) };
                if *c != in_channels || stride == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
                    return Err(mismatch());
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => Err(mismatch()),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(mismatch()),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn expected_input(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv { in_channels, .. } => vec![in_channels],
            LayerSpec::Dense { in_features, .. } => vec![in_features],
            _ => Vec::new(),
        }
    }

    /// (weight shape, bias shape, fan-in) for parameterized layers.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![in_features, out_features], vec![out_features], in_features)),
            _ => None,
        }
    }
}

/// The fixed DTN layer stack for `num_classes` outputs.
pub fn dtn_specs(num_classes: usize) -> Vec<LayerSpec> {
    let conv = |i, o| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 5,
        stride: 1,
        pad: 2,
    };
    vec![
        conv(3, 32),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        conv(32, 64),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        conv(64, 128),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_features: 128 * 4 * 4,
            out_features: 256,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_features: 256,
            out_features: num_classes,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Counts of evaluations a model has served, for auditing attack access.
#[derive(Debug, Default)]
struct Usage {
    forward: AtomicU64,
    input_gradient: AtomicU64,
}

/// Which tape leaves a tracked forward pass should expose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tracking {
    pub input: bool,
    pub params: bool,
}

impl Tracking {
    pub const ALL: Tracking = Tracking {
        input: true,
        params: true,
    };
    pub const INPUT: Tracking = Tracking {
        input: true,
        params: false,
    };
    pub const PARAMS: Tracking = Tracking {
        input: false,
        params: true,
    };
}

/// A recorded forward pass; `params` are in [`Model::params`] order.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub params: Vec<Var>,
    pub logits: Var,
}

/// An ordered stack of layers mapping `N×input_shape` batches to class logits.
#[derive(Debug)]
pub struct Model {
    arch_id: String,
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    params: Vec<Param>,
    num_classes: usize,
    usage: Usage,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            arch_id: self.arch_id.clone(),
            input_shape: self.input_shape.clone(),
            specs: self.specs.clone(),
            params: self.params.clone(),
            num_classes: self.num_classes,
            usage: Usage::default(),
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch_id == other.arch_id
            && self.input_shape == other.input_shape
            && self.specs == other.specs
            && self.params == other.params
    }
}

/// Builds the DTN classifier with seeded uniform fan-in initialization.
pub fn build_dtn(num_classes: usize, seed: u64) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::argument(format!(
            "a classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    Model::from_specs(DTN_ARCH, &DTN_INPUT, dtn_specs(num_classes), seed)
}

impl Model {
    /// Builds a model from a layer stack. Weights are drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases start at zero.
    pub fn from_specs(arch_id: &str, input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        let num_classes = match shape.as_slice() {
            [k] if *k >= 1 => *k,
            _ => {
                return Err(Error::argument(format!(
                    "layer stack must end in a flat class vector, ends in {shape:?}"
                )))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, spec) in param_layer_names(&specs) {
            let (w_shape, b_shape, fan_in) = spec.param_shapes().expect("parameterized layer");
            params.push(Param {
                name: format!("{name}.weight"),
                value: uniform_fan_in(&w_shape, fan_in, &mut rng),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(b_shape),
            });
        }
        Ok(Self {
            arch_id: arch_id.to_string(),
            input_shape: input_shape.to_vec(),
            specs,
            params,
            num_classes,
            usage: Usage::default(),
        })
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces parameter values in place; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::argument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dimension("set_params", p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Name prefix of the final dense layer.
    pub fn head_name(&self) -> Option<String> {
        param_layer_names(&self.specs)
            .into_iter()
            .last()
            .filter(|(_, s)| matches!(s, LayerSpec::Dense { .. }))
            .map(|(n, _)| n)
    }

    /// Content fingerprint: the first 16 hex digits of a SHA-256 over the
    /// architecture, parameter names, shapes and values.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch_id.as_bytes());
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Number of untracked forward evaluations served.
    pub fn forward_queries(&self) -> u64 {
        self.usage.forward.load(Ordering::Relaxed)
    }

    /// Number of forward passes served with the input tracked for gradients.
    pub fn input_gradient_queries(&self) -> u64 {
        self.usage.input_gradient.load(Ordering::Relaxed)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::dimension("forward", batch.shape(), &expected));
        }
        Ok(())
    }

    /// Logits for a batch, nothing tracked.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.usage.forward.fetch_add(1, Ordering::Relaxed);
        let pass = self.record(
            batch,
            Tracking {
                input: false,
                params: false,
            },
        )?;
        Ok(pass.tape.value(pass.logits)?.clone())
    }

    /// Forward pass recorded on a fresh tape with the requested leaves tracked.
    pub fn forward_tracked(&self, batch: &Tensor, tracking: Tracking) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        if tracking.input {
            self.usage.input_gradient.fetch_add(1, Ordering::Relaxed);
        } else {
            self.usage.forward.fetch_add(1, Ordering::Relaxed);
        }
        self.record(batch, tracking)
    }

    fn record(&self, batch: &Tensor, tracking: Tracking) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let input = if tracking.input {
            tape.leaf(batch.clone())
        } else {
            tape.constant(batch.clone())
        };
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if tracking.params {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let mut x = input;
        let mut next = params.iter().copied();
        for spec in &self.specs {
            x = match *spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let (w, b) = (next.next().expect("weight"), next.next().expect("bias"));
                    let y = tape.conv2d(x, w, stride, pad)?;
                    tape.bias_add(y, b)?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (next.next().expect("weight"), next.next().expect("bias"));
                    let y = tape.matmul(x, w)?;
                    tape.bias_add(y, b)?
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::MaxPool => tape.max_pool2d(x)?,
                LayerSpec::Flatten => tape.flatten(x)?,
            };
        }
        Ok(ForwardPass {
            tape,
            input,
            params,
            logits: x,
        })
    }

    /// Logits for an arbitrarily large batch, evaluated in fixed-size chunks.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.check_batch(images)?;
        let n = images.dim(0);
        if n <= EVAL_CHUNK {
            return self.forward(images);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            parts.push(self.forward(&images.slice_outer(start, end)?)?);
            start = end;
        }
        Tensor::concat_outer(&parts)
    }

    /// Predicted class per sample (argmax, lowest index on ties).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(ops::argmax_rows(&self.logits(images)?))
    }

    /// Copy of this model whose final dense layer is re-initialized for
    /// `num_classes` outputs. All other parameters are copied unchanged.
    pub fn reinit_classifier_head(&self, num_classes: usize, seed: u64) -> Result<Model> {
        if num_classes < 2 {
            return Err(Error::argument(format!(
                "a classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let Some(LayerSpec::Dense { in_features, .. }) = self.specs.last().copied() else {
            return Err(Error::argument("model does not end in a dense classification layer"));
        };
        let head = self.head_name().expect("dense head");
        let mut specs = self.specs.clone();
        *specs.last_mut().expect("non-empty") = LayerSpec::Dense {
            in_features,
            out_features: num_classes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight_name = format!("{head}.weight");
        let bias_name = format!("{head}.bias");
        let params = self
            .params
            .iter()
            .map(|p| {
                let value = if p.name == weight_name {
                    uniform_fan_in(&[in_features, num_classes], in_features, &mut rng)
                } else if p.name == bias_name {
                    Tensor::zeros([num_classes])
                } else {
                    p.value.clone()
                };
                Param {
                    name: p.name.clone(),
                    value,
                }
            })
            .collect();
        Ok(Model {
            arch_id: self.arch_id.clone(),
            input_shape: self.input_shape.clone(),
            specs,
            params,
            num_classes,
            usage: Usage::default(),
        })
    }
}

fn param_layer_names(specs: &[LayerSpec]) -> Vec<(String, LayerSpec)> {
    let (mut convs, mut denses) = (0, 0);
    specs
        .iter()
        .filter_map(|s| match s {
            LayerSpec::Conv { .. } => {
                convs += 1;
                Some((format!("conv{convs}"), *s))
            }
            LayerSpec::Dense { .. } => {
                denses += 1;
                Some((format!("fc{denses}"), *s))
            }
            _ => None,
        })
        .collect()
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtn_parameter_count() {
        let m = build_dtn(10, 0).unwrap();
        let expected =
            (3 * 32 * 25 + 32) + (32 * 64 * 25 + 64) + (64 * 128 * 25 + 128) + (2048 * 256 + 256) + (256 * 10 + 10);
        assert_eq!(expected, 785_738);
        assert_eq!(m.param_count(), 785_738);
    }

    #[test]
    fn dtn_needs_two_classes() {
        assert!(matches!(build_dtn(1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_dtn(10, 7).unwrap();
        let b = build_dtn(10, 7).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert!(p.value.bit_eq(&q.value), "{}", p.name);
        }
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), build_dtn(10, 8).unwrap().id());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let m = build_dtn(10, 3).unwrap();
        let w = m.param("conv2.weight").unwrap();
        let bound = (6.0f32 / 800.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(m.param("conv2.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let m = build_dtn(10, 1).unwrap();
        let logits = m.forward(&Tensor::zeros([2, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch() {
        let m = build_dtn(10, 1).unwrap();
        let logits = m.forward(&Tensor::zeros([0, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[0, 10]);
    }

    #[test]
    fn wrong_spatial_shape_is_dimension_error() {
        let m = build_dtn(10, 1).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros([1, 3, 28, 28])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn layer_geometry_must_compose() {
        let specs = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 5,
                out_features: 2,
            },
        ];
        assert!(Model::from_specs("custom", &[2, 1, 1], specs, 0).is_err());
    }

    #[test]
    fn reinit_head_changes_only_head() {
        let src = build_dtn(1000, 1).unwrap();
        let dst = src.reinit_classifier_head(10, 2).unwrap();
        assert_eq!(dst.num_classes(), 10);
        assert_eq!(dst.param("fc2.weight").unwrap().shape(), &[256, 10]);
        for (p, q) in src.params().iter().zip(dst.params()) {
            if !p.name.starts_with("fc2") {
                assert!(p.value.bit_eq(&q.value), "{}", p.name);
            }
        }
    }

    #[test]
    fn usage_counters_track_gradient_queries() {
        let m = build_dtn(10, 1).unwrap();
        let x = Tensor::zeros([1, 3, 32, 32]);
        m.forward(&x).unwrap();
        m.forward_tracked(&x, Tracking::PARAMS).unwrap();
        assert_eq!(m.forward_queries(), 2);
        assert_eq!(m.input_gradient_queries(), 0);
        m.forward_tracked(&x, Tracking::INPUT).unwrap();
        assert_eq!(m.input_gradient_queries(), 1);
    }
}
