//! Network assembly: embedding streams, meta-networks that predict dynamic
//! layer parameters from an exemplar, comparison functions, and the five
//! experimental architectures.
//!
//! The architectures are: `shared` (classic siamese with shared weights),
//! `unshared` (disjoint per-stream weights), `factorized` (unshared streams
//! whose factorized layers carry static learned filters), `siamese-learnet`
//! (a meta-network maps the exemplar to the dynamic layer's filters, used by
//! both streams), and `single-stream-learnet` (one stream; the comparison
//! weights are predicted too, so the exemplar enters only through the
//! meta-network).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Val};
use crate::layers::{
    count_predicted, factorized_conv_forward, factorized_fc_forward, fc_forward,
    layer_output_shape, LayerSpec, BN_EPS,
};
use crate::scalar::Scalar;
use crate::tensor::{stack, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Siamese streams with shared parameters.
    Shared,
    /// Siamese streams with disjoint parameters.
    Unshared,
    /// Unshared streams whose factorized layers hold static learned filters.
    Factorized,
    /// Shared streams whose dynamic layer is predicted from the exemplar.
    SiameseLearnet,
    /// One stream; dynamic layer and comparison weights both predicted.
    SingleStreamLearnet,
}

impl Arch {
    pub fn has_learnet(self) -> bool {
        matches!(self, Arch::SiameseLearnet | Arch::SingleStreamLearnet)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparisonKind {
    /// Inner product; higher means more similar.
    Dot,
    /// Negated euclidean distance.
    Euclidean,
    /// Negated weighted l1 distance `-||w.a - w.b||_1`.
    WeightedL1,
}

/// Declarative description of one experiment's networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub comparison: ComparisonKind,
    /// Exemplar input shape `[h, w, c]`.
    pub input: [usize; 3],
    pub stream: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learnet: Option<Vec<LayerSpec>>,
    /// Index into `stream` of the layer whose filters the meta-network
    /// predicts; required exactly when a meta-network is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic_layer: Option<usize>,
}

/// Shape bookkeeping produced by [`NetworkSpec::validate`].
#[derive(Clone, Debug)]
pub struct Plan {
    /// Input shape followed by the shape after each stream layer.
    pub stream_shapes: Vec<Vec<usize>>,
    pub embedding_shape: Vec<usize>,
    pub embedding_len: usize,
    pub learnet_shapes: Option<Vec<Vec<usize>>>,
    /// Flattened meta-network output length (0 without a meta-network).
    pub head_len: usize,
    /// Elements of the head consumed by the dynamic layer.
    pub filter_len: usize,
    /// Elements of the head consumed by predicted comparison weights.
    pub gamma_tail_len: usize,
    pub dynamic: Option<DynamicLayout>,
}

#[derive(Clone, Debug)]
pub struct DynamicLayout {
    pub index: usize,
    /// Shape of the predicted filter block: `[f, f, r]` or `[d]`.
    pub w_shape: Vec<usize>,
    /// Present when the dynamic layer's bias is predicted too.
    pub bias_len: Option<usize>,
}

impl NetworkSpec {
    /// Chain-check every dimension before any work starts.
    pub fn validate(&self) -> Result<Plan> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input dims must be positive: {:?}", self.input)));
        }
        if self.stream.is_empty() {
            return Err(Error::Config("stream has no layers".into()));
        }
        let stream_shapes = chain_shapes("stream", &self.stream, &self.input)?;
        let embedding_shape = stream_shapes.last().unwrap().clone();
        let embedding_len = embedding_shape.iter().product();

        if self.arch.has_learnet() != self.learnet.is_some() {
            return Err(Error::Config(format!(
                "architecture {:?} {} a learnet section",
                self.arch,
                if self.arch.has_learnet() { "requires" } else { "does not take" }
            )));
        }
        if self.arch.has_learnet() != self.dynamic_layer.is_some() {
            return Err(Error::Config(format!(
                "architecture {:?} {} a dynamic_layer index",
                self.arch,
                if self.arch.has_learnet() { "requires" } else { "does not take" }
            )));
        }
        if self.arch == Arch::Factorized && !self.stream.iter().any(|l| l.is_factorized()) {
            return Err(Error::Config(
                "factorized architecture needs at least one factorized layer in the stream".into(),
            ));
        }

        let mut dynamic = None;
        let mut filter_len = 0;
        if let Some(idx) = self.dynamic_layer {
            let layer = self.stream.get(idx).ok_or_else(|| {
                Error::Config(format!(
                    "dynamic_layer {idx} out of range for a {}-layer stream",
                    self.stream.len()
                ))
            })?;
            let in_shape = &stream_shapes[idx];
            let (w_shape, bias_len) = match layer {
                LayerSpec::FactorizedConv(c) => (
                    vec![c.f, c.f, c.r()],
                    c.predicted_bias.then_some(c.out),
                ),
                LayerSpec::FactorizedFc(fc) => {
                    let d: usize = in_shape.iter().product();
                    (vec![d], fc.predicted_bias.then_some(fc.out))
                }
                other => {
                    return Err(Error::Config(format!(
                        "dynamic_layer {idx} must be a factorized layer, found {other:?}"
                    )))
                }
            };
            let in_features: usize = match layer {
                LayerSpec::FactorizedConv(_) => *in_shape.last().unwrap(),
                _ => in_shape.iter().product(),
            };
            filter_len = count_predicted(layer, in_features);
            dynamic = Some(DynamicLayout { index: idx, w_shape, bias_len });
        }

        let gamma_tail_len = if self.arch == Arch::SingleStreamLearnet {
            embedding_len
        } else {
            0
        };

        let mut learnet_shapes = None;
        let mut head_len = 0;
        if let Some(layers) = &self.learnet {
            if layers.is_empty() {
                return Err(Error::Config("learnet has no layers".into()));
            }
            let shapes = chain_shapes("learnet", layers, &self.input)?;
            head_len = shapes.last().unwrap().iter().product();
            let required = filter_len + gamma_tail_len;
            if head_len != required {
                return Err(Error::Config(format!(
                    "learnet head produces {head_len} values but the dynamic layer needs {required} \
                     ({filter_len} filter values plus {gamma_tail_len} comparison weights)"
                )));
            }
            learnet_shapes = Some(shapes);
        }

        Ok(Plan {
            stream_shapes,
            embedding_shape,
            embedding_len,
            learnet_shapes,
            head_len,
            filter_len,
            gamma_tail_len,
            dynamic,
        })
    }

    /// Shape of the stream output for an arbitrary input (used for search
    /// images larger than the exemplar).
    pub fn stream_output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(chain_shapes("stream", &self.stream, input)?.last().unwrap().clone())
    }

    /// Score-map dimensions when the comparison runs convolutionally over a
    /// `[h, w, c]` search input.
    pub fn map_dims(&self, search_input: &[usize]) -> Result<(usize, usize)> {
        let plan = self.validate()?;
        let emb = self.stream_output_shape(search_input)?;
        let (zh, zw) = (plan.embedding_shape[0], plan.embedding_shape[1]);
        match emb.as_slice() {
            [h, w, c] => {
                if plan.embedding_shape.len() != 3 || *c != plan.embedding_shape[2] {
                    return Err(Error::Shape("embeddings must be spatial for a convolutional comparison".into()));
                }
                if *h < zh || *w < zw {
                    return Err(Error::Shape(format!(
                        "search embedding {h}x{w} smaller than exemplar embedding {zh}x{zw}"
                    )));
                }
                Ok((h - zh + 1, w - zw + 1))
            }
            s => Err(Error::Shape(format!("search embedding must be [h, w, c], got {s:?}"))),
        }
    }
}

/// Cumulative spatial stride of the stream (each 2x2 pooling doubles it);
/// a peak in the embedding moves by this many input pixels per cell.
pub fn stream_stride(spec: &NetworkSpec) -> usize {
    1 << spec.stream.iter().filter(|l| matches!(l, LayerSpec::Maxpool)).count()
}

fn chain_shapes(scope: &str, layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let next = layer_output_shape(layer, shapes.last().unwrap()).map_err(|e| {
            Error::Config(format!("{scope} layer {i}: {e}"))
        })?;
        shapes.push(next);
    }
    Ok(shapes)
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Named collection of model tensors (weights, biases, comparison weights,
/// and batch-norm state). Names are unique; iteration order is sorted.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: String, t: Tensor<F>) {
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not resolved"))
    }

    pub fn set(&mut self, name: &str, t: Tensor<F>) {
        let slot = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name} is not resolved"));
        assert_eq!(slot.shape(), t.shape(), "parameter {name} shape changed");
        *slot = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Running batch-norm statistics are state, not trainable parameters.
    pub fn is_trainable(name: &str) -> bool {
        !name.contains(".running_")
    }

    /// Batch-norm scale/shift are excluded from weight decay.
    pub fn is_decayed(name: &str) -> bool {
        Self::is_trainable(name) && !name.ends_with(".gamma") && !name.ends_with(".beta")
    }
}

/// How a parameter should be initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamKind {
    /// Gaussian weight with the given fan-in.
    Weight { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

fn stream_scopes(arch: Arch) -> (&'static str, &'static str) {
    match arch {
        Arch::Shared | Arch::SiameseLearnet | Arch::SingleStreamLearnet => ("stream", "stream"),
        Arch::Unshared | Arch::Factorized => ("stream", "stream_z"),
    }
}

/// Every parameter slot the spec requires, with shapes and init kinds.
pub fn param_defs(spec: &NetworkSpec) -> Result<Vec<ParamDef>> {
    let plan = spec.validate()?;
    let mut defs = Vec::new();

    let mut add_scope = |scope: &str, layers: &[LayerSpec], shapes: &[Vec<usize>], dynamic: Option<&DynamicLayout>| {
        for (i, layer) in layers.iter().enumerate() {
            let name = |leaf: &str| format!("{scope}.l{i}.{leaf}");
            let in_shape = &shapes[i];
            let is_dynamic = dynamic.is_some_and(|d| d.index == i);
            match layer {
                LayerSpec::Conv(c) => {
                    let q = *in_shape.last().unwrap();
                    defs.push(ParamDef {
                        name: name("filters"),
                        shape: vec![c.f, c.f, q, c.out],
                        kind: ParamKind::Weight { fan_in: c.f * c.f * q },
                    });
                    defs.push(ParamDef { name: name("bias"), shape: vec![c.out], kind: ParamKind::Zeros });
                }
                LayerSpec::Fc(fc) => {
                    let d: usize = in_shape.iter().product();
                    defs.push(ParamDef {
                        name: name("weight"),
                        shape: vec![fc.out, d],
                        kind: ParamKind::Weight { fan_in: d },
                    });
                    defs.push(ParamDef { name: name("bias"), shape: vec![fc.out], kind: ParamKind::Zeros });
                }
                LayerSpec::FactorizedConv(c) => {
                    let q = *in_shape.last().unwrap();
                    let r = c.r();
                    defs.push(ParamDef {
                        name: name("m"),
                        shape: vec![1, 1, q, r],
                        kind: ParamKind::Weight { fan_in: q },
                    });
                    defs.push(ParamDef {
                        name: name("mprime"),
                        shape: vec![1, 1, r, c.out],
                        kind: ParamKind::Weight { fan_in: r },
                    });
                    if !is_dynamic {
                        defs.push(ParamDef {
                            name: name("w"),
                            shape: vec![c.f, c.f, r],
                            kind: ParamKind::Weight { fan_in: c.f * c.f },
                        });
                    }
                    if !(is_dynamic && c.predicted_bias) {
                        defs.push(ParamDef { name: name("bias"), shape: vec![c.out], kind: ParamKind::Zeros });
                    }
                }
                LayerSpec::FactorizedFc(fc) => {
                    let d: usize = in_shape.iter().product();
                    defs.push(ParamDef {
                        name: name("m"),
                        shape: vec![d, d],
                        kind: ParamKind::Weight { fan_in: d },
                    });
                    defs.push(ParamDef {
                        name: name("mprime"),
                        shape: vec![fc.out, d],
                        kind: ParamKind::Weight { fan_in: d },
                    });
                    if !is_dynamic {
                        defs.push(ParamDef { name: name("w"), shape: vec![d], kind: ParamKind::Ones });
                    }
                    if !(is_dynamic && fc.predicted_bias) {
                        defs.push(ParamDef { name: name("bias"), shape: vec![fc.out], kind: ParamKind::Zeros });
                    }
                }
                LayerSpec::Batchnorm => {
                    let c = *in_shape.last().unwrap();
                    defs.push(ParamDef { name: name("gamma"), shape: vec![c], kind: ParamKind::Ones });
                    defs.push(ParamDef { name: name("beta"), shape: vec![c], kind: ParamKind::Zeros });
                    defs.push(ParamDef { name: name("running_mean"), shape: vec![c], kind: ParamKind::Zeros });
                    defs.push(ParamDef { name: name("running_var"), shape: vec![c], kind: ParamKind::Ones });
                }
                LayerSpec::Maxpool | LayerSpec::Relu => {}
            }
        }
    };

    let (sx, sz) = stream_scopes(spec.arch);
    add_scope(sx, &spec.stream, &plan.stream_shapes, plan.dynamic.as_ref());
    if sz != sx {
        add_scope(sz, &spec.stream, &plan.stream_shapes, plan.dynamic.as_ref());
    }
    if let (Some(layers), Some(shapes)) = (&spec.learnet, &plan.learnet_shapes) {
        add_scope("learnet", layers, shapes, None);
    }
    if spec.comparison == ComparisonKind::WeightedL1 && spec.arch != Arch::SingleStreamLearnet {
        defs.push(ParamDef {
            name: "comparison.weights".into(),
            shape: vec![plan.embedding_len],
            kind: ParamKind::Ones,
        });
    }
    Ok(defs)
}

// ── Forward evaluation ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Predicted quantities for the dynamic layer (and comparison tail), as
/// tape nodes during a forward pass.
#[derive(Clone, Copy)]
struct DynBind {
    w: Val,
    bias: Option<Val>,
}

/// One forward construction over a fresh tape. Parameters are bound as tape
/// leaves on first use so shared streams share nodes (and gradients).
pub struct Forward<'p, F: Scalar> {
    pub tape: Tape<F>,
    spec: &'p NetworkSpec,
    plan: &'p Plan,
    params: &'p ParamSet<F>,
    mode: Mode,
    with_grad: bool,
    bound: BTreeMap<String, Val>,
    /// Updated batch-norm running statistics gathered during train-mode
    /// forwards: `(param name, new value)` in encounter order.
    pub bn_updates: Vec<(String, Tensor<F>)>,
}

impl<'p, F: Scalar> Forward<'p, F> {
    pub fn new(spec: &'p NetworkSpec, plan: &'p Plan, params: &'p ParamSet<F>, mode: Mode, with_grad: bool) -> Self {
        Forward {
            tape: Tape::new(),
            spec,
            plan,
            params,
            mode,
            with_grad,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Leafed parameters in name order, for gradient collection.
    pub fn param_leaves(&self) -> impl Iterator<Item = (&String, Val)> {
        self.bound.iter().map(|(n, v)| (n, *v))
    }

    fn param(&mut self, name: &str) -> Val {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let t = self.params.expect(name).clone();
        let rg = self.with_grad && ParamSet::<F>::is_trainable(name);
        let v = self.tape.leaf(t, rg);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor<F>) -> Val {
        self.tape.constant(t)
    }

    fn flatten(&mut self, x: Val) -> Val {
        let shape = self.tape.value(x).shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.tape.reshape(x, vec![n, rest])
    }

    /// Run a batched `[n, ...]` activation through a layer stack under the
    /// given parameter scope. `dyn_bind` supplies the dynamic layer's
    /// predictions when `scope` is a stream of a learnet architecture.
    fn run_layers(
        &mut self,
        scope: &str,
        layers: &[LayerSpec],
        dynamic_index: Option<usize>,
        dyn_bind: Option<DynBind>,
        mut x: Val,
    ) -> Val {
        let eps = F::from_f64(BN_EPS);
        for (i, layer) in layers.iter().enumerate() {
            let name = |leaf: &str| format!("{scope}.l{i}.{leaf}");
            let is_dynamic = dynamic_index == Some(i);
            match layer {
                LayerSpec::Conv(_) => {
                    let k = self.param(&name("filters"));
                    let b = self.param(&name("bias"));
                    x = self.tape.conv2d(x, k, Some(b));
                }
                LayerSpec::Fc(_) => {
                    x = self.flatten(x);
                    let w = self.param(&name("weight"));
                    let b = self.param(&name("bias"));
                    x = fc_forward(&mut self.tape, w, b, x);
                }
                LayerSpec::FactorizedConv(c) => {
                    let m = self.param(&name("m"));
                    let mp = self.param(&name("mprime"));
                    let (w, bias) = if is_dynamic {
                        let bind = dyn_bind.expect("dynamic layer reached without predictions");
                        let bias = match bind.bias {
                            Some(b) => Some(b),
                            None if c.predicted_bias => None,
                            None => Some(self.param(&name("bias"))),
                        };
                        (bind.w, bias)
                    } else {
                        (self.param(&name("w")), Some(self.param(&name("bias"))))
                    };
                    x = factorized_conv_forward(&mut self.tape, m, mp, w, bias, x);
                }
                LayerSpec::FactorizedFc(fc) => {
                    x = self.flatten(x);
                    let m = self.param(&name("m"));
                    let mp = self.param(&name("mprime"));
                    let (w, bias) = if is_dynamic {
                        let bind = dyn_bind.expect("dynamic layer reached without predictions");
                        let bias = match bind.bias {
                            Some(b) => Some(b),
                            None if fc.predicted_bias => None,
                            None => Some(self.param(&name("bias"))),
                        };
                        (bind.w, bias)
                    } else {
                        (self.param(&name("w")), Some(self.param(&name("bias"))))
                    };
                    x = factorized_fc_forward(&mut self.tape, m, mp, w, bias, x);
                }
                LayerSpec::Maxpool => x = self.tape.maxpool2(x),
                LayerSpec::Relu => x = self.tape.relu(x),
                LayerSpec::Batchnorm => {
                    let g = self.param(&name("gamma"));
                    let b = self.param(&name("beta"));
                    match self.mode {
                        Mode::Train => {
                            let (y, stats) = self.tape.batchnorm_train(x, g, b, eps);
                            let decay = F::from_f64(crate::layers::BN_DECAY);
                            let one_minus = F::one() - decay;
                            let old_mean = self.params.expect(&name("running_mean"));
                            let old_var = self.params.expect(&name("running_var"));
                            let new_mean = crate::tensor::add(
                                &crate::tensor::scale(old_mean, decay),
                                &crate::tensor::scale(&stats.mean, one_minus),
                            );
                            let new_var = crate::tensor::add(
                                &crate::tensor::scale(old_var, decay),
                                &crate::tensor::scale(&stats.var, one_minus),
                            );
                            self.bn_updates.push((name("running_mean"), new_mean));
                            self.bn_updates.push((name("running_var"), new_var));
                            x = y;
                        }
                        Mode::Eval => {
                            let mean = self.params.expect(&name("running_mean")).clone();
                            let var = self.params.expect(&name("running_var")).clone();
                            x = self.tape.batchnorm_eval(x, g, b, mean, var, eps);
                        }
                    }
                }
            }
        }
        x
    }

    /// Embed a batch through the stream that processes candidates.
    fn embed_x(&mut self, x: Val, bind: Option<DynBind>) -> Val {
        let (sx, _) = stream_scopes(self.spec.arch);
        self.run_layers(sx, &self.spec.stream.clone(), self.spec.dynamic_layer, bind, x)
    }

    /// Embed a batch through the stream that processes exemplars.
    fn embed_z(&mut self, z: Val, bind: Option<DynBind>) -> Val {
        let (_, sz) = stream_scopes(self.spec.arch);
        self.run_layers(sz, &self.spec.stream.clone(), self.spec.dynamic_layer, bind, z)
    }

    /// Run the meta-network on a batch of exemplars and split its head into
    /// the dynamic layer's predictions (per sample) and the comparison tail.
    fn predict(&mut self, z: Val) -> (DynBind, Option<Val>) {
        let layers = self.spec.learnet.clone().expect("architecture has no learnet");
        let h = self.run_layers("learnet", &layers, None, None, z);
        let flat = self.flatten(h);
        let n = self.tape.value(flat).shape()[0];
        let layout = self.plan.dynamic.as_ref().expect("no dynamic layer");

        let w_len: usize = layout.w_shape.iter().product();
        let w = self.tape.slice_last(flat, 0, w_len);
        let mut w_shape = vec![n];
        w_shape.extend_from_slice(&layout.w_shape);
        let w = self.tape.reshape(w, w_shape);
        let mut offset = w_len;

        let bias = layout.bias_len.map(|p| {
            let b = self.tape.slice_last(flat, offset, p);
            offset += p;
            b
        });

        let gamma = (self.plan.gamma_tail_len > 0).then(|| {
            self.tape.slice_last(flat, offset, self.plan.gamma_tail_len)
        });

        (DynBind { w, bias }, gamma)
    }

    /// Similarity scores for matched `[n, L]` embeddings (two-stream form).
    fn compare(&mut self, a: Val, b: Val) -> Val {
        match self.spec.comparison {
            ComparisonKind::Dot => {
                let prod = self.tape.mul(a, b);
                self.tape.sum_per_sample(prod)
            }
            ComparisonKind::Euclidean => {
                let d = self.tape.sub(a, b);
                let sq = self.tape.mul(d, d);
                let ssq = self.tape.sum_per_sample(sq);
                let norm = self.tape.sqrt(ssq);
                self.tape.neg(norm)
            }
            ComparisonKind::WeightedL1 => {
                let w = self.param("comparison.weights");
                let wa = self.tape.mul_last(a, w);
                let wb = self.tape.mul_last(b, w);
                let d = self.tape.sub(wa, wb);
                let ad = self.tape.abs(d);
                let s = self.tape.sum_per_sample(ad);
                self.tape.neg(s)
            }
        }
    }

    /// Single-stream scores: the comparison reinterpreted as a last layer
    /// with predicted weights `v` (`[n, L]` or a shared `[L]` vector).
    fn compare_single(&mut self, v: Val, a: Val) -> Val {
        let shared = self.tape.value(v).rank() + 1 == self.tape.value(a).rank();
        match self.spec.comparison {
            ComparisonKind::Dot => {
                let prod = if shared { self.tape.mul_last(a, v) } else { self.tape.mul(a, v) };
                self.tape.sum_per_sample(prod)
            }
            ComparisonKind::Euclidean => {
                let d = if shared {
                    let nv = self.tape.neg(v);
                    self.tape.add_last(a, nv)
                } else {
                    self.tape.sub(a, v)
                };
                let sq = self.tape.mul(d, d);
                let ssq = self.tape.sum_per_sample(sq);
                let norm = self.tape.sqrt(ssq);
                self.tape.neg(norm)
            }
            ComparisonKind::WeightedL1 => {
                let prod = if shared { self.tape.mul_last(a, v) } else { self.tape.mul(a, v) };
                let ad = self.tape.abs(prod);
                let s = self.tape.sum_per_sample(ad);
                self.tape.neg(s)
            }
        }
    }

    /// Scalar similarity scores `[n]` for batched exemplars and candidates.
    pub fn scores(&mut self, z: Val, x: Val) -> Val {
        match self.spec.arch {
            Arch::Shared | Arch::Unshared | Arch::Factorized => {
                let ex = self.embed_x(x, None);
                let ez = self.embed_z(z, None);
                let ex = self.flatten(ex);
                let ez = self.flatten(ez);
                self.compare(ex, ez)
            }
            Arch::SiameseLearnet => {
                let (bind, _) = self.predict(z);
                let ex = self.embed_x(x, Some(bind));
                let ez = self.embed_z(z, Some(bind));
                let ex = self.flatten(ex);
                let ez = self.flatten(ez);
                self.compare(ex, ez)
            }
            Arch::SingleStreamLearnet => {
                let (bind, gamma) = self.predict(z);
                let v = gamma.expect("single-stream architecture must predict comparison weights");
                let ex = self.embed_x(x, Some(bind));
                let ex = self.flatten(ex);
                self.compare_single(v, ex)
            }
        }
    }

    /// Spatial score maps `[n, mh, mw, 1]`: the exemplar embedding is
    /// cross-correlated over the search embedding (dot comparison only).
    pub fn score_maps(&mut self, z: Val, x_search: Val) -> Val {
        assert_eq!(
            self.spec.comparison,
            ComparisonKind::Dot,
            "convolutional comparison supports only the dot product"
        );
        let (kernel_src, bind) = match self.spec.arch {
            Arch::Shared | Arch::Unshared | Arch::Factorized => {
                let ez = self.embed_z(z, None);
                (ez, None)
            }
            Arch::SiameseLearnet => {
                let (bind, _) = self.predict(z);
                let ez = self.embed_z(z, Some(bind));
                (ez, Some(bind))
            }
            Arch::SingleStreamLearnet => {
                let (bind, gamma) = self.predict(z);
                let v = gamma.expect("single-stream architecture must predict comparison weights");
                let n = self.tape.value(v).shape()[0];
                let kshape = {
                    let mut s = vec![n];
                    s.extend_from_slice(&self.plan.embedding_shape);
                    s
                };
                let ez = self.tape.reshape(v, kshape);
                (ez, Some(bind))
            }
        };
        let ex = self.embed_x(x_search, bind);
        let n = self.tape.value(kernel_src).shape()[0];
        let mut kshape = self.tape.value(kernel_src).shape().to_vec();
        kshape.push(1);
        let kernel = self.tape.reshape(kernel_src, kshape);
        let maps = self.tape.conv2d(ex, kernel, None);
        let _ = n;
        maps
    }
}

// ── Exemplar binding and evaluation-time scoring ────────────────────────

/// Everything a single exemplar induces: the predicted dynamic-layer
/// filters, optional predicted bias and comparison weights, and (for
/// comparison architectures) the exemplar's own embedding.
#[derive(Clone, Debug)]
pub struct Binding<F> {
    pub w_pred: Option<Tensor<F>>,
    pub b_pred: Option<Tensor<F>>,
    pub gamma_v: Option<Tensor<F>>,
    pub z_embedding: Option<Tensor<F>>,
}

fn squeeze_batch<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    assert_eq!(t.shape()[0], 1, "expected a single-sample batch");
    t.reshape(t.shape()[1..].to_vec())
}

/// Evaluate the meta-network (if any) and the exemplar's embedding once.
/// The binding then scores any number of candidates.
pub fn bind_exemplar<F: Scalar>(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &ParamSet<F>,
    z: &Tensor<F>,
) -> Binding<F> {
    let mut fwd = Forward::new(spec, plan, params, Mode::Eval, false);
    let z4 = fwd.input(stack(&[z]));
    let (bind, gamma_v) = if spec.arch.has_learnet() {
        let (bind, gamma) = fwd.predict(z4);
        (Some(bind), gamma)
    } else {
        (None, None)
    };

    let mut out = Binding {
        w_pred: None,
        b_pred: None,
        gamma_v: gamma_v.map(|g| squeeze_batch(fwd.tape.value(g))),
        z_embedding: None,
    };
    if let Some(b) = bind {
        out.w_pred = Some(squeeze_batch(fwd.tape.value(b.w)));
        out.b_pred = b.bias.map(|bb| squeeze_batch(fwd.tape.value(bb)));
    }
    if spec.arch != Arch::SingleStreamLearnet {
        let ez = fwd.embed_z(z4, bind);
        out.z_embedding = Some(squeeze_batch(fwd.tape.value(ez)));
    }
    out
}

fn binding_to_dyn<F: Scalar>(fwd: &mut Forward<F>, binding: &Binding<F>) -> Option<DynBind> {
    binding.w_pred.as_ref().map(|w| DynBind {
        w: fwd.input(w.clone()),
        bias: binding.b_pred.as_ref().map(|b| {
            let t = b.clone();
            let len = t.numel();
            fwd.input(t.reshape(vec![len]))
        }),
    })
}

/// Score a batch of candidates against a bound exemplar; all candidates are
/// evaluated by the induced static pupil network.
pub fn score_candidates<F: Scalar>(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &ParamSet<F>,
    binding: &Binding<F>,
    candidates: &[&Tensor<F>],
) -> Vec<F> {
    let mut fwd = Forward::new(spec, plan, params, Mode::Eval, false);
    let xs = fwd.input(stack(candidates));
    let bind = binding_to_dyn(&mut fwd, binding);
    let ex = fwd.embed_x(xs, bind);
    let ex = fwd.flatten(ex);
    let n = candidates.len();

    let scores = match spec.arch {
        Arch::SingleStreamLearnet => {
            let v = binding.gamma_v.as_ref().expect("binding lacks comparison weights");
            let vv = fwd.input(v.clone());
            fwd.compare_single(vv, ex)
        }
        _ => {
            let ez = binding.z_embedding.as_ref().expect("binding lacks an exemplar embedding");
            let flat = ez.reshape(vec![ez.numel()]);
            let tiled = fwd.input(tile(&flat, n));
            fwd.compare(ex, tiled)
        }
    };
    fwd.tape.value(scores).data().to_vec()
}

fn tile<F: Scalar>(row: &Tensor<F>, n: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(n * row.numel());
    for _ in 0..n {
        data.extend_from_slice(row.data());
    }
    Tensor::new(vec![n, row.numel()], data)
}

/// Score map of a bound exemplar over one search image (dot comparison):
/// returns `[mh, mw]`.
pub fn score_map<F: Scalar>(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &ParamSet<F>,
    binding: &Binding<F>,
    search: &Tensor<F>,
) -> Tensor<F> {
    assert_eq!(
        spec.comparison,
        ComparisonKind::Dot,
        "convolutional comparison supports only the dot product"
    );
    let mut fwd = Forward::new(spec, plan, params, Mode::Eval, false);
    let xs = fwd.input(stack(&[search]));
    let bind = binding_to_dyn(&mut fwd, binding);
    let ex = fwd.embed_x(xs, bind);

    let kernel_t = match spec.arch {
        Arch::SingleStreamLearnet => {
            let v = binding.gamma_v.as_ref().expect("binding lacks comparison weights");
            v.reshape(plan.embedding_shape.clone())
        }
        _ => binding.z_embedding.as_ref().expect("binding lacks an exemplar embedding").clone(),
    };
    let mut kshape = kernel_t.shape().to_vec();
    kshape.push(1);
    let kernel = fwd.input(kernel_t.reshape(kshape));
    let maps = fwd.tape.conv2d(ex, kernel, None);
    let v = fwd.tape.value(maps);
    let (mh, mw) = (v.shape()[1], v.shape()[2]);
    v.reshape(vec![1, mh, mw, 1]).reshape(vec![mh, mw])
}

/// Convenience single-pair score (evaluation mode, re-runs the meta-network).
pub fn forward_pair<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>, z: &Tensor<F>, x: &Tensor<F>) -> F {
    let plan = spec.validate().expect("invalid network spec");
    let binding = bind_exemplar(spec, &plan, params, z);
    score_candidates(spec, &plan, params, &binding, &[x])[0]
}

/// Siamese forward (shared, unshared, or factorized architectures).
pub fn forward_siamese<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>, z: &Tensor<F>, x: &Tensor<F>) -> F {
    assert!(
        matches!(spec.arch, Arch::Shared | Arch::Unshared | Arch::Factorized),
        "forward_siamese requires a siamese architecture"
    );
    forward_pair(spec, params, z, x)
}

/// Siamese forward where both streams use exemplar-predicted parameters.
pub fn forward_siamese_learnet<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>, z: &Tensor<F>, x: &Tensor<F>) -> F {
    assert_eq!(spec.arch, Arch::SiameseLearnet, "forward_siamese_learnet requires arch siamese-learnet");
    forward_pair(spec, params, z, x)
}

/// Single-stream forward; the exemplar enters only through the meta-network.
pub fn forward_single_stream<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>, z: &Tensor<F>, x: &Tensor<F>) -> F {
    assert_eq!(spec.arch, Arch::SingleStreamLearnet, "forward_single_stream requires arch single-stream-learnet");
    forward_pair(spec, params, z, x)
}

/// Convolutional comparison over a search image larger than the exemplar:
/// one dot-product score per aligned window, as an `[mh, mw]` map.
pub fn forward_conv_gamma<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    z: &Tensor<F>,
    x_search: &Tensor<F>,
) -> Tensor<F> {
    let plan = spec.validate().expect("invalid network spec");
    let binding = bind_exemplar(spec, &plan, params, z);
    score_map(spec, &plan, params, &binding, x_search)
}

// ── Reference configurations ────────────────────────────────────────────

/// The character-recognition reference network: three convolutions with
/// 2x2/stride-2 pooling between them (filter banks 5x5x1x16, 5x5x16x64 and
/// 4x4x64x512 on 28x28 inputs), the second convolution dynamic with 64
/// predicted 5x5 filters, and a meta-network with the same layers whose
/// head emits the 1600 filter values.
pub fn default_ocr_spec() -> NetworkSpec {
    use crate::layers::{ConvSpec, FactorizedConvSpec};
    NetworkSpec {
        arch: Arch::SiameseLearnet,
        comparison: ComparisonKind::WeightedL1,
        input: [28, 28, 1],
        stream: vec![
            LayerSpec::Conv(ConvSpec { f: 5, out: 16 }),
            LayerSpec::Maxpool,
            LayerSpec::FactorizedConv(FactorizedConvSpec {
                f: 5,
                out: 64,
                r: Some(64),
                predicted_bias: false,
            }),
            LayerSpec::Maxpool,
            LayerSpec::Conv(ConvSpec { f: 4, out: 512 }),
        ],
        learnet: Some(vec![
            LayerSpec::Conv(ConvSpec { f: 5, out: 16 }),
            LayerSpec::Maxpool,
            LayerSpec::Conv(ConvSpec { f: 5, out: 64 }),
            LayerSpec::Maxpool,
            LayerSpec::Conv(ConvSpec { f: 4, out: 1600 }),
        ]),
        dynamic_layer: Some(2),
    }
}

/// A compact character-recognition network that trains in minutes on a CPU;
/// same topology family as [`default_ocr_spec`] with smaller channel counts
/// and batch normalization after each convolution (it keeps the embedding
/// scale stable, which the weighted-l1 comparison needs to avoid collapsing
/// its weights early in training).
pub fn compact_ocr_spec(arch: Arch, comparison: ComparisonKind) -> NetworkSpec {
    use crate::layers::{ConvSpec, FactorizedConvSpec};
    let dynamic = arch.has_learnet();
    let stream = vec![
        LayerSpec::Conv(ConvSpec { f: 5, out: 6 }),
        LayerSpec::Batchnorm,
        LayerSpec::Relu,
        LayerSpec::Maxpool,
        LayerSpec::FactorizedConv(FactorizedConvSpec {
            f: 5,
            out: 12,
            r: Some(12),
            predicted_bias: false,
        }),
        LayerSpec::Batchnorm,
        LayerSpec::Relu,
        LayerSpec::Maxpool,
        LayerSpec::Conv(ConvSpec { f: 4, out: 32 }),
        LayerSpec::Batchnorm,
    ];
    let head = 5 * 5 * 12 + if arch == Arch::SingleStreamLearnet { 32 } else { 0 };
    NetworkSpec {
        arch,
        comparison,
        input: [28, 28, 1],
        stream,
        learnet: dynamic.then(|| {
            vec![
                LayerSpec::Conv(ConvSpec { f: 5, out: 6 }),
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::Conv(ConvSpec { f: 5, out: 12 }),
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::Conv(ConvSpec { f: 4, out: head }),
            ]
        }),
        dynamic_layer: dynamic.then_some(4),
    }
}

/// A compact tracking network for 32x32 exemplars and 64x64 search crops;
/// batch normalization after each convolution, dot-product comparison so the
/// comparison can run convolutionally.
pub fn compact_tracking_spec(arch: Arch) -> NetworkSpec {
    use crate::layers::{ConvSpec, FactorizedConvSpec, FcSpec};
    let dynamic = arch.has_learnet();
    NetworkSpec {
        arch,
        comparison: ComparisonKind::Dot,
        input: [32, 32, 1],
        stream: vec![
            LayerSpec::Conv(ConvSpec { f: 5, out: 4 }),
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Maxpool,
            LayerSpec::FactorizedConv(FactorizedConvSpec {
                f: 5,
                out: 8,
                r: Some(8),
                predicted_bias: false,
            }),
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Maxpool,
        ],
        learnet: dynamic.then(|| {
            vec![
                LayerSpec::Conv(ConvSpec { f: 5, out: 4 }),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::Conv(ConvSpec { f: 5, out: 8 }),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::Fc(FcSpec { out: 5 * 5 * 8 }),
            ]
        }),
        dynamic_layer: dynamic.then_some(4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{init_params, InitScheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(arch: Arch, comparison: ComparisonKind) -> NetworkSpec {
        use crate::layers::{ConvSpec, FactorizedConvSpec};
        let dynamic = arch.has_learnet();
        let head = 3 * 3 * 2 + if arch == Arch::SingleStreamLearnet { 2 * 2 * 2 } else { 0 };
        NetworkSpec {
            arch,
            comparison,
            input: [8, 8, 1],
            stream: vec![
                LayerSpec::Conv(ConvSpec { f: 3, out: 2 }),
                LayerSpec::Relu,
                LayerSpec::FactorizedConv(FactorizedConvSpec {
                    f: 3,
                    out: 2,
                    r: Some(2),
                    predicted_bias: false,
                }),
                LayerSpec::Maxpool,
            ],
            learnet: dynamic.then(|| {
                vec![
                    LayerSpec::Conv(ConvSpec { f: 5, out: 2 }),
                    LayerSpec::Relu,
                    LayerSpec::Maxpool,
                    LayerSpec::Fc(crate::layers::FcSpec { out: head }),
                ]
            }),
            dynamic_layer: dynamic.then_some(2),
        }
    }

    fn rng_image(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    fn params_for(spec: &NetworkSpec, seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(spec, &mut rng, InitScheme::ImprovedXavier)
    }

    #[test]
    fn default_spec_shape_chain() {
        let spec = default_ocr_spec();
        let plan = spec.validate().unwrap();
        assert_eq!(plan.embedding_shape, vec![1, 1, 512]);
        assert_eq!(
            plan.stream_shapes,
            vec![
                vec![28, 28, 1],
                vec![24, 24, 16],
                vec![12, 12, 16],
                vec![8, 8, 64],
                vec![4, 4, 64],
                vec![1, 1, 512],
            ]
        );
        assert_eq!(plan.head_len, 1600);
        assert_eq!(plan.filter_len, 1600);
        // The naive weight count the meta-network avoids predicting.
        let dynamic = &spec.stream[2];
        assert_eq!(crate::layers::count_naive(dynamic, 16), 25600);
    }

    #[test]
    fn validation_rejects_inconsistent_specs() {
        let mut spec = default_ocr_spec();
        spec.dynamic_layer = Some(0);
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("factorized"), "{err}");

        let mut spec = default_ocr_spec();
        spec.learnet = None;
        assert!(spec.validate().is_err());

        let mut spec = default_ocr_spec();
        if let Some(LayerSpec::Conv(c)) = spec.learnet.as_mut().and_then(|l| l.last_mut()) {
            c.out = 1601;
        }
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("1600"), "{err}");
    }

    #[test]
    fn shared_siamese_score_symmetric_in_inputs() {
        for comparison in [ComparisonKind::Dot, ComparisonKind::Euclidean, ComparisonKind::WeightedL1] {
            let spec = tiny_spec(Arch::Shared, comparison);
            let params = params_for(&spec, 3);
            let z = rng_image(vec![8, 8, 1], 1);
            let x = rng_image(vec![8, 8, 1], 2);
            let ab = forward_siamese(&spec, &params, &z, &x);
            let ba = forward_siamese(&spec, &params, &x, &z);
            assert_eq!(ab, ba, "{comparison:?}");
        }
    }

    #[test]
    fn identical_inputs_give_zero_distance_scores() {
        for comparison in [ComparisonKind::Euclidean, ComparisonKind::WeightedL1] {
            let spec = tiny_spec(Arch::Shared, comparison);
            let params = params_for(&spec, 4);
            let z = rng_image(vec![8, 8, 1], 5);
            let s = forward_siamese(&spec, &params, &z, &z);
            assert_eq!(s, 0.0, "{comparison:?}");
        }
        // Same holds for the siamese learnet: both streams share everything,
        // including the predicted parameters.
        let spec = tiny_spec(Arch::SiameseLearnet, ComparisonKind::Euclidean);
        let params = params_for(&spec, 6);
        let z = rng_image(vec![8, 8, 1], 7);
        assert_eq!(forward_siamese_learnet(&spec, &params, &z, &z), 0.0);
    }

    #[test]
    fn learnet_predictions_depend_on_exemplar() {
        let spec = tiny_spec(Arch::SiameseLearnet, ComparisonKind::Dot);
        let plan = spec.validate().unwrap();
        let params = params_for(&spec, 8);
        let z1 = rng_image(vec![8, 8, 1], 9);
        let z2 = rng_image(vec![8, 8, 1], 10);
        let b1 = bind_exemplar(&spec, &plan, &params, &z1);
        let b2 = bind_exemplar(&spec, &plan, &params, &z2);
        let w1 = b1.w_pred.unwrap();
        let w2 = b2.w_pred.unwrap();
        assert!(w1.max_abs_diff(&w2) > 0.0, "different exemplars must induce different filters");
    }

    #[test]
    fn manual_substitution_matches_factorized_static_net() {
        // Predicted filters pasted into a static factorized net reproduce the
        // learnet's score exactly.
        let spec = tiny_spec(Arch::SiameseLearnet, ComparisonKind::Dot);
        let plan = spec.validate().unwrap();
        let params = params_for(&spec, 11);
        let z = rng_image(vec![8, 8, 1], 12);
        let x = rng_image(vec![8, 8, 1], 13);
        let learnet_score = forward_siamese_learnet(&spec, &params, &z, &x);

        let binding = bind_exemplar(&spec, &plan, &params, &z);
        let static_spec = NetworkSpec {
            arch: Arch::Shared,
            comparison: spec.comparison,
            input: spec.input,
            stream: spec.stream.clone(),
            learnet: None,
            dynamic_layer: None,
        };
        let mut static_params = ParamSet::new();
        for (name, t) in params.iter() {
            if name.starts_with("stream.") {
                static_params.insert(name.clone(), t.clone());
            }
        }
        static_params.insert("stream.l2.w".into(), binding.w_pred.clone().unwrap());
        let static_score = forward_siamese(&static_spec, &static_params, &z, &x);
        assert_eq!(learnet_score, static_score);
    }

    #[test]
    fn single_stream_zero_comparison_weights_score_zero() {
        let spec = tiny_spec(Arch::SingleStreamLearnet, ComparisonKind::WeightedL1);
        let plan = spec.validate().unwrap();
        let params = params_for(&spec, 14);
        let z = rng_image(vec![8, 8, 1], 15);
        let mut binding = bind_exemplar(&spec, &plan, &params, &z);
        binding.gamma_v = Some(Tensor::zeros(vec![plan.embedding_len]));
        for seed in 20..25 {
            let x = rng_image(vec![8, 8, 1], seed);
            let s = score_candidates(&spec, &plan, &params, &binding, &[&x])[0];
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn single_stream_matches_manual_composition() {
        let spec = tiny_spec(Arch::SingleStreamLearnet, ComparisonKind::WeightedL1);
        let plan = spec.validate().unwrap();
        let params = params_for(&spec, 16);
        let z = rng_image(vec![8, 8, 1], 17);
        let x = rng_image(vec![8, 8, 1], 18);
        let score = forward_single_stream(&spec, &params, &z, &x);

        // Manual composition: run the meta-network once, then the static
        // pupil with its outputs.
        let binding = bind_exemplar(&spec, &plan, &params, &z);
        let manual = score_candidates(&spec, &plan, &params, &binding, &[&x])[0];
        assert_eq!(score, manual);
    }

    #[test]
    fn conv_gamma_map_shape_and_center() {
        let spec = compact_tracking_spec(Arch::Shared);
        let plan = spec.validate().unwrap();
        let params = params_for(&spec, 19);
        let z = rng_image(vec![32, 32, 1], 20);
        let x = rng_image(vec![64, 64, 1], 21);
        let map = forward_conv_gamma(&spec, &params, &z, &x);
        let (mh, mw) = spec.map_dims(&[64, 64, 1]).unwrap();
        assert_eq!(map.shape(), &[mh, mw]);
        assert_eq!((mh, mw), (9, 9));

        // The map at the centered alignment equals the scalar dot score on
        // the centered crop.
        let crop = Tensor::from_fn(vec![32, 32, 1], |i| {
            let (y, xx) = (i / 32, i % 32);
            x.at(&[16 + y, 16 + xx, 0])
        });
        let scalar = forward_siamese(&spec, &params, &z, &crop);
        let center = map.at(&[4, 4]);
        assert_eq!(center, scalar);
        let _ = plan;
    }

    #[test]
    fn conv_gamma_tiling_is_translation_invariant() {
        // Search built by tiling the exemplar: all stride-aligned windows are
        // identical, so aligned map entries agree.
        let spec = compact_tracking_spec(Arch::Shared);
        let params = params_for(&spec, 22);
        let z = rng_image(vec![32, 32, 1], 23);
        let x = Tensor::from_fn(vec![64, 64, 1], |i| {
            let (y, xx) = (i / 64, i % 64);
            z.at(&[y % 32, xx % 32, 0])
        });
        let map = forward_conv_gamma(&spec, &params, &z, &x);
        // Total pooling stride is 4: embeddings of windows 32 px apart line
        // up 8 cells apart.
        let a = map.at(&[0, 0]);
        assert!((a - map.at(&[0, 8])).abs() <= 1e-9 * a.abs().max(1.0));
        assert!((a - map.at(&[8, 0])).abs() <= 1e-9 * a.abs().max(1.0));
        assert!((a - map.at(&[8, 8])).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn binding_once_equals_batched_candidates() {
        let spec = tiny_spec(Arch::SiameseLearnet, ComparisonKind::WeightedL1);
        let plan = spec.validate().unwrap();
        let params = params_for(&spec, 24);
        let z = rng_image(vec![8, 8, 1], 25);
        let xs: Vec<Tensor<f64>> = (0..5).map(|i| rng_image(vec![8, 8, 1], 30 + i)).collect();
        let refs: Vec<&Tensor<f64>> = xs.iter().collect();
        let binding = bind_exemplar(&spec, &plan, &params, &z);
        let batched = score_candidates(&spec, &plan, &params, &binding, &refs);
        for (i, x) in xs.iter().enumerate() {
            let single = forward_pair(&spec, &params, &z, x);
            assert_eq!(batched[i], single, "candidate {i}");
        }
    }

    #[test]
    fn param_defs_cover_all_architectures() {
        for arch in [
            Arch::Shared,
            Arch::Unshared,
            Arch::Factorized,
            Arch::SiameseLearnet,
            Arch::SingleStreamLearnet,
        ] {
            let spec = tiny_spec(arch, ComparisonKind::WeightedL1);
            let defs = param_defs(&spec).unwrap();
            let names: Vec<&str> = defs.iter().map(|d| d.name.as_str()).collect();
            match arch {
                Arch::Unshared | Arch::Factorized => {
                    assert!(names.iter().any(|n| n.starts_with("stream_z.")), "{arch:?}");
                    assert!(names.contains(&"stream_z.l2.w"), "{arch:?}");
                }
                Arch::SiameseLearnet | Arch::SingleStreamLearnet => {
                    assert!(names.iter().any(|n| n.starts_with("learnet.")), "{arch:?}");
                    assert!(!names.contains(&"stream.l2.w"), "dynamic filters are predicted: {arch:?}");
                }
                Arch::Shared => {
                    assert!(names.contains(&"stream.l2.w"), "{arch:?}");
                }
            }
            if arch == Arch::SingleStreamLearnet {
                assert!(!names.contains(&"comparison.weights"), "predicted, not learned");
            } else {
                assert!(names.contains(&"comparison.weights"), "{arch:?}");
            }
        }
    }

    #[test]
    fn spec_serialization_round_trips() {
        for spec in [
            default_ocr_spec(),
            compact_ocr_spec(Arch::SingleStreamLearnet, ComparisonKind::WeightedL1),
            compact_tracking_spec(Arch::SiameseLearnet),
        ] {
            let json = serde_json::to_string(&spec).unwrap();
            let back: NetworkSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(spec, back);
        }
    }
}
