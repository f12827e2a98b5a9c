//! Fully connected students and teachers with manual backpropagation.
//!
//! A learner is a stack of dense layers `y = act(x·Wᵀ + b)` with weights
//! stored `out × in`. A learner may carry one connection that feeds the
//! cached hidden activation of an earlier ensemble member into the input of
//! one of its own layers:
//!
//! - `residual_add`: layer input is `current + source`
//! - `dense_concat`: layer input is `[current | source]` (the layer is widened)
//! - `delta`: layer input is `source - current`
//!
//! Earlier members are frozen, so no gradient flows into the tapped source.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// ReLU hidden layers followed by a linear output layer, e.g. `[32, 16, 16, 2]`.
pub fn mlp_spec(widths: &[usize]) -> Result<Vec<LayerSpec>> {
    if widths.len() < 2 {
        return Err(Error::Config(format!(
            "an MLP needs at least an input and an output width, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Config(format!("zero width in {widths:?}")));
    }
    let last = widths.len() - 2;
    Ok(widths
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let act = if k == last {
                Activation::Linear
            } else {
                Activation::Relu
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    None,
    ResidualAdd,
    DenseConcat,
    Delta,
}

impl std::str::FromStr for ConnectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "residual_add" => Ok(Self::ResidualAdd),
            "dense_concat" => Ok(Self::DenseConcat),
            "delta" => Ok(Self::Delta),
            other => Err(Error::Config(format!("unknown connection kind `{other}`"))),
        }
    }
}

/// Where a learner reads a frozen activation from, and where it feeds it.
///
/// `source_layer` indexes the layer of member `source_round` whose output is
/// tapped; `target_layer` indexes the layer of this learner whose input
/// receives it. `width` is the tapped activation width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub kind: ConnectionKind,
    pub source_round: usize,
    pub source_layer: usize,
    pub target_layer: usize,
    pub width: usize,
}

impl ConnectionSpec {
    pub fn none() -> Self {
        Self {
            kind: ConnectionKind::None,
            source_round: 0,
            source_layer: 0,
            target_layer: 0,
            width: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != ConnectionKind::None
    }

    /// FLOPs added per example by the connection itself.
    pub fn overhead_flops(&self) -> u64 {
        match self.kind {
            ConnectionKind::ResidualAdd | ConnectionKind::Delta => self.width as u64,
            ConnectionKind::None | ConnectionKind::DenseConcat => 0,
        }
    }
}

/// An architecture: layers (already widened for `dense_concat`) plus one connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub layers: Vec<LayerSpec>,
    pub connection: ConnectionSpec,
}

impl ClassSpec {
    pub fn plain(layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self {
            layers,
            connection: ConnectionSpec::none(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let layers = &self.layers;
        let Some(last) = layers.last() else {
            return Err(Error::Config("a learner needs at least one layer".into()));
        };
        if last.activation != Activation::Linear {
            return Err(Error::Config("the output layer must be linear".into()));
        }
        if layers.iter().any(|l| l.in_dim == 0 || l.out_dim == 0) {
            return Err(Error::Config("layer dimensions must be at least 1".into()));
        }
        let conn = &self.connection;
        if conn.is_active() {
            if conn.target_layer >= layers.len() {
                return Err(Error::Config(format!(
                    "connection targets layer {} of a {}-layer learner",
                    conn.target_layer,
                    layers.len()
                )));
            }
            if conn.width == 0 {
                return Err(Error::Config("connection width must be at least 1".into()));
            }
        }
        for k in 1..layers.len() {
            let expected = layers[k - 1].out_dim + self.widening(k);
            if layers[k].in_dim != expected {
                return Err(Error::Config(format!(
                    "layer {k} expects input width {} but receives {expected}",
                    layers[k].in_dim
                )));
            }
        }
        if matches!(conn.kind, ConnectionKind::ResidualAdd | ConnectionKind::Delta) {
            let current = self.base_input_width(conn.target_layer);
            if current != conn.width {
                return Err(Error::Config(format!(
                    "{:?} connection needs equal widths, layer {} input is {current} but the tap is {}",
                    conn.kind, conn.target_layer, conn.width
                )));
            }
        }
        if conn.is_active() && self.base_input_width(0) == 0 {
            return Err(Error::Config("connection leaves no input features".into()));
        }
        Ok(())
    }

    fn widening(&self, k: usize) -> usize {
        let c = &self.connection;
        if c.kind == ConnectionKind::DenseConcat && c.target_layer == k {
            c.width
        } else {
            0
        }
    }

    /// Width of the layer-`k` input before any `dense_concat` widening.
    fn base_input_width(&self, k: usize) -> usize {
        self.layers[k].in_dim.saturating_sub(self.widening(k))
    }

    pub fn input_dim(&self) -> usize {
        self.base_input_width(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Index of the last hidden layer, if any.
    pub fn last_hidden(&self) -> Option<usize> {
        self.layers.len().checked_sub(2)
    }

    /// Per-example FLOPs: `Σ (2·in·out + out)` plus connection overhead.
    pub fn flops(&self) -> u64 {
        let layers: u64 = self
            .layers
            .iter()
            .map(|l| (2 * l.in_dim * l.out_dim + l.out_dim) as u64)
            .sum();
        layers + self.connection.overhead_flops()
    }
}

/// Build the round-`r` class from a base architecture.
///
/// `r = 0` (or `kind = none`) is the base class. Otherwise the class gains one
/// connection tapping the last hidden layer of the most recent member and
/// feeding the input of the output layer.
pub fn expand_class(
    base: &[LayerSpec],
    kind: ConnectionKind,
    r: usize,
    ensemble_so_far: &[LearnerParams],
) -> Result<ClassSpec> {
    if r == 0 || kind == ConnectionKind::None {
        return ClassSpec::plain(base.to_vec());
    }
    let source_round = ensemble_so_far
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Config("class expansion needs at least one trained member".into()))?;
    let prev = &ensemble_so_far[source_round];
    let source_layer = prev
        .class
        .last_hidden()
        .ok_or_else(|| Error::Config("the previous member has no hidden layer to tap".into()))?;
    let width = prev.class.layers[source_layer].out_dim;
    let target_layer = base
        .len()
        .checked_sub(1)
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config("the base class has no hidden layer to connect".into()))?;
    let mut layers = base.to_vec();
    if kind == ConnectionKind::DenseConcat {
        layers[target_layer].in_dim += width;
    }
    let class = ClassSpec {
        layers,
        connection: ConnectionSpec {
            kind,
            source_round,
            source_layer,
            target_layer,
            width,
        },
    };
    class.validate()?;
    Ok(class)
}

/// Hidden activations of ensemble members, keyed by `(round, layer)`.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    entries: BTreeMap<(usize, usize), Mat>,
}

impl ActivationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, round: usize, layer: usize, act: Mat) {
        self.entries.insert((round, layer), act);
    }

    pub fn get(&self, round: usize, layer: usize) -> Result<&Mat> {
        self.entries
            .get(&(round, layer))
            .ok_or(Error::MissingActivation { round, layer })
    }

    /// Store every hidden-layer output of `trace` under `round`.
    pub fn record(&mut self, round: usize, trace: &Trace) {
        let hidden = trace.outputs.len().saturating_sub(1);
        for (layer, out) in trace.outputs.iter().take(hidden).enumerate() {
            self.insert(round, layer, out.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Effective input of each layer, after the connection is applied.
    pub inputs: Vec<Mat>,
    pub pre: Vec<Mat>,
    pub outputs: Vec<Mat>,
}

impl Trace {
    pub fn logits(&self) -> &Mat {
        self.outputs.last().expect("trace of a non-empty learner")
    }

    pub fn into_logits(mut self) -> Mat {
        self.outputs.pop().expect("trace of a non-empty learner")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &LearnerParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let w = self.weights.iter().map(Mat::max_abs).fold(0.0, f64::max);
        let b = self.biases.iter().flatten().fold(0.0, |m: f64, v| m.max(v.abs()));
        w.max(b)
    }
}

/// Parameters of one learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct LearnerParams {
    pub class: ClassSpec,
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

/// He-style initialization: weights `N(0, 2/in_dim)`, biases zero.
pub fn init_params(class: &ClassSpec, rng: &mut RngStream) -> Result<LearnerParams> {
    class.validate()?;
    let mut weights = Vec::with_capacity(class.layers.len());
    for l in &class.layers {
        let scale = (2.0 / l.in_dim as f64).sqrt();
        let data = rng
            .gaussian(l.in_dim * l.out_dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        weights.push(Mat::from_vec(l.out_dim, l.in_dim, data)?);
    }
    let biases = class.layers.iter().map(|l| vec![0.0; l.out_dim]).collect();
    Ok(LearnerParams {
        class: class.clone(),
        weights,
        biases,
    })
}

impl LearnerParams {
    pub fn zeros(class: &ClassSpec) -> Result<Self> {
        class.validate()?;
        Ok(Self {
            class: class.clone(),
            weights: class.layers.iter().map(|l| Mat::zeros(l.out_dim, l.in_dim)).collect(),
            biases: class.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        })
    }

    pub fn from_parts(class: ClassSpec, weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { class, weights, biases };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.class.validate()?;
        let n = self.class.layers.len();
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::Config(format!(
                "{n} layers but {} weight and {} bias blocks",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (k, l) in self.class.layers.iter().enumerate() {
            if self.weights[k].shape() != (l.out_dim, l.in_dim) {
                return Err(Error::Shape {
                    op: "layer weights",
                    left: self.weights[k].shape(),
                    right: (l.out_dim, l.in_dim),
                });
            }
            if self.biases[k].len() != l.out_dim {
                return Err(Error::Shape {
                    op: "layer bias",
                    left: (1, self.biases[k].len()),
                    right: (1, l.out_dim),
                });
            }
            if !self.weights[k].is_finite() || self.biases[k].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("parameters of layer {k}"),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.class.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.class.output_dim()
    }

    pub fn connection(&self) -> &ConnectionSpec {
        &self.class.connection
    }

    pub fn flops(&self) -> u64 {
        self.class.flops()
    }

    pub fn num_params(&self) -> usize {
        self.class.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }

    /// The cached source activation this learner consumes, if it has a connection.
    pub fn tap<'a>(&self, cache: &'a ActivationCache) -> Result<Option<&'a Mat>> {
        let c = &self.class.connection;
        if !c.is_active() {
            return Ok(None);
        }
        cache.get(c.source_round, c.source_layer).map(Some)
    }

    /// Forward pass returning logits and the full trace.
    pub fn forward(&self, x: &Mat, cache: &ActivationCache) -> Result<Trace> {
        let tap = self.tap(cache)?;
        self.forward_with_tap(x, tap)
    }

    /// Forward pass with the tapped activation rows supplied directly
    /// (row-aligned with `x`).
    pub fn forward_with_tap(&self, x: &Mat, tap: Option<&Mat>) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward input",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        let conn = self.class.connection;
        if let Some(t) = tap {
            if t.shape() != (x.rows(), conn.width) {
                return Err(Error::Shape {
                    op: "forward tap",
                    left: t.shape(),
                    right: (x.rows(), conn.width),
                });
            }
        } else if conn.is_active() {
            return Err(Error::MissingActivation {
                round: conn.source_round,
                layer: conn.source_layer,
            });
        }

        let n = self.class.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut outputs: Vec<Mat> = Vec::with_capacity(n);
        for (k, layer) in self.class.layers.iter().enumerate() {
            let current = if k == 0 { x } else { &outputs[k - 1] };
            let input = match (tap, conn.is_active() && conn.target_layer == k) {
                (Some(src), true) => combine(conn.kind, current, src)?,
                _ => current.clone(),
            };
            let mut z = input.matmul_t(&self.weights[k])?;
            z.add_row_vector(&self.biases[k])?;
            let out = match layer.activation {
                Activation::Linear => z.clone(),
                act => z.map(|v| act.apply(v)),
            };
            inputs.push(input);
            pre.push(z);
            outputs.push(out);
        }
        Ok(Trace { inputs, pre, outputs })
    }

    pub fn predict(&self, x: &Mat, cache: &ActivationCache) -> Result<Mat> {
        Ok(self.forward(x, cache)?.into_logits())
    }

    /// Gradients of a loss with respect to every weight and bias, given
    /// `dL/dlogits`. The tapped source activation is treated as a constant.
    pub fn backward(&self, x: &Mat, d_logits: &Mat, cache: &ActivationCache) -> Result<Gradients> {
        let trace = self.forward(x, cache)?;
        self.backprop(&trace, d_logits)
    }

    pub fn backprop(&self, trace: &Trace, d_logits: &Mat) -> Result<Gradients> {
        if d_logits.shape() != trace.logits().shape() {
            return Err(Error::Shape {
                op: "backward",
                left: d_logits.shape(),
                right: trace.logits().shape(),
            });
        }
        let n = self.class.layers.len();
        let conn = self.class.connection;
        let mut grads = Gradients::zeros_like(self);
        let mut d_out = d_logits.clone();
        for k in (0..n).rev() {
            let act = self.class.layers[k].activation;
            let dz = match act {
                Activation::Linear => d_out,
                _ => d_out.zip_with(&trace.pre[k], "activation grad", |g, p| g * act.derivative(p))?,
            };
            grads.weights[k] = dz.t_matmul(&trace.inputs[k])?;
            grads.biases[k] = dz.col_sums();
            if k == 0 {
                break;
            }
            let d_in = dz.matmul(&self.weights[k])?;
            d_out = if conn.is_active() && conn.target_layer == k {
                match conn.kind {
                    ConnectionKind::ResidualAdd | ConnectionKind::None => d_in,
                    ConnectionKind::DenseConcat => d_in.col_range(0, d_in.cols() - conn.width),
                    ConnectionKind::Delta => d_in.scale(-1.0),
                }
            } else {
                d_in
            };
        }
        Ok(grads)
    }

    /// Flat view of all parameters, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                op: "set_flat",
                left: (values.len(), 1),
                right: (self.num_params(), 1),
            });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wn = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&values[at..at + wn]);
            at += wn;
            let bn = b.len();
            b.copy_from_slice(&values[at..at + bn]);
            at += bn;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization is infallible")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

fn combine(kind: ConnectionKind, current: &Mat, source: &Mat) -> Result<Mat> {
    match kind {
        ConnectionKind::None => Ok(current.clone()),
        ConnectionKind::ResidualAdd => current.add(source),
        ConnectionKind::DenseConcat => current.hcat(source),
        ConnectionKind::Delta => source.sub(current),
    }
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    spec: Vec<LayerSpec>,
    connection: ConnectionSpec,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<LearnerParams> for ModelFile {
    fn from(p: LearnerParams) -> Self {
        ModelFile {
            spec: p.class.layers,
            connection: p.class.connection,
            weights: p.weights.into_iter().map(Mat::into_vec).collect(),
            biases: p.biases,
        }
    }
}

impl TryFrom<ModelFile> for LearnerParams {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.weights.len() != f.spec.len() {
            return Err(Error::Config(format!(
                "{} layers but {} weight blocks",
                f.spec.len(),
                f.weights.len()
            )));
        }
        let weights = f
            .spec
            .iter()
            .zip(f.weights)
            .map(|(l, w)| Mat::from_vec(l.out_dim, l.in_dim, w))
            .collect::<Result<Vec<_>>>()?;
        LearnerParams::from_parts(
            ClassSpec {
                layers: f.spec,
                connection: f.connection,
            },
            weights,
            f.biases,
        )
    }
}
