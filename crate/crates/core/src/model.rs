//! Fully-connected networks, exact forward evaluation and the model/schema
//! file formats.
//!
//! A network computes `φ⁽ⁱ⁾ = W⁽ⁱ⁾ ζ⁽ⁱ⁻¹⁾ + b⁽ⁱ⁾`, `ζ⁽ⁱ⁾ = σ⁽ⁱ⁾(φ⁽ⁱ⁾)` with
//! `ζ⁽⁰⁾ = x`. Models that are certified have a single output; embedding
//! networks used by the embedded fairness metric may have several.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::bounds::Interval;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },
    #[error("input has length {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("input contains a non-finite value at index {0}")]
    NonFiniteInput(usize),
    #[error(
        "network has {0} outputs; only single-output models can be certified \
         (run one certification per output component)"
    )]
    MultiOutput(usize),
    #[error("network has no layers")]
    Empty,
    #[error("schema: {0}")]
    Schema(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

/// Local shape of an activation on an interval free of inflection points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curvature {
    Linear,
    Convex,
    Concave,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// First derivative; the ReLU subgradient at 0 is 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    pub fn third_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Sigmoid => {
                let d = self.derivative(x);
                d * (1.0 - 6.0 * d)
            }
            Activation::Tanh => {
                let t = x.tanh();
                let d = 1.0 - t * t;
                2.0 * d * (3.0 * t * t - 1.0)
            }
        }
    }

    /// Points where convexity changes (inflections) or the derivative jumps
    /// (kinks). All supported activations have at most one, at the origin.
    pub fn breakpoints(self) -> &'static [f64] {
        match self {
            Activation::Identity => &[],
            Activation::Relu | Activation::Sigmoid | Activation::Tanh => &[0.0],
        }
    }

    /// True when the activation is itself piecewise linear, so a PWL bound
    /// with the breakpoints as grid is exact.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }

    /// Curvature on `[lo, hi]`; `None` if the interval straddles a breakpoint.
    pub fn curvature_on(self, lo: f64, hi: f64) -> Option<Curvature> {
        if self.breakpoints().iter().any(|&b| lo < b && b < hi) {
            return None;
        }
        let mid = 0.5 * (lo + hi);
        Some(match self {
            Activation::Relu | Activation::Identity => Curvature::Linear,
            Activation::Sigmoid | Activation::Tanh => {
                if mid < 0.0 {
                    Curvature::Convex
                } else {
                    Curvature::Concave
                }
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// Logistic function in the overflow-free two-branch form.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row `j` holds the incoming weights of neuron `j`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>, activation: Activation) -> Self {
        Self {
            weights,
            biases,
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn output_width(&self) -> usize {
        self.biases.len()
    }

    fn validate(&self, index: usize, expected_input: usize) -> Result<(), ModelError> {
        let err = |message: String| ModelError::Layer {
            layer: index,
            message,
        };
        if self.weights.len() != self.biases.len() {
            return Err(err(format!(
                "{} weight rows but {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        if self.biases.is_empty() {
            return Err(err("layer has no neurons".into()));
        }
        for (j, row) in self.weights.iter().enumerate() {
            if row.len() != expected_input {
                return Err(err(format!(
                    "weight row {j} has {} entries, expected {expected_input}",
                    row.len()
                )));
            }
            if let Some(k) = row.iter().position(|w| !w.is_finite()) {
                return Err(err(format!("non-finite weight at [{j}][{k}]")));
            }
        }
        if let Some(j) = self.biases.iter().position(|b| !b.is_finite()) {
            return Err(err(format!("non-finite bias at [{j}]")));
        }
        Ok(())
    }

    /// Pre-activations `W z + b`.
    pub fn affine(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Per-layer pre- and post-activation values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetFile", into = "NetFile")]
pub struct NeuralNet {
    input_dim: usize,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<NetFile> for NeuralNet {
    type Error = ModelError;
    fn try_from(f: NetFile) -> Result<Self, ModelError> {
        NeuralNet::new(f.input_dim, f.layers)
    }
}

impl From<NeuralNet> for NetFile {
    fn from(n: NeuralNet) -> Self {
        NetFile {
            input_dim: n.input_dim,
            layers: n.layers,
        }
    }
}

impl NeuralNet {
    /// Validates the layer chain; any output width is accepted.
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i, width)?;
            width = layer.output_width();
        }
        Ok(Self { input_dim, layers })
    }

    /// Like [`NeuralNet::new`] but rejects networks with more than one output.
    pub fn new_scalar(input_dim: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let net = Self::new(input_dim, layers)?;
        net.ensure_scalar()?;
        Ok(net)
    }

    pub fn ensure_scalar(&self) -> Result<(), ModelError> {
        match self.output_dim() {
            1 => Ok(()),
            n => Err(ModelError::MultiOutput(n)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_width)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for training. Shapes must be left unchanged.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Widths of every layer output, hidden layers first.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::output_width).collect()
    }

    pub fn num_neurons(&self) -> usize {
        self.layers.iter().map(Layer::output_width).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput(i));
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace, ModelError> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = post.last().map_or(x, Vec::as_slice);
            let phi = layer.affine(z);
            let zeta = phi.iter().map(|&p| layer.activation.apply(p)).collect();
            pre.push(phi);
            post.push(zeta);
        }
        Ok(Trace {
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// All outputs of the network.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        let mut z = x.to_vec();
        for layer in &self.layers {
            z = layer
                .affine(&z)
                .into_iter()
                .map(|p| layer.activation.apply(p))
                .collect();
        }
        Ok(z)
    }

    /// Scalar output of a single-output network.
    pub fn forward(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.ensure_scalar()?;
        Ok(self.forward_vec(x)?[0])
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|source| {
            // surface the structured validation error when serde wrapped one
            ModelError::Parse {
                path: origin.to_string(),
                source,
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serialization cannot fail")
    }
}

/// Loads a single-output model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<NeuralNet, ModelError> {
    let net = load_network(path)?;
    net.ensure_scalar()?;
    Ok(net)
}

/// Loads a network with any output width (feature embeddings).
pub fn load_network(path: impl AsRef<Path>) -> Result<NeuralNet, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NeuralNet::from_json(&text, &path.display().to_string())
}

pub fn save_model(net: &NeuralNet, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, net.to_json()).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous {
        #[serde(default)]
        lo: f64,
        #[serde(default = "one")]
        hi: f64,
        /// Original-unit `[min, max]` the column was normalized from.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw_range: Option<[f64; 2]>,
    },
    /// One 0/1 column of a one-hot encoded categorical group.
    Categorical { group: String },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default)]
    pub sensitive: bool,
}

/// Model-input feature layout in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    features: Vec<FeatureSpec>,
}

impl TryFrom<SchemaFile> for FeatureSchema {
    type Error = ModelError;
    fn try_from(f: SchemaFile) -> Result<Self, ModelError> {
        FeatureSchema::new(f.features)
    }
}

impl From<FeatureSchema> for SchemaFile {
    fn from(s: FeatureSchema) -> Self {
        SchemaFile {
            features: s.features,
        }
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self, ModelError> {
        let mut groups: BTreeMap<&str, (usize, bool)> = BTreeMap::new();
        for f in &features {
            match &f.kind {
                FeatureKind::Continuous { lo, hi, .. } => {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(ModelError::Schema(format!(
                            "feature {:?} has invalid domain [{lo}, {hi}]",
                            f.name
                        )));
                    }
                }
                FeatureKind::Categorical { group } => {
                    let e = groups.entry(group).or_insert((0, f.sensitive));
                    e.0 += 1;
                    if e.1 != f.sensitive {
                        return Err(ModelError::Schema(format!(
                            "categorical group {group:?} mixes sensitive and non-sensitive members"
                        )));
                    }
                }
            }
        }
        if let Some((g, _)) = groups.iter().find(|(_, (n, _))| *n < 2) {
            return Err(ModelError::Schema(format!(
                "categorical group {g:?} has fewer than 2 members"
            )));
        }
        Ok(Self { features })
    }

    /// All-continuous `[0, 1]` schema with the given sensitive columns.
    pub fn unit_box(n: usize, sensitive: &[usize]) -> Self {
        Self {
            features: (0..n)
                .map(|i| FeatureSpec {
                    name: format!("x{i}"),
                    kind: FeatureKind::Continuous {
                        lo: 0.0,
                        hi: 1.0,
                        raw_range: None,
                    },
                    sensitive: sensitive.contains(&i),
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ModelError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("schema serialization cannot fail");
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn sensitive_indices(&self) -> Vec<usize> {
        (0..self.features.len()).filter(|&i| self.features[i].sensitive).collect()
    }

    pub fn is_categorical(&self, i: usize) -> bool {
        matches!(self.features[i].kind, FeatureKind::Categorical { .. })
    }

    /// Categorical groups in order of first appearance with their column indices.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, f) in self.features.iter().enumerate() {
            if let FeatureKind::Categorical { group } = &f.kind {
                match out.iter_mut().find(|(g, _)| g == group) {
                    Some((_, cols)) => cols.push(i),
                    None => out.push((group.clone(), vec![i])),
                }
            }
        }
        out
    }

    /// Per-column input domain; categorical members live in `[0, 1]`.
    pub fn input_box(&self) -> Vec<Interval> {
        self.features
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Continuous { lo, hi, .. } => Interval::new(lo, hi),
                FeatureKind::Categorical { .. } => Interval::new(0.0, 1.0),
            })
            .collect()
    }

    /// Maps a normalized row back to original units (categoricals unchanged).
    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        self.features
            .iter()
            .zip(x)
            .map(|(f, &v)| match f.kind {
                FeatureKind::Continuous {
                    raw_range: Some([min, max]),
                    ..
                } => min + v * (max - min),
                _ => v,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net1(act: Activation) -> NeuralNet {
        NeuralNet::new_scalar(1, vec![Layer::new(vec![vec![1.0]], vec![0.0], act)]).unwrap()
    }

    #[test]
    fn forward_identity_and_sigmoid() {
        assert_eq!(net1(Activation::Identity).forward(&[0.5]).unwrap(), 0.5);
        assert_eq!(net1(Activation::Sigmoid).forward(&[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn forward_two_layer_relu() {
        let net = NeuralNet::new_scalar(
            1,
            vec![
                Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], Activation::Relu),
                Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity),
            ],
        )
        .unwrap();
        assert!((net.forward(&[0.3]).unwrap() - 0.3).abs() < 1e-15);
        assert!((net.forward(&[-0.3]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = net1(Activation::Relu);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(ModelError::InputDim { expected: 1, got: 2 })
        ));
        assert!(matches!(net.forward(&[f64::NAN]), Err(ModelError::NonFiniteInput(0))));
    }

    #[test]
    fn chain_mismatch_names_layer() {
        let err = NeuralNet::new(
            2,
            vec![
                Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Relu),
                Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Layer { layer: 1, .. }), "{err}");
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-40.0) > 0.0);
    }

    #[test]
    fn parses_activation_names() {
        let text = r#"{"input_dim":1,"layers":[
            {"weights":[[1.0],[2.0]],"biases":[0.0,0.1],"activation":"relu"},
            {"weights":[[1.0,-1.0]],"biases":[0.0],"activation":"sigmoid"}]}"#;
        let net = NeuralNet::from_json(text, "inline").unwrap();
        let acts: Vec<_> = net.layers().iter().map(|l| l.activation).collect();
        assert_eq!(acts, vec![Activation::Relu, Activation::Sigmoid]);
    }

    #[test]
    fn bias_length_mismatch_names_layer() {
        let text = r#"{"input_dim":1,"layers":[
            {"weights":[[1.0],[2.0]],"biases":[0.0],"activation":"relu"}]}"#;
        let msg = NeuralNet::from_json(text, "inline").unwrap_err().to_string();
        assert!(msg.contains("layer 0"), "{msg}");
    }

    #[test]
    fn schema_rejects_singleton_group() {
        let f = |name: &str, group: &str| FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical { group: group.into() },
            sensitive: false,
        };
        assert!(FeatureSchema::new(vec![f("a", "g")]).is_err());
        let s = FeatureSchema::new(vec![f("a", "g"), f("b", "g")]).unwrap();
        assert_eq!(s.groups(), vec![("g".to_string(), vec![0, 1])]);
    }
}
