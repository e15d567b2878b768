//! Backpropagation, SGD training and MILP-based fair training.
//!
//! Fair training minimizes `λ L(f(x), y) + (1 − λ) |f(x) − f(x*)|` where
//! `x*` is the worst-case metric-similar input found by solving the local
//! MILP around each training point. `x*` is held constant when
//! differentiating.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

use crate::dataset::Dataset;
use crate::encode::encode_local_problem;
use crate::metric::FairnessMetric;
use crate::model::{Activation, FeatureSchema, Layer, NeuralNet};
use crate::pwl::{NetRelaxation, DEFAULT_GRID_M};
use crate::solve::{branch_and_bound, SolveConfig, DEFAULT_GAP_TOL};
use crate::Error;

/// Probabilities are clamped this far inside (0, 1) before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;
pub const DEFAULT_SAMPLE_CUTOFF_SECS: f64 = 5.0;
pub const DEFAULT_SAMPLE_NODE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BinaryCrossEntropy,
    MeanSquaredError,
}

pub fn loss(pred: f64, y: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::BinaryCrossEntropy => {
            let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
        LossKind::MeanSquaredError => (pred - y).powi(2),
    }
}

/// Derivative of [`loss`] with respect to `pred`.
pub fn loss_grad(pred: f64, y: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::BinaryCrossEntropy => {
            let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            (p - y) / (p * (1.0 - p))
        }
        LossKind::MeanSquaredError => 2.0 * (pred - y),
    }
}

pub fn fair_loss(pred_clean: f64, y: f64, pred_adv: f64, lambda: f64, kind: LossKind) -> f64 {
    lambda * loss(pred_clean, y, kind) + (1.0 - lambda) * (pred_clean - pred_adv).abs()
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &NeuralNet) -> Self {
        Self {
            weights: net
                .layers()
                .iter()
                .map(|l| vec![vec![0.0; l.input_width()]; l.output_width()])
                .collect(),
            biases: net.layers().iter().map(|l| vec![0.0; l.output_width()]).collect(),
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += scale * y;
                }
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Same order as [`parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().flatten());
            out.extend(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// All weights and biases, layer by layer (weights row-major, then biases).
pub fn parameters(net: &NeuralNet) -> Vec<f64> {
    let mut out = Vec::new();
    for l in net.layers() {
        out.extend(l.weights.iter().flatten());
        out.extend(&l.biases);
    }
    out
}

/// Copy of `net` with parameters replaced, in [`parameters`] order.
pub fn with_parameters(net: &NeuralNet, params: &[f64]) -> NeuralNet {
    let mut out = net.clone();
    let mut it = params.iter().copied();
    for l in out.layers_mut() {
        for row in &mut l.weights {
            for w in row {
                *w = it.next().expect("parameter vector too short");
            }
        }
        for b in &mut l.biases {
            *b = it.next().expect("parameter vector too short");
        }
    }
    assert!(it.next().is_none(), "parameter vector too long");
    out
}

/// Gradient of the scalar output at `x`, scaled by `upstream`.
pub fn backward(net: &NeuralNet, x: &[f64], upstream: f64) -> crate::Result<Gradients> {
    net.ensure_scalar()?;
    let trace = net.trace(x)?;
    let layers = net.layers();
    let mut grads = Gradients::zeros_like(net);
    let last = layers.len() - 1;
    let mut delta: Vec<f64> = vec![upstream * layers[last].activation.derivative(trace.pre[last][0])];
    for i in (0..layers.len()).rev() {
        let input = if i == 0 { &trace.input } else { &trace.post[i - 1] };
        for (j, &d) in delta.iter().enumerate() {
            grads.biases[i][j] = d;
            for (g, &z) in grads.weights[i][j].iter_mut().zip(input) {
                *g = d * z;
            }
        }
        if i == 0 {
            break;
        }
        let act = layers[i - 1].activation;
        delta = (0..layers[i].input_width())
            .map(|k| {
                let s: f64 = delta.iter().zip(&layers[i].weights).map(|(d, row)| d * row[k]).sum();
                s * act.derivative(trace.pre[i - 1][k])
            })
            .collect();
    }
    Ok(grads)
}

/// Value and parameter gradient of the fair loss for one sample, with `x_adv` frozen.
pub fn fair_loss_gradients(
    net: &NeuralNet,
    x: &[f64],
    y: f64,
    x_adv: &[f64],
    lambda: f64,
    kind: LossKind,
) -> crate::Result<(f64, Gradients)> {
    let pred = net.forward(x)?;
    let adv = net.forward(x_adv)?;
    let diff = pred - adv;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let fair = (1.0 - lambda) * sign;
    let mut g = backward(net, x, lambda * loss_grad(pred, y, kind) + fair)?;
    if fair != 0.0 {
        g.add_scaled(&backward(net, x_adv, 1.0)?, -fair);
    }
    Ok((fair_loss(pred, y, adv, lambda, kind), g))
}

/// Input within metric distance `eps` of `x` (and inside the schema domain)
/// maximizing `|f(x) − f(x*)|`, from the local MILP in both output directions.
/// Returns `x` itself when neither direction yields a solution.
pub fn find_worst_case(
    net: &NeuralNet,
    relax: &NetRelaxation,
    metric: &FairnessMetric,
    eps: f64,
    schema: &FeatureSchema,
    x: &[f64],
    cfg: &SolveConfig,
) -> crate::Result<Vec<f64>> {
    let base = net.forward(x)?;
    let mut best = (0.0, x.to_vec());
    for direction in [1.0, -1.0] {
        let problem = encode_local_problem(net, relax, metric, eps, x, schema, direction)?;
        let out = branch_and_bound(&problem, cfg, &mut |_| {})?;
        if let Some(values) = out.best_solution {
            let cand = problem.read_inputs(&values).swap_remove(0);
            let gap = (net.forward(&cand)? - base).abs();
            if gap > best.0 {
                best = (gap, cand);
            }
        }
    }
    Ok(best.1)
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_network(
    input_dim: usize,
    hidden: &[usize],
    hidden_activation: Activation,
    output_activation: Activation,
    seed: u64,
) -> crate::Result<NeuralNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut fan_in = input_dim;
    let widths = hidden.iter().map(|&w| (w, hidden_activation)).chain([(1, output_activation)]);
    for (width, act) in widths {
        let r = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..width)
            .map(|_| (0..fan_in).map(|_| rng.gen_range(-r..=r)).collect())
            .collect();
        layers.push(Layer::new(weights, vec![0.0; width], act));
        fan_in = width;
    }
    Ok(NeuralNet::new_scalar(input_dim, layers)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 penalty on weights (biases are not penalized).
    pub l2_reg: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the data loss once fair training kicks in.
    pub lambda: f64,
    /// Epochs `1..=lambda_switch_epoch` use `λ = 1`; defaults to half the epochs, rounded up.
    pub lambda_switch_epoch: Option<usize>,
    pub eps: f64,
    pub loss: LossKind,
    /// Per-sample budget for the local MILPs.
    #[serde(skip, default = "default_sample_solve")]
    pub solve: SolveConfig,
    pub grid_m: usize,
    pub seed: u64,
}

fn default_sample_solve() -> SolveConfig {
    SolveConfig {
        gap_tol: DEFAULT_GAP_TOL,
        time_cutoff: Duration::from_secs_f64(DEFAULT_SAMPLE_CUTOFF_SECS),
        node_limit: Some(DEFAULT_SAMPLE_NODE_LIMIT),
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l2_reg: 1e-4,
            epochs: 20,
            batch_size: 32,
            lambda: 0.5,
            lambda_switch_epoch: None,
            eps: 0.2,
            loss: LossKind::BinaryCrossEntropy,
            solve: default_sample_solve(),
            grid_m: DEFAULT_GRID_M,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive (got {})", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1] (got {})", self.lambda));
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be non-negative (got {})", self.eps));
        }
        if !(self.l2_reg >= 0.0) {
            return bad(format!("l2 regularization must be non-negative (got {})", self.l2_reg));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.grid_m == 0 {
            return bad("grid size must be positive".into());
        }
        self.solve.validate()?;
        Ok(())
    }

    pub fn switch_epoch(&self) -> usize {
        self.lambda_switch_epoch.unwrap_or(self.epochs.div_ceil(2))
    }

    /// Loss weighting used in (1-based) epoch `t`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        if t <= self.switch_epoch() {
            1.0
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean data loss over the epoch.
    pub mean_loss: f64,
    /// Mean `|f(x) − f(x*)|`; absent in epochs that skip the MILP.
    pub mean_fair_term: Option<f64>,
    /// Local MILPs that failed and fell back to `x* = x`.
    pub milp_fallbacks: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NeuralNet,
    pub log: Vec<EpochLog>,
}

struct FairSetup<'a> {
    metric: &'a FairnessMetric,
    schema: &'a FeatureSchema,
}

struct Sample {
    loss: f64,
    fair_term: Option<f64>,
    fallback: bool,
    grads: Gradients,
}

fn check_data(net: &NeuralNet, data: &Dataset) -> crate::Result<()> {
    net.ensure_scalar()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if data.schema.len() != net.input_dim() {
        return Err(Error::Invalid(format!(
            "dataset has {} features, network expects {}",
            data.schema.len(),
            net.input_dim()
        )));
    }
    Ok(())
}

fn sgd_step(net: &mut NeuralNet, grads: &Gradients, cfg: &TrainConfig) {
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        for (j, row) in layer.weights.iter_mut().enumerate() {
            for (k, w) in row.iter_mut().enumerate() {
                *w -= cfg.learning_rate * (grads.weights[i][j][k] + cfg.l2_reg * *w);
            }
        }
        for (b, g) in layer.biases.iter_mut().zip(&grads.biases[i]) {
            *b -= cfg.learning_rate * g;
        }
    }
}

fn run(
    net_init: &NeuralNet,
    x: &[Vec<f64>],
    y: &[f64],
    fair: Option<FairSetup>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> crate::Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = net_init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for t in 1..=cfg.epochs {
        let lambda = if fair.is_some() { cfg.lambda_at(t) } else { 1.0 };
        order.shuffle(&mut rng);
        let (mut loss_sum, mut fair_sum, mut fallbacks) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let relax = match &fair {
                Some(f) if lambda < 1.0 => Some(NetRelaxation::new(&net, &f.schema.input_box(), cfg.grid_m)?),
                _ => None,
            };
            let sample = |&i: &usize| -> crate::Result<Sample> {
                let (adv, fallback) = match (&fair, &relax) {
                    (Some(f), Some(r)) => {
                        match find_worst_case(&net, r, f.metric, cfg.eps, f.schema, &x[i], &cfg.solve) {
                            Ok(a) => (a, false),
                            Err(_) => (x[i].clone(), true),
                        }
                    }
                    _ => (x[i].clone(), false),
                };
                let (_, grads) = fair_loss_gradients(&net, &x[i], y[i], &adv, lambda, cfg.loss)?;
                let pred = net.forward(&x[i])?;
                Ok(Sample {
                    loss: loss(pred, y[i], cfg.loss),
                    fair_term: relax.as_ref().map(|_| net.forward(&adv).map(|a| (pred - a).abs())).transpose()?,
                    fallback,
                    grads,
                })
            };
            // solved in parallel, reduced in batch order
            let samples: Vec<Sample> = if relax.is_some() {
                batch.par_iter().map(sample).collect::<crate::Result<_>>()?
            } else {
                batch.iter().map(sample).collect::<crate::Result<_>>()?
            };
            let mut grads = Gradients::zeros_like(&net);
            let scale = 1.0 / batch.len() as f64;
            for s in &samples {
                grads.add_scaled(&s.grads, scale);
                loss_sum += s.loss;
                fair_sum += s.fair_term.unwrap_or(0.0);
                fallbacks += usize::from(s.fallback);
            }
            sgd_step(&mut net, &grads, cfg);
        }
        let n = x.len() as f64;
        let entry = EpochLog {
            epoch: t,
            lambda,
            mean_loss: loss_sum / n,
            mean_fair_term: (fair.is_some() && lambda < 1.0).then_some(fair_sum / n),
            milp_fallbacks: fallbacks,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { net, log })
}

/// Plain SGD on the data loss. With `drop_sensitive` the sensitive columns
/// are zeroed in the training inputs and the first-layer weights reading them
/// are zeroed, so the model ignores those features while keeping its input
/// dimension (fairness through unawareness).
pub fn train_standard(
    net_init: &NeuralNet,
    data: &Dataset,
    cfg: &TrainConfig,
    drop_sensitive: bool,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> crate::Result<TrainOutcome> {
    check_data(net_init, data)?;
    if !drop_sensitive {
        return run(net_init, &data.x, &data.y, None, cfg, on_epoch);
    }
    let sensitive = data.schema.sensitive_indices();
    let x: Vec<Vec<f64>> = data
        .x
        .iter()
        .map(|row| {
            let mut r = row.clone();
            for &c in &sensitive {
                r[c] = 0.0;
            }
            r
        })
        .collect();
    let mut net = net_init.clone();
    for row in &mut net.layers_mut()[0].weights {
        for &c in &sensitive {
            row[c] = 0.0;
        }
    }
    run(&net, &x, &data.y, None, cfg, on_epoch)
}

/// Fair training with per-sample local MILP adversaries. Bounds and PWL
/// grids are rebuilt for every batch since the weights change.
pub fn train_fair(
    net_init: &NeuralNet,
    data: &Dataset,
    metric: &FairnessMetric,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> crate::Result<TrainOutcome> {
    check_data(net_init, data)?;
    let setup = FairSetup {
        metric,
        schema: &data.schema,
    };
    run(net_init, &data.x, &data.y, Some(setup), cfg, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureSchema;

    fn linear_net() -> NeuralNet {
        NeuralNet::new_scalar(
            2,
            vec![Layer::new(vec![vec![0.5, -1.5]], vec![0.25], Activation::Identity)],
        )
        .unwrap()
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(0.5, 0.5, LossKind::MeanSquaredError), 0.0);
        assert!((loss(0.5, 1.0, LossKind::BinaryCrossEntropy) - 2f64.ln()).abs() < 1e-12);
        assert!(loss(0.0, 1.0, LossKind::BinaryCrossEntropy).is_finite());
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        for kind in [LossKind::BinaryCrossEntropy, LossKind::MeanSquaredError] {
            for &(p, y) in &[(0.3, 1.0), (0.8, 0.0), (0.55, 0.4)] {
                let h = 1e-6;
                let fd = (loss(p + h, y, kind) - loss(p - h, y, kind)) / (2.0 * h);
                let g = loss_grad(p, y, kind);
                assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "{kind:?} {p} {y}");
            }
        }
    }

    #[test]
    fn fair_loss_arithmetic() {
        let k = LossKind::MeanSquaredError;
        assert_eq!(fair_loss(0.6, 0.3, 0.1, 1.0, k), loss(0.6, 0.3, k));
        assert!((fair_loss(0.8, 1.0, 0.3, 0.0, k) - 0.5).abs() < 1e-12);
        assert!((fair_loss(0.6, 0.6, 0.4, 0.5, k) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn linear_model_gradient() {
        let g = backward(&linear_net(), &[2.0, -3.0], 1.0).unwrap();
        assert_eq!(g.weights[0][0], vec![2.0, -3.0]);
        assert_eq!(g.biases[0], vec![1.0]);
        let z = backward(&linear_net(), &[2.0, -3.0], 0.0).unwrap();
        assert!(z.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameters_round_trip() {
        let net = init_network(3, &[4], Activation::Relu, Activation::Sigmoid, 1).unwrap();
        let p = parameters(&net);
        assert_eq!(p.len(), 3 * 4 + 4 + 4 + 1);
        assert_eq!(with_parameters(&net, &p), net);
        assert_eq!(Gradients::zeros_like(&net).flatten().len(), p.len());
    }

    #[test]
    fn init_respects_fan_in() {
        let net = init_network(9, &[5], Activation::Relu, Activation::Sigmoid, 3).unwrap();
        let l0 = &net.layers()[0];
        assert!(l0.weights.iter().flatten().all(|w| w.abs() <= 1.0 / 3.0));
        assert!(l0.biases.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lambda_schedule() {
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let l: Vec<f64> = (1..=5).map(|t| cfg.lambda_at(t)).collect();
        assert_eq!(l, vec![1.0, 1.0, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn worst_case_identity_net() {
        let net = NeuralNet::new_scalar(1, vec![Layer::new(vec![vec![1.0]], vec![0.0], Activation::Identity)]).unwrap();
        let schema = FeatureSchema::unit_box(1, &[]);
        let relax = NetRelaxation::new(&net, &schema.input_box(), 8).unwrap();
        let m = FairnessMetric::linf(vec![1.0]).unwrap();
        let x = find_worst_case(&net, &relax, &m, 0.1, &schema, &[0.5], &SolveConfig::default()).unwrap();
        assert!((x[0] - 0.4).abs() < 1e-9 || (x[0] - 0.6).abs() < 1e-9, "{x:?}");
        let same = find_worst_case(&net, &relax, &m, 0.0, &schema, &[0.5], &SolveConfig::default()).unwrap();
        assert!((same[0] - 0.5).abs() < 1e-12);
    }
}
