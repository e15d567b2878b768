//! Individual-fairness similarity metrics.
//!
//! Three families are supported: weighted ℓp, Mahalanobis and metrics computed
//! on the output of an embedding network. Each can be evaluated exactly and
//! over-approximated by a set of linear difference constraints for the MILP.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::linalg::{dot, norm2, orthonormal_basis, solve_linear, Matrix};
use crate::model::{load_network, FeatureSchema, ModelError, NeuralNet};

/// Eigenvalues at or below this are treated as zero (sensitive, unconstrained directions).
pub const EIGEN_ZERO_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-9;
const JACOBI_OFF_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: metric expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("weights must be finite and non-negative (index {0})")]
    NegativeWeight(usize),
    #[error("exponent p must be >= 1 (got {0})")]
    BadExponent(f64),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix must be square and finite")]
    BadMatrix,
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("epsilon must be finite and non-negative (got {0})")]
    NegativeEpsilon(f64),
    #[error("metric learning: {0}")]
    Learning(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metric file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FairnessMetric {
    /// `(Σ θᵢ |Δᵢ|^p)^{1/p}`, or `maxᵢ θᵢ |Δᵢ|` for `p = ∞`.
    WeightedLp { p: f64, theta: Vec<f64> },
    /// `sqrt(Δᵀ S Δ)`.
    Mahalanobis { s: Matrix },
    /// `inner(φ(x′), φ(x″))` for an embedding network `φ`.
    Embedded {
        inner: Box<FairnessMetric>,
        embedding: NeuralNet,
        model_path: Option<PathBuf>,
    },
}

impl FairnessMetric {
    pub fn weighted_lp(p: f64, theta: Vec<f64>) -> Result<Self, MetricError> {
        let m = FairnessMetric::WeightedLp { p, theta };
        m.validate()?;
        Ok(m)
    }

    pub fn linf(theta: Vec<f64>) -> Result<Self, MetricError> {
        Self::weighted_lp(f64::INFINITY, theta)
    }

    pub fn mahalanobis(s: Matrix) -> Result<Self, MetricError> {
        let m = FairnessMetric::Mahalanobis { s };
        m.validate()?;
        Ok(m)
    }

    pub fn embedded(inner: FairnessMetric, embedding: NeuralNet) -> Result<Self, MetricError> {
        let m = FairnessMetric::Embedded {
            inner: Box::new(inner),
            embedding,
            model_path: None,
        };
        m.validate()?;
        Ok(m)
    }

    /// Input dimension the metric compares.
    pub fn dim(&self) -> usize {
        match self {
            FairnessMetric::WeightedLp { theta, .. } => theta.len(),
            FairnessMetric::Mahalanobis { s } => s.rows(),
            FairnessMetric::Embedded { embedding, .. } => embedding.input_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        match self {
            FairnessMetric::WeightedLp { p, theta } => {
                if !(*p >= 1.0) {
                    return Err(MetricError::BadExponent(*p));
                }
                if let Some(i) = theta.iter().position(|t| !(t.is_finite() && *t >= 0.0)) {
                    return Err(MetricError::NegativeWeight(i));
                }
                Ok(())
            }
            FairnessMetric::Mahalanobis { s } => {
                if !s.is_square() || !s.is_finite() {
                    return Err(MetricError::BadMatrix);
                }
                let asym = s.asymmetry();
                if asym > SYMMETRY_TOL {
                    return Err(MetricError::Asymmetric(asym));
                }
                let eig = eigendecompose(s)?;
                match eig.values.first() {
                    Some(&v) if v < -EIGEN_ZERO_TOL => Err(MetricError::NotPsd(v)),
                    _ => Ok(()),
                }
            }
            FairnessMetric::Embedded { inner, embedding, .. } => {
                inner.validate()?;
                if embedding.output_dim() != inner.dim() {
                    return Err(MetricError::Dimension {
                        expected: inner.dim(),
                        got: embedding.output_dim(),
                    });
                }
                if matches!(**inner, FairnessMetric::Embedded { .. }) {
                    return Err(MetricError::Learning("nested embeddings are not supported".into()));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
        eval_metric(self, a, b)
    }
}

pub fn eval_metric(m: &FairnessMetric, a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = m.dim();
    for v in [a, b] {
        if v.len() != n {
            return Err(MetricError::Dimension {
                expected: n,
                got: v.len(),
            });
        }
    }
    match m {
        FairnessMetric::WeightedLp { p, theta } => {
            if let Some(i) = theta.iter().position(|t| *t < 0.0) {
                return Err(MetricError::NegativeWeight(i));
            }
            let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
            if p.is_infinite() {
                Ok(diffs.zip(theta).map(|(d, t)| t * d).fold(0.0, f64::max))
            } else {
                let s: f64 = diffs.zip(theta).map(|(d, t)| t * d.powf(*p)).sum();
                Ok(s.powf(1.0 / p))
            }
        }
        FairnessMetric::Mahalanobis { s } => {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            Ok(s.quad_form(&d).max(0.0).sqrt())
        }
        FairnessMetric::Embedded { inner, embedding, .. } => {
            let ea = embedding.forward_vec(a)?;
            let eb = embedding.forward_vec(b)?;
            eval_metric(inner, &ea, &eb)
        }
    }
}

/// `UᵀSU = diag(values)`; eigenvalues ascending, `vectors` holds them as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub vectors: Matrix,
    pub values: Vec<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = self.vectors.matmul(&Matrix::from_diag(&self.values));
        scaled.matmul(&self.vectors.transpose())
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn eigendecompose(s: &Matrix) -> Result<EigenDecomposition, MetricError> {
    if !s.is_square() || !s.is_finite() {
        return Err(MetricError::BadMatrix);
    }
    let asym = s.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(MetricError::Asymmetric(asym));
    }
    let n = s.rows();
    let mut a = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let floor = f64::EPSILON * a.max_abs();
    let off = |a: &Matrix| {
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max(a[(i, j)].abs());
            }
        }
        worst
    };
    let mut sweeps = 0;
    while off(&a) > JACOBI_OFF_TOL.max(floor) {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(MetricError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= floor {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let mut vectors = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let lam = a[(src, src)];
        values.push(if (-EIGEN_ZERO_TOL..0.0).contains(&lam) { 0.0 } else { lam });
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(EigenDecomposition { vectors, values })
}

/// Coordinates a [`PairConstraintSet`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSpace {
    Input,
    /// Output coordinates of the embedding network.
    Embedding,
}

/// `lo ≤ cᵀ(v′ − v″) ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConstraint {
    pub coeffs: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl PairConstraint {
    pub fn value(&self, diff: &[f64]) -> f64 {
        dot(&self.coeffs, diff)
    }

    /// Index of the single non-zero coefficient, if there is exactly one.
    pub fn single_coordinate(&self) -> Option<(usize, f64)> {
        let mut nz = self.coeffs.iter().enumerate().filter(|(_, c)| **c != 0.0);
        match (nz.next(), nz.next()) {
            (Some((i, &c)), None) => Some((i, c)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairConstraintSet {
    pub space: ConstraintSpace,
    pub dim: usize,
    pub constraints: Vec<PairConstraint>,
}

impl PairConstraintSet {
    /// Largest violation of any constraint by the difference vector `diff`.
    pub fn violation(&self, diff: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let v = c.value(diff);
                (c.lo - v).max(v - c.hi).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Linear over-approximation of the ball `{(x′, x″) : d(x′, x″) ≤ ε}`.
pub fn pair_constraints(m: &FairnessMetric, eps: f64) -> Result<PairConstraintSet, MetricError> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(MetricError::NegativeEpsilon(eps));
    }
    m.validate()?;
    let boxed = |i: usize, n: usize, bound: f64| {
        let mut coeffs = vec![0.0; n];
        coeffs[i] = 1.0;
        PairConstraint {
            coeffs,
            lo: -bound,
            hi: bound,
        }
    };
    match m {
        FairnessMetric::WeightedLp { p, theta } => {
            let n = theta.len();
            let constraints = theta
                .iter()
                .enumerate()
                .filter(|(_, t)| **t > 0.0)
                .map(|(i, &t)| {
                    let bound = if p.is_infinite() { eps / t } else { eps / t.powf(1.0 / p) };
                    boxed(i, n, bound)
                })
                .collect();
            Ok(PairConstraintSet {
                space: ConstraintSpace::Input,
                dim: n,
                constraints,
            })
        }
        FairnessMetric::Mahalanobis { s } => {
            let eig = eigendecompose(s)?;
            let n = s.rows();
            let constraints = eig
                .values
                .iter()
                .enumerate()
                .filter(|(_, lam)| **lam > EIGEN_ZERO_TOL)
                .map(|(i, &lam)| {
                    let bound = eps / lam.sqrt();
                    PairConstraint {
                        coeffs: eig.vectors.column(i),
                        lo: -bound,
                        hi: bound,
                    }
                })
                .collect();
            Ok(PairConstraintSet {
                space: ConstraintSpace::Input,
                dim: n,
                constraints,
            })
        }
        FairnessMetric::Embedded { inner, .. } => {
            let mut set = pair_constraints(inner, eps)?;
            set.space = ConstraintSpace::Embedding;
            Ok(set)
        }
    }
}

/// Multinomial logistic regression `p(k | x) ∝ exp(a_kᵀx + b_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl SoftmaxModel {
    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(a, b)| dot(a, x) + b)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricLearnConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    /// Gram–Schmidt residual below which a direction is dependent.
    pub drop_tol: f64,
    /// Learned directions with a smaller coefficient norm count as "no correlation".
    pub min_direction_norm: f64,
}

impl Default for MetricLearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 2000,
            l2: 1e-3,
            drop_tol: 1e-10,
            min_direction_norm: 0.05,
        }
    }
}

/// Full-batch gradient descent on the L2-penalised softmax cross-entropy.
pub fn fit_softmax(x: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &MetricLearnConfig) -> SoftmaxModel {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    let mut model = SoftmaxModel {
        weights: vec![vec![0.0; d]; classes],
        biases: vec![0.0; classes],
    };
    let mut gw = vec![vec![0.0; d]; classes];
    let mut gb = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|r| r.fill(0.0));
        gb.fill(0.0);
        for (row, &label) in x.iter().zip(labels) {
            let p = model.probabilities(row);
            for k in 0..classes {
                let r = p[k] - if k == label { 1.0 } else { 0.0 };
                gb[k] += r;
                for (g, v) in gw[k].iter_mut().zip(row) {
                    *g += r * v;
                }
            }
        }
        for k in 0..classes {
            model.biases[k] -= cfg.learning_rate * gb[k] / n;
            for (w, g) in model.weights[k].iter_mut().zip(&gw[k]) {
                *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
            }
        }
    }
    model
}

/// Least-squares fit `y ≈ wᵀx + c`; returns `w`.
fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    // normal equations on [x, 1], scaled by 1/n, with a tiny ridge for collinear columns
    let mut g = Matrix::zeros(d + 1, d + 1);
    let mut rhs = vec![0.0; d + 1];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..=d {
            let xi = if i < d { row[i] } else { 1.0 };
            rhs[i] += xi * t / n;
            for j in 0..=d {
                let xj = if j < d { row[j] } else { 1.0 };
                g[(i, j)] += xi * xj / n;
            }
        }
    }
    for i in 0..d {
        g[(i, i)] += 1e-10;
    }
    solve_linear(&g, &rhs).map_or_else(|| vec![0.0; d], |mut w| {
        w.truncate(d);
        w
    })
}

/// Learns a Mahalanobis metric whose zero-distance subspace contains the
/// sensitive coordinates and the directions along which the non-sensitive
/// features predict them. Returns `S = I − Q Qᵀ` with `Q` an orthonormal basis
/// of that subspace.
pub fn learn_mahalanobis(
    data: &[Vec<f64>],
    schema: &FeatureSchema,
    cfg: &MetricLearnConfig,
) -> Result<FairnessMetric, MetricError> {
    let n = schema.len();
    if data.is_empty() {
        return Err(MetricError::Learning("no data rows".into()));
    }
    if let Some(row) = data.iter().find(|r| r.len() != n) {
        return Err(MetricError::Dimension {
            expected: n,
            got: row.len(),
        });
    }
    let sensitive = schema.sensitive_indices();
    if sensitive.is_empty() {
        return Err(MetricError::Learning("schema marks no sensitive feature".into()));
    }
    // non-sensitive regressors, dropping constant columns
    let regressors: Vec<usize> = (0..n)
        .filter(|i| !sensitive.contains(i))
        .filter(|&i| {
            let (lo, hi) = data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[i]), hi.max(r[i])));
            hi - lo > 1e-12
        })
        .collect();
    if (0..n).all(|i| sensitive.contains(&i)) {
        return Err(MetricError::Learning("all features are sensitive".into()));
    }
    let xs: Vec<Vec<f64>> = data
        .iter()
        .map(|r| regressors.iter().map(|&i| r[i]).collect())
        .collect();
    let embed = |a: &[f64]| {
        let mut v = vec![0.0; n];
        for (&i, &w) in regressors.iter().zip(a) {
            v[i] = w;
        }
        v
    };

    let mut directions: Vec<Vec<f64>> = Vec::new();
    let mut learned: Vec<Vec<f64>> = Vec::new();
    let groups = schema.groups();
    for (_, cols) in groups.iter().filter(|(_, cols)| schema.features()[cols[0]].sensitive) {
        let labels: Vec<usize> = data
            .iter()
            .map(|r| {
                (0..cols.len())
                    .max_by(|&a, &b| r[cols[a]].total_cmp(&r[cols[b]]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect();
        if !regressors.is_empty() {
            let model = fit_softmax(&xs, &labels, cols.len(), cfg);
            learned.extend(model.weights.iter().map(|a| embed(a)));
        }
        directions.extend(cols.iter().map(|&c| unit(n, c)));
    }
    for &c in sensitive.iter().filter(|&&c| !schema.is_categorical(c)) {
        if !regressors.is_empty() {
            let y: Vec<f64> = data.iter().map(|r| r[c]).collect();
            learned.push(embed(&fit_linear(&xs, &y)));
        }
        directions.push(unit(n, c));
    }
    directions.extend(learned.into_iter().filter(|a| norm2(a) >= cfg.min_direction_norm));

    let q = orthonormal_basis(&directions, cfg.drop_tol);
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in i..n {
            let p: f64 = q.iter().map(|v| v[i] * v[j]).sum();
            s[(i, j)] -= p;
            if i != j {
                s[(j, i)] = s[(i, j)];
            }
        }
    }
    Ok(FairnessMetric::Mahalanobis { s })
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum MetricFile {
    WeightedLp {
        p: Exponent,
        theta: Vec<f64>,
    },
    Mahalanobis {
        #[serde(rename = "S")]
        s: Matrix,
    },
    Embedded {
        inner: Box<MetricFile>,
        model_path: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Exponent {
    Finite(f64),
    Named(String),
}

impl MetricFile {
    fn into_metric(self, base: &Path) -> Result<FairnessMetric, MetricError> {
        let m = match self {
            MetricFile::WeightedLp { p, theta } => {
                let p = match p {
                    Exponent::Finite(p) => p,
                    Exponent::Named(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => f64::INFINITY,
                    Exponent::Named(s) => {
                        return Err(MetricError::File {
                            path: base.display().to_string(),
                            message: format!("unknown exponent {s:?}"),
                        })
                    }
                };
                FairnessMetric::WeightedLp { p, theta }
            }
            MetricFile::Mahalanobis { s } => FairnessMetric::Mahalanobis { s },
            MetricFile::Embedded { inner, model_path } => {
                let resolved = if model_path.is_absolute() { model_path.clone() } else { base.join(&model_path) };
                FairnessMetric::Embedded {
                    inner: Box::new(inner.into_metric(base)?),
                    embedding: load_network(&resolved)?,
                    model_path: Some(model_path),
                }
            }
        };
        m.validate()?;
        Ok(m)
    }

    fn from_metric(m: &FairnessMetric) -> Result<Self, MetricError> {
        Ok(match m {
            FairnessMetric::WeightedLp { p, theta } => MetricFile::WeightedLp {
                p: if p.is_infinite() { Exponent::Named("inf".into()) } else { Exponent::Finite(*p) },
                theta: theta.clone(),
            },
            FairnessMetric::Mahalanobis { s } => MetricFile::Mahalanobis { s: s.clone() },
            FairnessMetric::Embedded { inner, model_path, .. } => MetricFile::Embedded {
                inner: Box::new(MetricFile::from_metric(inner)?),
                model_path: model_path.clone().ok_or_else(|| MetricError::File {
                    path: String::new(),
                    message: "embedded metric has no model_path to serialize".into(),
                })?,
            },
        })
    }
}

pub fn metric_to_json(m: &FairnessMetric) -> Result<String, MetricError> {
    Ok(serde_json::to_string_pretty(&MetricFile::from_metric(m)?).expect("metric serialization cannot fail"))
}

/// Parses a metric document; relative embedding paths resolve against `base_dir`.
pub fn metric_from_json(text: &str, base_dir: &Path) -> Result<FairnessMetric, MetricError> {
    let file: MetricFile = serde_json::from_str(text).map_err(|e| MetricError::File {
        path: base_dir.display().to_string(),
        message: e.to_string(),
    })?;
    file.into_metric(base_dir)
}

pub fn load_metric(path: impl AsRef<Path>) -> Result<FairnessMetric, MetricError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MetricError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    metric_from_json(&text, base)
}

pub fn save_metric(m: &FairnessMetric, path: impl AsRef<Path>) -> Result<(), MetricError> {
    let path = path.as_ref();
    fs::write(path, metric_to_json(m)?).map_err(|e| MetricError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mahalanobis_identity_is_l2() {
        let m = FairnessMetric::mahalanobis(Matrix::identity(2)).unwrap();
        assert!((m.eval(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_linf_ignores_zero_weight() {
        let m = FairnessMetric::linf(vec![0.0, 1.0]).unwrap();
        assert!((m.eval(&[9.0, 0.3], &[0.0, 0.0]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sensitive_direction_has_zero_distance() {
        let m = FairnessMetric::mahalanobis(Matrix::from_diag(&[0.0, 1.0])).unwrap();
        assert_eq!(m.eval(&[7.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            FairnessMetric::linf(vec![1.0, -0.5]),
            Err(MetricError::NegativeWeight(1))
        ));
        assert!(FairnessMetric::weighted_lp(0.5, vec![1.0]).is_err());
        assert!(matches!(
            FairnessMetric::mahalanobis(mat(&[&[1.0, 0.5], &[0.0, 1.0]])),
            Err(MetricError::Asymmetric(_))
        ));
        assert!(matches!(
            FairnessMetric::mahalanobis(mat(&[&[1.0, 2.0], &[2.0, 1.0]])),
            Err(MetricError::NotPsd(_))
        ));
        let m = FairnessMetric::linf(vec![1.0]).unwrap();
        assert!(matches!(m.eval(&[1.0, 2.0], &[0.0]), Err(MetricError::Dimension { .. })));
        assert!(matches!(pair_constraints(&m, -0.1), Err(MetricError::NegativeEpsilon(_))));
    }

    #[test]
    fn eigen_diagonal_and_identity() {
        let e = eigendecompose(&Matrix::from_diag(&[3.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 3.0]);
        assert_eq!(e.vectors.column(0), vec![0.0, 1.0]);
        let e = eigendecompose(&Matrix::identity(4)).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
        assert_eq!(e.vectors, Matrix::identity(4));
    }

    #[test]
    fn eigen_two_by_two() {
        let s = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let e = eigendecompose(&s).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12 && (e.values[1] - 3.0).abs() < 1e-12);
        assert!(e.reconstruct().max_abs_diff(&s) <= 1e-8);
        assert!(eigendecompose(&mat(&[&[1.0, 0.0], &[1.0, 1.0]])).is_err());
    }

    #[test]
    fn linf_constraints_are_boxes() {
        let set = pair_constraints(&FairnessMetric::linf(vec![1.0, 1.0]).unwrap(), 0.2).unwrap();
        assert_eq!(set.constraints.len(), 2);
        for (i, c) in set.constraints.iter().enumerate() {
            assert_eq!(c.single_coordinate(), Some((i, 1.0)));
            assert_eq!((c.lo, c.hi), (-0.2, 0.2));
        }
    }

    #[test]
    fn mahalanobis_zero_eigenvalue_is_free() {
        let m = FairnessMetric::mahalanobis(Matrix::from_diag(&[4.0, 0.0])).unwrap();
        let set = pair_constraints(&m, 1.0).unwrap();
        assert_eq!(set.constraints.len(), 1);
        let c = &set.constraints[0];
        assert_eq!(c.coeffs.iter().map(|v| v.abs()).collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert!((c.hi - 0.5).abs() < 1e-15);
    }

    #[test]
    fn finite_p_box_bound() {
        let m = FairnessMetric::weighted_lp(2.0, vec![4.0, 0.0, 1.0]).unwrap();
        let set = pair_constraints(&m, 1.0).unwrap();
        assert_eq!(set.constraints.len(), 2);
        assert!((set.constraints[0].hi - 0.5).abs() < 1e-15);
        assert!((set.constraints[1].hi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn embedded_constraints_live_in_embedding_space() {
        let emb = NeuralNet::new(
            3,
            vec![Layer::new(
                vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]],
                vec![0.0, 0.0],
                Activation::Identity,
            )],
        )
        .unwrap();
        let m = FairnessMetric::embedded(FairnessMetric::linf(vec![1.0, 1.0]).unwrap(), emb).unwrap();
        assert_eq!(m.dim(), 3);
        let set = pair_constraints(&m, 0.1).unwrap();
        assert_eq!(set.space, ConstraintSpace::Embedding);
        assert!((m.eval(&[0.0, 0.5, 0.5], &[0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metric_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"type":"weighted_lp","p":"inf","theta":[1.0,0.0]}"#;
        let m = metric_from_json(text, dir.path()).unwrap();
        assert_eq!(m, FairnessMetric::linf(vec![1.0, 0.0]).unwrap());
        let text = r#"{"type":"mahalanobis","S":[[1.0,0.0],[0.0,0.0]]}"#;
        let m = metric_from_json(text, dir.path()).unwrap();
        let back = metric_from_json(&metric_to_json(&m).unwrap(), dir.path()).unwrap();
        assert_eq!(m, back);

        let emb = NeuralNet::new(2, vec![Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Relu)]).unwrap();
        crate::model::save_model(&emb, dir.path().join("emb.json")).unwrap();
        let text = r#"{"type":"embedded","inner":{"type":"weighted_lp","p":2,"theta":[1.0]},"model_path":"emb.json"}"#;
        let m = metric_from_json(text, dir.path()).unwrap();
        assert_eq!(m.dim(), 2);
    }

    #[test]
    fn learned_metric_removes_perfectly_correlated_column() {
        // column 2 (sensitive) equals column 0 exactly
        let data: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let a = ((i * 37) % 101) as f64 / 100.0;
                let b = ((i * 53) % 97) as f64 / 96.0;
                vec![a, b, a]
            })
            .collect();
        let schema = FeatureSchema::unit_box(3, &[2]);
        let m = learn_mahalanobis(&data, &schema, &MetricLearnConfig::default()).unwrap();
        let FairnessMetric::Mahalanobis { s } = &m else { unreachable!() };
        assert!(m.eval(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap() <= 1e-6);
        assert!(m.eval(&[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]).unwrap() <= 1e-6);
        assert!((m.eval(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(s.matmul(s).max_abs_diff(s) <= 1e-6);
        assert!(s.asymmetry() <= 1e-9);
    }

    #[test]
    fn learning_requires_sensitive_and_non_sensitive_features() {
        let data = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let cfg = MetricLearnConfig::default();
        assert!(learn_mahalanobis(&data, &FeatureSchema::unit_box(2, &[]), &cfg).is_err());
        assert!(learn_mahalanobis(&data, &FeatureSchema::unit_box(2, &[0, 1]), &cfg).is_err());
    }
}
