//! Anytime MILP solving and certification.
//!
//! [`branch_and_bound`] keeps `δ_L ≤ δ* ≤ δ_U` valid at every step, so an
//! interrupted run still yields a sound certificate `δ_U`.

mod bnb;
mod lp;

pub use bnb::{branch_and_bound, MilpOutcome, Progress};
pub use lp::{solve_lp, LpSolution, LpSolver, LpStatus};

use serde::Serialize;
use std::time::Duration;
use thiserror::Error;

use crate::encode::{encode_pair_problem, MilpProblem, VarKind};
use crate::metric::FairnessMetric;
use crate::model::{FeatureSchema, NeuralNet};
use crate::pwl::NetRelaxation;

pub const DEFAULT_GAP_TOL: f64 = 1e-5;
pub const DEFAULT_CUTOFF_SECS: f64 = 180.0;
/// Tolerance used to accept a binary as integral.
pub const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("numerical failure in the simplex: {0}")]
    Numerical(String),
    #[error("LP relaxation is unbounded although every variable is boxed")]
    Unbounded,
    #[error("simplex exceeded {0} iterations")]
    IterationLimit(usize),
    #[error("time limit reached during an LP solve")]
    Timeout,
    #[error("solution is not integral (variable {var} = {value})")]
    NonIntegral { var: usize, value: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("problem has no network copies to read a witness from")]
    NoWitness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Absolute gap `τ` at which the search stops.
    pub gap_tol: f64,
    pub time_cutoff: Duration,
    pub node_limit: Option<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            gap_tol: DEFAULT_GAP_TOL,
            time_cutoff: Duration::from_secs_f64(DEFAULT_CUTOFF_SECS),
            node_limit: None,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.gap_tol > 0.0) {
            return Err(SolveError::Config(format!("gap tolerance must be positive (got {})", self.gap_tol)));
        }
        if self.time_cutoff.is_zero() {
            return Err(SolveError::Config("time cutoff must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    CutoffReached,
    NodeLimit,
    Infeasible,
}

/// A concrete input pair and its exactly recomputed output change.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub x_prime: Vec<f64>,
    pub x_dprime: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationResult {
    /// Largest output change realised by a concrete pair found so far.
    pub delta_lower: f64,
    /// Certified bound: the model is ε-δ individually fair for every δ ≥ this.
    pub delta_upper: f64,
    pub witness: Option<Witness>,
    pub status: SolveStatus,
    pub nodes: usize,
    pub wall_time: f64,
}

/// Reads the input copies of an integral assignment and recomputes `δ` by
/// exact forward passes.
pub fn extract_witness(problem: &MilpProblem, values: &[f64]) -> Result<Witness, SolveError> {
    for (j, var) in problem.vars.iter().enumerate() {
        if var.kind == VarKind::Binary && (values[j] - values[j].round()).abs() > INTEGRALITY_TOL {
            return Err(SolveError::NonIntegral {
                var: j,
                value: values[j],
            });
        }
    }
    let inputs = problem.read_inputs(values);
    let delta = problem.exact_delta(&inputs).ok_or(SolveError::NoWitness)?;
    let mut it = inputs.into_iter();
    let x_prime = it.next().ok_or(SolveError::NoWitness)?;
    let x_dprime = match &problem.var_map.objective {
        crate::encode::Objective::Local { x_fixed, .. } => x_fixed.clone(),
        _ => it.next().ok_or(SolveError::NoWitness)?,
    };
    Ok(Witness {
        x_prime,
        x_dprime,
        delta: delta.abs(),
    })
}

/// Runs bounds → PWL grids → pair encoding → branch-and-bound.
pub fn certify(
    net: &NeuralNet,
    metric: &FairnessMetric,
    eps: f64,
    schema: &FeatureSchema,
    grid_m: usize,
    cfg: &SolveConfig,
    on_progress: &mut dyn FnMut(&Progress),
) -> crate::Result<CertificationResult> {
    let relax = NetRelaxation::new(net, &schema.input_box(), grid_m)?;
    let problem = encode_pair_problem(net, &relax, metric, eps, schema)?;
    let out = branch_and_bound(&problem, cfg, on_progress)?;
    let witness = match &out.best_solution {
        Some(v) => Some(extract_witness(&problem, v)?),
        None => None,
    };
    Ok(CertificationResult {
        delta_lower: out.delta_lower,
        delta_upper: out.delta_upper,
        witness,
        status: out.status,
        nodes: out.nodes,
        wall_time: out.wall_time,
    })
}
