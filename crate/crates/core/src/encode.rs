//! MILP over-approximation of the certification and training problems.
//!
//! Every neuron is encoded with the SOS2-by-binaries formulation of its PWL
//! grid: interpolation weights `η_0..η_M`, one binary `y_l` per cell,
//!
//! ```text
//! Σ y_l = 1,  Σ η_l = 1,  φ = Σ p_l η_l,  y_l ≤ η_{l−1} + η_l,
//! Σ lower_l η_l ≤ ζ ≤ Σ upper_l η_l,
//! ```
//!
//! plus the linking rows `η_l ≤ y_l + y_{l+1}` (cells adjacent to point `l`),
//! which tighten the LP relaxation without cutting off integral points.
//!
//! The objective is always a single variable `δ` with coefficient one.

use std::fmt::Write as _;
use thiserror::Error;

use crate::bounds::Interval;
use crate::metric::{pair_constraints, ConstraintSpace, FairnessMetric, PairConstraintSet};
use crate::model::{FeatureSchema, NeuralNet};
use crate::pwl::{NetRelaxation, PwlGrid};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("metric compares {metric} features but the network takes {net}")]
    MetricDimension { metric: usize, net: usize },
    #[error("schema describes {schema} features but the network takes {net}")]
    SchemaDimension { schema: usize, net: usize },
    #[error("relaxation does not match the network layout")]
    RelaxationShape,
    #[error("fixed point has {got} features, expected {expected}")]
    PointDimension { expected: usize, got: usize },
    #[error("fixed point feature {index} = {value} lies outside its domain [{lo}, {hi}]")]
    PointOutOfDomain { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("direction must be +1 or -1 (got {0})")]
    Direction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpVar {
    pub name: String,
    pub kind: VarKind,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinConstraint {
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl LinConstraint {
    pub fn activity(&self, values: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * values[v]).sum()
    }

    /// Amount by which `values` violates the constraint (0 when satisfied).
    pub fn violation(&self, values: &[f64]) -> f64 {
        let a = self.activity(values);
        match self.sense {
            Sense::Le => (a - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - a).max(0.0),
            Sense::Eq => (a - self.rhs).abs(),
        }
    }
}

/// Variables of one encoded neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronVars {
    pub phi: usize,
    pub zeta: usize,
    pub eta: Vec<usize>,
    pub y: Vec<usize>,
}

/// One encoded copy of a network: which variables feed it and which hold
/// its neurons, plus what is needed to lift a concrete input into a full
/// MILP assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct NetBlock {
    /// Index of the input copy this block reads.
    pub copy: usize,
    pub net: NeuralNet,
    pub grids: Vec<Vec<PwlGrid>>,
    pub neurons: Vec<Vec<NeuronVars>>,
}

impl NetBlock {
    pub fn outputs(&self) -> Vec<usize> {
        self.neurons.last().map_or_else(Vec::new, |l| l.iter().map(|n| n.zeta).collect())
    }
}

/// How `δ` relates to the encoded outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `δ = ζ′ − ζ″` for two copies of the model.
    Pair,
    /// `δ = direction · (f(x_fixed) − ζ)` for a single copy.
    Local {
        x_fixed: Vec<f64>,
        f_fixed: f64,
        direction: f64,
    },
    /// Hand-built problem without network structure.
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarMap {
    /// Input variables, one vector per copy (two for pair problems).
    pub inputs: Vec<Vec<usize>>,
    pub delta: usize,
    /// Model copies first, then embedding copies when the metric has one.
    pub blocks: Vec<NetBlock>,
    pub objective: Objective,
}

/// `maximize Σ c_j x_j` subject to linear constraints and variable bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MilpProblem {
    pub vars: Vec<MilpVar>,
    pub constraints: Vec<LinConstraint>,
    pub objective: Vec<(usize, f64)>,
    pub var_map: VarMap,
}

impl Default for MilpProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl MilpProblem {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            constraints: Vec::new(),
            objective: Vec::new(),
            var_map: VarMap {
                inputs: Vec::new(),
                delta: 0,
                blocks: Vec::new(),
                objective: Objective::Generic,
            },
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, lo: f64, hi: f64) -> usize {
        let (lo, hi) = match kind {
            VarKind::Binary => (lo.max(0.0), hi.min(1.0)),
            VarKind::Continuous => (lo, hi),
        };
        debug_assert!(lo <= hi, "empty variable domain");
        self.vars.push(MilpVar {
            name: name.into(),
            kind,
            lo,
            hi,
        });
        self.vars.len() - 1
    }

    /// Adds a constraint, merging repeated variables and dropping zero terms.
    pub fn add_constraint(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, sense: Sense, rhs: f64) {
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (v, c) in terms {
            debug_assert!(v < self.vars.len(), "constraint references undeclared variable");
            match merged.iter_mut().find(|(w, _)| *w == v) {
                Some(t) => t.1 += c,
                None => merged.push((v, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        self.constraints.push(LinConstraint { terms: merged, sense, rhs });
    }

    pub fn num_binaries(&self) -> usize {
        self.vars.iter().filter(|v| v.kind == VarKind::Binary).count()
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.objective.iter().map(|&(v, c)| c * values[v]).sum()
    }

    /// Largest bound, integrality or constraint violation of `values`.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (var, &x) in self.vars.iter().zip(values) {
            worst = worst.max(var.lo - x).max(x - var.hi);
            if var.kind == VarKind::Binary {
                worst = worst.max((x - x.round()).abs());
            }
        }
        self.constraints.iter().fold(worst, |w, c| w.max(c.violation(values)))
    }

    pub fn is_feasible(&self, values: &[f64], tol: f64) -> bool {
        values.len() == self.vars.len() && self.max_violation(values) <= tol
    }

    /// Input copies stored in an assignment.
    pub fn read_inputs(&self, values: &[f64]) -> Vec<Vec<f64>> {
        self.var_map
            .inputs
            .iter()
            .map(|ids| ids.iter().map(|&v| values[v]).collect())
            .collect()
    }

    /// Full MILP assignment induced by concrete inputs (one per copy): exact
    /// activations, the cell containing each pre-activation and its
    /// interpolation weights. Feasible whenever the inputs satisfy the
    /// metric constraints and domain.
    pub fn lift(&self, inputs: &[Vec<f64>]) -> Vec<f64> {
        let mut values: Vec<f64> = self.vars.iter().map(|v| v.lo).collect();
        for (ids, x) in self.var_map.inputs.iter().zip(inputs) {
            for (&v, &xi) in ids.iter().zip(x) {
                values[v] = xi;
            }
        }
        for block in &self.var_map.blocks {
            let Ok(trace) = block.net.trace(&inputs[block.copy]) else {
                continue;
            };
            for (l, layer) in block.neurons.iter().enumerate() {
                for (j, nv) in layer.iter().enumerate() {
                    let grid = &block.grids[l][j];
                    let iv = grid.interval();
                    let phi = trace.pre[l][j].clamp(iv.lo, iv.hi);
                    values[nv.phi] = phi;
                    values[nv.zeta] = trace.post[l][j];
                    if grid.is_degenerate() {
                        continue;
                    }
                    let (cell, wl, wr) = grid.weights(phi).expect("phi clamped into grid range");
                    for &e in &nv.eta {
                        values[e] = 0.0;
                    }
                    for &y in &nv.y {
                        values[y] = 0.0;
                    }
                    values[nv.eta[cell]] = wl;
                    values[nv.eta[cell + 1]] = wr;
                    values[nv.y[cell]] = 1.0;
                }
            }
        }
        if let Some(d) = self.exact_delta(inputs) {
            values[self.var_map.delta] = d;
        }
        values
    }

    /// `δ` recomputed from exact forward passes of the encoded model.
    pub fn exact_delta(&self, inputs: &[Vec<f64>]) -> Option<f64> {
        let model = self.var_map.blocks.first()?;
        match &self.var_map.objective {
            Objective::Pair => {
                let a = model.net.forward(&inputs[0]).ok()?;
                let b = model.net.forward(&inputs[1]).ok()?;
                Some(a - b)
            }
            Objective::Local { f_fixed, direction, .. } => {
                Some(direction * (f_fixed - model.net.forward(&inputs[0]).ok()?))
            }
            Objective::Generic => None,
        }
    }

    /// Primal heuristic: round the integer inputs of an LP point, keep its
    /// continuous inputs, and lift. Returns the assignment if it is feasible.
    pub fn complete(&self, lp_values: &[f64], tol: f64) -> Option<Vec<f64>> {
        if self.var_map.blocks.is_empty() {
            return None;
        }
        let mut inputs = self.read_inputs(lp_values);
        for (ids, x) in self.var_map.inputs.iter().zip(inputs.iter_mut()) {
            for (&v, xi) in ids.iter().zip(x.iter_mut()) {
                let var = &self.vars[v];
                *xi = xi.clamp(var.lo, var.hi);
                if var.kind == VarKind::Binary {
                    *xi = xi.round();
                }
            }
        }
        let values = self.lift(&inputs);
        self.is_feasible(&values, tol).then_some(values)
    }

    /// CPLEX LP text format.
    pub fn to_lp_format(&self) -> String {
        let mut out = String::new();
        let term = |out: &mut String, c: f64, v: usize| {
            let sign = if c < 0.0 { '-' } else { '+' };
            let _ = write!(out, " {sign} {} {}", c.abs(), self.vars[v].name);
        };
        out.push_str("\\ ifcert MILP\nMaximize\n obj:");
        for &(v, c) in &self.objective {
            term(&mut out, c, v);
        }
        out.push_str("\nSubject To\n");
        for (i, con) in self.constraints.iter().enumerate() {
            let _ = write!(out, " c{i}:");
            if con.terms.is_empty() {
                let _ = write!(out, " 0 {}", self.vars[0].name);
            }
            for &(v, c) in &con.terms {
                term(&mut out, c, v);
            }
            let op = match con.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            let _ = writeln!(out, " {op} {}", con.rhs);
        }
        out.push_str("Bounds\n");
        for v in &self.vars {
            let _ = writeln!(out, " {} <= {} <= {}", v.lo, v.name, v.hi);
        }
        out.push_str("Binaries\n");
        for v in self.vars.iter().filter(|v| v.kind == VarKind::Binary) {
            let _ = writeln!(out, " {}", v.name);
        }
        out.push_str("End\n");
        out
    }
}

/// Emits the SOS2 encoding of `grid` linking existing variables `phi` and `zeta`.
pub fn encode_neuron(grid: &PwlGrid, phi: usize, zeta: usize, problem: &mut MilpProblem) -> NeuronVars {
    let prefix = problem.vars[zeta].name.clone();
    if grid.is_degenerate() {
        problem.add_constraint([(phi, 1.0)], Sense::Eq, grid.points()[0]);
        problem.add_constraint([(zeta, 1.0)], Sense::Eq, grid.lower()[0]);
        return NeuronVars {
            phi,
            zeta,
            eta: Vec::new(),
            y: Vec::new(),
        };
    }
    let m = grid.cells();
    let eta: Vec<usize> = (0..=m)
        .map(|l| problem.add_var(format!("{prefix}_eta{l}"), VarKind::Continuous, 0.0, 1.0))
        .collect();
    let y: Vec<usize> = (0..m)
        .map(|l| problem.add_var(format!("{prefix}_y{l}"), VarKind::Binary, 0.0, 1.0))
        .collect();
    problem.add_constraint(y.iter().map(|&v| (v, 1.0)), Sense::Eq, 1.0);
    problem.add_constraint(eta.iter().map(|&v| (v, 1.0)), Sense::Eq, 1.0);
    problem.add_constraint(
        std::iter::once((phi, 1.0)).chain(eta.iter().zip(grid.points()).map(|(&v, &p)| (v, -p))),
        Sense::Eq,
        0.0,
    );
    for l in 0..m {
        problem.add_constraint([(y[l], 1.0), (eta[l], -1.0), (eta[l + 1], -1.0)], Sense::Le, 0.0);
    }
    // η_l ≤ y_{l−1} + y_l: redundant once y is integral, but it ties η to the
    // active cell in the LP relaxation so fixing indicators prunes η too
    for l in 0..=m {
        let cells = [l.checked_sub(1), (l < m).then_some(l)];
        let terms = std::iter::once((eta[l], 1.0)).chain(cells.into_iter().flatten().map(|c| (y[c], -1.0)));
        problem.add_constraint(terms, Sense::Le, 0.0);
    }
    problem.add_constraint(
        std::iter::once((zeta, -1.0)).chain(eta.iter().zip(grid.lower()).map(|(&v, &c)| (v, c))),
        Sense::Le,
        0.0,
    );
    problem.add_constraint(
        std::iter::once((zeta, 1.0)).chain(eta.iter().zip(grid.upper()).map(|(&v, &c)| (v, -c))),
        Sense::Le,
        0.0,
    );
    NeuronVars { phi, zeta, eta, y }
}

fn check_relaxation(net: &NeuralNet, relax: &NetRelaxation) -> Result<(), EncodeError> {
    let ok = relax.grids.len() == net.layers().len()
        && net.layers().iter().zip(&relax.grids).all(|(l, g)| l.output_width() == g.len());
    ok.then_some(()).ok_or(EncodeError::RelaxationShape)
}

fn add_inputs(problem: &mut MilpProblem, schema: &FeatureSchema, tag: &str) -> Vec<usize> {
    let domain = schema.input_box();
    let ids: Vec<usize> = (0..schema.len())
        .map(|i| {
            let kind = if schema.is_categorical(i) { VarKind::Binary } else { VarKind::Continuous };
            problem.add_var(format!("{tag}x{i}"), kind, domain[i].lo, domain[i].hi)
        })
        .collect();
    for (_, cols) in schema.groups() {
        problem.add_constraint(cols.iter().map(|&c| (ids[c], 1.0)), Sense::Eq, 1.0);
    }
    ids
}

/// Encodes one copy of `net` on input variables `inputs`.
fn add_network(
    problem: &mut MilpProblem,
    net: &NeuralNet,
    relax: &NetRelaxation,
    inputs: &[usize],
    copy: usize,
    tag: &str,
) -> NetBlock {
    let mut neurons: Vec<Vec<NeuronVars>> = Vec::with_capacity(net.layers().len());
    for (l, (layer, grids)) in net.layers().iter().zip(&relax.grids).enumerate() {
        let prev: Vec<usize> = match neurons.last() {
            Some(p) => p.iter().map(|n| n.zeta).collect(),
            None => inputs.to_vec(),
        };
        let mut row = Vec::with_capacity(grids.len());
        for (j, grid) in grids.iter().enumerate() {
            let iv = grid.interval();
            let phi = problem.add_var(format!("{tag}l{l}_phi{j}"), VarKind::Continuous, iv.lo, iv.hi);
            let zeta = problem.add_var(
                format!("{tag}l{l}_z{j}"),
                VarKind::Continuous,
                grid.min_lower(),
                grid.max_upper(),
            );
            problem.add_constraint(
                std::iter::once((phi, 1.0)).chain(prev.iter().zip(&layer.weights[j]).map(|(&v, &w)| (v, -w))),
                Sense::Eq,
                layer.biases[j],
            );
            row.push(encode_neuron(grid, phi, zeta, problem));
        }
        neurons.push(row);
    }
    NetBlock {
        copy,
        net: net.clone(),
        grids: relax.grids.clone(),
        neurons,
    }
}

fn output_range(relax: &NetRelaxation) -> Interval {
    let g = &relax.grids.last().expect("network has layers")[0];
    Interval::new(g.min_lower(), g.max_upper())
}

struct MetricEncoding {
    set: PairConstraintSet,
    embedding: Option<(NeuralNet, NetRelaxation)>,
}

fn prepare_metric(
    net: &NeuralNet,
    metric: &FairnessMetric,
    eps: f64,
    schema: &FeatureSchema,
    grid_m: usize,
) -> crate::Result<MetricEncoding> {
    if metric.dim() != net.input_dim() {
        return Err(EncodeError::MetricDimension {
            metric: metric.dim(),
            net: net.input_dim(),
        }
        .into());
    }
    if schema.len() != net.input_dim() {
        return Err(EncodeError::SchemaDimension {
            schema: schema.len(),
            net: net.input_dim(),
        }
        .into());
    }
    let set = pair_constraints(metric, eps)?;
    let embedding = match metric {
        FairnessMetric::Embedded { embedding, .. } => {
            Some((embedding.clone(), NetRelaxation::new(embedding, &schema.input_box(), grid_m)?))
        }
        _ => None,
    };
    Ok(MetricEncoding { set, embedding })
}

/// Two-copy problem: maximize `δ = f(x′) − f(x″)` over pairs within the
/// metric's linear relaxation of `d(x′, x″) ≤ ε`.
pub fn encode_pair_problem(
    net: &NeuralNet,
    relax: &NetRelaxation,
    metric: &FairnessMetric,
    eps: f64,
    schema: &FeatureSchema,
) -> crate::Result<MilpProblem> {
    net.ensure_scalar()?;
    check_relaxation(net, relax)?;
    let me = prepare_metric(net, metric, eps, schema, relax.grid_m)?;
    let mut p = MilpProblem::new();
    let x1 = add_inputs(&mut p, schema, "a_");
    let x2 = add_inputs(&mut p, schema, "b_");
    let mut blocks = vec![
        add_network(&mut p, net, relax, &x1, 0, "a_"),
        add_network(&mut p, net, relax, &x2, 1, "b_"),
    ];
    let (v1, v2) = match (&me.set.space, &me.embedding) {
        (ConstraintSpace::Embedding, Some((emb, erelax))) => {
            let e1 = add_network(&mut p, emb, erelax, &x1, 0, "ea_");
            let e2 = add_network(&mut p, emb, erelax, &x2, 1, "eb_");
            let v = (e1.outputs(), e2.outputs());
            blocks.push(e1);
            blocks.push(e2);
            v
        }
        _ => (x1.clone(), x2.clone()),
    };
    for c in &me.set.constraints {
        let terms: Vec<(usize, f64)> = c
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .flat_map(|(i, &a)| [(v1[i], a), (v2[i], -a)])
            .collect();
        p.add_constraint(terms.clone(), Sense::Le, c.hi);
        p.add_constraint(terms, Sense::Ge, c.lo);
    }
    let out = output_range(relax);
    let z1 = blocks[0].outputs()[0];
    let z2 = blocks[1].outputs()[0];
    let delta = p.add_var("delta", VarKind::Continuous, out.lo - out.hi, out.hi - out.lo);
    p.add_constraint([(delta, 1.0), (z1, -1.0), (z2, 1.0)], Sense::Eq, 0.0);
    p.objective = vec![(delta, 1.0)];
    p.var_map = VarMap {
        inputs: vec![x1, x2],
        delta,
        blocks,
        objective: Objective::Pair,
    };
    Ok(p)
}

/// Single-copy problem around a fixed point: maximize
/// `direction · (f(x_fixed) − f(x))` over `x` within the relaxed ε-ball.
pub fn encode_local_problem(
    net: &NeuralNet,
    relax: &NetRelaxation,
    metric: &FairnessMetric,
    eps: f64,
    x_fixed: &[f64],
    schema: &FeatureSchema,
    direction: f64,
) -> crate::Result<MilpProblem> {
    net.ensure_scalar()?;
    check_relaxation(net, relax)?;
    if direction != 1.0 && direction != -1.0 {
        return Err(EncodeError::Direction(direction).into());
    }
    if x_fixed.len() != net.input_dim() {
        return Err(EncodeError::PointDimension {
            expected: net.input_dim(),
            got: x_fixed.len(),
        }
        .into());
    }
    let me = prepare_metric(net, metric, eps, schema, relax.grid_m)?;
    for (index, (iv, &value)) in schema.input_box().iter().zip(x_fixed).enumerate() {
        if !(iv.contains(value)) {
            return Err(EncodeError::PointOutOfDomain {
                index,
                value,
                lo: iv.lo,
                hi: iv.hi,
            }
            .into());
        }
    }
    let mut p = MilpProblem::new();
    let x = add_inputs(&mut p, schema, "");
    let mut blocks = vec![add_network(&mut p, net, relax, &x, 0, "")];
    let (vars, anchor) = match (&me.set.space, &me.embedding) {
        (ConstraintSpace::Embedding, Some((emb, erelax))) => {
            let e = add_network(&mut p, emb, erelax, &x, 0, "e_");
            let v = e.outputs();
            blocks.push(e);
            (v, emb.forward_vec(x_fixed)?)
        }
        _ => (x.clone(), x_fixed.to_vec()),
    };
    for c in &me.set.constraints {
        let shift: f64 = c.coeffs.iter().zip(&anchor).map(|(a, v)| a * v).sum();
        let terms: Vec<(usize, f64)> = c
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(i, &a)| (vars[i], a))
            .collect();
        p.add_constraint(terms.clone(), Sense::Le, c.hi + shift);
        p.add_constraint(terms, Sense::Ge, c.lo + shift);
    }
    let f_fixed = net.forward(x_fixed)?;
    let out = output_range(relax);
    let (lo, hi) = if direction > 0.0 {
        (f_fixed - out.hi, f_fixed - out.lo)
    } else {
        (out.lo - f_fixed, out.hi - f_fixed)
    };
    let z = blocks[0].outputs()[0];
    let delta = p.add_var("delta", VarKind::Continuous, lo.min(0.0), hi.max(0.0));
    // δ + direction·ζ = direction·f(x_fixed)
    p.add_constraint([(delta, 1.0), (z, direction)], Sense::Eq, direction * f_fixed);
    p.objective = vec![(delta, 1.0)];
    p.var_map = VarMap {
        inputs: vec![x],
        delta,
        blocks,
        objective: Objective::Local {
            x_fixed: x_fixed.to_vec(),
            f_fixed,
            direction,
        },
    };
    Ok(p)
}
