//! Bounded-variable primal simplex on a dense tableau.
//!
//! Every row `i` gets a logical variable `s_i` with `a_iᵀx − s_i = 0`, so the
//! right-hand sides live in the bounds of the logicals and all variables are
//! boxed. The tableau `T = B⁻¹[A | −I]` is kept explicitly; pivots only touch
//! the non-zeros of the pivot row and column, which keeps them cheap on the
//! sparse problems produced by the encoder. Phase 1 minimises the sum of
//! bound infeasibilities of the basic variables (composite objective), so a
//! solver can be warm-started after arbitrary bound changes.

use std::time::Instant;

use super::SolveError;
use crate::encode::{MilpProblem, Sense};

const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const DROP_TOL: f64 = 1e-14;
const SINGULAR_TOL: f64 = 1e-11;
const RESIDUAL_TOL: f64 = 1e-7;
const BLAND_AFTER: usize = 1000;
const REFACTOR_EVERY: usize = 3000;
const RECOMPUTE_EVERY: usize = 100;
const NONBASIC: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub objective: f64,
    /// Structural variable values (empty unless optimal).
    pub values: Vec<f64>,
}

/// Warm-startable LP solver for the continuous relaxation of a [`MilpProblem`].
#[derive(Debug, Clone)]
pub struct LpSolver {
    n: usize,
    m: usize,
    cols: usize,
    rows_a: Vec<Vec<(usize, f64)>>,
    tab: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    x: Vec<f64>,
    head: Vec<usize>,
    row_of: Vec<usize>,
    cost: Vec<f64>,
    since_refactor: usize,
    deadline: Option<Instant>,
    /// Total pivots performed so far.
    pub pivots: usize,
}

impl LpSolver {
    pub fn new(problem: &MilpProblem) -> Self {
        let n = problem.vars.len();
        let m = problem.constraints.len();
        let cols = n + m;
        let mut lo: Vec<f64> = problem.vars.iter().map(|v| v.lo).collect();
        let mut hi: Vec<f64> = problem.vars.iter().map(|v| v.hi).collect();
        let rows_a: Vec<Vec<(usize, f64)>> = problem.constraints.iter().map(|c| c.terms.clone()).collect();
        for c in &problem.constraints {
            let (amin, amax) = c.terms.iter().fold((0.0, 0.0), |(a, b), &(v, k)| {
                if k >= 0.0 {
                    (a + k * lo[v], b + k * hi[v])
                } else {
                    (a + k * hi[v], b + k * lo[v])
                }
            });
            let (l, h) = match c.sense {
                Sense::Eq => (c.rhs, c.rhs),
                Sense::Le => (amin.min(c.rhs), c.rhs),
                Sense::Ge => (c.rhs, amax.max(c.rhs)),
            };
            lo.push(l);
            hi.push(h);
        }
        let mut cost = vec![0.0; cols];
        for &(v, c) in &problem.objective {
            cost[v] += c;
        }
        let x: Vec<f64> = (0..cols).map(|j| if j < n { lo[j] } else { 0.0 }).collect();
        let mut s = Self {
            n,
            m,
            cols,
            rows_a,
            tab: vec![0.0; m * cols],
            lo,
            hi,
            x,
            head: (n..cols).collect(),
            row_of: (0..cols).map(|j| if j < n { NONBASIC } else { j - n }).collect(),
            cost,
            since_refactor: 0,
            deadline: None,
            pivots: 0,
        };
        s.load_slack_basis();
        s
    }

    fn load_slack_basis(&mut self) {
        self.tab.fill(0.0);
        for (i, row) in self.rows_a.iter().enumerate() {
            for &(j, a) in row {
                self.tab[i * self.cols + j] = -a;
            }
            self.tab[i * self.cols + self.n + i] = 1.0;
        }
    }

    pub fn num_structural(&self) -> usize {
        self.n
    }

    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.lo[j], self.hi[j])
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.lo[j] = lo;
        self.hi[j] = hi;
    }

    /// Abort solves that run past `deadline` with [`SolveError::Timeout`].
    pub fn set_deadline(&mut self, deadline: Option<Instant>) {
        self.deadline = deadline;
    }

    #[inline]
    fn t(&self, i: usize, j: usize) -> f64 {
        self.tab[i * self.cols + j]
    }

    /// Snaps nonbasic variables onto a bound and recomputes basic values.
    fn sync_values(&mut self) {
        for j in 0..self.cols {
            if self.row_of[j] == NONBASIC {
                let (l, h) = (self.lo[j], self.hi[j]);
                if self.x[j] != l && self.x[j] != h {
                    self.x[j] = if (self.x[j] - l).abs() <= (self.x[j] - h).abs() { l } else { h };
                }
            }
        }
        for i in 0..self.m {
            let row = &self.tab[i * self.cols..(i + 1) * self.cols];
            let mut v = 0.0;
            for (j, &t) in row.iter().enumerate() {
                if t != 0.0 && self.row_of[j] == NONBASIC {
                    v -= t * self.x[j];
                }
            }
            self.x[self.head[i]] = v;
        }
    }

    /// Rebuilds the tableau from the original rows for the current basis,
    /// replacing numerically dependent basic columns by logicals.
    fn refactor(&mut self) {
        let cols = self.cols;
        let mut work = vec![0.0; self.m * cols];
        for (i, row) in self.rows_a.iter().enumerate() {
            for &(j, a) in row {
                work[i * cols + j] = a;
            }
            work[i * cols + self.n + i] = -1.0;
        }
        let basic: Vec<usize> = self.head.clone();
        let mut assigned = vec![false; self.m];
        let mut new_head = vec![NONBASIC; self.m];
        let mut dropped = Vec::new();
        let eliminate = |work: &mut Vec<f64>, r: usize, c: usize| {
            let piv = work[r * cols + c];
            for j in 0..cols {
                work[r * cols + j] /= piv;
            }
            work[r * cols + c] = 1.0;
            let pivot_row: Vec<(usize, f64)> = (0..cols)
                .filter_map(|j| {
                    let v = work[r * cols + j];
                    (v != 0.0).then_some((j, v))
                })
                .collect();
            for i in 0..work.len() / cols {
                if i == r {
                    continue;
                }
                let f = work[i * cols + c];
                if f == 0.0 {
                    continue;
                }
                for &(j, v) in &pivot_row {
                    let e = &mut work[i * cols + j];
                    *e -= f * v;
                    if e.abs() < DROP_TOL {
                        *e = 0.0;
                    }
                }
                work[i * cols + c] = 0.0;
            }
        };
        for &c in &basic {
            let best = (0..self.m)
                .filter(|&i| !assigned[i])
                .max_by(|&a, &b| work[a * cols + c].abs().total_cmp(&work[b * cols + c].abs()));
            match best {
                Some(r) if work[r * cols + c].abs() > SINGULAR_TOL => {
                    eliminate(&mut work, r, c);
                    assigned[r] = true;
                    new_head[r] = c;
                }
                _ => dropped.push(c),
            }
        }
        for r in 0..self.m {
            if assigned[r] {
                continue;
            }
            // pick the best remaining nonbasic column for this row, logicals first
            let in_basis = |j: usize| new_head.contains(&j);
            let c = (self.n..cols)
                .chain(0..self.n)
                .filter(|&j| !in_basis(j))
                .max_by(|&a, &b| {
                    work[r * cols + a]
                        .abs()
                        .total_cmp(&work[r * cols + b].abs())
                        .then(b.cmp(&a))
                })
                .expect("more columns than rows");
            eliminate(&mut work, r, c);
            assigned[r] = true;
            new_head[r] = c;
        }
        self.tab = work;
        self.head = new_head;
        self.row_of.fill(NONBASIC);
        for (i, &c) in self.head.iter().enumerate() {
            self.row_of[c] = i;
        }
        for c in dropped {
            if self.row_of[c] == NONBASIC {
                self.x[c] = self.lo[c];
            }
        }
        self.since_refactor = 0;
        self.sync_values();
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let cols = self.cols;
        let piv = self.t(r, q);
        let mut pivot_row: Vec<(usize, f64)> = Vec::new();
        for j in 0..cols {
            let e = &mut self.tab[r * cols + j];
            if *e != 0.0 {
                *e /= piv;
                pivot_row.push((j, *e));
            }
        }
        self.tab[r * cols + q] = 1.0;
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tab[i * cols + q];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.tab[i * cols..(i + 1) * cols];
            for &(j, v) in &pivot_row {
                let e = &mut row[j];
                *e -= f * v;
                if e.abs() < DROP_TOL {
                    *e = 0.0;
                }
            }
            row[q] = 0.0;
        }
        let leaving = self.head[r];
        self.row_of[leaving] = NONBASIC;
        self.head[r] = q;
        self.row_of[q] = r;
        self.pivots += 1;
        self.since_refactor += 1;
    }

    /// Solves the relaxation under the current bounds, starting from the
    /// current basis.
    pub fn solve(&mut self) -> Result<LpSolution, SolveError> {
        if (0..self.cols).any(|j| self.lo[j] > self.hi[j]) {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                objective: f64::NEG_INFINITY,
                values: Vec::new(),
            });
        }
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor();
        } else {
            self.sync_values();
        }
        let mut repairs = 0;
        loop {
            let status = self.iterate()?;
            if status != LpStatus::Optimal {
                // an infeasibility verdict prunes a whole subtree, so it is
                // only trusted on a freshly factored tableau
                if self.since_refactor > 0 && repairs < 2 {
                    repairs += 1;
                    self.refactor();
                    continue;
                }
                return Ok(LpSolution {
                    status,
                    objective: f64::NEG_INFINITY,
                    values: Vec::new(),
                });
            }
            let residual = self.max_residual();
            if residual <= RESIDUAL_TOL {
                break;
            }
            if repairs == 2 {
                return Err(SolveError::Numerical(format!(
                    "row residual {residual:e} after refactorization ({} rows, {} columns)",
                    self.m, self.cols
                )));
            }
            repairs += 1;
            self.refactor();
        }
        let values: Vec<f64> = (0..self.n).map(|j| self.x[j].clamp(self.lo[j], self.hi[j])).collect();
        let objective = (0..self.n).map(|j| self.cost[j] * values[j]).sum();
        Ok(LpSolution {
            status: LpStatus::Optimal,
            objective,
            values,
        })
    }

    fn max_residual(&self) -> f64 {
        self.rows_a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let a: f64 = row.iter().map(|&(j, c)| c * self.x[j]).sum();
                (a - self.x[self.n + i]).abs()
            })
            .fold(0.0, f64::max)
    }

    fn iterate(&mut self) -> Result<LpStatus, SolveError> {
        let limit = 50 * (self.cols + self.m) + 10_000;
        let mut degenerate = 0usize;
        let mut d = vec![0.0; self.cols];
        let mut weights: Vec<(usize, f64)> = Vec::new();
        for iter in 0.. {
            if iter > limit {
                return Err(SolveError::IterationLimit(limit));
            }
            if iter % 64 == 0 {
                if let Some(t) = self.deadline {
                    if Instant::now() >= t {
                        return Err(SolveError::Timeout);
                    }
                }
            }
            if iter > 0 && iter % RECOMPUTE_EVERY == 0 {
                self.sync_values();
            }
            // row weights of the current objective: phase 1 if any basic is infeasible
            weights.clear();
            for i in 0..self.m {
                let b = self.head[i];
                if self.x[b] < self.lo[b] - FEAS_TOL {
                    weights.push((i, 1.0));
                } else if self.x[b] > self.hi[b] + FEAS_TOL {
                    weights.push((i, -1.0));
                }
            }
            let phase1 = !weights.is_empty();
            if phase1 {
                d.fill(0.0);
            } else {
                d.copy_from_slice(&self.cost);
                for i in 0..self.m {
                    let c = self.cost[self.head[i]];
                    if c != 0.0 {
                        weights.push((i, c));
                    }
                }
            }
            for &(i, w) in &weights {
                let row = &self.tab[i * self.cols..(i + 1) * self.cols];
                for (dj, &t) in d.iter_mut().zip(row) {
                    if t != 0.0 {
                        *dj -= w * t;
                    }
                }
            }
            let bland = degenerate >= BLAND_AFTER;
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.cols {
                if self.row_of[j] != NONBASIC || self.lo[j] == self.hi[j] {
                    continue;
                }
                let dir = if self.x[j] <= self.lo[j] && d[j] > OPT_TOL {
                    1.0
                } else if self.x[j] >= self.hi[j] && d[j] < -OPT_TOL {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if entering.map_or(true, |(k, _)| d[j].abs() > d[k].abs()) {
                    entering = Some((j, dir));
                }
            }
            let Some((q, dir)) = entering else {
                return Ok(if phase1 { LpStatus::Infeasible } else { LpStatus::Optimal });
            };

            // Harris two-pass ratio test; rate[i] = d x_B[i] / d t
            let rate = |i: usize| -self.t(i, q) * dir;
            let limit_of = |i: usize, tol: f64| -> Option<f64> {
                let r = rate(i);
                if r.abs() <= PIVOT_TOL {
                    return None;
                }
                let b = self.head[i];
                let (x, l, h) = (self.x[b], self.lo[b], self.hi[b]);
                if x < l - FEAS_TOL {
                    (r > 0.0).then(|| (l - x + tol) / r)
                } else if x > h + FEAS_TOL {
                    (r < 0.0).then(|| (h - x - tol) / r)
                } else if r > 0.0 {
                    Some((h - x + tol) / r)
                } else {
                    Some((l - x - tol) / r)
                }
            };
            let mut bound = self.hi[q] - self.lo[q];
            for i in 0..self.m {
                if let Some(t) = limit_of(i, FEAS_TOL) {
                    bound = bound.min(t);
                }
            }
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                if let Some(t_exact) = limit_of(i, 0.0) {
                    if t_exact <= bound {
                        let better = match leave {
                            None => true,
                            Some((k, _)) if bland => self.head[i] < self.head[k],
                            Some((k, _)) => rate(i).abs() > rate(k).abs(),
                        };
                        if better {
                            leave = Some((i, t_exact.max(0.0)));
                        }
                    }
                }
            }
            let flip = self.hi[q] - self.lo[q];
            let step = match leave {
                Some((_, t)) if t < flip => t,
                _ => flip,
            };
            if !step.is_finite() {
                return Err(SolveError::Unbounded);
            }
            // bound the leaving variable lands on, judged before the move
            let target = match leave {
                Some((r, t)) if t < flip => {
                    let b = self.head[r];
                    let x = self.x[b];
                    Some(if rate(r) > 0.0 {
                        if x < self.lo[b] - FEAS_TOL { self.lo[b] } else { self.hi[b] }
                    } else if x > self.hi[b] + FEAS_TOL {
                        self.hi[b]
                    } else {
                        self.lo[b]
                    })
                }
                _ => None,
            };
            for i in 0..self.m {
                let t = self.t(i, q);
                if t != 0.0 {
                    self.x[self.head[i]] -= t * dir * step;
                }
            }
            if step <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            match (leave, target) {
                (Some((r, _)), Some(v)) => {
                    let b = self.head[r];
                    self.x[q] += dir * step;
                    self.x[b] = v;
                    self.pivot(r, q);
                }
                _ => {
                    self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                }
            }
        }
        unreachable!()
    }
}

/// Solves the continuous relaxation of `problem` from a slack basis.
pub fn solve_lp(problem: &MilpProblem) -> Result<LpSolution, SolveError> {
    LpSolver::new(problem).solve()
}
