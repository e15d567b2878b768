//! Best-first branch-and-bound over the warm-started simplex.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

use super::lp::{LpSolver, LpStatus};
use super::{SolveConfig, SolveError, SolveStatus, INTEGRALITY_TOL};
use crate::encode::{MilpProblem, VarKind};

/// Assignments closer than this to feasibility are accepted as incumbents.
const CANDIDATE_TOL: f64 = 1e-6;

/// Anytime bounds reported to the progress callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub elapsed: f64,
    pub delta_lower: f64,
    pub delta_upper: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpOutcome {
    pub status: SolveStatus,
    /// Best value actually realised by a feasible point. For encoded networks
    /// this is recomputed by exact forward passes, never the PWL surrogate.
    pub delta_lower: f64,
    pub delta_upper: f64,
    /// Best MILP objective among incumbents (drives pruning).
    pub incumbent_objective: f64,
    /// Assignment realising `delta_lower`.
    pub best_solution: Option<Vec<f64>>,
    pub nodes: usize,
    pub wall_time: f64,
}

struct Node {
    bound: f64,
    seq: u64,
    fixings: Vec<(usize, f64)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: higher bound first, then older node first
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then(other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    problem: &'a MilpProblem,
    binaries: Vec<usize>,
    /// Cell indicators of each encoded neuron, in grid order.
    groups: Vec<Vec<usize>>,
    /// `(group, position)` of every binary that belongs to a group.
    group_of: HashMap<usize, (usize, usize)>,
    root: Vec<(f64, f64)>,
    incumbent: f64,
    achieved: f64,
    best: Option<Vec<f64>>,
}

impl Search<'_> {
    fn apply(&self, lp: &mut LpSolver, fixings: &[(usize, f64)]) {
        for (&b, &(lo, hi)) in self.binaries.iter().zip(&self.root) {
            lp.set_bounds(b, lo, hi);
        }
        for &(v, val) in fixings {
            lp.set_bounds(v, val, val);
        }
    }

    fn offer(&mut self, mut values: Vec<f64>) -> bool {
        for &b in &self.binaries {
            values[b] = values[b].round();
        }
        if self.problem.max_violation(&values) > CANDIDATE_TOL {
            return false;
        }
        let obj = self.problem.objective_value(&values);
        let achieved = self
            .problem
            .exact_delta(&self.problem.read_inputs(&values))
            .unwrap_or(obj);
        let mut improved = false;
        if obj > self.incumbent {
            self.incumbent = obj;
            improved = true;
        }
        if achieved > self.achieved {
            self.achieved = achieved;
            self.best = Some(values);
            improved = true;
        }
        improved
    }

    fn is_integral(&self, values: &[f64]) -> bool {
        self.binaries
            .iter()
            .all(|&b| (values[b] - values[b].round()).abs() <= INTEGRALITY_TOL)
    }

    /// Child fixings for branching on `var`. A cell indicator splits its
    /// neuron's grid in two halves of roughly equal LP mass (every indicator
    /// on one side fixed to zero); any other binary is fixed to 0 and 1.
    fn children(&self, var: usize, values: &[f64]) -> Vec<Vec<(usize, f64)>> {
        if let Some(&(g, _)) = self.group_of.get(&var) {
            let ys = &self.groups[g];
            let support: Vec<usize> = (0..ys.len()).filter(|&k| values[ys[k]] > INTEGRALITY_TOL).collect();
            if let (Some(&first), Some(&last)) = (support.first(), support.last()) {
                if first < last {
                    let mut mass = 0.0;
                    let mut split = last;
                    for (k, &y) in ys.iter().enumerate() {
                        mass += values[y];
                        if mass >= 0.5 {
                            split = k + 1;
                            break;
                        }
                    }
                    let split = split.clamp(first + 1, last);
                    return vec![
                        ys[split..].iter().map(|&y| (y, 0.0)).collect(),
                        ys[..split].iter().map(|&y| (y, 0.0)).collect(),
                    ];
                }
            }
        }
        vec![vec![(var, 0.0)], vec![(var, 1.0)]]
    }

    /// Most fractional binary, ties to the lowest id.
    fn branching_var(&self, values: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &b in &self.binaries {
            let f = values[b] - values[b].floor();
            let score = f.min(1.0 - f);
            if score > INTEGRALITY_TOL && best.map_or(true, |(_, s)| score > s) {
                best = Some((b, score));
            }
        }
        best.map(|(b, _)| b)
    }
}

/// Upper bound on the objective from variable bounds alone.
fn trivial_bound(problem: &MilpProblem) -> f64 {
    problem
        .objective
        .iter()
        .map(|&(v, c)| if c >= 0.0 { c * problem.vars[v].hi } else { c * problem.vars[v].lo })
        .sum()
}

/// Maximizes the problem objective.
///
/// Node selection is best-first on the parent LP bound (FIFO among ties);
/// branching picks the most fractional binary, splitting the whole cell
/// range when it is a neuron's cell indicator. Incumbents come from integral
/// LP solutions, from lifting the LP inputs through the encoded networks, and
/// otherwise from rounding the binaries and re-solving. Nodes whose LP fails
/// numerically keep their bound in `δ_U`.
pub fn branch_and_bound(
    problem: &MilpProblem,
    cfg: &SolveConfig,
    on_progress: &mut dyn FnMut(&Progress),
) -> Result<MilpOutcome, SolveError> {
    cfg.validate()?;
    let start = Instant::now();
    let deadline = start + cfg.time_cutoff;
    let mut lp = LpSolver::new(problem);
    lp.set_deadline(Some(deadline));
    let binaries: Vec<usize> = (0..problem.vars.len())
        .filter(|&j| problem.vars[j].kind == VarKind::Binary)
        .collect();
    let root = binaries.iter().map(|&b| (problem.vars[b].lo, problem.vars[b].hi)).collect();
    let groups: Vec<Vec<usize>> = problem
        .var_map
        .blocks
        .iter()
        .flat_map(|b| b.neurons.iter().flatten())
        .filter(|n| n.y.len() > 1)
        .map(|n| n.y.clone())
        .collect();
    let group_of = groups
        .iter()
        .enumerate()
        .flat_map(|(g, ys)| ys.iter().enumerate().map(move |(k, &y)| (y, (g, k))))
        .collect();
    let mut search = Search {
        problem,
        binaries,
        groups,
        group_of,
        root,
        incumbent: f64::NEG_INFINITY,
        achieved: f64::NEG_INFINITY,
        best: None,
    };
    let has_networks = !problem.var_map.blocks.is_empty();

    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: trivial_bound(problem),
        seq: 0,
        fixings: Vec::new(),
    });
    let mut seq = 1u64;
    let mut nodes = 0usize;
    let mut unresolved = f64::NEG_INFINITY;
    let mut reported = (f64::NEG_INFINITY, f64::INFINITY);
    let mut status = SolveStatus::Converged;

    let mut report = |search: &Search, upper: f64, nodes: usize, reported: &mut (f64, f64)| {
        let upper = upper.min(reported.1);
        if search.achieved > reported.0 || upper < reported.1 {
            *reported = (reported.0.max(search.achieved), upper);
            on_progress(&Progress {
                elapsed: start.elapsed().as_secs_f64(),
                delta_lower: reported.0,
                delta_upper: reported.1,
                nodes,
            });
        }
    };

    while let Some(node) = heap.pop() {
        let upper = node.bound.max(search.incumbent).max(unresolved);
        report(&search, upper, nodes, &mut reported);
        if upper - search.incumbent <= cfg.gap_tol {
            heap.push(node);
            break;
        }
        if node.bound <= search.incumbent {
            continue;
        }
        if Instant::now() >= deadline {
            heap.push(node);
            status = SolveStatus::CutoffReached;
            break;
        }
        if cfg.node_limit.is_some_and(|limit| nodes >= limit) {
            heap.push(node);
            status = SolveStatus::NodeLimit;
            break;
        }
        search.apply(&mut lp, &node.fixings);
        let sol = match lp.solve() {
            Ok(s) => s,
            Err(SolveError::Timeout) => {
                heap.push(node);
                status = SolveStatus::CutoffReached;
                break;
            }
            Err(SolveError::Unbounded) => return Err(SolveError::Unbounded),
            Err(_) => {
                nodes += 1;
                unresolved = unresolved.max(node.bound);
                continue;
            }
        };
        nodes += 1;
        match sol.status {
            LpStatus::Infeasible => continue,
            LpStatus::Unbounded => return Err(SolveError::Unbounded),
            LpStatus::Optimal => {}
        }
        let bound = sol.objective.min(node.bound);
        if search.is_integral(&sol.values) {
            search.offer(sol.values);
            continue;
        }
        let completed = if has_networks {
            problem.complete(&sol.values, CANDIDATE_TOL).map(|v| search.offer(v)).is_some()
        } else {
            false
        };
        if !completed {
            let rounded: Vec<(usize, f64)> = search.binaries.iter().map(|&b| (b, sol.values[b].round())).collect();
            search.apply(&mut lp, &rounded);
            match lp.solve() {
                Ok(r) if r.status == LpStatus::Optimal => {
                    search.offer(r.values);
                }
                Err(SolveError::Timeout) => {
                    heap.push(Node { bound, ..node });
                    status = SolveStatus::CutoffReached;
                    break;
                }
                _ => {}
            }
        }
        if bound <= search.incumbent {
            continue;
        }
        let Some(var) = search.branching_var(&sol.values) else {
            continue;
        };
        for extra in search.children(var, &sol.values) {
            let mut fixings = node.fixings.clone();
            fixings.extend(extra);
            heap.push(Node { bound, seq, fixings });
            seq += 1;
        }
    }

    let open = heap.peek().map_or(f64::NEG_INFINITY, |n| n.bound);
    let upper = open.max(search.incumbent).max(unresolved).min(reported.1);
    if search.best.is_none() && upper == f64::NEG_INFINITY {
        status = SolveStatus::Infeasible;
    }
    report(&search, upper, nodes, &mut reported);
    Ok(MilpOutcome {
        status,
        delta_lower: search.achieved,
        delta_upper: upper.max(search.achieved),
        incumbent_objective: search.incumbent,
        best_solution: search.best,
        nodes,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
