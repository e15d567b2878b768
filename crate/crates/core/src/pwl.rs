//! Continuous piecewise-linear lower/upper bounds of an activation over a
//! pre-activation interval.
//!
//! The interval is cut into cells on which the activation is either convex
//! or concave. On a convex cell the chord through the endpoints is an upper
//! bound and the tangent at the cell midpoint a lower bound (mirrored on
//! concave cells). Each grid node keeps the minimum of the lower candidates
//! and the maximum of the upper candidates from its adjacent cells, so the
//! interpolated bounds are continuous and sandwich the activation everywhere.

use thiserror::Error;

use crate::bounds::{Interval, LayerBounds};
use crate::model::{Activation, Curvature, NeuralNet};

/// Cells per smooth neuron used unless configured otherwise.
pub const DEFAULT_GRID_M: usize = 32;
const CUBIC_WEIGHT: f64 = 0.6;

/// Quadrature steps per convex/concave piece when placing adaptive grid points.
const QUADRATURE_STEPS: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum PwlError {
    #[error("number of cells must be at least 1")]
    ZeroCells,
    #[error("invalid interval [{lo}, {hi}]")]
    BadInterval { lo: f64, hi: f64 },
    #[error("{phi} lies outside the grid interval [{lo}, {hi}]")]
    OutOfRange { phi: f64, lo: f64, hi: f64 },
    #[error("cell [{lo}, {hi}] contains a breakpoint of {activation}")]
    SpansBreakpoint {
        lo: f64,
        hi: f64,
        activation: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearPiece {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearPiece {
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    fn through(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let slope = (y1 - y0) / (x1 - x0);
        Self {
            slope,
            intercept: y0 - slope * x0,
        }
    }

    fn tangent(act: Activation, at: f64) -> Self {
        let slope = act.derivative(at);
        Self {
            slope,
            intercept: act.apply(at) - slope * at,
        }
    }
}

/// Chord/midpoint-tangent bounds `(lower, upper)` on a single cell.
pub fn cell_bounds(act: Activation, lo: f64, hi: f64) -> Result<(LinearPiece, LinearPiece), PwlError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(PwlError::BadInterval { lo, hi });
    }
    let curvature = act.curvature_on(lo, hi).ok_or(PwlError::SpansBreakpoint {
        lo,
        hi,
        activation: act.name(),
    })?;
    let chord = LinearPiece::through(lo, act.apply(lo), hi, act.apply(hi));
    let tangent = LinearPiece::tangent(act, 0.5 * (lo + hi));
    Ok(match curvature {
        Curvature::Linear => (chord, chord),
        Curvature::Convex => (tangent, chord),
        Curvature::Concave => (chord, tangent),
    })
}

/// Analytic error bounds `(e1, e2)` for a cell free of breakpoints.
///
/// `e1` bounds the tangent-side error and `e2` the chord-side error, with
/// `Δ` the cell width. The tangent bound takes the larger of the two cell
/// halves, `Δ/2 · max(|σ'(r) − σ'(c)|, |σ'(c) − σ'(l)|)`.
pub fn error_bounds(act: Activation, lo: f64, hi: f64) -> Result<(f64, f64), PwlError> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(PwlError::BadInterval { lo, hi });
    }
    if act.curvature_on(lo, hi).is_none() {
        return Err(PwlError::SpansBreakpoint {
            lo,
            hi,
            activation: act.name(),
        });
    }
    let delta = hi - lo;
    if delta == 0.0 {
        return Ok((0.0, 0.0));
    }
    let mid = lo + 0.5 * delta;
    let d = |x: f64| act.derivative(x);
    let e1 = 0.5 * delta * (d(hi) - d(mid)).abs().max((d(mid) - d(lo)).abs());
    let slope = (act.apply(lo + delta) - act.apply(lo)) / delta;
    let e2 = delta * (slope + d(lo));
    Ok((e1, e2))
}

/// Discretisation grid with PWL lower/upper values at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlGrid {
    activation: Activation,
    points: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PwlGrid {
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Number of cells `M` (0 for a degenerate single-point grid).
    pub fn cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.points.len() == 1
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.points[0], self.points[self.points.len() - 1])
    }

    /// Index `l` of the cell `[points[l], points[l+1]]` containing `phi`.
    pub fn locate(&self, phi: f64) -> Result<usize, PwlError> {
        let iv = self.interval();
        if !(phi >= iv.lo && phi <= iv.hi) {
            return Err(PwlError::OutOfRange {
                phi,
                lo: iv.lo,
                hi: iv.hi,
            });
        }
        if self.is_degenerate() {
            return Ok(0);
        }
        let idx = self.points.partition_point(|&p| p <= phi);
        Ok(idx.clamp(1, self.points.len() - 1) - 1)
    }

    /// Interpolation weights `(l, η_l, η_{l+1})` of `phi` in its cell.
    pub fn weights(&self, phi: f64) -> Result<(usize, f64, f64), PwlError> {
        let l = self.locate(phi)?;
        if self.is_degenerate() {
            return Ok((0, 1.0, 0.0));
        }
        let (a, b) = (self.points[l], self.points[l + 1]);
        let right = ((phi - a) / (b - a)).clamp(0.0, 1.0);
        Ok((l, 1.0 - right, right))
    }

    /// `(lb, ub)` with `lb ≤ σ(phi) ≤ ub`.
    pub fn eval(&self, phi: f64) -> Result<(f64, f64), PwlError> {
        let (l, wl, wr) = self.weights(phi)?;
        if self.is_degenerate() {
            return Ok((self.lower[0], self.upper[0]));
        }
        Ok((
            wl * self.lower[l] + wr * self.lower[l + 1],
            wl * self.upper[l] + wr * self.upper[l + 1],
        ))
    }

    pub fn min_lower(&self) -> f64 {
        self.lower.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_upper(&self) -> f64 {
        self.upper.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn build_grid(act: Activation, lo: f64, hi: f64, m: usize) -> Result<PwlGrid, PwlError> {
    if m < 1 {
        return Err(PwlError::ZeroCells);
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(PwlError::BadInterval { lo, hi });
    }
    if lo == hi {
        let v = act.apply(lo);
        return Ok(PwlGrid {
            activation: act,
            points: vec![lo],
            lower: vec![v],
            upper: vec![v],
        });
    }
    let points = grid_points(act, lo, hi, m);
    let n = points.len();
    let mut lower = vec![f64::INFINITY; n];
    let mut upper = vec![f64::NEG_INFINITY; n];
    for l in 0..n - 1 {
        let (a, b) = (points[l], points[l + 1]);
        let (lb, ub) = cell_bounds(act, a, b)?;
        lower[l] = lower[l].min(lb.eval(a));
        lower[l + 1] = lower[l + 1].min(lb.eval(b));
        upper[l] = upper[l].max(ub.eval(a));
        upper[l + 1] = upper[l + 1].max(ub.eval(b));
    }
    if act.is_piecewise_linear() {
        // chords through exact endpoint values: both bounds equal σ at nodes
        for (i, &p) in points.iter().enumerate() {
            lower[i] = act.apply(p);
            upper[i] = lower[i];
        }
    }
    Ok(PwlGrid {
        activation: act,
        points,
        lower,
        upper,
    })
}

/// Grid nodes: the interval ends, every breakpoint strictly inside, and
/// interior points distributing `m` cells over the convex/concave pieces.
fn grid_points(act: Activation, lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let mut cuts = vec![lo];
    cuts.extend(act.breakpoints().iter().copied().filter(|&b| lo < b && b < hi));
    cuts.push(hi);
    let pieces: Vec<(f64, f64)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();

    // curvature-driven placement for smooth activations, uniform otherwise;
    // also uniform if the curvature integral vanished numerically
    let tables: Option<Vec<Vec<(f64, f64)>>> = (!act.is_piecewise_linear())
        .then(|| pieces.iter().map(|&(a, b)| curvature_table(act, a, b)).collect::<Vec<_>>())
        .filter(|ts| ts.iter().all(|t| t.last().map_or(0.0, |p| p.1) > 1e-300));
    let masses: Vec<f64> = match &tables {
        Some(ts) => ts.iter().map(|t| t.last().map_or(0.0, |p| p.1)).collect(),
        None => pieces.iter().map(|&(a, b)| b - a).collect(),
    };
    let counts = allocate(&masses, m.max(pieces.len()));

    let mut points = vec![lo];
    for (k, &(a, b)) in pieces.iter().enumerate() {
        let cells = counts[k];
        for i in 1..cells {
            let frac = i as f64 / cells as f64;
            points.push(match &tables {
                Some(ts) => invert_table(&ts[k], frac * masses[k]),
                None => a + frac * (b - a),
            });
        }
        points.push(b);
    }
    points.dedup_by(|b, a| *b <= *a);
    points
}

/// Cumulative integral of the cell-size density on `[a, b]`, trapezoid rule.
///
/// Away from the inflection the chord/tangent error is about `Δ²|σ''|/8`, so
/// cells of equal `∫ sqrt|σ''|` share it evenly. Near the inflection `σ''`
/// vanishes and the cubic term takes over, hence the `cbrt|σ'''|` floor.
fn curvature_table(act: Activation, a: f64, b: f64) -> Vec<(f64, f64)> {
    let h = (b - a) / QUADRATURE_STEPS as f64;
    let w = |x: f64| {
        let quad = act.second_derivative(x).abs().sqrt();
        quad.max(CUBIC_WEIGHT * act.third_derivative(x).abs().cbrt())
    };
    let mut table = Vec::with_capacity(QUADRATURE_STEPS + 1);
    let mut acc = 0.0;
    let mut prev = w(a);
    table.push((a, 0.0));
    for i in 1..=QUADRATURE_STEPS {
        let x = if i == QUADRATURE_STEPS { b } else { a + i as f64 * h };
        let cur = w(x);
        acc += 0.5 * h * (prev + cur);
        table.push((x, acc));
        prev = cur;
    }
    table
}

fn invert_table(table: &[(f64, f64)], target: f64) -> f64 {
    let idx = table.partition_point(|p| p.1 < target).clamp(1, table.len() - 1);
    let (x0, c0) = table[idx - 1];
    let (x1, c1) = table[idx];
    if c1 <= c0 {
        return x0;
    }
    x0 + (target - c0) / (c1 - c0) * (x1 - x0)
}

/// Largest-remainder apportionment of `total` cells, at least one per piece.
fn allocate(masses: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = masses.iter().sum();
    let shares: Vec<f64> = masses.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).max(1)).collect();
    let rem = |i: usize, counts: &[usize]| shares[i] - counts[i] as f64;
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&i, &j| rem(j, &counts).total_cmp(&rem(i, &counts)).then(i.cmp(&j)));
    let mut assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle() {
        if assigned >= total {
            break;
        }
        counts[i] += 1;
        assigned += 1;
    }
    // clamping to one cell can overshoot; take back from the most over-served
    while assigned > total {
        let i = (0..counts.len())
            .filter(|&i| counts[i] > 1)
            .min_by(|&i, &j| rem(i, &counts).total_cmp(&rem(j, &counts)).then(i.cmp(&j)))
            .expect("total is at least the number of pieces");
        counts[i] -= 1;
        assigned -= 1;
    }
    counts
}

/// Interval bounds plus one PWL grid per neuron for a whole network.
#[derive(Debug, Clone)]
pub struct NetRelaxation {
    pub bounds: LayerBounds,
    pub grids: Vec<Vec<PwlGrid>>,
    /// Cell budget used for smooth activations.
    pub grid_m: usize,
}

impl NetRelaxation {
    /// Propagates bounds over `input_box` and grids every neuron.
    ///
    /// Smooth activations get `m` cells. Piecewise-linear activations are
    /// already exact on their breakpoint grid, so they use the minimal grid
    /// (one cell, or two when the kink lies inside the interval).
    pub fn new(net: &NeuralNet, input_box: &[Interval], m: usize) -> crate::Result<Self> {
        let bounds = crate::bounds::propagate_bounds(net, input_box)?;
        let grids = net
            .layers()
            .iter()
            .zip(&bounds.layers)
            .map(|(layer, range)| {
                let cells = if layer.activation.is_piecewise_linear() { 1 } else { m };
                range
                    .pre
                    .iter()
                    .map(|iv| build_grid(layer.activation, iv.lo, iv.hi, cells))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { bounds, grids, grid_m: m })
    }
}
