use ifcert_core::encode::{MilpProblem, Sense, VarKind};
use ifcert_core::linalg::{solve_linear, Matrix};
use ifcert_core::solve::{branch_and_bound, solve_lp, LpStatus, SolveConfig, SolveStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lp(vars: &[(f64, f64)], rows: &[(&[f64], Sense, f64)], obj: &[f64]) -> MilpProblem {
    let mut p = MilpProblem::new();
    for (i, &(lo, hi)) in vars.iter().enumerate() {
        p.add_var(format!("v{i}"), VarKind::Continuous, lo, hi);
    }
    for (a, sense, b) in rows {
        p.add_constraint(a.iter().copied().enumerate(), *sense, *b);
    }
    p.objective = obj.iter().copied().enumerate().collect();
    p
}

#[test]
fn single_bound_row() {
    let p = lp(&[(0.0, 1.0)], &[(&[1.0], Sense::Le, 0.7)], &[1.0]);
    let s = solve_lp(&p).unwrap();
    assert_eq!(s.status, LpStatus::Optimal);
    assert!((s.objective - 0.7).abs() < 1e-12);
}

#[test]
fn degenerate_optimal_face() {
    let p = lp(&[(0.0, 1.0), (0.0, 1.0)], &[(&[1.0, 1.0], Sense::Le, 1.0)], &[1.0, 1.0]);
    let s = solve_lp(&p).unwrap();
    assert!((s.objective - 1.0).abs() < 1e-12);
}

#[test]
fn infeasible_rows() {
    let p = lp(
        &[(0.0, 1.0), (0.0, 1.0)],
        &[(&[1.0, 1.0], Sense::Ge, 1.5), (&[1.0, -1.0], Sense::Eq, 0.9)],
        &[1.0, 0.0],
    );
    assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Infeasible);
}

/// Brute-force vertex enumeration: every choice of `n` tight hyperplanes
/// among bounds and rows, keeping feasible intersection points.
fn vertex_oracle(vars: &[(f64, f64)], rows: &[(Vec<f64>, Sense, f64)], obj: &[f64]) -> Option<f64> {
    let n = vars.len();
    let mut planes: Vec<(Vec<f64>, f64)> = Vec::new();
    for (i, &(lo, hi)) in vars.iter().enumerate() {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        planes.push((e.clone(), lo));
        planes.push((e, hi));
    }
    for (a, _, b) in rows {
        planes.push((a.clone(), *b));
    }
    let feasible = |x: &[f64]| {
        vars.iter().zip(x).all(|(&(lo, hi), &v)| v >= lo - 1e-9 && v <= hi + 1e-9)
            && rows.iter().all(|(a, s, b)| {
                let v: f64 = a.iter().zip(x).map(|(p, q)| p * q).sum();
                match s {
                    Sense::Le => v <= b + 1e-9,
                    Sense::Ge => v >= b - 1e-9,
                    Sense::Eq => (v - b).abs() <= 1e-9,
                }
            })
    };
    let mut best: Option<f64> = None;
    let k = planes.len();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let a = Matrix::from_rows(&idx.iter().map(|&i| planes[i].0.clone()).collect::<Vec<_>>()).unwrap();
        let b: Vec<f64> = idx.iter().map(|&i| planes[i].1).collect();
        if let Some(x) = solve_linear(&a, &b) {
            if feasible(&x) {
                let v: f64 = obj.iter().zip(&x).map(|(c, v)| c * v).sum();
                best = Some(best.map_or(v, |w: f64| w.max(v)));
            }
        }
        // next combination
        let mut i = n;
        while i > 0 && idx[i - 1] == k - n + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
    best
}

#[test]
fn random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..60 {
        let n = rng.gen_range(2..=5);
        let m = rng.gen_range(1..=4);
        let vars: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let lo = rng.gen_range(-2.0..1.0);
                (lo, lo + rng.gen_range(0.1..3.0))
            })
            .collect();
        let rows: Vec<(Vec<f64>, Sense, f64)> = (0..m)
            .map(|_| {
                let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let sense = [Sense::Le, Sense::Ge, Sense::Le, Sense::Eq][rng.gen_range(0..4)];
                (a, sense, rng.gen_range(-1.0..1.0))
            })
            .collect();
        let obj: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let refs: Vec<(&[f64], Sense, f64)> = rows.iter().map(|(a, s, b)| (a.as_slice(), *s, *b)).collect();
        let p = lp(&vars, &refs, &obj);
        let got = solve_lp(&p).unwrap();
        match vertex_oracle(&vars, &rows, &obj) {
            Some(v) => {
                assert_eq!(got.status, LpStatus::Optimal, "trial {trial}");
                assert!((got.objective - v).abs() <= 1e-7, "trial {trial}: {} vs {v}", got.objective);
                assert!(p.max_violation(&got.values) <= 1e-7);
            }
            None => assert_eq!(got.status, LpStatus::Infeasible, "trial {trial}"),
        }
    }
}

#[test]
fn twenty_var_knapsack_matches_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = 20;
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..2.0)).collect();
        let cap = rng.gen_range(1.0..8.0);
        let p = lp(&vec![(0.0, 1.0); n], &[(&w, Sense::Le, cap)], &c);
        let got = solve_lp(&p).unwrap();
        // fractional knapsack: take items by value density until capacity runs out
        let mut order: Vec<usize> = (0..n).filter(|&i| c[i] > 0.0).collect();
        order.sort_by(|&a, &b| (c[b] / w[b]).total_cmp(&(c[a] / w[a])));
        let (mut left, mut best) = (cap, 0.0);
        for i in order {
            let take = (left / w[i]).min(1.0);
            best += take * c[i];
            left -= take * w[i];
            if left <= 0.0 {
                break;
            }
        }
        assert!((got.objective - best).abs() <= 1e-7, "{} vs {best}", got.objective);
    }
}

#[test]
fn knapsack_milp() {
    let mut p = MilpProblem::new();
    let a = p.add_var("a", VarKind::Binary, 0.0, 1.0);
    let b = p.add_var("b", VarKind::Binary, 0.0, 1.0);
    p.add_constraint([(a, 1.0), (b, 1.0)], Sense::Le, 1.0);
    p.objective = vec![(a, 3.0), (b, 2.0)];
    let out = branch_and_bound(&p, &SolveConfig::default(), &mut |_| {}).unwrap();
    assert_eq!(out.status, SolveStatus::Converged);
    assert!((out.delta_lower - 3.0).abs() < 1e-9 && (out.delta_upper - 3.0).abs() < 1e-9);
}

#[test]
fn continuous_problem_needs_one_node() {
    let p = lp(&[(0.0, 1.0), (0.0, 1.0)], &[(&[1.0, 2.0], Sense::Le, 1.5)], &[1.0, 1.0]);
    let out = branch_and_bound(&p, &SolveConfig::default(), &mut |_| {}).unwrap();
    assert_eq!(out.nodes, 1);
    assert_eq!(out.delta_lower, out.delta_upper);
}

/// Random MILP with a known feasible point so the enumeration always has an answer.
pub fn random_milp(rng: &mut ChaCha8Rng, binaries: usize, continuous: usize) -> MilpProblem {
    let mut p = MilpProblem::new();
    let mut point = Vec::new();
    for i in 0..binaries {
        p.add_var(format!("b{i}"), VarKind::Binary, 0.0, 1.0);
        point.push(rng.gen_range(0..2) as f64);
    }
    for i in 0..continuous {
        let lo = rng.gen_range(-1.0..0.5);
        let hi = lo + rng.gen_range(0.2..2.0);
        p.add_var(format!("c{i}"), VarKind::Continuous, lo, hi);
        point.push(rng.gen_range(lo..hi));
    }
    let n = binaries + continuous;
    for _ in 0..rng.gen_range(2..=8) {
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.5) {
                terms.push((j, rng.gen_range(-2.0..2.0)));
            }
        }
        let at: f64 = terms.iter().map(|&(j, c)| c * point[j]).sum();
        if rng.gen_bool(0.5) {
            p.add_constraint(terms, Sense::Le, at + rng.gen_range(0.0..0.5));
        } else {
            p.add_constraint(terms, Sense::Ge, at - rng.gen_range(0.0..0.5));
        }
    }
    p.objective = (0..n).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
    p
}

/// Fixes every binary pattern and solves the remaining LP.
pub fn enumerate_binaries(p: &MilpProblem) -> f64 {
    let bins: Vec<usize> = (0..p.vars.len()).filter(|&j| p.vars[j].kind == VarKind::Binary).collect();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << bins.len()) {
        let mut q = p.clone();
        for (k, &b) in bins.iter().enumerate() {
            let v = ((mask >> k) & 1) as f64;
            q.vars[b].lo = v;
            q.vars[b].hi = v;
            q.vars[b].kind = VarKind::Continuous;
        }
        let s = solve_lp(&q).unwrap();
        if s.status == LpStatus::Optimal {
            best = best.max(s.objective);
        }
    }
    best
}

#[test]
fn random_milps_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let (b, c) = (rng.gen_range(1..=8), rng.gen_range(1..=10));
        let p = random_milp(&mut rng, b, c);
        let expect = enumerate_binaries(&p);
        let out = branch_and_bound(&p, &SolveConfig::default(), &mut |_| {}).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert!((out.delta_lower - expect).abs() <= 1e-6, "trial {trial}: {} vs {expect}", out.delta_lower);
        assert!(out.delta_upper >= expect - 1e-9);
    }
}
