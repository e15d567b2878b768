use ifcert_core::bounds::{propagate_bounds, Interval};
use ifcert_core::encode::encode_pair_problem;
use ifcert_core::linalg::Matrix;
use ifcert_core::metric::{eigendecompose, FairnessMetric};
use ifcert_core::model::{Activation, FeatureSchema, Layer, NeuralNet};
use ifcert_core::pwl::{build_grid, NetRelaxation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ACTS: [Activation; 4] = [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Identity];

fn net_from_seed(seed: u64, input: usize) -> NeuralNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=2);
    let mut layers = Vec::new();
    let mut fan_in = input;
    for l in 0..=depth {
        let (width, act) = if l == depth {
            (1, Activation::Sigmoid)
        } else {
            (rng.gen_range(1..=4), ACTS[rng.gen_range(0..ACTS.len())])
        };
        let weights = (0..width)
            .map(|_| (0..fan_in).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let biases = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        layers.push(Layer::new(weights, biases, act));
        fan_in = width;
    }
    NeuralNet::new_scalar(input, layers).unwrap()
}

fn unit_point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interval_bounds_contain_every_forward_pass(seed in any::<u64>(), x in unit_point(3)) {
        let net = net_from_seed(seed, 3);
        let bounds = propagate_bounds(&net, &[Interval::new(0.0, 1.0); 3]).unwrap();
        let trace = net.trace(&x).unwrap();
        for (range, (pre, post)) in bounds.layers.iter().zip(trace.pre.iter().zip(&trace.post)) {
            for (iv, v) in range.pre.iter().zip(pre) {
                prop_assert!(iv.lo - 1e-12 <= *v && *v <= iv.hi + 1e-12);
            }
            for (iv, v) in range.post.iter().zip(post) {
                prop_assert!(iv.lo - 1e-12 <= *v && *v <= iv.hi + 1e-12);
            }
        }
    }

    #[test]
    fn pwl_bounds_sandwich_the_activation(
        act in prop::sample::select(ACTS.to_vec()),
        lo in -8.0..6.0f64,
        width in 0.01..8.0f64,
        m in 1usize..24,
        t in 0.0..=1.0f64,
    ) {
        let hi = lo + width;
        let grid = build_grid(act, lo, hi, m).unwrap();
        let phi = (lo + t * width).min(grid.interval().hi);
        let (l, u) = grid.eval(phi).unwrap();
        let v = act.apply(phi);
        prop_assert!(l <= v + 1e-12 && v <= u + 1e-12, "{l} <= {v} <= {u}");
    }

    #[test]
    fn lifted_pairs_are_feasible(seed in any::<u64>(), a in unit_point(3), dir in unit_point(3), m in 1usize..8) {
        let net = net_from_seed(seed, 3);
        let schema = FeatureSchema::unit_box(3, &[0]);
        let metric = FairnessMetric::linf(vec![0.0, 1.0, 2.0]).unwrap();
        let eps = 0.2;
        let b: Vec<f64> = a
            .iter()
            .zip(&dir)
            .enumerate()
            .map(|(i, (x, d))| if i == 0 { *d } else { (x + eps * (d - 0.5)).clamp(0.0, 1.0) })
            .collect();
        prop_assume!(metric.eval(&a, &b).unwrap() <= eps);
        let relax = NetRelaxation::new(&net, &schema.input_box(), m).unwrap();
        let p = encode_pair_problem(&net, &relax, &metric, eps, &schema).unwrap();
        let values = p.lift(&[a.clone(), b.clone()]);
        prop_assert!(p.is_feasible(&values, 1e-7), "violation {}", p.max_violation(&values));
        let delta = net.forward(&a).unwrap() - net.forward(&b).unwrap();
        prop_assert!((p.objective_value(&values) - delta).abs() <= 1e-9);
    }

    #[test]
    fn mahalanobis_is_a_symmetric_pseudometric(seed in any::<u64>(), a in unit_point(4), b in unit_point(4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = Matrix::from_rows(&r).unwrap();
        let s = r.transpose().matmul(&r);
        let mut s_sym = s.clone();
        for i in 0..4 {
            for j in 0..i {
                s_sym[(i, j)] = s_sym[(j, i)];
            }
        }
        let metric = FairnessMetric::mahalanobis(s_sym).unwrap();
        let ab = metric.eval(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - metric.eval(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(metric.eval(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn eigendecomposition_reconstructs(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let eig = eigendecompose(&a).unwrap();
        prop_assert!(eig.reconstruct().max_abs_diff(&a) <= 1e-9);
        prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
