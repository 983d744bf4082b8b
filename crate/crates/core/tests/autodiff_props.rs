use milel::autodiff::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OPS: [&str; 22] = [
    "matmul", "add", "sub", "mul", "add_row", "scale", "add_scalar", "relu", "hinge", "sigmoid", "tanh", "concat_cols",
    "concat_rows", "slice_cols", "slice_rows", "transpose", "sum", "mean_rows", "max", "softmax", "kl", "gather_mean",
];

struct Case {
    store: ParamStore,
    a: ParamId,
    b: ParamId,
    row: ParamId,
    wide: ParamId,
}

fn case(r: usize, c: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::uniform(r, c, 1.5, &mut rng), true);
    let b = store.add("b", Tensor::uniform(r, c, 1.5, &mut rng), true);
    let row = store.add("row", Tensor::uniform(1, c, 1.5, &mut rng), true);
    let wide = store.add("wide", Tensor::uniform(c, r + 1, 1.5, &mut rng), true);
    Case { store, a, b, row, wide }
}

/// Applies op `op` to the case parameters and contracts the result against a
/// fixed random weight so that every output coordinate matters.
fn build(op: &str, g: &mut Graph, s: &ParamStore, ids: (ParamId, ParamId, ParamId, ParamId), seed: u64) -> Result<Var, AutodiffError> {
    let (ia, ib, irow, iwide) = ids;
    let a = g.param(s, ia)?;
    let b = g.param(s, ib)?;
    let [r, c] = s.value(ia).shape();
    let out = match op {
        "matmul" => {
            let w = g.param(s, iwide)?;
            g.matmul(a, w)?
        }
        "add" => g.add(a, b)?,
        "sub" => g.sub(a, b)?,
        "mul" => g.mul(a, b)?,
        "add_row" => {
            let row = g.param(s, irow)?;
            g.add_row(a, row)?
        }
        "scale" => g.scale(a, -1.7)?,
        "add_scalar" => g.add_scalar(a, 0.3)?,
        "relu" => g.relu(a)?,
        "hinge" => g.hinge(a)?,
        "sigmoid" => g.sigmoid(a)?,
        "tanh" => g.tanh(a)?,
        "concat_cols" => g.concat_cols(&[a, b])?,
        "concat_rows" => g.concat_rows(&[a, b])?,
        "slice_cols" => g.slice_cols(a, c / 2, c)?,
        "slice_rows" => g.slice_rows(a, r / 2, r)?,
        "transpose" => g.transpose(a)?,
        "sum" => g.sum(a)?,
        "mean_rows" => g.mean_rows(a)?,
        "max" => g.max(a)?,
        "softmax" => g.temperature_softmax(a, 1.0 / 3.0)?,
        "kl" => {
            let row = g.param(s, irow)?;
            let m = g.max(row)?;
            let p = g.sigmoid(m)?;
            g.kl_bernoulli(p, 0.9)?
        }
        "gather_mean" => {
            let groups = (0..r + 2).map(|i| (0..=(i % r)).collect()).collect();
            g.gather_mean(s, ia, groups)?
        }
        other => unreachable!("{other}"),
    };
    let shape = g.value(out).shape();
    let w = Tensor::uniform(shape[0], shape[1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
    let w = g.constant(w)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_op_matches_finite_differences(r in 1usize..=8, c in 1usize..=8, seed: u64) {
        for op in OPS {
            let mut k = case(r, c, seed);
            let ids = (k.a, k.b, k.row, k.wide);
            let config = GradCheckConfig { max_coords_per_param: 128, ..Default::default() };
            let report = gradient_check(&mut k.store, |g, s| build(op, g, s, ids, seed), &config).unwrap();
            prop_assert!(report.checked > 0, "{op}: nothing checked");
            prop_assert!(report.max_relative_error < 1e-4, "{op}: {report:?}");
        }
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-10.0f64..10.0, 1..20), t in 0.1f64..5.0) {
        let p = softmax_with_temperature(&xs, t);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval(x in -30.0f64..30.0) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x)).unwrap();
        let s = g.sigmoid(v).unwrap();
        let y = g.scalar_value(s);
        prop_assert!(y > 0.0 && y < 1.0);
        prop_assert!(sigmoid(x) > 0.0 && sigmoid(x) < 1.0);
    }

    #[test]
    fn repeated_backward_is_bit_identical(r in 1usize..=6, c in 1usize..=6, seed: u64) {
        let grads = |seed: u64| {
            let mut k = case(r, c, seed);
            let ids = (k.a, k.b, k.row, k.wide);
            let mut g = Graph::new();
            let loss = build("matmul", &mut g, &k.store, ids, seed).unwrap();
            let h = g.tanh(loss).unwrap();
            g.backward(h, &mut k.store).unwrap();
            k.store.iter().map(|p| p.grad.data().to_vec()).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(seed), grads(seed));
    }
}
