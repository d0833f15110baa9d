use logpeft::autodiff::{finite_diff_check, Tape, Tensor, Var};
use logpeft::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random projection so every
/// output entry contributes a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.value(out).shape().to_vec());
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=8, 1usize..=8, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_and_transpose((m, k, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = [rand_tensor(&mut rng, vec![m, k]), rand_tensor(&mut rng, vec![n, k])];
        let err = finite_diff_check(|t, p| {
            let bt = t.transpose(p[1])?;
            let out = t.matmul(p[0], bt)?;
            project(t, out, seed)
        }, &params, EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn elementwise_and_bias((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = [rand_tensor(&mut rng, vec![m, n]), rand_tensor(&mut rng, vec![m, n]), rand_tensor(&mut rng, vec![n])];
        let err = finite_diff_check(|t, p| {
            let s = t.add(p[0], p[1])?;
            let prod = t.mul(s, p[0])?;
            let scaled = t.scale(prod, -1.7);
            let out = t.add_row(scaled, p[2])?;
            project(t, out, seed)
        }, &params, EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn relu_away_from_kink((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rand_tensor(&mut rng, vec![m, n]);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let err = finite_diff_check(|t, p| {
            let out = t.relu(p[0]);
            project(t, out, seed)
        }, &[x], EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn softmax_with_and_without_mask((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, vec![m, n]);
        // keep at least one allowed entry per row
        let allowed: Vec<bool> = (0..m * n).map(|i| i % n == 0 || rng.random_bool(0.6)).collect();
        let err = finite_diff_check(|t, p| {
            let a = t.softmax_rows(p[0])?;
            let b = t.masked_softmax_rows(p[0], Some(&allowed))?;
            let s = t.add(a, b)?;
            project(t, s, seed)
        }, &[x], EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn layer_norm_all_inputs((m, n, _, seed) in (1usize..=8, 2usize..=8, 1usize..=1, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = [rand_tensor(&mut rng, vec![m, n]), rand_tensor(&mut rng, vec![n]), rand_tensor(&mut rng, vec![n])];
        let err = finite_diff_check(|t, p| {
            let out = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            project(t, out, seed)
        }, &params, EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn pool_gather_concat((m, n, v, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = rand_tensor(&mut rng, vec![v, n]);
        let h = rand_tensor(&mut rng, vec![m, n]);
        let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        mask[0] = true;
        let err = finite_diff_check(|t, p| {
            let g = t.gather_rows(p[0], &ids)?;
            let both = t.concat_cols(&[g, p[1]])?;
            let stacked = t.concat_rows(&[both, both])?;
            let r = t.reshape(stacked, vec![2 * m, 2 * n])?;
            let pooled = t.masked_mean_pool(r, &[mask.clone(), mask.clone()].concat())?;
            project(t, pooled, seed)
        }, &[table, h], EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn weighted_cross_entropy((m, c, _, seed) in (1usize..=8, 2usize..=4, 1usize..=1, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, vec![m, c]);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
        let err = finite_diff_check(|t, p| t.cross_entropy(p[0], &targets, &weights), &[logits], EPS).unwrap();
        prop_assert!(err < TOL, "error {err}");
    }

    #[test]
    fn softmax_rows_are_distributions((m, n, _, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, vec![m, n]).scaled(20.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v).unwrap();
        let out = tape.value(s);
        for r in 0..m {
            let row = out.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn backward_is_linear_and_deterministic((m, n, _, seed) in dims(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, vec![m, n]);
        let bias = rand_tensor(&mut rng, vec![n]);
        let grads = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let c = t.constant(bias.clone());
            let f = t.add_row(x, c).unwrap();
            let f = t.scale(f, 2.5);
            let g = t.add(x, x).unwrap();
            let (ff, gg) = (project(&mut t, f, seed).unwrap(), project(&mut t, g, seed + 1).unwrap());
            let loss = match which {
                0 => ff,
                1 => gg,
                _ => {
                    let l = t.scale(ff, a);
                    let r = t.scale(gg, b);
                    t.add(l, r).unwrap()
                }
            };
            t.backward(loss).unwrap().wrt(x).unwrap()
        };
        let (gf, gg, gc) = (grads(0), grads(1), grads(2));
        let combined = gf.scaled(a).add(&gg.scaled(b)).unwrap();
        prop_assert!(gc.max_abs_diff(&combined) < 1e-12);
        prop_assert_eq!(grads(2), gc);
    }
}
