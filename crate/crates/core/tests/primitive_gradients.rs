//! Every tape primitive against central differences on random inputs.

use proptest::prelude::*;
use resobj_core::grad::{finite_diff_check, NodeId, Tape};
use resobj_core::GradError;
use resobj_core::Tensor;

const TOL: f64 = 1e-6;

/// `sum(w * y)` with fixed random `w`, so every output element receives a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: NodeId, w: &[f64]) -> Result<NodeId, GradError> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let wt = tape.constant(Tensor::new(shape, w[..n].to_vec()).unwrap());
    let p = tape.mul(y, wt)?;
    tape.sum(p)
}

fn max_err<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, GradError>,
{
    finite_diff_check(f, params, 1e-5).unwrap().max_relative_error
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

/// Values at least `margin` away from every point in `kinks`.
fn away_from(n: usize, kinks: &'static [f64], margin: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        (-2.0..2.0f64).prop_filter("near a kink", move |v| kinks.iter().all(|k| (v - k).abs() > margin)),
        n,
    )
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), data[..n].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_sub_mul(a in values(6), b in values(6), w in values(6)) {
        let ps = [t(&[2, 3], &a), t(&[2, 3], &b)];
        for op in 0..3 {
            let e = max_err(|tape, l| {
                let y = match op {
                    0 => tape.add(l[0], l[1])?,
                    1 => tape.sub(l[0], l[1])?,
                    _ => tape.mul(l[0], l[1])?,
                };
                weighted_sum(tape, y, &w)
            }, &ps);
            prop_assert!(e <= TOL, "op {op}: {e}");
        }
    }

    #[test]
    fn matmul(a in values(12), b in values(12), w in values(16), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let ps = [t(&[m, k], &a), t(&[k, n], &b)];
        let e = max_err(|tape, l| {
            let y = tape.matmul(l[0], l[1])?;
            weighted_sum(tape, y, &w)
        }, &ps);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn conv2d(x in values(48), k in values(150), w in values(48),
              h in 1usize..5, wd in 1usize..5, ci in 1usize..3, co in 1usize..3, ks in prop::sample::select(vec![1usize, 3, 5])) {
        let ps = [t(&[h, wd, ci], &x), t(&[ks, ks, ci, co], &k)];
        let e = max_err(|tape, l| {
            let y = tape.conv2d(l[0], l[1])?;
            weighted_sum(tape, y, &w)
        }, &ps);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn relu(x in away_from(6, &[0.0], 1e-3), w in values(6)) {
        let e = max_err(|tape, l| {
            let y = tape.relu(l[0])?;
            weighted_sum(tape, y, &w)
        }, &[t(&[6], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn sigmoid_log_sigmoid_exp(x in prop::collection::vec(-30.0..30.0f64, 5), w in values(5)) {
        for op in 0..3 {
            let e = max_err(|tape, l| {
                let y = match op {
                    0 => tape.sigmoid(l[0])?,
                    1 => tape.log_sigmoid(l[0])?,
                    _ => {
                        let s = tape.scale(l[0], 0.1)?;
                        tape.exp(s)?
                    }
                };
                weighted_sum(tape, y, &w)
            }, &[t(&[5], &x)]);
            prop_assert!(e <= TOL, "op {op}: {e}");
        }
    }

    #[test]
    fn log(x in prop::collection::vec(0.05..5.0f64, 5), w in values(5)) {
        let e = max_err(|tape, l| {
            let y = tape.log(l[0])?;
            weighted_sum(tape, y, &w)
        }, &[t(&[5], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn scale_sum_mean(x in values(6), c in -3.0..3.0f64) {
        let e = max_err(|tape, l| {
            let s = tape.scale(l[0], c)?;
            let m = tape.mean(s)?;
            let q = tape.mul(m, m)?;
            tape.sum(q)
        }, &[t(&[2, 3], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn masked_select(x in values(12), mask in prop::collection::vec(any::<bool>(), 4), w in values(12)) {
        prop_assume!(mask.iter().any(|&b| b));
        let e = max_err(|tape, l| {
            let y = tape.masked_select(l[0], mask.clone())?;
            weighted_sum(tape, y, &w)
        }, &[t(&[4, 3], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn broadcast_reshape(x in values(3), w in values(12)) {
        let e = max_err(|tape, l| {
            let b = tape.broadcast(l[0], &[4, 3])?;
            let r = tape.reshape(b, &[2, 6])?;
            weighted_sum(tape, r, &w)
        }, &[t(&[3], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn smooth_l1(x in away_from(6, &[-1.0 / 9.0, 1.0 / 9.0], 1e-3), w in values(6)) {
        let e = max_err(|tape, l| {
            let y = tape.smooth_l1(l[0], 1.0 / 9.0)?;
            weighted_sum(tape, y, &w)
        }, &[t(&[6], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }

    #[test]
    fn stop_gradient_blocks_only_its_branch(x in values(4), w in values(4)) {
        // y = x * sg(x): gradient is sg(x), the frozen replay keeps the
        // second factor constant under perturbation
        let e = max_err(|tape, l| {
            let s = tape.stop_gradient(l[0])?;
            let y = tape.mul(l[0], s)?;
            weighted_sum(tape, y, &w)
        }, &[t(&[4], &x)]);
        prop_assert!(e <= TOL, "{e}");
    }
}

/// Two-layer network with 50 parameters:
/// `log sigmoid(s * (relu(x W1 + b1) w2 + b2))`.
#[test]
fn two_layer_network_with_fifty_parameters() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let x = draw(4);
    let params = vec![
        t(&[4, 8], &draw(32)),
        t(&[8], &draw(8)),
        t(&[8, 1], &draw(8)),
        t(&[1], &draw(1)),
        t(&[1], &draw(1)),
    ];
    assert_eq!(params.iter().map(Tensor::len).sum::<usize>(), 50);
    let e = max_err(
        |tape, l| {
            let xn = tape.constant(t(&[1, 4], &x));
            let h = tape.matmul(xn, l[0])?;
            let b1 = tape.broadcast(l[1], &[1, 8])?;
            let h = tape.add(h, b1)?;
            let h = tape.relu(h)?;
            let o = tape.matmul(h, l[2])?;
            let o = tape.reshape(o, &[1])?;
            let o = tape.add(o, l[3])?;
            let o = tape.mul(o, l[4])?;
            let s = tape.sigmoid(o)?;
            let lg = tape.log(s)?;
            tape.sum(lg)
        },
        &params,
    );
    assert!(e <= TOL, "{e}");
}
