use super::gradcheck::{self, DEFAULT_EPS};
use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Random tensor whose entries stay at least `gap` away from zero, for kinked ops.
fn rand_away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.range(gap, 1.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contract a var to a scalar with fixed random weights so every output entry
/// gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = Rng::new(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(rand_t(&mut rng, &shape));
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

const OP_TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn assert_gradcheck<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> crate::error::Result<Var>,
{
    let r = gradcheck::check(inputs, DEFAULT_EPS, build).unwrap();
    assert!(r.passes(OP_TOL), "gradcheck failed: {r:?}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradcheck() {
    let mut rng = Rng::new(11);
    for s in 0..INSTANCES {
        let inputs = [rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2])];
        assert_gradcheck(&inputs, |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(weighted_sum(g, p, s))
        });
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0., 0.]));
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[f64::NEG_INFINITY, 0.]));
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0]);

    let x = g.constant(t(&[3], &[1., 2., 3.]));
    let y = g.softmax_lastdim(x).unwrap();
    // exp(k) / (e + e^2 + e^3), evaluated independently
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((want[0] - 0.09003).abs() < 5e-6);
    assert!((want[1] - 0.24473).abs() < 5e-6);
    assert!((want[2] - 0.66524).abs() < 5e-6);
}

#[test]
fn softmax_all_masked_row_is_degenerate() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[0., 1., f64::NEG_INFINITY, f64::NEG_INFINITY]));
    assert!(matches!(
        g.softmax_lastdim(x),
        Err(Error::DegenerateRow { row: 1 })
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_masked_are_zero() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_t(&mut rng, &[4, 6]));
        let keep: Vec<bool> = (0..6).map(|j| j == 0 || rng.bernoulli(0.6)).collect();
        let m = g.mask_columns(x, &keep).unwrap();
        let y = g.softmax_lastdim(m).unwrap();
        for row in g.value(y).data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for (v, k) in row.iter().zip(&keep) {
                if !k {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}

#[test]
fn softmax_gradcheck() {
    let mut rng = Rng::new(12);
    for s in 0..INSTANCES {
        let inputs = [rand_t(&mut rng, &[3, 5])];
        let keep = [true, false, true, true, false];
        assert_gradcheck(&inputs, |g, v| {
            let m = g.mask_columns(v[0], &keep)?;
            let y = g.softmax_lastdim(m)?;
            Ok(weighted_sum(g, y, s))
        });
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gamma = g.constant(t(&[3], &[1., 1., 1.]));
    let beta = g.constant(t(&[3], &[0., 0., 0.]));
    let x = g.constant(t(&[3], &[2.5, 2.5, 2.5]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);

    let gamma = g.constant(t(&[2], &[1., 1.]));
    let beta = g.constant(t(&[2], &[0., 0.]));
    let x = g.constant(t(&[2], &[1., 3.]));
    let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1., 1.]);
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = Rng::new(13);
    for s in 0..INSTANCES {
        let inputs = [
            rand_t(&mut rng, &[3, 6]),
            rand_t(&mut rng, &[6]),
            rand_t(&mut rng, &[6]),
        ];
        assert_gradcheck(&inputs, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            Ok(weighted_sum(g, y, s))
        });
    }
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0., 1.]));
    let y = g.gelu(x);
    assert_eq!(g.value(y).data()[0], 0.0);
    // Phi(1) = 0.841344746...
    assert!((g.value(y).data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn gelu_gradcheck() {
    let mut rng = Rng::new(14);
    for s in 0..INSTANCES {
        let inputs = [rand_t(&mut rng, &[7]).cast::<f64>()];
        assert_gradcheck(&inputs, |g, v| {
            let y = g.gelu(v[0]);
            Ok(weighted_sum(g, y, s))
        });
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let w = g.constant(t(&[1, 1, 1, 1], &[2.]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);

    let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).at(&[0, 1, 1]), 9.0);
    assert_eq!(g.value(y).at(&[0, 0, 0]), 4.0);
}

#[test]
fn conv2d_output_extent() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 64, 64]));
    let w = g.constant(Tensor::zeros(&[8, 3, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[8, 32, 32]);

    let x = g.constant(Tensor::zeros(&[1, 1, 1]));
    let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(
        g.conv2d(x, w, None, 1, 0),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn conv2d_gradcheck() {
    let mut rng = Rng::new(15);
    for s in 0..INSTANCES {
        let inputs = [
            rand_t(&mut rng, &[2, 5, 5]),
            rand_t(&mut rng, &[3, 2, 3, 3]),
            rand_t(&mut rng, &[3]),
        ];
        let stride = 1 + (s as usize % 2);
        assert_gradcheck(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            Ok(weighted_sum(g, y, s))
        });
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[1, 5]));
    let y = g.cross_entropy_logits(l, &[0]).unwrap();
    assert!((g.value(y).data()[0] - 5f64.ln()).abs() < 1e-15);
    assert!((g.value(y).data()[0] - 1.60944).abs() < 1e-5);

    let l = g.constant(t(&[1, 2], &[10., 0.]));
    let y = g.cross_entropy_logits(l, &[0]).unwrap();
    let want = (1.0 + (-10f64).exp()).ln();
    assert!((g.value(y).data()[0] - want).abs() < 1e-15);
    assert!((g.value(y).data()[0] - 4.54e-5).abs() < 1e-7);

    assert!(matches!(
        g.cross_entropy_logits(l, &[2]),
        Err(Error::Label {
            label: 2,
            classes: 2
        })
    ));
}

#[test]
fn cross_entropy_grad_is_softmax_minus_onehot() {
    let mut rng = Rng::new(16);
    for _ in 0..INSTANCES {
        let logits = rand_t(&mut rng, &[3, 4]);
        let labels = [rng.below(4), rng.below(4), rng.below(4)];
        let inputs = [logits.clone()];
        assert_gradcheck(&inputs, |g, v| g.cross_entropy_logits(v[0], &labels));

        let mut g = Graph::new();
        let l = g.leaf(logits.clone(), true);
        let loss = g.cross_entropy_logits(l, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(l).unwrap();
        for (r, row) in logits.data().chunks(4).enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let want = (row[j].exp() / z - if j == labels[r] { 1.0 } else { 0.0 }) / 3.0;
                assert!((grad[r * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_examples() {
    let mut rng = Rng::new(17);
    let x0 = rand_t(&mut rng, &[2, 3, 2]);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(x0.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn tape_is_topologically_ordered() {
    let mut rng = Rng::new(18);
    let mut g = Graph::<f64>::new();
    let a = g.leaf(rand_t(&mut rng, &[2, 3]), true);
    let b = g.leaf(rand_t(&mut rng, &[3, 2]), true);
    let m = g.matmul(a, b).unwrap();
    let r = g.relu(m);
    let c = g.concat(&[r, m], 0).unwrap();
    let s = g.mean(c);
    for v in [m, r, c, s] {
        assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
    }
    g.backward(s).unwrap();
    assert!(g.grad(a).is_some() && g.grad(b).is_some());
    g.reset();
    assert!(g.is_empty());
}

#[test]
fn unreachable_leaf_gets_no_grad() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[2], 1.0), true);
    let b = g.leaf(Tensor::full(&[2], 1.0), true);
    let s = g.sum(a);
    g.backward(s).unwrap();
    assert!(g.grad(b).is_none());
}

#[test]
fn elementwise_gradchecks() {
    let mut rng = Rng::new(19);
    for s in 0..INSTANCES {
        let inputs = [rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4])];
        assert_gradcheck(&inputs, |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.scale(c, -1.7);
            Ok(weighted_sum(g, d, s))
        });
        let inputs = [rand_away_from_zero(&mut rng, &[10], 0.05)];
        assert_gradcheck(&inputs, |g, v| {
            let r = g.relu(v[0]);
            Ok(weighted_sum(g, r, s))
        });
    }
}

#[test]
fn max2_gradcheck_and_tie_rule() {
    let mut rng = Rng::new(20);
    for s in 0..INSTANCES {
        let a = rand_t(&mut rng, &[8]);
        // keep |a - b| away from zero so the kink is not straddled
        let d = rand_away_from_zero(&mut rng, &[8], 0.05);
        let b = Tensor::new(
            vec![8],
            a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        assert_gradcheck(&[a, b], |g, v| {
            let m = g.max2(v[0], v[1])?;
            Ok(weighted_sum(g, m, s))
        });
    }

    let mut g = Graph::<f64>::new();
    let a = g.leaf(t(&[3], &[1., 2., 3.]), true);
    let b = g.leaf(t(&[3], &[0., 2., 4.]), true);
    let m = g.max2(a, b).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1., 1., 0.]);
    assert_eq!(g.grad(b).unwrap(), &[0., 0., 1.]);
}

#[test]
fn shape_op_gradchecks() {
    let mut rng = Rng::new(21);
    for s in 0..INSTANCES {
        let inputs = [rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 1, 4])];
        assert_gradcheck(&inputs, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let n = g.narrow(c, 1, 1, 3)?;
            let r = g.reshape(n, &[6, 4])?;
            let tr = g.transpose(r)?;
            let f = g.flatten(tr)?;
            Ok(weighted_sum(g, f, s))
        });
        let inputs = [rand_t(&mut rng, &[2, 3, 4])];
        assert_gradcheck(&inputs, |g, v| {
            let a = g.sum_axis(v[0], 1)?;
            let b = g.mean_axis(v[0], 2)?;
            let pa = weighted_sum(g, a, s);
            let pb = weighted_sum(g, b, s + 100);
            let both = g.add(pa, pb)?;
            let m = g.mean(v[0]);
            g.add(both, m)
        });
    }
}

#[test]
fn linear_pool_and_row_mean_gradchecks() {
    let mut rng = Rng::new(22);
    for s in 0..INSTANCES {
        let inputs = [
            rand_t(&mut rng, &[4, 3]),
            rand_t(&mut rng, &[3, 5]),
            rand_t(&mut rng, &[5]),
        ];
        assert_gradcheck(&inputs, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            Ok(weighted_sum(g, y, s))
        });
        let inputs = [
            rand_t(&mut rng, &[3]),
            rand_t(&mut rng, &[3, 2]),
            rand_t(&mut rng, &[2]),
        ];
        assert_gradcheck(&inputs, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            Ok(weighted_sum(g, y, s))
        });
        let inputs = [rand_t(&mut rng, &[3, 4, 4])];
        assert_gradcheck(&inputs, |g, v| {
            let y = g.global_avg_pool(v[0])?;
            Ok(weighted_sum(g, y, s))
        });
        let inputs = [rand_t(&mut rng, &[5, 3])];
        assert_gradcheck(&inputs, |g, v| {
            let y = g.weighted_row_mean(v[0], &[1., 0., 1., 1., 0.])?;
            Ok(weighted_sum(g, y, s))
        });
    }
}

#[test]
fn linear_matches_matmul_plus_bias() {
    let mut rng = Rng::new(23);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&mut rng, &[3, 4]));
    let w = g.constant(rand_t(&mut rng, &[4, 2]));
    let b = g.constant(t(&[2], &[0.5, -1.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    let m = g.matmul(x, w).unwrap();
    for (r, row) in g.value(m).data().chunks(2).enumerate() {
        assert!((g.value(y).data()[r * 2] - (row[0] + 0.5)).abs() < 1e-15);
        assert!((g.value(y).data()[r * 2 + 1] - (row[1] - 1.0)).abs() < 1e-15);
    }
}

#[test]
fn same_seed_same_values() {
    let run = |seed| {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        store.glorot("w", &[4, 3], 4, 3, &mut rng).unwrap();
        store
            .get(ParamId(0))
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn f32_forward_agrees_with_f64() {
    let mut rng = Rng::new(24);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 2]);
    let mut g64 = Graph::<f64>::new();
    let (x, y) = (g64.constant(a.clone()), g64.constant(b.clone()));
    let p64 = g64.matmul(x, y).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (x, y) = (g32.constant(a.cast()), g32.constant(b.cast()));
    let p32 = g32.matmul(x, y).unwrap();
    for (u, v) in g64.value(p64).data().iter().zip(g32.value(p32).data()) {
        assert!((u - *v as f64).abs() < 1e-5);
    }
}
