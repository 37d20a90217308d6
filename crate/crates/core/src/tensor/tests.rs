use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, random_tensor};
use super::*;
use crate::error::Error;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at2(i, p) * b.at2(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let b = Tensor::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 4.0, -1.0]]);
    let i2 = g.constant(Tensor::eye(2));
    let bv = g.constant(b.clone());
    let y = g.matmul(i2, bv).unwrap();
    assert_eq!(g.value(y), &b);

    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let c = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
    assert_eq!(naive_matmul(&a, &c), vec![2.0, 4.0]);
    let (av, cv) = (g.constant(a), g.constant(c));
    let y = g.matmul(av, cv).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0]);

    let z = g.constant(Tensor::zeros(&[2, 2]));
    let y = g.matmul(z, bv).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {:?}", other),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::new(vec![1], vec![3.7]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);

    let x = g.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.log_softmax(x, 0).unwrap();
    let s = g.softmax(x, 0).unwrap();
    for (l, p) in g.value(y).data().iter().zip(g.value(s).data()) {
        assert!((l.exp() - p).abs() < 1e-15);
    }
}

#[test]
fn softmax_along_leading_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
    assert_eq!(d[1], 0.5);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::full(&[1, 3], 4.2));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gamma2 = g.constant(Tensor::full(&[2], 1.0));
    let beta2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]]));
    let y = g.layer_norm(x, gamma2, beta2, 1e-12).unwrap();
    assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-9));

    let beta3 = g.constant(Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap());
    let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 7.0]]));
    let y = g.layer_norm(x, gamma, beta3, 1e-5).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / 3.0;
    assert!((mean - 0.5).abs() < 1e-12);
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let x = g.constant(Tensor::from_rows(&[vec![2.0], vec![4.0]]));
    let (y, stats) = g.batch_norm(x, gamma, beta, None, 1e-5).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![3.0]);
    assert_eq!(stats.var, vec![1.0]);
    assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-5));

    // Eval with running stats equal to the batch: pure affine of the normalized input.
    let gamma = g.constant(Tensor::full(&[1], 2.0));
    let beta = g.constant(Tensor::full(&[1], 0.5));
    let (y, stats) = g.batch_norm(x, gamma, beta, Some((&[3.0], &[1.0])), 0.0).unwrap();
    assert!(stats.is_none());
    assert_eq!(g.value(y).data(), &[-1.5, 2.5]);
}

#[test]
fn conv1d_depthwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 4.0]]));
    let delta = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]));
    let y = g.conv1d_depthwise(x, delta).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]));
    let x1 = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]));
    let y = g.conv1d_depthwise(x1, ones).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 2.0]);

    let zero = g.constant(Tensor::zeros(&[3, 2]));
    let y = g.conv1d_depthwise(x, zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let even = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.conv1d_depthwise(x, even).is_err());
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.5));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1).unwrap();
    assert_eq!(g.value(y).data(), &[2.5, 5.0, 7.5, 10.0, 12.5, 15.0]);

    let x = g.constant(Tensor::full(&[1, 9, 6], 3.25));
    let avg = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = g.conv2d(x, avg, b, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 7, 4]);
    assert!(g.value(y).data().iter().all(|&v| (v - 3.25).abs() < 1e-12));

    let y = g.conv2d(x, avg, b, 2).unwrap();
    assert_eq!(g.shape(y), &[1, (9 - 3) / 2 + 1, (6 - 3) / 2 + 1]);

    let tiny = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(g.conv2d(tiny, avg, b, 1), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    let w = g.swish(x);
    assert_eq!(g.value(w).data()[0], 0.0);
    assert!((g.value(w).data()[1] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    assert!((g.value(w).data()[1] - 0.7311).abs() < 1e-4);

    let bad = g.constant(Tensor::new(vec![3], vec![1.0, 0.0, 2.0]).unwrap());
    match g.unary(bad, Unary::Log) {
        Err(Error::Numeric { index, .. }) => assert_eq!(index, 1),
        other => panic!("unexpected {:?}", other),
    }
}

#[test]
fn dropout_modes_and_rate() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1_000_000], 1.0));
    let mut rng = RngState::new(42);
    assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, &mut rng, false).unwrap(), x);
    assert!(g.dropout(x, 1.0, &mut rng, true).is_err());

    let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / 1e6;
    assert!((0.498..=0.502).contains(&frac), "zero fraction {}", frac);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_masks_reproduce() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[257], 1.0));
    let state = RngState { seed: 9, counter: 5 };
    let (mut r1, mut r2) = (state, state);
    let a = g.dropout(x, 0.3, &mut r1, true).unwrap();
    let b = g.dropout(x, 0.3, &mut r2, true).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let c = g.dropout(x, 0.3, &mut r1, true).unwrap();
    assert_ne!(g.value(a), g.value(c));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let xt = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = g.input(xt.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);

    // A second pass without zero_grad doubles exactly.
    let once = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice: Vec<f64> = once.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(x).unwrap(), twice.as_slice());
    g.zero_grad();
    assert!(g.grad(x).is_none());

    let v = g.input(Tensor::zeros(&[2]));
    assert!(g.backward(v).is_err());
}

#[test]
fn gradient_reaches_constants_never() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2], 3.0));
    let x = g.input(Tensor::full(&[2], 2.0));
    let y = g.mul(c, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn permute_rel_gather_and_layout_ops() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
    let y = g.permute(x, &[1, 0, 2]).unwrap();
    assert_eq!(g.shape(y), &[3, 2, 2]);
    assert_eq!(g.value(y).data()[..4], [0.0, 1.0, 6.0, 7.0]);
    assert!(g.permute(x, &[0, 0, 1]).is_err());

    // rel offsets for T=2: columns hold offsets -1, 0, +1.
    let r = g.constant(Tensor::from_rows(&[vec![10.0, 11.0, 12.0], vec![20.0, 21.0, 22.0]]));
    let y = g.rel_gather(r).unwrap();
    // out[i][l] has offset i-l: (0,0)->0, (0,1)->-1, (1,0)->+1, (1,1)->0.
    assert_eq!(g.value(y).data(), &[11.0, 10.0, 22.0, 21.0]);

    let t = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
    let rows = g.gather_rows(t, &[2, 0]).unwrap();
    assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0]);
    assert!(matches!(
        g.gather_rows(t, &[0, 3]),
        Err(Error::Vocabulary { id: 3, position: 1, .. })
    ));
}

#[test]
fn mask_fill_fully_masked_row_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 9.0]]));
    let m = g.mask_fill(x, &[true, false, false, false]).unwrap();
    let p = g.softmax(m, 1).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    assert_eq!(g.fully_masked_rows(), 1);
}

// ------------------------------------------------------------------ gradient checks

const POINTS: usize = 20;
const TOL: f64 = 1e-4;

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let report = check(inputs, POINTS, 17, f).unwrap();
    assert!(report.points >= POINTS.min(inputs.iter().map(Tensor::len).sum()));
    assert!(report.max_rel_err < TOL, "relative error {}", report.max_rel_err);
}

/// Contracts an output against a fixed random weighting so every element matters.
fn readout(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(g.shape(y), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn gradcheck_matmul_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], 1.0, &mut rng);
    let b = random_tensor(&[4, 5], 1.0, &mut rng);
    assert_grad(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let t = g.transpose(y)?;
        readout(g, t, 2)
    });
}

#[test]
fn gradcheck_softmax_and_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[4, 6], 2.0, &mut rng);
    assert_grad(std::slice::from_ref(&x), |g, v| {
        let y = g.softmax(v[0], 1)?;
        readout(g, y, 4)
    });
    assert_grad(std::slice::from_ref(&x), |g, v| {
        let y = g.softmax(v[0], 0)?;
        readout(g, y, 5)
    });
    assert_grad(&[x], |g, v| {
        let y = g.log_softmax(v[0], 1)?;
        readout(g, y, 6)
    });
}

#[test]
fn gradcheck_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&[3, 5], 2.0, &mut rng);
    let gm = random_tensor(&[5], 1.5, &mut rng);
    let bt = random_tensor(&[5], 1.0, &mut rng);
    assert_grad(&[x, gm, bt], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        readout(g, y, 8)
    });
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[6, 3], 2.0, &mut rng);
    let gm = random_tensor(&[3], 1.5, &mut rng);
    let bt = random_tensor(&[3], 1.0, &mut rng);
    assert_grad(&[x.clone(), gm.clone(), bt.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
        readout(g, y, 10)
    });
    assert_grad(&[x, gm, bt], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0])), 1e-5)?;
        readout(g, y, 11)
    });
}

#[test]
fn gradcheck_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&[7, 3], 1.0, &mut rng);
    let k = random_tensor(&[5, 3], 1.0, &mut rng);
    assert_grad(&[x, k], |g, v| {
        let y = g.conv1d_depthwise(v[0], v[1])?;
        readout(g, y, 13)
    });

    let x = random_tensor(&[2, 9, 8], 1.0, &mut rng);
    let w = random_tensor(&[3, 2, 3, 3], 1.0, &mut rng);
    let b = random_tensor(&[3], 1.0, &mut rng);
    assert_grad(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2)?;
        readout(g, y, 14)
    });
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_tensor(&[4, 5], 2.0, &mut rng);
    for f in [Unary::Sigmoid, Unary::Swish, Unary::Exp] {
        assert_grad(std::slice::from_ref(&x), move |g, v| {
            let y = g.unary(v[0], f)?;
            readout(g, y, 16)
        });
    }
    let pos = x.map(|v| v.abs() + 0.5);
    assert_grad(&[pos], |g, v| {
        let y = g.unary(v[0], Unary::Log)?;
        readout(g, y, 17)
    });
    // Keep relu probes away from the kink.
    let off = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    assert_grad(&[off], |g, v| {
        let y = g.relu(v[0]);
        readout(g, y, 18)
    });
}

#[test]
fn gradcheck_broadcast_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_tensor(&[3, 4], 1.0, &mut rng);
    let r = random_tensor(&[4], 1.0, &mut rng);
    let y = random_tensor(&[3, 4], 1.0, &mut rng);
    assert_grad(&[x.clone(), r.clone(), y.clone()], |g, v| {
        let a = g.add_row(v[0], v[1])?;
        let m = g.mul_row(a, v[1])?;
        let s = g.sub(m, v[2])?;
        let p = g.mul(s, v[2])?;
        let q = g.scale(p, 0.7);
        let h0 = g.slice_cols(q, 0, 1)?;
        let h1 = g.slice_cols(q, 1, 3)?;
        let c = g.concat_cols(&[h1, h0])?;
        let rs = g.reshape(c, vec![2, 6])?;
        let pm = g.permute(rs, &[1, 0])?;
        readout(g, pm, 20)
    });
    let table = random_tensor(&[5, 3], 1.0, &mut rng);
    assert_grad(&[table], |g, v| {
        let e = g.gather_rows(v[0], &[4, 1, 4, 0])?;
        let m = g.mean(e);
        let s = g.sum(e);
        let t = g.add(m, s)?;
        let w = readout(g, e, 21)?;
        g.add(t, w)
    });
    let rel = random_tensor(&[4, 7], 1.0, &mut rng);
    assert_grad(&[rel], |g, v| {
        let y = g.rel_gather(v[0])?;
        readout(g, y, 22)
    });
}

#[test]
fn gradcheck_masked_dropout_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random_tensor(&[3, 3], 1.0, &mut rng);
    assert_grad(&[x], |g, v| {
        let m = g.mask_fill(v[0], &[true, false, true, true, true, false, false, false, true])?;
        let p = g.softmax(m, 1)?;
        let mut st = RngState::new(3);
        let d = g.dropout(p, 0.25, &mut st, true)?;
        readout(g, d, 24)
    });
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 1..8), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let t = Tensor::from_rows(&rows);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, 1).unwrap();
        let xs = g.constant(t.map(|v| v + shift));
        let ys = g.softmax(xs, 1).unwrap();
        for r in 0..rows.len() {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in row.iter().zip(g.value(ys).row(r)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
