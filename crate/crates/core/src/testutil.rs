// Plain nested-loop reference implementations used as oracles in unit tests.

use crate::nn::{Linear, ParamStore};
use crate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().expect("2-D");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(p, x)| x * b[p][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = mat(&store.get(l.w).value);
    let mut y = matmul(x, &w);
    if let Some(b) = l.b {
        let b = store.get(b).value.data();
        for row in &mut y {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    map(a, |x| c * x)
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Row-wise normalization with affine parameters.
pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| gamma[j] * (x - mean) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

/// Column-wise normalization with biased batch variance.
pub fn batch_norm_train(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let cols = transpose(a);
    let normed: Mat = cols
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            c.iter()
                .map(|x| gamma[j] * (x - mean) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect();
    transpose(&normed)
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
            r.iter().map(|x| (x - m).exp() / z).collect()
        })
        .collect()
}

pub fn cols(a: &Mat, start: usize, n: usize) -> Mat {
    a.iter().map(|r| r[start..start + n].to_vec()).collect()
}

pub fn concat_cols(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn close(a: &Mat, b: &Tensor, tol: f64) {
    assert_eq!(b.dims2(), Some((a.len(), a[0].len())));
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let y = b.at2(i, j);
            assert!((x - y).abs() <= tol * (1.0 + x.abs()), "({}, {}): {} vs {}", i, j, x, y);
        }
    }
}
