//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's own gradient code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiltnet::loss::Matrix;
use tiltnet::net::{InitScheme, LayerKind, LayerSpec, NetworkConfig};
use tiltnet::Tensor;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = na.max(nb);
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn fd(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + STEP;
            let a = f(&p);
            p[k] = x[k] - STEP;
            let b = f(&p);
            p[k] = x[k];
            (a - b) / (2.0 * STEP)
        })
        .collect()
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Random score matrix with `n ≤ 16`, `C ≤ 10` and labels.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let n = rng.random_range(2..=16);
    let c = rng.random_range(2..=10);
    let f = Matrix::from_fn(n, c, |_, _| rng.random_range(-4.0..4.0));
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (f, labels)
}

fn column_weights(f: &Matrix, y: usize) -> Vec<f64> {
    let col: Vec<f64> = (0..f.rows()).map(|j| f.get(j, y)).collect();
    let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Discriminative batch log-likelihood, computed directly.
pub fn disc_loss(f: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let row = f.row(j);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row[y] - (m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        })
        .sum()
}

/// Generative batch log-likelihood `Σ_i F[i,y_i] − log((1/n) Σ_k exp F[k,y_i])`.
pub fn gen_loss(f: &Matrix, labels: &[usize]) -> f64 {
    let n = f.rows() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let col: Vec<f64> = (0..f.rows()).map(|k| f.get(k, y)).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            f.get(i, y) - (m + (col.iter().map(|v| (v - m).exp()).sum::<f64>() / n).ln())
        })
        .sum()
}

/// Per-example generative layer summed over examples, one entry at a time.
pub fn gen_grad_triple_loop(f: &Matrix, labels: &[usize]) -> Matrix {
    let (n, c) = (f.rows(), f.cols());
    let mut g = Matrix::zeros(n, c);
    for (i, &yi) in labels.iter().enumerate() {
        let w = column_weights(f, yi);
        for j in 0..n {
            for y in 0..c {
                let term = if y != yi {
                    0.0
                } else if j == i {
                    1.0 - w[j]
                } else {
                    -w[j]
                };
                g.set(j, y, g.get(j, y) + term);
            }
        }
    }
    g
}

/// 6x6 input, 3x3 conv, 2x2 pool, dense classifier.
pub fn tiny_conv_config(classes: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        input_shape: [1, 6, 6],
        layers: vec![
            LayerSpec::new("conv1", LayerKind::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 0 }),
            LayerSpec::new("pool1", LayerKind::MaxPool { window: 2, stride: 2 }),
            LayerSpec::new("ip1", LayerKind::Dense { outputs: classes }),
        ],
        classes,
        init: InitScheme::Gaussian(0.5),
        seed,
    }
}

pub fn flat_params(store: &tiltnet::ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

pub fn set_flat_params(net: &mut tiltnet::Network, flat: &[f64]) {
    let mut at = 0;
    for (_, t) in net.params_mut().iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}
