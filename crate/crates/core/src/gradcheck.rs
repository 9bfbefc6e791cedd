//! Finite-difference gradient check suites, run by `tiltnet gradcheck`.
//!
//! Every suite compares an analytic gradient against central differences
//! (or, for the generative loss, against the per-example triple loop) and
//! reports the norm-wise relative error of each case against the suite's
//! tolerance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hmc::{potential, potential_grad};
use crate::loss::{disc_loss_and_grad, gen_loss_and_grad, LossGrad, Matrix, ScoreMatrix};
use crate::net::{InitScheme, LayerKind, LayerSpec, Network, NetworkConfig, ParamStore};
use crate::tensor::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, Tensor,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `∂f/∂x_k ≈ (f(x + h e_k) − f(x − h e_k)) / 2h` for every `k`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe)?;
        probe[k] = x[k] - h;
        let minus = f(&probe)?;
        probe[k] = x[k];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Deliberate bugs for checking that the suites catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the `j = i` term `1 − W_j` of the generative loss layer.
    GenDiagonalSign,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen-diagonal-sign" => Ok(Fault::GenDiagonalSign),
            other => Err(Error::config(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub name: String,
    pub error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: &'static str,
    pub tolerance: f64,
    pub cases: Vec<Case>,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Suite {
            name,
            tolerance,
            cases: Vec::new(),
        }
    }

    fn record(&mut self, name: impl Into<String>, error: f64) {
        self.cases.push(Case {
            name: name.into(),
            error,
            passed: error < self.tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "suite={} status={} cases={} tolerance={:e} worst={:e}",
            self.name,
            if self.passed() { "pass" } else { "FAIL" },
            self.cases.len(),
            self.tolerance,
            self.worst()
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per loss suite.
    pub loss_instances: usize,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            loss_instances: 50,
            fault: None,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn dot(a: &Tensor, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Every suite, in a fixed order.
pub fn run_suites(opts: &GradcheckOptions) -> Result<Vec<Suite>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(vec![
        conv_suite(&mut rng)?,
        pool_suite(&mut rng)?,
        dense_suite(&mut rng)?,
        relu_suite(&mut rng)?,
        loss_suite(&mut rng, opts, false)?,
        loss_suite(&mut rng, opts, true)?,
        triple_loop_suite(&mut rng, opts)?,
        net_suite(&mut rng)?,
        input_suite(&mut rng)?,
        potential_suite(&mut rng)?,
    ])
}

fn conv_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("conv2d", 1e-7);
    for (stride, pad) in [(1, 0), (1, 1), (2, 0)] {
        let x = gaussian(rng, [2, 7, 7], 1.0);
        let k = gaussian(rng, [3, 2, 3, 3], 1.0);
        let b = gaussian(rng, [3], 1.0);
        let out_shape = conv2d_forward(&x, &k, &b, stride, pad)?.shape().to_vec();
        let r = gaussian(rng, out_shape, 1.0);
        let grads = conv2d_backward(&r, &x, &k, stride, pad)?;
        let mut flat = [x.data(), k.data(), b.data()].concat();
        let (nx, nk) = (x.len(), k.len());
        let numeric = central_differences(&flat.clone(), FD_STEP, |p| {
            let xi = Tensor::new(x.shape().to_vec(), p[..nx].to_vec())?;
            let ki = Tensor::new(k.shape().to_vec(), p[nx..nx + nk].to_vec())?;
            let bi = Tensor::new(b.shape().to_vec(), p[nx + nk..].to_vec())?;
            Ok(dot(&conv2d_forward(&xi, &ki, &bi, stride, pad)?, r.data()))
        })?;
        flat.clear();
        flat.extend_from_slice(grads.input.data());
        flat.extend_from_slice(grads.kernels.data());
        flat.extend_from_slice(grads.bias.data());
        suite.record(format!("stride={stride} pad={pad}"), relative_error(&flat, &numeric));
    }
    Ok(suite)
}

fn pool_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("maxpool", 1e-7);
    for (window, stride) in [(2, 2), (3, 1)] {
        let x = gaussian(rng, [2, 6, 6], 1.0);
        let (out, argmax) = maxpool_forward(&x, window, stride)?;
        let r = gaussian(rng, out.shape().to_vec(), 1.0);
        let analytic = maxpool_backward(&r, &argmax, x.shape())?;
        let numeric = central_differences(x.data(), FD_STEP, |p| {
            let xi = Tensor::new(x.shape().to_vec(), p.to_vec())?;
            Ok(dot(&maxpool_forward(&xi, window, stride)?.0, r.data()))
        })?;
        suite.record(format!("window={window} stride={stride}"), relative_error(analytic.data(), &numeric));
    }
    Ok(suite)
}

fn dense_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("dense", 1e-8);
    let x = gaussian(rng, [2, 2, 3], 1.0);
    let w = gaussian(rng, [5, 12], 1.0);
    let b = gaussian(rng, [5], 1.0);
    let r = gaussian(rng, [5], 1.0);
    let grads = dense_backward(&r, &x, &w)?;
    let flat = [x.data(), w.data(), b.data()].concat();
    let numeric = central_differences(&flat, FD_STEP, |p| {
        let xi = Tensor::new(x.shape().to_vec(), p[..12].to_vec())?;
        let wi = Tensor::new([5, 12], p[12..72].to_vec())?;
        let bi = Tensor::new([5], p[72..].to_vec())?;
        Ok(dot(&dense_forward(&xi, &wi, &bi)?, r.data()))
    })?;
    let analytic = [grads.input.data(), grads.weight.data(), grads.bias.data()].concat();
    suite.record("5x12", relative_error(&analytic, &numeric));
    Ok(suite)
}

fn relu_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("relu", 1e-8);
    // keep inputs away from the kink
    let x = gaussian(rng, [20], 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let r = gaussian(rng, [20], 1.0);
    let analytic = relu_backward(&r, &x)?;
    let numeric = central_differences(x.data(), FD_STEP, |p| {
        Ok(dot(&relu_forward(&Tensor::new([20], p.to_vec())?), r.data()))
    })?;
    suite.record("20", relative_error(analytic.data(), &numeric));
    Ok(suite)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (ScoreMatrix, Vec<usize>) {
    let n = rng.random_range(2..=16);
    let c = rng.random_range(2..=10);
    let dist = Normal::new(0.0, 2.0).expect("positive std");
    let f = Matrix::from_fn(n, c, |_, _| dist.sample(rng));
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (f, labels)
}

/// The generative loss gradient under test, with any injected fault.
fn gen_under_test(f: &ScoreMatrix, labels: &[usize], fault: Option<Fault>) -> Result<(f64, LossGrad)> {
    let (loss, mut grad) = gen_loss_and_grad(f, labels)?;
    if fault == Some(Fault::GenDiagonalSign) {
        for (i, &y) in labels.iter().enumerate() {
            let w = importance(f, y)[i];
            grad.set(i, y, grad.get(i, y) - 2.0 * (1.0 - w));
        }
    }
    Ok((loss, grad))
}

fn importance(f: &ScoreMatrix, class: usize) -> Vec<f64> {
    let col = f.column(class);
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Sum over examples `i` of the per-example layer `∂ log p_{y_i}(x_i) / ∂F[j,y]`.
pub fn gen_grad_triple_loop(f: &ScoreMatrix, labels: &[usize]) -> LossGrad {
    let (n, c) = (f.rows(), f.cols());
    let mut grad = Matrix::zeros(n, c);
    for (i, &yi) in labels.iter().enumerate() {
        let w = importance(f, yi);
        for j in 0..n {
            for y in 0..c {
                let term = if y != yi {
                    0.0
                } else if j == i {
                    1.0 - w[j]
                } else {
                    -w[j]
                };
                grad.set(j, y, grad.get(j, y) + term);
            }
        }
    }
    grad
}

fn loss_suite(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, generative: bool) -> Result<Suite> {
    let mut suite = Suite::new(if generative { "loss-gen" } else { "loss-disc" }, 1e-8);
    for k in 0..opts.loss_instances {
        let (f, labels) = random_instance(rng);
        let eval = |m: &ScoreMatrix| {
            if generative {
                gen_under_test(m, &labels, opts.fault)
            } else {
                disc_loss_and_grad(m, &labels)
            }
        };
        let (_, analytic) = eval(&f)?;
        let numeric = central_differences(f.data(), FD_STEP, |p| {
            Ok(eval(&Matrix::new(f.rows(), f.cols(), p.to_vec())?)?.0)
        })?;
        suite.record(
            format!("instance {k} (n={}, C={})", f.rows(), f.cols()),
            relative_error(analytic.data(), &numeric),
        );
    }
    Ok(suite)
}

fn triple_loop_suite(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<Suite> {
    let mut suite = Suite::new("loss-gen-triple-loop", 1e-12);
    for k in 0..opts.loss_instances {
        let (f, labels) = random_instance(rng);
        let (_, closed) = gen_under_test(&f, &labels, opts.fault)?;
        let oracle = gen_grad_triple_loop(&f, &labels);
        suite.record(
            format!("instance {k} (n={}, C={})", f.rows(), f.cols()),
            relative_error(closed.data(), oracle.data()),
        );
    }
    Ok(suite)
}

/// 6x6 input, 3x3 conv, 2x2 pool, dense to three classes.
pub fn tiny_network(seed: u64) -> Result<Network> {
    Network::build(NetworkConfig {
        input_shape: [1, 6, 6],
        layers: vec![
            LayerSpec::new("conv1", LayerKind::Conv { out_channels: 2, kernel: 3, stride: 1, pad: 0 }),
            LayerSpec::new("pool1", LayerKind::MaxPool { window: 2, stride: 2 }),
            LayerSpec::new("ip1", LayerKind::Dense { outputs: 3 }),
        ],
        classes: 3,
        init: InitScheme::Gaussian(0.5),
        seed,
    })
}

fn flatten(params: &ParamStore) -> Vec<f64> {
    params.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

fn load_flat(net: &mut Network, flat: &[f64]) {
    let mut at = 0;
    for (_, t) in net.params_mut().iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

fn net_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("network-params", 1e-6);
    let mut net = tiny_network(rng.random())?;
    let images = gaussian(rng, [5, 1, 6, 6], 1.0);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let w0 = flatten(net.params());
    for (name, loss) in [
        ("disc", disc_loss_and_grad as fn(&ScoreMatrix, &[usize]) -> Result<(f64, LossGrad)>),
        ("gen", gen_loss_and_grad),
    ] {
        load_flat(&mut net, &w0);
        let (scores, cache) = net.forward_batch(&images)?;
        let (_, g) = loss(&scores, &labels)?;
        let analytic = flatten(&net.backward_params(&cache, &g)?);
        let numeric = central_differences(&w0, FD_STEP, |p| {
            load_flat(&mut net, p);
            Ok(loss(&net.forward_batch(&images)?.0, &labels)?.0)
        })?;
        suite.record(name, relative_error(&analytic, &numeric));
    }
    load_flat(&mut net, &w0);
    Ok(suite)
}

fn input_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("network-input", 1e-6);
    let net = tiny_network(rng.random())?;
    for class in 0..3 {
        let node = net.truncate_at("ip1", class)?;
        let x = gaussian(rng, [1, 6, 6], 1.0);
        let (_, analytic) = node.value_and_input_grad(&x)?;
        let numeric = central_differences(x.data(), FD_STEP, |p| node.value(&Tensor::new([1, 6, 6], p.to_vec())?))?;
        suite.record(format!("class {class}"), relative_error(analytic.data(), &numeric));
    }
    Ok(suite)
}

fn potential_suite(rng: &mut ChaCha8Rng) -> Result<Suite> {
    let mut suite = Suite::new("hmc-potential", 1e-5);
    let net = Network::build(NetworkConfig::lenet(rng.random()))?;
    let sigma = 10.0;
    for (layer, channel) in [("ip2", 3), ("conv2", 7)] {
        let node = net.truncate_at(layer, channel)?;
        let x = gaussian(rng, node.input_shape().to_vec(), 1.0);
        let analytic = potential_grad(&node, &x, sigma)?;
        let shape = x.shape().to_vec();
        let numeric = central_differences(x.data(), FD_STEP, |p| {
            potential(&node, &Tensor::new(shape.clone(), p.to_vec())?, sigma)
        })?;
        suite.record(format!("{layer}/{channel}"), relative_error(analytic.data(), &numeric));
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn central_differences_of_a_cubic() {
        let g = central_differences(&[1.0, -2.0], 1e-4, |p| Ok(p[0].powi(3) + 2.0 * p[1])).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-7);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn clean_tree_passes_every_suite() {
        let opts = GradcheckOptions {
            loss_instances: 10,
            ..GradcheckOptions::default()
        };
        for suite in run_suites(&opts).unwrap() {
            assert!(suite.passed(), "{suite}: {:?}", suite.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn injected_sign_bug_is_caught_and_named() {
        let opts = GradcheckOptions {
            loss_instances: 5,
            fault: Some(Fault::GenDiagonalSign),
            ..GradcheckOptions::default()
        };
        let suites = run_suites(&opts).unwrap();
        let failing: Vec<_> = suites.iter().filter(|s| !s.passed()).map(|s| s.name).collect();
        assert_eq!(failing, vec!["loss-gen", "loss-gen-triple-loop"]);
        let case = suites[5].failures().next().unwrap();
        assert!(case.name.starts_with("instance 0"), "{}", case.name);
    }
}
