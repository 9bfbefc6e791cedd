//! Hamiltonian Monte Carlo over input images.
//!
//! A node `f` of a trained network defines the density
//! `p(x) ∝ exp(f(x) − |x|²/2σ²)`, i.e. potential `U(x) = −f(x) + |x|²/2σ²`.
//! Momenta are drawn from `N(0, m·I)` so the kinetic energy is `|φ|²/2m`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::{Network, Truncated};
use crate::tensor::Tensor;

/// Starting image of a chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// i.i.d. pixels with this standard deviation.
    Gaussian(f64),
    Zero,
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Gaussian(std) => write!(f, "gaussian({std})"),
            Init::Zero => f.write_str("zero"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "zero" || s == "zeros" {
            return Ok(Init::Zero);
        }
        s.strip_prefix("gaussian(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| *v >= 0.0 && v.is_finite())
            .map(Init::Gaussian)
            .ok_or_else(|| Error::config(format!("bad init `{s}` (gaussian(std) or zero)")))
    }
}

/// Which iterations get recorded. The final state is always recorded.
#[derive(Clone, Debug, PartialEq)]
pub enum SnapshotSchedule {
    /// 0, 10, 50 and every multiple of 100.
    Checkpoints,
    /// Every `k` iterations starting at 0.
    Every(usize),
}

impl SnapshotSchedule {
    pub fn includes(&self, iteration: usize) -> bool {
        match *self {
            SnapshotSchedule::Checkpoints => matches!(iteration, 0 | 10 | 50) || iteration % 100 == 0,
            SnapshotSchedule::Every(k) => iteration % k == 0,
        }
    }

    /// Recorded iterations for a chain of `iterations` steps.
    pub fn iterations(&self, iterations: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..=iterations).filter(|&t| self.includes(t)).collect();
        if out.last() != Some(&iterations) {
            out.push(iterations);
        }
        out
    }
}

impl fmt::Display for SnapshotSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotSchedule::Checkpoints => f.write_str("checkpoints"),
            SnapshotSchedule::Every(k) => write!(f, "every({k})"),
        }
    }
}

impl FromStr for SnapshotSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "checkpoints" {
            return Ok(SnapshotSchedule::Checkpoints);
        }
        s.strip_prefix("every(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&k| k > 0)
            .map(SnapshotSchedule::Every)
            .ok_or_else(|| Error::config(format!("bad snapshot schedule `{s}` (checkpoints or every(k))")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmcConfig {
    /// Standard deviation of the Gaussian reference, in pixel units.
    pub sigma: f64,
    pub mass: f64,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub iterations: usize,
    pub init: Init,
    pub metropolis: bool,
    pub seed: u64,
    pub snapshots: SnapshotSchedule,
}

impl HmcConfig {
    /// Settings used for the LeNet visualizations.
    pub fn lenet() -> Self {
        HmcConfig {
            sigma: 10.0,
            mass: 1e-4,
            step_size: 1e-4,
            leapfrog_steps: 100,
            iterations: 300,
            init: Init::Gaussian(10.0),
            metropolis: true,
            seed: 0,
            snapshots: SnapshotSchedule::Checkpoints,
        }
    }

    /// Settings for an AlexNet-style convolutional node.
    pub fn alexnet_conv() -> Self {
        HmcConfig {
            mass: 1e-5,
            step_size: 3e-6,
            leapfrog_steps: 50,
            iterations: 100,
            ..HmcConfig::lenet()
        }
    }

    /// Settings for an AlexNet-style fully connected node, started from zero.
    pub fn alexnet_fc() -> Self {
        HmcConfig {
            iterations: 500,
            init: Init::Zero,
            ..HmcConfig::alexnet_conv()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("mass", self.mass), ("step size", self.step_size)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("hmc {name} must be positive, got {v}")));
            }
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::config("hmc leapfrog steps must be at least 1"));
        }
        Ok(())
    }
}

/// An energy landscape over images of a fixed shape.
pub trait Potential {
    fn input_shape(&self) -> &[usize];
    fn value(&self, x: &Tensor) -> Result<f64>;
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

/// `U(x) = −f(x) + |x|²/2σ²` for a network node `f`.
pub struct NodePotential<'a> {
    node: Truncated<'a>,
    sigma: f64,
}

impl<'a> NodePotential<'a> {
    pub fn new(node: Truncated<'a>, sigma: f64) -> Self {
        NodePotential { node, sigma }
    }

    pub fn node(&self) -> &Truncated<'a> {
        &self.node
    }
}

fn reference_term(x: &Tensor, sigma: f64) -> f64 {
    x.sum_squares() / (2.0 * sigma * sigma)
}

impl Potential for NodePotential<'_> {
    fn input_shape(&self) -> &[usize] {
        self.node.input_shape()
    }

    fn value(&self, x: &Tensor) -> Result<f64> {
        potential(&self.node, x, self.sigma)
    }

    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let (f, mut grad) = self.node.value_and_input_grad(x)?;
        let inv_var = 1.0 / (self.sigma * self.sigma);
        for (g, &xi) in grad.data_mut().iter_mut().zip(x.data()) {
            *g = -*g + xi * inv_var;
        }
        Ok((-f + reference_term(x, self.sigma), grad))
    }
}

/// Pure Gaussian reference `U(x) = |x|²/2σ²`.
#[derive(Clone, Debug)]
pub struct GaussianPotential {
    shape: Vec<usize>,
    sigma: f64,
}

impl GaussianPotential {
    pub fn new(shape: impl Into<Vec<usize>>, sigma: f64) -> Self {
        GaussianPotential {
            shape: shape.into(),
            sigma,
        }
    }
}

impl Potential for GaussianPotential {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn value(&self, x: &Tensor) -> Result<f64> {
        check_shape(&self.shape, x)?;
        Ok(reference_term(x, self.sigma))
    }

    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        check_shape(&self.shape, x)?;
        let inv_var = 1.0 / (self.sigma * self.sigma);
        Ok((reference_term(x, self.sigma), x.map(|v| v * inv_var)))
    }
}

fn check_shape(expected: &[usize], x: &Tensor) -> Result<()> {
    if x.shape() != expected {
        return Err(Error::shape(format!("potential expects {expected:?}, got {:?}", x.shape())));
    }
    Ok(())
}

/// `U(x)` for a network node.
pub fn potential(node: &Truncated<'_>, x: &Tensor, sigma: f64) -> Result<f64> {
    Ok(-node.value(x)? + reference_term(x, sigma))
}

/// `∂U/∂x = −∂f/∂x + x/σ²`, unpooling through the winners at `x`.
pub fn potential_grad(node: &Truncated<'_>, x: &Tensor, sigma: f64) -> Result<Tensor> {
    Ok(NodePotential::new(node.clone(), sigma).value_and_grad(x)?.1)
}

/// Position, momentum and the cached potential at the position.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub x: Tensor,
    pub phi: Tensor,
    pub u: f64,
    grad: Tensor,
    pub iteration: usize,
}

impl ChainState {
    pub fn new(potential: &dyn Potential, x: Tensor, phi: Tensor) -> Result<Self> {
        if phi.shape() != x.shape() {
            return Err(Error::shape("momentum and position shapes differ"));
        }
        let (u, grad) = potential.value_and_grad(&x)?;
        Ok(ChainState {
            x,
            phi,
            u,
            grad,
            iteration: 0,
        })
    }

    pub fn kinetic(&self, mass: f64) -> f64 {
        self.phi.sum_squares() / (2.0 * mass)
    }

    pub fn hamiltonian(&self, mass: f64) -> f64 {
        self.u + self.kinetic(mass)
    }
}

fn ensure_finite(t: &Tensor, what: &str, step: usize) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!(
            "{what} became non-finite at leapfrog step {step}; the step size is likely too large"
        )));
    }
    Ok(())
}

/// Integrate `L` leapfrog steps from `state`, returning the proposal.
pub fn leapfrog(state: &ChainState, potential: &dyn Potential, config: &HmcConfig) -> Result<ChainState> {
    let (eps, mass, steps) = (config.step_size, config.mass, config.leapfrog_steps);
    let mut x = state.x.clone();
    let mut phi = state.phi.clone();
    let mut grad = state.grad.clone();
    let mut u = state.u;
    phi.axpy(-0.5 * eps, &grad)?;
    for step in 1..=steps {
        x.axpy(eps / mass, &phi)?;
        ensure_finite(&x, "position", step)?;
        (u, grad) = potential.value_and_grad(&x)?;
        ensure_finite(&grad, "potential gradient", step)?;
        if !u.is_finite() {
            return Err(Error::NonFinite(format!("potential became {u} at leapfrog step {step}")));
        }
        phi.axpy(if step < steps { -eps } else { -0.5 * eps }, &grad)?;
        ensure_finite(&phi, "momentum", step)?;
    }
    Ok(ChainState {
        x,
        phi,
        u,
        grad,
        iteration: state.iteration,
    })
}

/// Result of one HMC iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub delta_h: f64,
    pub accepted: bool,
}

/// Refresh momentum, integrate, and accept or reject.
pub fn hmc_iterate(
    state: ChainState,
    potential: &dyn Potential,
    config: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ChainState, Transition)> {
    let momentum = Normal::new(0.0, config.mass.sqrt()).map_err(|e| Error::config(e.to_string()))?;
    let mut current = state;
    for v in current.phi.data_mut() {
        *v = momentum.sample(rng);
    }
    let proposal = leapfrog(&current, potential, config)
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("iteration {}: {msg}", current.iteration + 1)),
            other => other,
        })?;
    let delta_h = proposal.hamiltonian(config.mass) - current.hamiltonian(config.mass);
    let draw: f64 = rng.random();
    let accepted = !config.metropolis || delta_h <= 0.0 || draw < (-delta_h).exp();
    let mut next = if accepted { proposal } else { current };
    next.iteration += 1;
    Ok((next, Transition { delta_h, accepted }))
}

/// A recorded point of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub iteration: usize,
    pub image: Tensor,
    pub u: f64,
    pub k: f64,
    pub h: f64,
    /// Whether the transition into this state was accepted; `None` at
    /// iteration 0 or when Metropolis is off.
    pub accepted: Option<bool>,
}

impl SampleRecord {
    fn of(state: &ChainState, mass: f64, accepted: Option<bool>) -> Self {
        let k = state.kinetic(mass);
        SampleRecord {
            iteration: state.iteration,
            image: state.x.clone(),
            u: state.u,
            k,
            h: state.u + k,
            accepted,
        }
    }
}

/// Everything a chain produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRun {
    pub records: Vec<SampleRecord>,
    pub accepted: usize,
    pub proposals: usize,
}

impl ChainRun {
    pub fn final_image(&self) -> &Tensor {
        &self.records.last().expect("a chain records at least its start").image
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Initial image drawn from `config.init` with the chain's RNG.
pub fn initial_image(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut x = Tensor::zeros(shape.to_vec());
    if let Init::Gaussian(std) = init {
        if std > 0.0 {
            let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            for v in x.data_mut() {
                *v = dist.sample(rng);
            }
        }
    }
    Ok(x)
}

/// Run a chain of `config.iterations` steps on any potential.
pub fn run_chain(potential: &dyn Potential, config: &HmcConfig) -> Result<ChainRun> {
    run_chain_with(potential, config, |_, _| {})
}

/// As [`run_chain`], calling `visit` on every state (recorded or not).
pub fn run_chain_with(
    potential: &dyn Potential,
    config: &HmcConfig,
    mut visit: impl FnMut(&ChainState, Option<&Transition>),
) -> Result<ChainRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = initial_image(potential.input_shape(), config.init, &mut rng)?;
    let phi = Tensor::zeros(x.shape().to_vec());
    let mut state = ChainState::new(potential, x, phi)?;
    visit(&state, None);
    let recorded = config.snapshots.iterations(config.iterations);
    let mut records = vec![SampleRecord::of(&state, config.mass, None)];
    let mut accepted = 0;
    for _ in 0..config.iterations {
        let (next, transition) = hmc_iterate(state, potential, config, &mut rng)?;
        state = next;
        accepted += transition.accepted as usize;
        visit(&state, Some(&transition));
        if recorded.binary_search(&state.iteration).is_ok() {
            let flag = config.metropolis.then_some(transition.accepted);
            records.push(SampleRecord::of(&state, config.mass, flag));
        }
    }
    Ok(ChainRun {
        records,
        accepted,
        proposals: config.iterations,
    })
}

/// Sample images for channel `channel` of `layer`, sized so that the node
/// sees a single spatial position.
pub fn sample_node(net: &Network, layer: &str, channel: usize, config: &HmcConfig) -> Result<ChainRun> {
    let node = net.truncate_at(layer, channel)?;
    run_chain(&NodePotential::new(node, config.sigma), config)
}

/// Per-run manifest: a header line describing the chain, then one line per
/// snapshot, all as space-separated `key=value` pairs.
pub fn manifest_text(header: &[(&str, String)], config: &HmcConfig, run: &ChainRun, files: &[String]) -> String {
    let mut out = String::from("record=manifest");
    for (k, v) in header {
        out.push_str(&format!(" {k}={v}"));
    }
    out.push_str(&format!(
        " seed={} sigma={} mass={} step_size={} leapfrog_steps={} iterations={} init={} metropolis={} acceptance_rate={}\n",
        config.seed,
        config.sigma,
        config.mass,
        config.step_size,
        config.leapfrog_steps,
        config.iterations,
        config.init,
        config.metropolis,
        run.acceptance_rate()
    ));
    for (r, file) in run.records.iter().zip(files) {
        let accepted = r.accepted.map_or("na".to_string(), |a| a.to_string());
        out.push_str(&format!(
            "record=snapshot iteration={} file={file} u={} k={} h={} accepted={accepted}\n",
            r.iteration, r.u, r.k, r.h
        ));
    }
    out
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    header: &[(&str, String)],
    config: &HmcConfig,
    run: &ChainRun,
    files: &[String],
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_text(header, config, run, files)).map_err(|e| Error::io(path, e))
}
