//! Acceptance suite: one `criterion N: PASS|FAIL|SKIP` line per criterion.
//!
//! Environment:
//! - `TILTNET_CRITERIA=1,2,5` runs a subset (all by default).
//! - `TILTNET_LONG=1` enables the multi-hour reproduction run (criterion 7).
//! - `TILTNET_MNIST_DIR` points at an IDX directory; otherwise `data/mnist`
//!   is used when present, falling back to `data/mnist-subset`.

#[path = "../common/mod.rs"]
mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::{disc_loss, fd, flat_params, gen_grad_triple_loop, gen_loss, max_abs_diff, rel_err, set_flat_params};
use tiltnet::data::{read_idx, synthetic_dataset, Dataset, SyntheticSpec};
use tiltnet::hmc::{leapfrog, run_chain_with, sample_node, ChainState, GaussianPotential, HmcConfig, Init, NodePotential};
use tiltnet::hmc::{Potential, SnapshotSchedule};
use tiltnet::loss::{disc_loss_and_grad, gen_loss_and_grad, Matrix};
use tiltnet::net::{InitScheme, LayerKind, LayerSpec};
use tiltnet::train::{
    batch_log_likelihoods, evaluate, run_training, Hyperparams, LogRecord, Mode, Schedule, TrainOptions,
};
use tiltnet::{Network, NetworkConfig, Tensor};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn loss_exactness() -> Outcome {
    let mut rng = common::rng(2024);
    let (mut worst_fd, mut worst_loop) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (f, labels) = common::random_instance(&mut rng);
        let reshape = |p: &[f64]| Matrix::new(f.rows(), f.cols(), p.to_vec()).unwrap();
        let (_, gd) = disc_loss_and_grad(&f, &labels).unwrap();
        let (_, gg) = gen_loss_and_grad(&f, &labels).unwrap();
        let nd = fd(f.data(), |p| disc_loss(&reshape(p), &labels));
        let ng = fd(f.data(), |p| gen_loss(&reshape(p), &labels));
        worst_fd = worst_fd.max(rel_err(gd.data(), &nd)).max(rel_err(gg.data(), &ng));
        worst_loop = worst_loop.max(max_abs_diff(gg.data(), gen_grad_triple_loop(&f, &labels).data()));
    }
    verdict(
        worst_fd < 1e-8 && worst_loop <= 1e-12,
        format!("instances=200 fd_rel_worst={worst_fd:.2e} (<1e-8) triple_loop_worst={worst_loop:.2e} (<=1e-12)"),
    )
}

fn structural_identities() -> Outcome {
    let mut rng = common::rng(7);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let (f, labels) = common::random_instance(&mut rng);
        let (_, gd) = disc_loss_and_grad(&f, &labels).unwrap();
        let (_, gg) = gen_loss_and_grad(&f, &labels).unwrap();
        for j in 0..f.rows() {
            worst = worst.max(gd.row(j).iter().sum::<f64>().abs());
        }
        for y in 0..f.cols() {
            worst = worst.max(gg.column(y).iter().sum::<f64>().abs());
        }
        let shift = 10.0 * (k as f64 - 100.0) / 7.0;
        let by_row = Matrix::from_fn(f.rows(), f.cols(), |r, c| f.get(r, c) + shift * (1.0 + r as f64));
        let by_col = Matrix::from_fn(f.rows(), f.cols(), |r, c| f.get(r, c) - shift * (1.0 + c as f64));
        let (_, gd_shift) = disc_loss_and_grad(&by_row, &labels).unwrap();
        let (_, gg_shift) = gen_loss_and_grad(&by_col, &labels).unwrap();
        worst = worst
            .max(max_abs_diff(gd.data(), gd_shift.data()))
            .max(max_abs_diff(gg.data(), gg_shift.data()));
    }
    verdict(worst <= 1e-10, format!("instances=200 worst={worst:.2e} (<=1e-10)"))
}

fn end_to_end_gradient() -> Outcome {
    let mut net = Network::build(common::tiny_conv_config(4, 31)).unwrap();
    let mut rng = common::rng(5);
    let images = common::uniform_tensor(&mut rng, &[8, 1, 6, 6], 1.0);
    let labels = vec![0, 1, 2, 3, 3, 2, 1, 0];
    let base = flat_params(net.params());
    let mut errors = Vec::new();
    for gen in [false, true] {
        let (scores, cache) = net.forward_batch(&images).unwrap();
        let (_, g) = if gen {
            gen_loss_and_grad(&scores, &labels).unwrap()
        } else {
            disc_loss_and_grad(&scores, &labels).unwrap()
        };
        let analytic = flat_params(&net.backward_params(&cache, &g).unwrap());
        let numeric = fd(&base, |p| {
            set_flat_params(&mut net, p);
            let (s, _) = net.forward_batch(&images).unwrap();
            if gen {
                gen_loss(&s, &labels)
            } else {
                disc_loss(&s, &labels)
            }
        });
        set_flat_params(&mut net, &base);
        errors.push(rel_err(&analytic, &numeric));
    }
    verdict(
        errors.iter().all(|&e| e < 1e-6),
        format!("disc_rel={:.2e} gen_rel={:.2e} (<1e-6)", errors[0], errors[1]),
    )
}

fn plain_config(sigma: f64, mass: f64, eps: f64, steps: usize, iterations: usize) -> HmcConfig {
    HmcConfig {
        sigma,
        mass,
        step_size: eps,
        leapfrog_steps: steps,
        iterations,
        init: Init::Gaussian(sigma),
        metropolis: true,
        seed: 99,
        snapshots: SnapshotSchedule::Every(usize::MAX),
    }
}

fn hmc_correctness() -> Outcome {
    // (a) integrate forward, flip momentum, integrate back
    let pot = GaussianPotential::new([3, 4], 1.7);
    let mut rng = common::rng(8);
    let x = common::uniform_tensor(&mut rng, &[3, 4], 3.0);
    let phi = common::uniform_tensor(&mut rng, &[3, 4], 1.0);
    let cfg = plain_config(1.7, 1.0, 0.05, 40, 1);
    let start = ChainState::new(&pot, x.clone(), phi.clone()).unwrap();
    let mut end = leapfrog(&start, &pot, &cfg).unwrap();
    end.phi.scale(-1.0);
    let mut back = leapfrog(&end, &pot, &cfg).unwrap();
    back.phi.scale(-1.0);
    let reversal = max_abs_diff(back.x.data(), x.data()).max(max_abs_diff(back.phi.data(), phi.data()));

    // (b) halving the step size over the same trajectory length
    let quad = GaussianPotential::new([1], 1.0);
    let drift = |eps: f64, steps: usize| {
        let s = ChainState::new(&quad, Tensor::full([1], 1.0), Tensor::zeros([1])).unwrap();
        let e = leapfrog(&s, &quad, &plain_config(1.0, 1.0, eps, steps, 1)).unwrap();
        (e.hamiltonian(1.0) - s.hamiltonian(1.0)).abs()
    };
    let ratio = drift(0.1, 10) / drift(0.05, 20);

    // (c) a network with all-zero weights leaves only the Gaussian reference
    let zero = Network::build(NetworkConfig {
        input_shape: [1, 2, 2],
        layers: vec![LayerSpec::new("ip1", LayerKind::Dense { outputs: 2 })],
        classes: 2,
        init: InitScheme::Zeros,
        seed: 0,
    })
    .unwrap();
    let sigma = 10.0;
    let pot = NodePotential::new(zero.truncate_at("ip1", 1).unwrap(), sigma);
    let (burn_in, kept) = (200usize, 10_000usize);
    // With unit mass the reference oscillates at frequency 1/sigma; a quarter
    // period per trajectory decorrelates successive samples.
    let steps = 10;
    let eps = std::f64::consts::FRAC_PI_2 * sigma / steps as f64;
    let cfg = plain_config(sigma, 1.0, eps, steps, burn_in + kept);
    let dim = pot.input_shape().iter().product::<usize>();
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    let run = run_chain_with(&pot, &cfg, |s, _| {
        if s.iteration > burn_in {
            for (k, &v) in s.x.data().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
    })
    .unwrap();
    let n = kept as f64;
    let mean_worst = sum.iter().map(|s| (s / n).abs()).fold(0.0, f64::max);
    let var_worst = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / n - (s / n).powi(2)) / (sigma * sigma) - 1.0).abs())
        .fold(0.0, f64::max);

    let ok = reversal < 1e-8 && (3.5..=4.5).contains(&ratio) && mean_worst <= 0.05 * sigma && var_worst <= 0.05;
    verdict(
        ok,
        format!(
            "reversal={reversal:.2e} (<1e-8) dH_ratio={ratio:.3} ([3.5,4.5]) samples={kept} acceptance={:.3} \
             |mean|/sigma={:.4} (<=0.05) var_rel_err={var_worst:.4} (<=0.05)",
            run.acceptance_rate(),
            mean_worst / sigma
        ),
    )
}

fn desk_training() -> Outcome {
    let data = synthetic_dataset(&SyntheticSpec::new(512, 2, 28, 5)).unwrap();
    let hyper = Hyperparams {
        max_epochs: 3,
        seed: 5,
        ..Hyperparams::default()
    };
    let fresh = || {
        let mut cfg = NetworkConfig::lenet(5);
        cfg.classes = 2;
        cfg.layers.last_mut().unwrap().kind = LayerKind::Dense { outputs: 2 };
        Network::build(cfg).unwrap()
    };
    let (net, _) = run_training(fresh(), &data, &Schedule::new(Mode::Dg), &hyper, &TrainOptions::default()).unwrap();
    let dg_error = evaluate(&net, &data).unwrap();

    let gg_hyper = Hyperparams { max_epochs: 1, ..hyper };
    let start = fresh();
    let (_, lg_before) = batch_log_likelihoods(&start, &data, hyper.batch_size).unwrap();
    let (net, _) = run_training(start, &data, &Schedule::new(Mode::Gg), &gg_hyper, &TrainOptions::default()).unwrap();
    let (_, lg_after) = batch_log_likelihoods(&net, &data, hyper.batch_size).unwrap();
    verdict(
        dg_error <= 0.02 && lg_after > lg_before,
        format!("dg_train_error={dg_error:.4} (<=0.02) gg_l_G {lg_before:.4} -> {lg_after:.4} (must increase)"),
    )
}

fn mnist_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("TILTNET_MNIST_DIR") {
        return PathBuf::from(dir);
    }
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let full = root.join("mnist");
    if full.join("train-images-idx3-ubyte.gz").exists() {
        full
    } else {
        root.join("mnist-subset")
    }
}

fn load_mnist() -> tiltnet::Result<(Dataset, Dataset, PathBuf)> {
    let dir = mnist_dir();
    let train = read_idx(dir.join("train-images-idx3-ubyte.gz"), dir.join("train-labels-idx1-ubyte.gz"))?;
    let test = read_idx(dir.join("t10k-images-idx3-ubyte.gz"), dir.join("t10k-labels-idx1-ubyte.gz"))?;
    Ok((train, test, dir))
}

fn progress(tag: String) -> impl Fn(&LogRecord) {
    move |r| eprintln!("  [{tag}] {}", r.to_line())
}

fn train_lenet(train: &Dataset, test: &Dataset, schedule: Schedule, seed: u64) -> Network {
    let hyper = Hyperparams {
        seed,
        ..Hyperparams::default()
    };
    let report = progress(format!("{} seed={seed}", schedule.mode));
    let opts = TrainOptions {
        eval: Some(test),
        on_record: Some(&report),
        ..TrainOptions::default()
    };
    run_training(Network::build(NetworkConfig::lenet(seed)).unwrap(), train, &schedule, &hyper, &opts)
        .expect("training on MNIST")
        .0
}

fn sampler_self_consistency(cache: &mut Option<Network>) -> Outcome {
    let (train, test, dir) = match load_mnist() {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("cannot load MNIST: {e}")),
    };
    let clock = Instant::now();
    let net = train_lenet(&train, &test, Schedule::new(Mode::Dg), 1);
    let test_error = evaluate(&net, &test).unwrap();
    let train_secs = clock.elapsed().as_secs_f64();

    let class_layer = net.config().layers.last().unwrap().name.clone();
    let clock = Instant::now();
    let mut hits = 0;
    let mut misses = Vec::new();
    for k in 0..20u64 {
        let digit = (k / 2) as usize;
        let cfg = HmcConfig {
            seed: 1000 + k,
            ..HmcConfig::lenet()
        };
        let run = sample_node(&net, &class_layer, digit, &cfg).expect("chain");
        let image = run.final_image();
        let x = Tensor::new([1, 1, 28, 28], image.data().to_vec()).unwrap();
        let predicted = net.predict(&x).unwrap()[0];
        eprintln!("  [chain {k}] target={digit} predicted={predicted} acceptance={:.2}", run.acceptance_rate());
        if predicted == digit {
            hits += 1;
        } else {
            misses.push(format!("{digit}->{predicted}"));
        }
    }
    let sample_secs = clock.elapsed().as_secs_f64();
    let detail = format!(
        "data={} train={} test_error={test_error:.4} (<=0.025) hits={hits}/20 (>=16) misses=[{}] \
         train_secs={train_secs:.0} secs_per_chain={:.1}",
        dir.file_name().unwrap().to_string_lossy(),
        train.len(),
        misses.join(","),
        sample_secs / 20.0
    );
    *cache = Some(net);
    verdict(test_error <= 0.025 && hits >= 16, detail)
}

fn mnist_reproduction(seed1_dg: Option<Network>) -> Outcome {
    if std::env::var("TILTNET_LONG").map_or(true, |v| v != "1") {
        return Outcome::Skip("long-running; set TILTNET_LONG=1".into());
    }
    let (train, test, dir) = match load_mnist() {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("cannot load MNIST: {e}")),
    };
    let mut cached = seed1_dg;
    let mut rows = Vec::new();
    let mut ordered = true;
    for seed in 1..=3u64 {
        let dg = match cached.take().filter(|_| seed == 1) {
            Some(net) => net,
            None => train_lenet(&train, &test, Schedule::new(Mode::Dg), seed),
        };
        let gg_dg = train_lenet(&train, &test, Schedule::new(Mode::GgDg), seed);
        let (e_dg, e_gg) = (evaluate(&dg, &test).unwrap(), evaluate(&gg_dg, &test).unwrap());
        ordered &= e_gg < e_dg;
        rows.push(format!("seed{seed}: dg={e_dg:.4} gg+dg={e_gg:.4}"));
        eprintln!("  [reproduction] {}", rows.last().unwrap());
    }
    verdict(
        ordered,
        format!(
            "data={} {} (binding: gg+dg < dg on every seed; reported bands dg [0.009,0.013], gg+dg 0.0078+-0.002)",
            dir.file_name().unwrap().to_string_lossy(),
            rows.join(" ")
        ),
    )
}

fn selected() -> Vec<usize> {
    match std::env::var("TILTNET_CRITERIA") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=8).collect(),
    }
}

fn main() -> ExitCode {
    let wanted = selected();
    let mut seed1_dg = None;
    let mut failed = 0;
    for id in 1..=8 {
        if !wanted.contains(&id) {
            continue;
        }
        let clock = Instant::now();
        let outcome = match id {
            1 => loss_exactness(),
            2 => structural_identities(),
            3 => end_to_end_gradient(),
            4 => hmc_correctness(),
            5 => desk_training(),
            6 => sampler_self_consistency(&mut seed1_dg),
            7 => mnist_reproduction(seed1_dg.take()),
            _ => Outcome::Skip("ImageNet results are not desk-reproducible; no check".into()),
        };
        let secs = clock.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id}: {tag} {detail} [{secs:.1}s]");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
