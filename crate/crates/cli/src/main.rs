//! `tiltnet`: train, evaluate, sample from, gradient-check and inspect
//! networks described by a run configuration file.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::RunConfig;
use tiltnet::gradcheck::{run_suites, Fault, GradcheckOptions};
use tiltnet::hmc::{sample_node, write_manifest, ChainRun, HmcConfig};
use tiltnet::image::render_image;
use tiltnet::net::{load_checkpoint, Checkpoint};
use tiltnet::train::{checkpoint_path, evaluate, run_training, LogRecord, TrainOptions};
use tiltnet::{Error, Network, Tensor};

#[derive(Parser)]
#[command(name = "tiltnet", version, about = "Generative-gradient CNN training and HMC visualization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate, sample from or inspect.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Layer whose node is sampled (default: the class layer).
    #[arg(long, global = true)]
    layer: Option<String>,
    /// Channel of `--layer` to sample.
    #[arg(long, global = true, default_value_t = 0)]
    channel: usize,
    /// Override the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a network and write per-epoch checkpoints and a metrics log.
    Train,
    /// Print the error rate of a checkpoint on the configured data.
    Eval,
    /// Draw HMC samples for one node of a checkpoint.
    Sample,
    /// Run the finite-difference gradient suites.
    Gradcheck,
    /// Describe a network or checkpoint.
    Inspect,
}

/// Failure classes, one exit code each.
enum Failure {
    Config(String),
    Io(String),
    Numeric(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Check(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Numeric(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Corrupt { .. } | Error::VersionMismatch { .. } | Error::Checksum { .. } => {
                Failure::Io(msg)
            }
            Error::NonFinite(_) | Error::StaleCache { .. } => Failure::Numeric(msg),
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => Failure::Config(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train => cmd_train(&cli),
        Command::Eval => cmd_eval(&cli),
        Command::Sample => cmd_sample(&cli),
        Command::Gradcheck => cmd_gradcheck(&cli),
        Command::Inspect => cmd_inspect(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config("--config is required for this command".into()))?;
    Ok(RunConfig::load(path, cli.seed)?)
}

fn require<T>(value: Option<T>, what: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::Config(format!("{what} is required for this command")))
}

fn cmd_train(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let network = require(cfg.network.clone(), "a [network] section")?;
    let data = require(cfg.data.as_ref(), "a [data] section")?;
    // Load everything before touching the output directory.
    let train = data.load_train()?;
    let test = data.load_test()?;
    let net = Network::build(network)?;

    let print = |r: &LogRecord| println!("{}", r.to_line());
    let opts = TrainOptions {
        run_dir: Some(cfg.output_dir.clone()),
        eval: test.as_ref(),
        resume: cfg.resume,
        on_record: Some(&print),
    };
    let (net, log) = run_training(net, &train, &cfg.schedule, &cfg.hyper, &opts)?;
    let scored = test.as_ref().unwrap_or(&train);
    println!("error_rate={}", evaluate(&net, scored)?);
    let ess_min = log.epochs().map(|e| e.ess_min).fold(f64::INFINITY, f64::min);
    println!("ess_min={ess_min}");
    println!(
        "checkpoint={}",
        checkpoint_path(&cfg.output_dir, cfg.hyper.max_epochs).display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let data = require(cfg.data.as_ref(), "a [data] section")?;
    let ckpt = require(cli.checkpoint.as_deref(), "--checkpoint")?;
    let net = load_checkpoint(ckpt)?;
    let dataset = data.load_eval()?;
    println!("error_rate={}", evaluate(&net, &dataset)?);
    Ok(())
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn cmd_sample(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let ckpt = require(cli.checkpoint.as_deref(), "--checkpoint")?;
    let net = load_checkpoint(ckpt)?;
    let layer = match &cli.layer {
        Some(l) => l.clone(),
        None => net.config().layers.last().expect("validated network").name.clone(),
    };
    let node = net.truncate_at(&layer, cli.channel)?;
    let input_shape = node.input_shape().to_vec();
    let is_class_node = net.layer_index(&layer)? + 1 == net.config().layers.len();
    println!("node={layer}/{} input_shape={}", cli.channel, shape_text(&input_shape));

    let runs: Vec<ChainRun> = (0..cfg.chains)
        .into_par_iter()
        .map(|k| {
            let hmc = HmcConfig {
                seed: cfg.hmc.seed.wrapping_add(k as u64),
                ..cfg.hmc.clone()
            };
            sample_node(&net, &layer, cli.channel, &hmc)
        })
        .collect::<Result<_, _>>()?;

    let out = cfg.output_dir.join("samples").join(format!("{layer}-{}", cli.channel));
    let mut hits = 0;
    for (k, run) in runs.iter().enumerate() {
        let dir = out.join(format!("chain-{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let ext = if input_shape[0] == 3 { "ppm" } else { "pgm" };
        let files: Vec<String> = run
            .records
            .iter()
            .map(|r| format!("iter-{:04}.{ext}", r.iteration))
            .collect();
        for (r, f) in run.records.iter().zip(&files) {
            render_image(&r.image, dir.join(f))?;
        }
        let hmc = HmcConfig {
            seed: cfg.hmc.seed.wrapping_add(k as u64),
            ..cfg.hmc.clone()
        };
        let header = [
            ("layer", layer.clone()),
            ("channel", cli.channel.to_string()),
            ("chain", k.to_string()),
            ("input_shape", shape_text(&input_shape)),
        ];
        write_manifest(dir.join("manifest.txt"), &header, &hmc, run, &files)?;

        let last = run.records.last().expect("chains record their start");
        let mut line = format!(
            "chain={k} seed={} snapshots={} acceptance_rate={} final_u={}",
            hmc.seed,
            files.len(),
            run.acceptance_rate(),
            last.u
        );
        if is_class_node {
            let mut batch = vec![1];
            batch.extend_from_slice(&input_shape);
            let x = Tensor::new(batch, last.image.data().to_vec())?;
            let predicted = net.predict(&x)?[0];
            hits += (predicted == cli.channel) as usize;
            line.push_str(&format!(" predicted={predicted}"));
        }
        println!("{line}");
    }
    if is_class_node {
        println!(
            "target={} hits={hits} chains={} hit_rate={}",
            cli.channel,
            runs.len(),
            hits as f64 / runs.len() as f64
        );
    }
    println!("output={}", out.display());
    Ok(())
}

fn cmd_gradcheck(cli: &Cli) -> CmdResult {
    let seed = match &cli.config {
        Some(_) => load_config(cli)?.seed,
        None => cli.seed.unwrap_or(0),
    };
    let fault = cli.inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
    let opts = GradcheckOptions {
        seed,
        fault,
        ..GradcheckOptions::default()
    };
    let suites = run_suites(&opts)?;
    let mut failed = Vec::new();
    for suite in &suites {
        println!("{suite}");
        for case in suite.failures() {
            println!("  failed suite={} case=\"{}\" error={:e}", suite.name, case.name, case.error);
            failed.push(format!("{}/{}", suite.name, case.name));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} gradient check case(s) over tolerance, first: {}",
            failed.len(),
            failed[0]
        )))
    }
}

fn describe(net: &Network) {
    let shapes = net.shape_table();
    for (i, spec) in net.config().layers.iter().enumerate() {
        let params: usize = ["weight", "bias"]
            .iter()
            .filter_map(|s| net.params().get(&format!("{}.{s}", spec.name)))
            .map(Tensor::len)
            .sum();
        let node_input = net
            .required_input_shape(&spec.name)
            .map(|s| shape_text(&s))
            .unwrap_or_else(|_| "none".into());
        println!(
            "layer={} kind={} output={} params={params} node_input={node_input}",
            spec.name,
            spec.kind,
            shape_text(&shapes[i + 1])
        );
    }
    println!(
        "input={} classes={} param_count={}",
        shape_text(net.input_shape()),
        net.classes(),
        net.param_count()
    );
}

fn cmd_inspect(cli: &Cli) -> CmdResult {
    if let Some(path) = &cli.checkpoint {
        let ckpt = Checkpoint::read(path)?;
        for (k, v) in &ckpt.meta {
            println!("meta.{k}={v}");
        }
        describe(&ckpt.network()?);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let network = require(cfg.network, "a [network] section or --checkpoint")?;
    describe(&Network::build(network)?);
    print_paths(&cfg.output_dir);
    Ok(())
}

fn print_paths(output_dir: &Path) {
    println!("output_dir={}", output_dir.display());
}
