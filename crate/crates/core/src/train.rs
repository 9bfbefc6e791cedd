//! Mini-batch SGD with momentum and weight decay, the DG / GG / GG+DG
//! schedules, evaluation, and the per-epoch metrics log.
//!
//! Everything here is ascent: gradients are of the log-likelihood and
//! parameters move along them.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::loss::{
    disc_loss_and_grad, gen_loss_and_grad, importance_weights, loss_op_count, LossGrad,
};
use crate::net::{Checkpoint, Network, ParamGrads, ParamStore};
use crate::tensor::{mac_count, Tensor};

const EVAL_CHUNK: usize = 128;
const LOG_FILE: &str = "metrics.log";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    /// The MNIST protocol: batch 64, lr 0.01, decay 5e-4, momentum 0.9, 25 epochs.
    fn default() -> Self {
        Hyperparams {
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 0.0005,
            momentum: 0.9,
            max_epochs: 25,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and max epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Which loss produces the score gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Discriminative,
    Generative,
}

impl Objective {
    pub fn tag(self) -> &'static str {
        match self {
            Objective::Discriminative => "dg",
            Objective::Generative => "gg",
        }
    }

    fn loss_and_grad(self, scores: &crate::loss::ScoreMatrix, labels: &[usize]) -> Result<(f64, LossGrad)> {
        match self {
            Objective::Discriminative => disc_loss_and_grad(scores, labels),
            Objective::Generative => gen_loss_and_grad(scores, labels),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Dg,
    Gg,
    GgDg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dg => "dg",
            Mode::Gg => "gg",
            Mode::GgDg => "gg+dg",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dg" => Ok(Mode::Dg),
            "gg" => Ok(Mode::Gg),
            "gg+dg" | "ggdg" => Ok(Mode::GgDg),
            other => Err(Error::config(format!("unknown training mode `{other}` (dg, gg, gg+dg)"))),
        }
    }
}

/// Learning-rate policy inside one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrPolicy {
    Constant,
    /// Multiply by `gamma` every `every` epochs of the stage.
    Step { every: usize, gamma: f64 },
}

impl LrPolicy {
    fn rate(&self, base: f64, epochs_into_stage: usize) -> f64 {
        match *self {
            LrPolicy::Constant => base,
            LrPolicy::Step { every, gamma } => base * gamma.powi((epochs_into_stage / every) as i32),
        }
    }
}

impl fmt::Display for LrPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrPolicy::Constant => f.write_str("constant"),
            LrPolicy::Step { every, gamma } => write!(f, "step({every},{gamma})"),
        }
    }
}

impl FromStr for LrPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "constant" {
            return Ok(LrPolicy::Constant);
        }
        let bad = || Error::config(format!("bad lr policy `{s}` (constant or step(every,gamma))"));
        let args = s.strip_prefix("step(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
        let (every, gamma) = args.split_once(',').ok_or_else(bad)?;
        let every: usize = every.trim().parse().map_err(|_| bad())?;
        let gamma: f64 = gamma.trim().parse().map_err(|_| bad())?;
        if every == 0 || !(gamma > 0.0) {
            return Err(bad());
        }
        Ok(LrPolicy::Step { every, gamma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub mode: Mode,
    /// GG epochs before switching to DG; only read in `GgDg` mode.
    pub pretrain_epochs: usize,
    /// Base rate of the DG refinement stage; only read in `GgDg` mode.
    pub refine_lr: f64,
    pub lr_policy: LrPolicy,
}

impl Schedule {
    pub fn new(mode: Mode) -> Self {
        Schedule {
            mode,
            pretrain_epochs: 16,
            refine_lr: 0.003,
            lr_policy: LrPolicy::Constant,
        }
    }

    pub fn gg_dg(pretrain_epochs: usize, refine_lr: f64) -> Self {
        Schedule {
            pretrain_epochs,
            refine_lr,
            ..Schedule::new(Mode::GgDg)
        }
    }

    pub fn validate(&self, hyper: &Hyperparams) -> Result<()> {
        if self.mode == Mode::GgDg {
            if self.pretrain_epochs >= hyper.max_epochs {
                return Err(Error::config(format!(
                    "pre-train epochs ({}) must be fewer than max epochs ({})",
                    self.pretrain_epochs, hyper.max_epochs
                )));
            }
            if !(self.refine_lr > 0.0 && self.refine_lr.is_finite()) {
                return Err(Error::config(format!("refine lr {} must be positive", self.refine_lr)));
            }
        }
        Ok(())
    }

    /// Objective, stage base rate and first epoch of the stage for 0-based `epoch`.
    fn stage(&self, epoch: usize, hyper: &Hyperparams) -> (Objective, f64, usize) {
        match self.mode {
            Mode::Dg => (Objective::Discriminative, hyper.learning_rate, 0),
            Mode::Gg => (Objective::Generative, hyper.learning_rate, 0),
            Mode::GgDg if epoch < self.pretrain_epochs => (Objective::Generative, hyper.learning_rate, 0),
            Mode::GgDg => (Objective::Discriminative, self.refine_lr, self.pretrain_epochs),
        }
    }

    pub fn objective_at(&self, epoch: usize, hyper: &Hyperparams) -> Objective {
        self.stage(epoch, hyper).0
    }

    pub fn lr_at(&self, epoch: usize, hyper: &Hyperparams) -> f64 {
        let (_, base, start) = self.stage(epoch, hyper);
        self.lr_policy.rate(base, epoch - start)
    }

    fn switches_at(&self, epoch: usize) -> bool {
        self.mode == Mode::GgDg && epoch == self.pretrain_epochs
    }
}

/// Momentum buffers mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamStore,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        OptimizerState {
            velocity: ParamStore::zeros_like(net.params()),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.scale(0.0);
    }
}

/// `v ← μv + lr(g − λw)`, `w ← w + v`, for gradients already scaled by 1/batch.
pub fn sgd_step(
    net: &mut Network,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    hyper: &Hyperparams,
    lr: f64,
) -> Result<()> {
    if !grads.same_layout(net.params()) || !state.velocity.same_layout(net.params()) {
        return Err(Error::shape("gradient or velocity layout differs from the network"));
    }
    if let Some((name, t)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        let pos = t.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite(format!(
            "gradient of `{name}` at element {pos} is {}; step aborted",
            t.data()[pos]
        )));
    }
    let (mu, decay) = (hyper.momentum, hyper.weight_decay);
    let params = net.params_mut();
    for ((w, g), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        let (w, g) = (w.1.data_mut(), g.1.data());
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.data_mut()) {
            *vi = mu * *vi + lr * (gi - decay * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}

/// What one optimizer step saw.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub batch: usize,
    /// Batch sums of the two log-likelihoods, before the update.
    pub l_d: f64,
    pub l_g: f64,
    pub errors: usize,
    /// ESS for each class present in the batch.
    pub ess: Vec<(usize, f64)>,
    /// Multiply-accumulates spent in the forward and backward passes.
    pub net_macs: u64,
    /// Operations spent in the loss layer that produced the gradient.
    pub loss_ops: u64,
}

/// One forward/backward/update on a batch.
pub fn train_step(
    net: &mut Network,
    state: &mut OptimizerState,
    hyper: &Hyperparams,
    images: &Tensor,
    labels: &[usize],
    objective: Objective,
    lr: f64,
) -> Result<StepReport> {
    let n = labels.len();
    let macs0 = mac_count();
    let (scores, cache) = net.forward_batch(images)?;
    let macs_fwd = mac_count() - macs0;

    let ops0 = loss_op_count();
    let (loss, grad) = objective.loss_and_grad(&scores, labels)?;
    let loss_ops = loss_op_count() - ops0;
    let (l_d, l_g) = match objective {
        Objective::Discriminative => (loss, monitor_gen(&scores, labels)?),
        Objective::Generative => (disc_loss_and_grad(&scores, labels)?.0, loss),
    };

    let errors = (0..n).filter(|&j| scores.row_argmax(j) != labels[j]).count();
    let ess = class_ess(&scores, labels)?;

    let macs1 = mac_count();
    let mut grads = net.backward_params(&cache, &grad)?;
    let macs_bwd = mac_count() - macs1;
    grads.scale(1.0 / n as f64);
    sgd_step(net, &grads, state, hyper, lr)?;
    Ok(StepReport {
        batch: n,
        l_d,
        l_g,
        errors,
        ess,
        net_macs: macs_fwd + macs_bwd,
        loss_ops,
    })
}

fn monitor_gen(scores: &crate::loss::ScoreMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() < 2 {
        return Ok(0.0);
    }
    Ok(gen_loss_and_grad(scores, labels)?.0)
}

fn class_ess(scores: &crate::loss::ScoreMatrix, labels: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    present
        .into_iter()
        .map(|y| importance_weights(scores, y).map(|w| (y, w.ess)))
        .collect()
}

/// Fraction of argmax-misclassified examples; ties go to the lowest class.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut wrong = 0usize;
    for start in (0..dataset.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(dataset.len())).collect();
        let (images, labels) = dataset.gather(&idx)?;
        let pred = net.predict(&images)?;
        wrong += pred.iter().zip(&labels).filter(|(p, y)| p != y).count();
    }
    Ok(wrong as f64 / dataset.len() as f64)
}

/// Mean per-example `(l_D, l_G)` over consecutive batches of the dataset in
/// storage order. A trailing batch of one contributes no `l_G` term.
pub fn batch_log_likelihoods(net: &Network, dataset: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if dataset.is_empty() || batch_size == 0 {
        return Err(Error::invalid("need a non-empty dataset and a positive batch size"));
    }
    let (mut ld, mut lg, mut ng) = (0.0, 0.0, 0usize);
    for start in (0..dataset.len()).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(dataset.len())).collect();
        let (images, labels) = dataset.gather(&idx)?;
        let (scores, _) = net.forward_batch(&images)?;
        ld += disc_loss_and_grad(&scores, &labels)?.0;
        if labels.len() >= 2 {
            lg += gen_loss_and_grad(&scores, &labels)?.0;
            ng += labels.len();
        }
    }
    Ok((ld / dataset.len() as f64, if ng == 0 { 0.0 } else { lg / ng as f64 }))
}

/// One line per completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub objective: Objective,
    pub lr: f64,
    /// Mean per-example batch log-likelihoods seen during the epoch.
    pub l_d: f64,
    pub l_g: f64,
    pub train_error: f64,
    pub eval_error: Option<f64>,
    pub ess_mean: f64,
    pub ess_min: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    Epoch(EpochRecord),
    /// The GG to DG switch before `epoch` (0-based start of the DG stage).
    Switch { epoch: usize, lr: f64 },
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        match self {
            LogRecord::Epoch(r) => format!(
                "record=epoch epoch={} objective={} lr={} l_d={} l_g={} train_error={} eval_error={} ess_mean={} ess_min={} wall_secs={:.3}",
                r.epoch,
                r.objective.tag(),
                r.lr,
                r.l_d,
                r.l_g,
                r.train_error,
                r.eval_error.map_or("na".to_string(), |e| e.to_string()),
                r.ess_mean,
                r.ess_min,
                r.wall_secs
            ),
            LogRecord::Switch { epoch, lr } => {
                format!("record=switch epoch={epoch} objective=dg lr={lr} velocity=reset")
            }
        }
    }

    fn parse(line: &str) -> Result<LogRecord> {
        let fields = parse_fields(line)?;
        let get = |k: &str| {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Corrupt {
                    what: "metrics log",
                    detail: format!("missing `{k}` in `{line}`"),
                })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Corrupt {
                what: "metrics log",
                detail: format!("bad `{k}` in `{line}`"),
            })
        };
        let epoch = num("epoch")? as usize;
        match get("record")? {
            "switch" => Ok(LogRecord::Switch { epoch, lr: num("lr")? }),
            "epoch" => Ok(LogRecord::Epoch(EpochRecord {
                epoch,
                objective: if get("objective")? == "gg" {
                    Objective::Generative
                } else {
                    Objective::Discriminative
                },
                lr: num("lr")?,
                l_d: num("l_d")?,
                l_g: num("l_g")?,
                train_error: num("train_error")?,
                eval_error: match get("eval_error")? {
                    "na" => None,
                    _ => Some(num("eval_error")?),
                },
                ess_mean: num("ess_mean")?,
                ess_min: num("ess_min")?,
                wall_secs: num("wall_secs")?,
            })),
            other => Err(Error::Corrupt {
                what: "metrics log",
                detail: format!("unknown record kind `{other}`"),
            }),
        }
    }
}

fn parse_fields(line: &str) -> Result<Vec<(String, String)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Corrupt {
                    what: "metrics log",
                    detail: format!("token `{tok}` is not key=value"),
                })
        })
        .collect()
}

/// Append-only run log: a header line then one record per line, all
/// `key=value` pairs separated by spaces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub header: Vec<(String, String)>,
    pub records: Vec<LogRecord>,
}

impl MetricsLog {
    fn header_line(&self) -> String {
        let mut line = String::from("record=header");
        for (k, v) in &self.header {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = match lines.next() {
            Some(l) if l.starts_with("record=header") => parse_fields(l)?.into_iter().skip(1).collect(),
            _ => {
                return Err(Error::Corrupt {
                    what: "metrics log",
                    detail: "missing header line".into(),
                })
            }
        };
        let records = lines.map(LogRecord::parse).collect::<Result<_>>()?;
        Ok(MetricsLog { header, records })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Switch { .. } => None,
        })
    }

    /// Records with wall-clock time zeroed, for determinism comparisons.
    pub fn without_wall_time(&self) -> Vec<LogRecord> {
        self.records
            .iter()
            .cloned()
            .map(|mut r| {
                if let LogRecord::Epoch(e) = &mut r {
                    e.wall_secs = 0.0;
                }
                r
            })
            .collect()
    }
}

/// Where and how a training run persists itself.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `<epoch>.ckpt` files and `metrics.log`; nothing is
    /// written when unset.
    pub run_dir: Option<PathBuf>,
    /// Held-out set scored after every epoch.
    pub eval: Option<&'a Dataset>,
    /// Pick up from the newest checkpoint in `run_dir`.
    pub resume: bool,
    pub on_record: Option<&'a dyn Fn(&LogRecord)>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("{epoch}.ckpt"))
}

fn latest_checkpoint(run_dir: &Path) -> Result<Option<usize>> {
    let entries = match std::fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    let mut best = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        if let Some(epoch) = name
            .to_str()
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            best = best.max(Some(epoch));
        }
    }
    Ok(best)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_state(run_dir: &Path, epoch: usize, net: &Network, state: &OptimizerState, hyper: &Hyperparams) -> Result<()> {
    let mut ckpt = Checkpoint::from_network(net);
    ckpt.meta.push(("epoch".into(), epoch.to_string()));
    ckpt.meta.push(("seed".into(), hyper.seed.to_string()));
    ckpt.tensors.extend(
        state
            .velocity
            .iter()
            .map(|(n, t)| (format!("velocity.{n}"), t.clone())),
    );
    write_atomic(&checkpoint_path(run_dir, epoch), &ckpt.to_bytes())
}

fn load_state(run_dir: &Path, epoch: usize) -> Result<(Network, OptimizerState)> {
    let ckpt = Checkpoint::read(checkpoint_path(run_dir, epoch))?;
    let net = ckpt.network()?;
    let velocity: Vec<(String, Tensor)> = ckpt
        .tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("velocity.").map(|n| (n.to_string(), t.clone())))
        .collect();
    let velocity = ParamStore::new(velocity);
    if !velocity.same_layout(net.params()) {
        return Err(Error::Corrupt {
            what: "checkpoint",
            detail: "velocity tensors do not mirror the parameters".into(),
        });
    }
    Ok((net, OptimizerState { velocity }))
}

fn header(schedule: &Schedule, hyper: &Hyperparams) -> Vec<(String, String)> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut h = vec![
        ("timestamp".to_string(), now.to_string()),
        ("mode".into(), schedule.mode.to_string()),
        ("batch_size".into(), hyper.batch_size.to_string()),
        ("grad_scale".into(), format!("1/{}", hyper.batch_size)),
        ("lr".into(), hyper.learning_rate.to_string()),
        ("weight_decay".into(), hyper.weight_decay.to_string()),
        ("momentum".into(), hyper.momentum.to_string()),
        ("max_epochs".into(), hyper.max_epochs.to_string()),
        ("lr_policy".into(), schedule.lr_policy.to_string()),
        ("seed".into(), hyper.seed.to_string()),
    ];
    if schedule.mode == Mode::GgDg {
        h.push(("pretrain_epochs".into(), schedule.pretrain_epochs.to_string()));
        h.push(("refine_lr".into(), schedule.refine_lr.to_string()));
    }
    h
}

/// Train for `hyper.max_epochs` under `schedule`, writing a checkpoint and a
/// log record per epoch when a run directory is given.
pub fn run_training(
    mut net: Network,
    data: &Dataset,
    schedule: &Schedule,
    hyper: &Hyperparams,
    opts: &TrainOptions<'_>,
) -> Result<(Network, MetricsLog)> {
    hyper.validate()?;
    schedule.validate(hyper)?;
    if data.classes() != net.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the network outputs {}",
            data.classes(),
            net.classes()
        )));
    }
    if data.image_shape() != net.input_shape() {
        return Err(Error::config(format!(
            "dataset images are {:?} but the network expects {:?}",
            data.image_shape(),
            net.input_shape()
        )));
    }

    let mut state = OptimizerState::new(&net);
    let mut log = MetricsLog {
        header: header(schedule, hyper),
        records: Vec::new(),
    };
    let mut first_epoch = 0;

    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let resume_from = if opts.resume { latest_checkpoint(dir)? } else { None };
        if let Some(done) = resume_from {
            let (loaded, loaded_state) = load_state(dir, done)?;
            if loaded.config() != net.config() {
                return Err(Error::config("checkpoint network differs from the configured network"));
            }
            net = loaded;
            state = loaded_state;
            first_epoch = done;
            let log_path = dir.join(LOG_FILE);
            let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let old = MetricsLog::parse(&text)?;
            log.header = old.header;
            // Epoch records count completed epochs; a switch record names the
            // 0-based epoch it precedes and is re-emitted if that epoch reruns.
            log.records = old
                .records
                .into_iter()
                .filter(|r| match r {
                    LogRecord::Epoch(e) => e.epoch <= done,
                    LogRecord::Switch { epoch, .. } => *epoch < done,
                })
                .collect();
        }
        write_atomic(&dir.join(LOG_FILE), log.to_text().as_bytes())?;
    }

    for epoch in first_epoch..hyper.max_epochs {
        let started = Instant::now();
        let objective = schedule.objective_at(epoch, hyper);
        let lr = schedule.lr_at(epoch, hyper);
        if schedule.switches_at(epoch) {
            state.reset();
            emit(&mut log, LogRecord::Switch { epoch, lr }, opts)?;
        }

        let mut iter = BatchIterator::starting_at(data, hyper.batch_size, hyper.seed, epoch as u64)?;
        let (mut ld, mut lg, mut seen, mut wrong) = (0.0, 0.0, 0usize, 0usize);
        let mut ess: Vec<f64> = Vec::new();
        for _ in 0..iter.batches_per_epoch() {
            let idx = iter.next_indices();
            if objective == Objective::Generative && idx.len() < 2 {
                continue;
            }
            let (images, labels) = data.gather(&idx)?;
            let report = train_step(&mut net, &mut state, hyper, &images, &labels, objective, lr)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {}: {msg}", epoch + 1)),
                    other => other,
                })?;
            ld += report.l_d;
            lg += report.l_g;
            seen += report.batch;
            wrong += report.errors;
            ess.extend(report.ess.iter().map(|&(_, e)| e));
        }

        let eval_error = opts.eval.map(|d| evaluate(&net, d)).transpose()?;
        let record = EpochRecord {
            epoch: epoch + 1,
            objective,
            lr,
            l_d: ld / seen.max(1) as f64,
            l_g: lg / seen.max(1) as f64,
            train_error: wrong as f64 / seen.max(1) as f64,
            eval_error,
            ess_mean: if ess.is_empty() { 0.0 } else { ess.iter().sum::<f64>() / ess.len() as f64 },
            ess_min: if ess.is_empty() { 0.0 } else { ess.iter().copied().fold(f64::INFINITY, f64::min) },
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &opts.run_dir {
            save_state(dir, epoch + 1, &net, &state, hyper)?;
        }
        emit(&mut log, LogRecord::Epoch(record), opts)?;
    }
    Ok((net, log))
}

fn emit(log: &mut MetricsLog, record: LogRecord, opts: &TrainOptions<'_>) -> Result<()> {
    if let Some(dir) = &opts.run_dir {
        let path = dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(cb) = opts.on_record {
        cb(&record);
    }
    log.records.push(record);
    Ok(())
}
