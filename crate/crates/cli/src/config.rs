//! The run configuration file: `[section]` headers over `key = value` lines.
//!
//! ```text
//! [run]
//! output_dir = runs/lenet-dg
//! seed = 1
//!
//! [network]
//! architecture = lenet
//!
//! [training]
//! mode = gg+dg
//! pretrain_epochs = 16
//! refine_lr = 0.003
//!
//! [data]
//! source = idx
//! train_images = data/mnist-subset/train-images-idx3-ubyte.gz
//! train_labels = data/mnist-subset/train-labels-idx1-ubyte.gz
//!
//! [hmc]
//! preset = lenet
//! chains = 20
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tiltnet::data::{read_idx, synthetic_dataset, Dataset, SyntheticSpec};
use tiltnet::hmc::{HmcConfig, Init, SnapshotSchedule};
use tiltnet::train::{Hyperparams, LrPolicy, Mode, Schedule};
use tiltnet::{Error, NetworkConfig, Result};

const SECTIONS: [&str; 5] = ["run", "network", "training", "data", "hmc"];

/// Raw `section -> key -> value` map with line numbers for diagnostics.
type Sections = BTreeMap<String, BTreeMap<String, (String, usize)>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut sections: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!("line {lineno}: unknown section [{name}]")));
            }
            if sections.contains_key(name) {
                return Err(Error::Config(format!("line {lineno}: section [{name}] repeated")));
            }
            sections.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let Some(section) = &current else {
            return Err(Error::Config(format!("line {lineno}: `{line}` appears before any [section]")));
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let entries = sections.get_mut(section).expect("inserted above");
        if entries.insert(key.to_string(), (value.to_string(), lineno)).is_some() {
            return Err(Error::Config(format!("line {lineno}: key `{key}` repeated in [{section}]")));
        }
    }
    Ok(sections)
}

/// Typed access to one section that tracks which keys were consumed.
struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, (String, usize)>,
}

impl<'a> Section<'a> {
    fn take(sections: &mut Sections, name: &'a str) -> Option<Self> {
        sections.remove(name).map(|entries| Section { name, entries })
    }

    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((value, line)) => value.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("line {line}: [{}] {key}: cannot parse `{value}`", self.name))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!(
                "line {line}: unknown key `{key}` in [{}]",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx {
        train: (PathBuf, PathBuf),
        test: Option<(PathBuf, PathBuf)>,
    },
    Synthetic {
        train: SyntheticSpec,
        test_n: usize,
    },
}

impl DataSource {
    pub fn load_train(&self) -> Result<Dataset> {
        match self {
            DataSource::Idx { train, .. } => read_idx(&train.0, &train.1),
            DataSource::Synthetic { train, .. } => synthetic_dataset(train),
        }
    }

    /// Held-out set, if one is configured.
    pub fn load_test(&self) -> Result<Option<Dataset>> {
        match self {
            DataSource::Idx { test, .. } => test.as_ref().map(|(i, l)| read_idx(i, l)).transpose(),
            DataSource::Synthetic { train, test_n } if *test_n > 0 => {
                let spec = SyntheticSpec {
                    n: *test_n,
                    seed: train.seed.wrapping_add(1),
                    ..*train
                };
                synthetic_dataset(&spec).map(Some)
            }
            DataSource::Synthetic { .. } => Ok(None),
        }
    }

    /// Test set if present, otherwise the training set.
    pub fn load_eval(&self) -> Result<Dataset> {
        match self.load_test()? {
            Some(d) => Ok(d),
            None => self.load_train(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub network: Option<NetworkConfig>,
    pub hyper: Hyperparams,
    pub schedule: Schedule,
    pub resume: bool,
    pub data: Option<DataSource>,
    pub hmc: HmcConfig,
    pub chains: usize,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::parse(&text, &base, seed_override)
    }

    pub fn parse(text: &str, base: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
        let mut sections = parse_sections(text)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let mut run = Section::take(&mut sections, "run");
        let (output_dir, seed) = match run.as_mut() {
            Some(s) => (s.raw("output_dir").map(|(v, _)| v), s.get::<u64>("seed")?),
            None => (None, None),
        };
        if let Some(s) = run {
            s.finish()?;
        }
        let seed = seed_override.or(seed).unwrap_or(0);
        let output_dir = resolve(output_dir.unwrap_or_else(|| "tiltnet-out".to_string()));

        let network = match Section::take(&mut sections, "network") {
            None => None,
            Some(s) => {
                let has_seed = s.entries.contains_key("seed");
                let pairs: Vec<(&str, &str)> =
                    s.entries.iter().map(|(k, (v, _))| (k.as_str(), v.as_str())).collect();
                let mut config = NetworkConfig::from_pairs(pairs)?;
                if !has_seed || seed_override.is_some() {
                    config.seed = seed;
                }
                Some(config)
            }
        };

        let mut hyper = Hyperparams {
            seed,
            ..Hyperparams::default()
        };
        let mut schedule = Schedule::new(Mode::Dg);
        let mut resume = false;
        if let Some(mut s) = Section::take(&mut sections, "training") {
            if let Some(mode) = s.get::<Mode>("mode")? {
                schedule.mode = mode;
            }
            if let Some(v) = s.get("batch_size")? {
                hyper.batch_size = v;
            }
            if let Some(v) = s.get("learning_rate")? {
                hyper.learning_rate = v;
            }
            if let Some(v) = s.get("weight_decay")? {
                hyper.weight_decay = v;
            }
            if let Some(v) = s.get("momentum")? {
                hyper.momentum = v;
            }
            if let Some(v) = s.get("max_epochs")? {
                hyper.max_epochs = v;
            }
            if let Some(v) = s.get("pretrain_epochs")? {
                schedule.pretrain_epochs = v;
            }
            if let Some(v) = s.get("refine_lr")? {
                schedule.refine_lr = v;
            }
            if let Some(v) = s.get::<LrPolicy>("lr_policy")? {
                schedule.lr_policy = v;
            }
            if let Some(v) = s.get("resume")? {
                resume = v;
            }
            s.finish()?;
        }
        hyper.validate()?;
        schedule.validate(&hyper)?;

        let data = match Section::take(&mut sections, "data") {
            None => None,
            Some(mut s) => {
                let source = s.raw("source").map(|(v, _)| v).unwrap_or_else(|| "idx".into());
                let data = match source.as_str() {
                    "idx" => {
                        let mut pair = |a: &str, b: &str| -> Result<Option<(PathBuf, PathBuf)>> {
                            match (s.raw(a), s.raw(b)) {
                                (Some((x, _)), Some((y, _))) => Ok(Some((resolve(x), resolve(y)))),
                                (None, None) => Ok(None),
                                _ => Err(Error::Config(format!("[data] `{a}` and `{b}` go together"))),
                            }
                        };
                        let train = pair("train_images", "train_labels")?
                            .ok_or_else(|| Error::Config("[data] idx source needs train_images and train_labels".into()))?;
                        let test = pair("test_images", "test_labels")?;
                        DataSource::Idx { train, test }
                    }
                    "synthetic" => {
                        let mut spec = SyntheticSpec::new(
                            s.get("n")?.unwrap_or(512),
                            s.get("classes")?.unwrap_or(2),
                            s.get("image_size")?.unwrap_or(28),
                            seed,
                        );
                        if let Some(v) = s.get("noise_std")? {
                            spec.noise_std = v;
                        }
                        if let Some(v) = s.get("seed")? {
                            spec.seed = v;
                        }
                        DataSource::Synthetic {
                            train: spec,
                            test_n: s.get("test_n")?.unwrap_or(0),
                        }
                    }
                    other => return Err(Error::Config(format!("[data] unknown source `{other}` (idx or synthetic)"))),
                };
                s.finish()?;
                Some(data)
            }
        };

        let mut hmc = HmcConfig { seed, ..HmcConfig::lenet() };
        let mut chains = 1;
        if let Some(mut s) = Section::take(&mut sections, "hmc") {
            if let Some((preset, line)) = s.raw("preset") {
                hmc = match preset.as_str() {
                    "lenet" => HmcConfig::lenet(),
                    "alexnet-conv" => HmcConfig::alexnet_conv(),
                    "alexnet-fc" => HmcConfig::alexnet_fc(),
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: unknown hmc preset `{other}` (lenet, alexnet-conv, alexnet-fc)"
                        )))
                    }
                };
                hmc.seed = seed;
            }
            if let Some(v) = s.get("sigma")? {
                hmc.sigma = v;
            }
            if let Some(v) = s.get("mass")? {
                hmc.mass = v;
            }
            if let Some(v) = s.get("step_size")? {
                hmc.step_size = v;
            }
            if let Some(v) = s.get("leapfrog_steps")? {
                hmc.leapfrog_steps = v;
            }
            if let Some(v) = s.get("iterations")? {
                hmc.iterations = v;
            }
            if let Some(v) = s.get::<Init>("init")? {
                hmc.init = v;
            }
            if let Some(v) = s.get("metropolis")? {
                hmc.metropolis = v;
            }
            if let Some(v) = s.get::<SnapshotSchedule>("snapshots")? {
                hmc.snapshots = v;
            }
            if let Some(v) = s.get("chains")? {
                chains = v;
            }
            s.finish()?;
        }
        hmc.validate()?;
        if chains == 0 {
            return Err(Error::Config("[hmc] chains must be at least 1".into()));
        }

        Ok(RunConfig {
            output_dir,
            seed,
            network,
            hyper,
            schedule,
            resume,
            data,
            hmc,
            chains,
        })
    }
}
