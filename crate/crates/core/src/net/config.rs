//! Layer specifications, shape propagation and the text form of a network
//! configuration (used both in run configs and inside checkpoints).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Square kernels, zero padding.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Affine map of the flattened input.
    Dense {
        outputs: usize,
    },
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    fn default_prefix(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "pool",
            LayerKind::Dense { .. } => "ip",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv({out_channels},{kernel},{stride},{pad})"),
            LayerKind::MaxPool { window, stride } => write!(f, "maxpool({window},{stride})"),
            LayerKind::Dense { outputs } => write!(f, "dense({outputs})"),
            LayerKind::Relu => write!(f, "relu"),
            LayerKind::Flatten => write!(f, "flatten"),
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    /// `conv(out,kernel[,stride[,pad]])`, `maxpool(window[,stride])`,
    /// `dense(outputs)`, `relu`, `flatten`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("unterminated layer spec `{s}`")))?;
                let args = close[open + 1..]
                    .split(',')
                    .map(|a| {
                        a.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::config(format!("bad layer argument `{a}` in `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (&s[..open], args)
            }
            None => (s, Vec::new()),
        };
        let arity = |min: usize, max: usize| -> Result<()> {
            if args.len() < min || args.len() > max {
                Err(Error::config(format!(
                    "`{head}` takes {min}..={max} arguments, got {} in `{s}`",
                    args.len()
                )))
            } else {
                Ok(())
            }
        };
        let kind = match head {
            "conv" => {
                arity(2, 4)?;
                LayerKind::Conv {
                    out_channels: args[0],
                    kernel: args[1],
                    stride: args.get(2).copied().unwrap_or(1),
                    pad: args.get(3).copied().unwrap_or(0),
                }
            }
            "maxpool" | "pool" => {
                arity(1, 2)?;
                LayerKind::MaxPool {
                    window: args[0],
                    stride: args.get(1).copied().unwrap_or(args[0]),
                }
            }
            "dense" | "ip" => {
                arity(1, 1)?;
                LayerKind::Dense { outputs: args[0] }
            }
            "relu" => {
                arity(0, 0)?;
                LayerKind::Relu
            }
            "flatten" => {
                arity(0, 0)?;
                LayerKind::Flatten
            }
            other => return Err(Error::config(format!("unknown layer kind `{other}`"))),
        };
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Conv weights `N(0, 0.01²)`, dense weights `N(0, 1/fan_in)`, zero biases.
    Reference,
    /// Every weight `N(0, std²)`, zero biases.
    Gaussian(f64),
    Zeros,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::Reference => write!(f, "reference"),
            InitScheme::Gaussian(std) => write!(f, "gaussian({std:?})"),
            InitScheme::Zeros => write!(f, "zeros"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reference" => Ok(InitScheme::Reference),
            "zeros" => Ok(InitScheme::Zeros),
            other => {
                let std = other
                    .strip_prefix("gaussian(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .ok_or_else(|| Error::config(format!("unknown init scheme `{other}`")))?;
                Ok(InitScheme::Gaussian(std))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    pub init: InitScheme,
    pub seed: u64,
}

impl NetworkConfig {
    /// The reference digit network: conv(20@5x5) → maxpool(2,2) →
    /// conv(50@5x5) → maxpool(2,2) → dense(500) → relu → dense(10).
    pub fn lenet(seed: u64) -> Self {
        use LayerKind::*;
        let conv = |out_channels| Conv {
            out_channels,
            kernel: 5,
            stride: 1,
            pad: 0,
        };
        let pool = MaxPool {
            window: 2,
            stride: 2,
        };
        NetworkConfig {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::new("conv1", conv(20)),
                LayerSpec::new("pool1", pool),
                LayerSpec::new("conv2", conv(50)),
                LayerSpec::new("pool2", pool),
                LayerSpec::new("ip1", Dense { outputs: 500 }),
                LayerSpec::new("relu1", Relu),
                LayerSpec::new("ip2", Dense { outputs: 10 }),
            ],
            classes: 10,
            init: InitScheme::Reference,
            seed,
        }
    }

    /// Per-item shape at every layer boundary: `[input, out_0, out_1, ...]`.
    pub fn shape_table(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if l.name.is_empty() || l.name.contains(char::is_whitespace) || l.name.contains(':') {
                return Err(Error::config(format!("invalid layer name `{}`", l.name)));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let shapes = propagate(&self.input_shape, &self.layers)?;
        let last = shapes.last().expect("non-empty");
        if last.iter().product::<usize>() != self.classes || last.len() != 1 {
            return Err(Error::config(format!(
                "final layer produces {last:?}, expected [{}] class scores",
                self.classes
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(shapes)
    }

    /// `key = value` lines; round-trips through [`NetworkConfig::from_pairs`].
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input_shape;
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}:{}", l.name, l.kind))
            .collect();
        format!(
            "input = {c}x{h}x{w}\nlayers = {}\nclasses = {}\ninit = {}\nseed = {}\n",
            layers.join(" "),
            self.classes,
            self.init,
            self.seed
        )
    }

    /// Build from `[network]` keys: `architecture` (`lenet`) or `layers`,
    /// plus optional `input`, `classes`, `init`, `seed`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut architecture = None;
        let mut input = None;
        let mut layers = None;
        let mut classes = None;
        let mut init = None;
        let mut seed = None;
        for (key, value) in pairs {
            match key {
                "architecture" => architecture = Some(value.to_string()),
                "input" => input = Some(parse_input_shape(value)?),
                "layers" => layers = Some(parse_layers(value)?),
                "classes" => classes = Some(parse_num::<usize>(key, value)?),
                "init" => init = Some(value.parse::<InitScheme>()?),
                "seed" => seed = Some(parse_num::<u64>(key, value)?),
                other => return Err(Error::config(format!("unknown network key `{other}`"))),
            }
        }
        let mut config = match (architecture.as_deref(), layers) {
            (Some("lenet"), None) => NetworkConfig::lenet(0),
            (Some(other), None) => {
                return Err(Error::config(format!("unknown architecture `{other}`")))
            }
            (Some(_), Some(_)) => {
                return Err(Error::config("give either `architecture` or `layers`, not both"))
            }
            (None, Some(layers)) => NetworkConfig {
                input_shape: input.ok_or_else(|| Error::config("`layers` needs `input`"))?,
                classes: classes.ok_or_else(|| Error::config("`layers` needs `classes`"))?,
                layers,
                init: InitScheme::Reference,
                seed: 0,
            },
            (None, None) => return Err(Error::config("network needs `architecture` or `layers`")),
        };
        if let Some(input) = input {
            config.input_shape = input;
        }
        if let Some(classes) = classes {
            config.classes = classes;
        }
        if let Some(init) = init {
            config.init = init;
        }
        if let Some(seed) = seed {
            config.seed = seed;
        }
        config.shape_table()?;
        Ok(config)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::config(format!("expected key = value, got `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(pairs)
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_input_shape(value: &str) -> Result<[usize; 3]> {
    let dims = value
        .split('x')
        .map(|d| parse_num::<usize>("input", d.trim()))
        .collect::<Result<Vec<_>>>()?;
    <[usize; 3]>::try_from(dims)
        .ok()
        .filter(|d| d.iter().all(|&e| e > 0))
        .ok_or_else(|| Error::config(format!("input must be CxHxW with positive extents, got `{value}`")))
}

/// Whitespace-separated `name:kind(args)` items; the name is optional and
/// defaults to the kind prefix plus a per-kind counter (`conv1`, `pool1`, ...).
fn parse_layers(value: &str) -> Result<Vec<LayerSpec>> {
    let mut counters = std::collections::HashMap::new();
    value
        .split_whitespace()
        .map(|item| {
            let (name, kind) = match item.split_once(':') {
                Some((name, kind)) => (Some(name), kind.parse::<LayerKind>()?),
                None => (None, item.parse::<LayerKind>()?),
            };
            let counter = counters.entry(kind.default_prefix()).or_insert(0);
            *counter += 1;
            let name = name
                .map(str::to_string)
                .unwrap_or_else(|| format!("{}{}", kind.default_prefix(), counter));
            Ok(LayerSpec { name, kind })
        })
        .collect()
}

/// Per-item shapes through `layers` starting from `input`.
pub(crate) fn propagate(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for layer in layers {
        let cur = shapes.last().expect("non-empty");
        let spatial = || -> Result<[usize; 3]> {
            <[usize; 3]>::try_from(cur.as_slice()).map_err(|_| {
                Error::config(format!(
                    "layer `{}` needs a [C,H,W] input, got {cur:?}",
                    layer.name
                ))
            })
        };
        let wrap = |e: Error| Error::config(format!("layer `{}`: {e}", layer.name));
        let next = match layer.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if out_channels == 0 || kernel == 0 {
                    return Err(Error::config(format!(
                        "layer `{}`: channels and kernel must be positive",
                        layer.name
                    )));
                }
                let input = spatial()?;
                ConvGeometry::new(input, [out_channels, input[0], kernel, kernel], stride, pad)
                    .map_err(wrap)?
                    .output_shape()
                    .to_vec()
            }
            LayerKind::MaxPool { window, stride } => PoolGeometry::new(spatial()?, window, stride)
                .map_err(wrap)?
                .output_shape()
                .to_vec(),
            LayerKind::Dense { outputs } => {
                if outputs == 0 {
                    return Err(Error::config(format!(
                        "layer `{}`: outputs must be positive",
                        layer.name
                    )));
                }
                vec![outputs]
            }
            LayerKind::Relu => cur.clone(),
            LayerKind::Flatten => vec![cur.iter().product()],
        };
        shapes.push(next);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_shapes() {
        let shapes = NetworkConfig::lenet(0).shape_table().unwrap();
        assert_eq!(
            shapes,
            vec![
                vec![1, 28, 28],
                vec![20, 24, 24],
                vec![20, 12, 12],
                vec![50, 8, 8],
                vec![50, 4, 4],
                vec![500],
                vec![500],
                vec![10],
            ]
        );
    }

    #[test]
    fn text_round_trip() {
        let mut c = NetworkConfig::lenet(42);
        c.init = InitScheme::Gaussian(0.05);
        let back = NetworkConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn layer_list_with_default_names() {
        let c = NetworkConfig::from_pairs([
            ("input", "1x6x6"),
            ("layers", "conv(2,3) pool(2) flatten dense(3)"),
            ("classes", "3"),
        ])
        .unwrap();
        let names: Vec<_> = c.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["conv1", "pool1", "flatten1", "ip1"]);
        assert_eq!(
            c.layers[1].kind,
            LayerKind::MaxPool {
                window: 2,
                stride: 2
            }
        );
    }

    #[test]
    fn rejects_bad_configs() {
        // final width != classes
        assert!(NetworkConfig::from_pairs([("input", "1x4x4"), ("layers", "dense(3)"), ("classes", "2")]).is_err());
        // pooling window does not tile
        assert!(NetworkConfig::from_pairs([("input", "1x5x5"), ("layers", "pool(2) dense(2)"), ("classes", "2")]).is_err());
        // conv after dense
        assert!(NetworkConfig::from_pairs([("input", "1x4x4"), ("layers", "dense(8) conv(1,1) dense(2)"), ("classes", "2")]).is_err());
        assert!(NetworkConfig::from_pairs([("architecture", "alexnet")]).is_err());
        assert!(NetworkConfig::from_pairs([("architecture", "lenet"), ("colour", "red")]).is_err());
        assert!(NetworkConfig::from_pairs([("input", "1x4"), ("layers", "dense(2)"), ("classes", "2")]).is_err());
        assert!("conv(1)".parse::<LayerKind>().is_err());
        assert!("softmax".parse::<LayerKind>().is_err());
        let mut dup = NetworkConfig::lenet(0);
        dup.layers[2].name = "conv1".into();
        assert!(dup.shape_table().is_err());
    }
}
