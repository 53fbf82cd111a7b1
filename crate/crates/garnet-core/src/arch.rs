//! Architectures: layer descriptions, width scaling, and the model zoo.
//!
//! An [`Architecture`] is an ordered list of [`LayerKind`]s plus the input
//! shape. Widths (conv kernel counts, dense units) can be multiplied by a
//! rational [`Scale`]; the final classifier layer is never scaled so the
//! class count is preserved.
//!
//! Convolutions are stride 1 with an explicit padding and no bias. Zero
//! padding contributes nothing to a ±1 dot product, so padded taps simply
//! shrink the effective fan-in of border units — the compiler, the plaintext
//! reference and the trainer all share that convention.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid scale `{0}`: must be a positive decimal")]
    BadScale(String),
    #[error("architecture file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("layer {index} ({kind}) is invalid here: {msg}")]
    BadLayer {
        index: usize,
        kind: String,
        msg: String,
    },
    #[error("unknown architecture `{0}`")]
    UnknownName(String),
}

/// A positive rational scaling factor, kept exact so that width rounding
/// is reproducible (e.g. `0.25`, `1.75`, `3`).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self, ArchError> {
        if num == 0 || den == 0 {
            return Err(ArchError::BadScale(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Scale {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    /// Scale a width: round-half-up to the nearest integer, minimum 1.
    pub fn apply(&self, width: usize) -> usize {
        let num = self.num as u64;
        let den = self.den as u64;
        let scaled = (2 * width as u64 * num + den) / (2 * den);
        scaled.max(1) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl FromStr for Scale {
    type Err = ArchError;

    /// Parse a positive decimal such as `0.25`, `1`, `3.0`.
    fn from_str(s: &str) -> Result<Self, ArchError> {
        let bad = || ArchError::BadScale(s.to_string());
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
            || frac_part.len() > 6
        {
            return Err(bad());
        }
        let int: u64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| bad())?
        };
        let den = 10u64.pow(frac_part.len() as u32);
        let frac: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().map_err(|_| bad())?
        };
        let num = int * den + frac;
        if num == 0 || num > u32::MAX as u64 {
            return Err(bad());
        }
        Scale::new(num as u32, den as u32)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl fmt::Debug for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scale({self})")
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One layer of an architecture.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LayerKind {
    /// Stride-1 square convolution, no bias. `padding` is zero padding on
    /// every border in the ±1 domain (padded taps are elided, see module
    /// docs).
    Conv {
        kernel: usize,
        channels: usize,
        padding: usize,
    },
    /// Fully connected, no bias.
    Dense { units: usize },
    /// 2x2 max pooling, stride 2. Trailing rows/columns that do not fill a
    /// window are dropped (floor semantics).
    MaxPool,
    /// Pass-through; occupies a search position but compiles to nothing.
    Identity,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { kernel: 1, .. } => "CONV1x1",
            LayerKind::Conv { kernel: 3, .. } => "CONV3x3",
            LayerKind::Conv { kernel: 5, .. } => "CONV5x5",
            LayerKind::Conv { .. } => "CONV",
            LayerKind::Dense { .. } => "FC",
            LayerKind::MaxPool => "MAXPOOL2x2",
            LayerKind::Identity => "IDENTITY",
        }
    }

    /// Does this layer carry weights?
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

/// Shape of an activation tensor: channels, height, width. Dense layers
/// produce `(units, 1, 1)`.
pub type Shape = (usize, usize, usize);

/// An ordered stack of layers over a fixed input shape. The last layer must
/// be `Dense` and provides the class scores.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Architecture {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerKind>,
}

impl Architecture {
    /// Number of output classes (units of the final dense layer).
    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerKind::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Validate layer order and compute every layer's output shape.
    /// Returns the per-layer output shapes.
    pub fn shapes(&self) -> Result<Vec<Shape>, ArchError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        let mut seen_dense = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: &str| ArchError::BadLayer {
                index: i,
                kind: layer.name().to_string(),
                msg: msg.to_string(),
            };
            if seen_dense && !matches!(layer, LayerKind::Dense { .. }) {
                return Err(err("only dense layers may follow a dense layer"));
            }
            cur = match *layer {
                LayerKind::Conv {
                    kernel,
                    channels,
                    padding,
                } => {
                    let (_, h, w) = cur;
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(err("kernel must be odd and positive"));
                    }
                    if channels == 0 {
                        return Err(err("channel count must be positive"));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(err("input smaller than kernel"));
                    }
                    (
                        channels,
                        h + 2 * padding - kernel + 1,
                        w + 2 * padding - kernel + 1,
                    )
                }
                LayerKind::Dense { units } => {
                    if units == 0 {
                        return Err(err("unit count must be positive"));
                    }
                    seen_dense = true;
                    (units, 1, 1)
                }
                LayerKind::MaxPool => {
                    let (c, h, w) = cur;
                    if h < 2 || w < 2 {
                        return Err(err("input too small to pool"));
                    }
                    (c, h / 2, w / 2)
                }
                LayerKind::Identity => cur,
            };
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerKind::Dense { .. }) => {}
            _ => {
                return Err(ArchError::BadLayer {
                    index: self.layers.len(),
                    kind: "end".into(),
                    msg: "architecture must end with a dense classifier".into(),
                })
            }
        }
        Ok(shapes)
    }

    /// Total weight count (no biases anywhere).
    pub fn count_params(&self) -> usize {
        let mut params = 0usize;
        let mut cur = self.input;
        for layer in &self.layers {
            match *layer {
                LayerKind::Conv {
                    kernel,
                    channels,
                    padding,
                } => {
                    let (c, h, w) = cur;
                    params += channels * c * kernel * kernel;
                    cur = (
                        channels,
                        h + 2 * padding - kernel + 1,
                        w + 2 * padding - kernel + 1,
                    );
                }
                LayerKind::Dense { units } => {
                    let (c, h, w) = cur;
                    params += c * h * w * units;
                    cur = (units, 1, 1);
                }
                LayerKind::MaxPool => cur = (cur.0, cur.1 / 2, cur.2 / 2),
                LayerKind::Identity => {}
            }
        }
        params
    }

    /// Multiply every width by `scale` (round-half-up, minimum 1), except
    /// the final classifier layer.
    pub fn scaled(&self, scale: Scale) -> Architecture {
        let last = self.layers.len().saturating_sub(1);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match *layer {
                LayerKind::Conv {
                    kernel,
                    channels,
                    padding,
                } => LayerKind::Conv {
                    kernel,
                    channels: scale.apply(channels),
                    padding,
                },
                LayerKind::Dense { units } if i != last => LayerKind::Dense {
                    units: scale.apply(units),
                },
                other => other,
            })
            .collect();
        Architecture {
            name: self.name.clone(),
            input: self.input,
            layers,
        }
    }

    /// Serialize to the line-based architecture file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("architecture v1\n");
        out.push_str(&format!("name {}\n", self.name));
        out.push_str(&format!(
            "input {} {} {}\n",
            self.input.0, self.input.1, self.input.2
        ));
        for layer in &self.layers {
            match *layer {
                LayerKind::Conv {
                    kernel,
                    channels,
                    padding,
                } => out.push_str(&format!("conv {kernel} {channels} {padding}\n")),
                LayerKind::Dense { units } => out.push_str(&format!("dense {units}\n")),
                LayerKind::MaxPool => out.push_str("maxpool\n"),
                LayerKind::Identity => out.push_str("identity\n"),
            }
        }
        out.push_str("end\n");
        out
    }

    /// Parse the format produced by [`Architecture::to_text`].
    pub fn from_text(text: &str) -> Result<Self, ArchError> {
        let mut name = String::new();
        let mut input = None;
        let mut layers = Vec::new();
        let mut header_seen = false;
        let mut ended = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: &str| ArchError::Parse {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if ended {
                return Err(err("content after `end`"));
            }
            if !header_seen {
                if line != "architecture v1" {
                    return Err(err("expected `architecture v1` header"));
                }
                header_seen = true;
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap();
            let mut num = |what: &str| -> Result<usize, ArchError> {
                parts
                    .next()
                    .ok_or_else(|| err(&format!("missing {what}")))?
                    .parse()
                    .map_err(|_| err(&format!("bad {what}")))
            };
            match word {
                "name" => {
                    name = parts.next().unwrap_or("").to_string();
                    if name.is_empty() {
                        return Err(err("missing name"));
                    }
                }
                "input" => {
                    input = Some((num("channels")?, num("height")?, num("width")?));
                }
                "conv" => {
                    layers.push(LayerKind::Conv {
                        kernel: num("kernel")?,
                        channels: num("channels")?,
                        padding: num("padding")?,
                    });
                }
                "dense" => layers.push(LayerKind::Dense {
                    units: num("units")?,
                }),
                "maxpool" => layers.push(LayerKind::MaxPool),
                "identity" => layers.push(LayerKind::Identity),
                "end" => ended = true,
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        if !ended {
            return Err(ArchError::Parse {
                line: text.lines().count(),
                msg: "missing `end`".into(),
            });
        }
        let input = input.ok_or(ArchError::Parse {
            line: 0,
            msg: "missing `input`".into(),
        })?;
        let arch = Architecture {
            name,
            input,
            layers,
        };
        arch.shapes()?;
        Ok(arch)
    }
}

/// The fixed model zoo. `m1`–`m3` are MNIST models, `m4`–`m6` CIFAR-10
/// models, and the `searched-*` entries are the discretized results of the
/// cost-regularized search (λ in the name: `l0` = 0.0, `l06` = 0.6).
///
/// MNIST conv models (`m2`, `m3`) use valid padding; CIFAR-10 and searched
/// models use same padding (kernel/2). Widths are the base (scale 1) values.
pub fn zoo() -> Vec<Architecture> {
    let conv = |kernel: usize, channels: usize, padding: usize| LayerKind::Conv {
        kernel,
        channels,
        padding,
    };
    let dense = |units: usize| LayerKind::Dense { units };
    let mp = LayerKind::MaxPool;
    let mnist = (1, 28, 28);
    let cifar = (3, 32, 32);
    vec![
        Architecture {
            name: "m1".into(),
            input: mnist,
            layers: vec![dense(128), dense(128), dense(10)],
        },
        Architecture {
            name: "m2".into(),
            input: mnist,
            layers: vec![conv(5, 5, 0), dense(100), dense(10)],
        },
        Architecture {
            name: "m3".into(),
            input: mnist,
            layers: vec![conv(5, 16, 0), mp, conv(5, 16, 0), mp, dense(100), dense(10)],
        },
        Architecture {
            name: "m4".into(),
            input: cifar,
            layers: vec![
                conv(3, 64, 1),
                conv(3, 64, 1),
                mp,
                conv(3, 64, 1),
                conv(3, 64, 1),
                mp,
                conv(3, 64, 1),
                conv(1, 64, 0),
                conv(1, 16, 0),
                dense(10),
            ],
        },
        Architecture {
            name: "m5".into(),
            input: cifar,
            layers: vec![
                conv(3, 16, 1),
                conv(3, 16, 1),
                conv(3, 16, 1),
                mp,
                conv(3, 32, 1),
                conv(3, 32, 1),
                conv(3, 32, 1),
                mp,
                conv(3, 48, 1),
                conv(3, 48, 1),
                conv(3, 64, 1),
                mp,
                dense(10),
            ],
        },
        Architecture {
            name: "m6".into(),
            input: cifar,
            layers: vec![
                conv(3, 16, 1),
                conv(3, 32, 1),
                conv(3, 32, 1),
                mp,
                conv(3, 48, 1),
                conv(3, 64, 1),
                conv(3, 80, 1),
                mp,
                conv(3, 96, 1),
                conv(3, 96, 1),
                conv(3, 128, 1),
                mp,
                dense(10),
            ],
        },
        Architecture {
            name: "searched-mnist-l0".into(),
            input: mnist,
            layers: vec![
                conv(5, 16, 2),
                conv(5, 16, 2),
                conv(5, 16, 2),
                conv(5, 16, 2),
                dense(100),
                dense(10),
            ],
        },
        Architecture {
            name: "searched-mnist-l06".into(),
            input: mnist,
            layers: vec![
                conv(3, 16, 1),
                conv(3, 16, 1),
                mp,
                conv(5, 16, 2),
                dense(100),
                dense(10),
            ],
        },
        Architecture {
            name: "searched-cifar-l0".into(),
            input: cifar,
            layers: vec![
                conv(5, 16, 2),
                mp,
                conv(5, 16, 2),
                conv(5, 16, 2),
                conv(5, 32, 2),
                mp,
                conv(5, 32, 2),
                conv(5, 32, 2),
                conv(5, 64, 2),
                mp,
                conv(5, 64, 2),
                conv(5, 64, 2),
                dense(10),
            ],
        },
        Architecture {
            name: "searched-cifar-l06".into(),
            input: cifar,
            layers: vec![
                conv(3, 16, 1),
                conv(3, 16, 1),
                conv(3, 16, 1),
                mp,
                conv(3, 32, 1),
                conv(3, 32, 1),
                conv(3, 32, 1),
                mp,
                conv(3, 64, 1),
                conv(3, 64, 1),
                conv(3, 64, 1),
                mp,
                dense(10),
            ],
        },
    ]
}

/// Look up a zoo architecture by name.
pub fn by_name(name: &str) -> Result<Architecture, ArchError> {
    zoo().into_iter()
        .find(|a| a.name == name)
        .ok_or_else(|| ArchError::UnknownName(name.to_string()))
}
