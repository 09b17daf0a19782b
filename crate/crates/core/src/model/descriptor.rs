//! Architecture descriptors: layer specs, data-free shape inference and the
//! line-oriented text form stored in checkpoints.
//!
//! ```text
//! model arch input=10x64x64x3 classes=2
//! frames time_distributed layers=3
//!   conv1_1 conv2d filters=64 kernel=3 stride=1 padding=same activation=relu
//!   pool1 maxpool2d window=2 stride=2
//!   flatten flatten
//! bigru bigru units=32
//! fc1 dense units=512 activation=relu
//! ```
//!
//! Lines are `name type key=value...`; children of `time_distributed`
//! follow their parent (indentation is cosmetic, `layers=` is the count).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::error::{CheckpointError, Error, Result};
use crate::kernels::{pool_output_extent, ConvGeometry, Padding};
use crate::layers::gru::GRU_PARAM_NAMES;
use crate::layers::Activation;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    Activation(Activation),
    Flatten,
    Dropout {
        rate: f32,
    },
    Gru {
        units: usize,
        return_sequence: bool,
    },
    BiGru {
        units: usize,
    },
    TimeDistributed {
        layers: Vec<LayerSpec>,
    },
}

impl LayerKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Activation(_) => "activation",
            LayerKind::Flatten => "flatten",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Gru { .. } => "gru",
            LayerKind::BiGru { .. } => "bigru",
            LayerKind::TimeDistributed { .. } => "time_distributed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
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

    /// Output shape for a given input shape. Depends only on shapes and
    /// hyperparameters.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Dimension(msg));
        match &self.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let c = input.get(2).copied().unwrap_or(0);
                let g = ConvGeometry::new(input, &[*kernel, *kernel, c, *filters], *stride, *padding)?;
                Ok(vec![g.out_h, g.out_w, g.out_c])
            }
            LayerKind::MaxPool2d { window, stride } => {
                let &[h, w, c] = input else {
                    return bad(format!("maxpool2d needs [H,W,C], got {input:?}"));
                };
                Ok(vec![
                    pool_output_extent(h, *window, *stride)?,
                    pool_output_extent(w, *window, *stride)?,
                    c,
                ])
            }
            LayerKind::Dense { units, .. } => match input {
                [n] if *n > 0 => Ok(vec![*units]),
                _ => bad(format!("dense needs a flat [N] input, got {input:?}")),
            },
            LayerKind::Activation(Activation::Softmax) if input.is_empty() => {
                bad("softmax needs at least one axis".into())
            }
            LayerKind::Activation(_) => Ok(input.to_vec()),
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Gru { units, return_sequence } => match input {
                [t, d] if *t > 0 && *d > 0 => Ok(if *return_sequence {
                    vec![*t, *units]
                } else {
                    vec![*units]
                }),
                _ => bad(format!("gru needs [T, input_dim] with T >= 1, got {input:?}")),
            },
            LayerKind::BiGru { units } => match input {
                [t, d] if *t > 0 && *d > 0 => Ok(vec![2 * units]),
                _ => bad(format!("bigru needs [T, input_dim] with T >= 1, got {input:?}")),
            },
            LayerKind::TimeDistributed { layers } => {
                let Some((&t, frame)) = input.split_first() else {
                    return bad("time_distributed needs a leading time axis".into());
                };
                if t == 0 {
                    return bad("time_distributed needs at least one frame".into());
                }
                let mut shape = frame.to_vec();
                for l in layers {
                    shape = l
                        .output_shape(&shape)
                        .map_err(|e| Error::Structure(format!("inside {}: {}: {e}", self.name, l.name)))?;
                }
                let mut out = vec![t];
                out.extend(shape);
                Ok(out)
            }
        }
    }

    /// Names and shapes of this layer's parameter tensors, in storage order.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
        let n = &self.name;
        Ok(match &self.kind {
            LayerKind::Conv2d { filters, kernel, .. } => {
                let c = input.get(2).copied().unwrap_or(0);
                vec![
                    (format!("{n}.kernel"), vec![*kernel, *kernel, c, *filters]),
                    (format!("{n}.bias"), vec![*filters]),
                ]
            }
            LayerKind::Dense { units, .. } => vec![
                (format!("{n}.weight"), vec![*units, input.iter().product()]),
                (format!("{n}.bias"), vec![*units]),
            ],
            LayerKind::Gru { units, .. } => gru_shapes(n, *units, input.get(1).copied().unwrap_or(0)),
            LayerKind::BiGru { units } => {
                let d = input.get(1).copied().unwrap_or(0);
                let mut v = gru_shapes(&format!("{n}.fwd"), *units, d);
                v.extend(gru_shapes(&format!("{n}.bwd"), *units, d));
                v
            }
            LayerKind::TimeDistributed { layers } => {
                let mut shape = input.get(1..).unwrap_or_default().to_vec();
                let mut v = Vec::new();
                for l in layers {
                    v.extend(l.param_shapes(&shape)?);
                    shape = l.output_shape(&shape)?;
                }
                v
            }
            _ => Vec::new(),
        })
    }

    fn write_text(&self, out: &mut String, indent: usize) {
        let pad = "  ".repeat(indent);
        let _ = write!(out, "{pad}{} {}", self.name, self.kind.type_name());
        match &self.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                activation,
            } => {
                let _ = write!(
                    out,
                    " filters={filters} kernel={kernel} stride={stride} padding={} activation={}",
                    padding.as_str(),
                    activation.as_str()
                );
            }
            LayerKind::MaxPool2d { window, stride } => {
                let _ = write!(out, " window={window} stride={stride}");
            }
            LayerKind::Dense { units, activation } => {
                let _ = write!(out, " units={units} activation={}", activation.as_str());
            }
            LayerKind::Activation(a) => {
                let _ = write!(out, " function={}", a.as_str());
            }
            LayerKind::Flatten => {}
            LayerKind::Dropout { rate } => {
                let _ = write!(out, " rate={rate}");
            }
            LayerKind::Gru { units, return_sequence } => {
                let _ = write!(out, " units={units} return_sequence={return_sequence}");
            }
            LayerKind::BiGru { units } => {
                let _ = write!(out, " units={units}");
            }
            LayerKind::TimeDistributed { layers } => {
                let _ = write!(out, " layers={}", layers.len());
            }
        }
        out.push('\n');
        if let LayerKind::TimeDistributed { layers } = &self.kind {
            for l in layers {
                l.write_text(out, indent + 1);
            }
        }
    }

    /// Visits this spec and any nested specs, depth first.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a LayerSpec)) {
        f(self);
        if let LayerKind::TimeDistributed { layers } = &self.kind {
            for l in layers {
                l.walk(f);
            }
        }
    }
}

fn gru_shapes(prefix: &str, units: usize, dim: usize) -> Vec<(String, Vec<usize>)> {
    GRU_PARAM_NAMES
        .iter()
        .map(|s| {
            let shape = match s.as_bytes()[0] {
                b'w' => vec![units, dim],
                b'u' => vec![units, units],
                _ => vec![units],
            };
            (format!("{prefix}.{s}"), shape)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    /// Shape of one input sample, e.g. `[T, H, W, C]` or `[H, W, C]`.
    pub input_shape: Vec<usize>,
    /// Number of output classes; 0 for a headless feature extractor.
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    /// Shape after each top-level layer. Fails with a structure error naming
    /// the junction where inference breaks.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.check_names()?;
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Structure(format!(
                "input shape {:?} must be non-empty with positive extents",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut prev = "input".to_string();
        for l in &self.layers {
            shape = l.output_shape(&shape).map_err(|e| {
                Error::Structure(format!(
                    "junction {prev} -> {} ({}) with shape {shape:?}: {e}",
                    l.name,
                    l.kind.type_name()
                ))
            })?;
            shapes.push(shape.clone());
            prev = l.name.clone();
        }
        if self.classes > 0 && shape != [self.classes] {
            return Err(Error::Structure(format!(
                "final output {shape:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.infer_shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Parameter names and shapes in storage order, without allocating.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.infer_shapes()?;
        let mut shape = self.input_shape.clone();
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.param_shapes(&shape)?);
            shape = l.output_shape(&shape)?;
        }
        Ok(v)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    fn check_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut dup = None;
        let mut bad = None;
        for l in &self.layers {
            l.walk(&mut |s| {
                if s.name.is_empty() || s.name.chars().any(char::is_whitespace) || s.name.contains('=') {
                    bad.get_or_insert_with(|| s.name.clone());
                }
                if !seen.insert(s.name.as_str()) {
                    dup.get_or_insert_with(|| s.name.clone());
                }
            });
        }
        if let Some(name) = bad {
            return Err(Error::Structure(format!("invalid layer name {name:?}")));
        }
        if let Some(name) = dup {
            return Err(Error::Structure(format!("duplicate layer name {name:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let mut out = format!("model arch input={} classes={}\n", dims.join("x"), self.classes);
        for l in &self.layers {
            l.write_text(&mut out, 0);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| CheckpointError::Descriptor("empty descriptor".into()))?;
        let (name, ty, mut kv) = split_line(header, 1)?;
        if name != "model" || ty != "arch" {
            return Err(CheckpointError::Descriptor(format!(
                "line 1: expected `model arch` header, got `{header}`"
            )));
        }
        let input = kv.take("input", 1)?;
        let input_shape = input
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CheckpointError::Descriptor(format!("line 1: bad input shape `{input}`")))?;
        let classes = kv.usize("classes", 1)?;
        kv.finish(1)?;
        let mut rest: Vec<(usize, &str)> = lines.map(|(i, l)| (i + 1, l)).collect();
        rest.reverse();
        let mut layers = Vec::new();
        while !rest.is_empty() {
            layers.push(parse_spec(&mut rest)?);
        }
        Ok(ArchDescriptor {
            input_shape,
            classes,
            layers,
        })
    }
}

struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    fn take(&mut self, key: &str, line: usize) -> Result<String, CheckpointError> {
        self.map
            .remove(key)
            .ok_or_else(|| CheckpointError::Descriptor(format!("line {line}: missing `{key}`")))
    }

    fn parsed<V: std::str::FromStr>(&mut self, key: &str, line: usize) -> Result<V, CheckpointError> {
        let raw = self.take(key, line)?;
        raw.parse()
            .map_err(|_| CheckpointError::Descriptor(format!("line {line}: bad value `{key}={raw}`")))
    }

    fn usize(&mut self, key: &str, line: usize) -> Result<usize, CheckpointError> {
        self.parsed(key, line)
    }

    fn finish(self, line: usize) -> Result<(), CheckpointError> {
        match self.map.keys().next() {
            Some(k) => Err(CheckpointError::Descriptor(format!("line {line}: unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn split_line(line: &str, lineno: usize) -> Result<(String, String, KeyValues), CheckpointError> {
    let mut tokens = line.split_whitespace();
    let (Some(name), Some(ty)) = (tokens.next(), tokens.next()) else {
        return Err(CheckpointError::Descriptor(format!(
            "line {lineno}: expected `name type key=value...`"
        )));
    };
    let mut map = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| CheckpointError::Descriptor(format!("line {lineno}: expected key=value, got `{tok}`")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CheckpointError::Descriptor(format!(
                "line {lineno}: repeated key `{k}`"
            )));
        }
    }
    Ok((name.to_string(), ty.to_string(), KeyValues { map }))
}

fn parse_spec(rest: &mut Vec<(usize, &str)>) -> Result<LayerSpec, CheckpointError> {
    let (lineno, line) = rest.pop().expect("caller checks non-empty");
    let (name, ty, mut kv) = split_line(line, lineno)?;
    let activation =
        |kv: &mut KeyValues, key: &str| -> Result<Activation, CheckpointError> { kv.parsed::<Activation>(key, lineno) };
    let kind = match ty.as_str() {
        "conv2d" => LayerKind::Conv2d {
            filters: kv.usize("filters", lineno)?,
            kernel: kv.usize("kernel", lineno)?,
            stride: kv.usize("stride", lineno)?,
            padding: kv.parsed("padding", lineno)?,
            activation: activation(&mut kv, "activation")?,
        },
        "maxpool2d" => LayerKind::MaxPool2d {
            window: kv.usize("window", lineno)?,
            stride: kv.usize("stride", lineno)?,
        },
        "dense" => LayerKind::Dense {
            units: kv.usize("units", lineno)?,
            activation: activation(&mut kv, "activation")?,
        },
        "activation" => LayerKind::Activation(activation(&mut kv, "function")?),
        "flatten" => LayerKind::Flatten,
        "dropout" => LayerKind::Dropout {
            rate: kv.parsed("rate", lineno)?,
        },
        "gru" => LayerKind::Gru {
            units: kv.usize("units", lineno)?,
            return_sequence: kv.parsed("return_sequence", lineno)?,
        },
        "bigru" => LayerKind::BiGru {
            units: kv.usize("units", lineno)?,
        },
        "time_distributed" => {
            let count = kv.usize("layers", lineno)?;
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                if rest.is_empty() {
                    return Err(CheckpointError::Descriptor(format!(
                        "line {lineno}: {name} declares {count} child layers, found {}",
                        layers.len()
                    )));
                }
                layers.push(parse_spec(rest)?);
            }
            LayerKind::TimeDistributed { layers }
        }
        other => {
            return Err(CheckpointError::Descriptor(format!(
                "line {lineno}: unknown layer type `{other}`"
            )))
        }
    };
    kv.finish(lineno)?;
    Ok(LayerSpec { name, kind })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchDescriptor {
        ArchDescriptor {
            input_shape: vec![3, 8, 8, 3],
            classes: 2,
            layers: vec![
                LayerSpec::new(
                    "frames",
                    LayerKind::TimeDistributed {
                        layers: vec![
                            LayerSpec::new(
                                "c1",
                                LayerKind::Conv2d {
                                    filters: 4,
                                    kernel: 3,
                                    stride: 1,
                                    padding: Padding::Same,
                                    activation: Activation::Relu,
                                },
                            ),
                            LayerSpec::new("p1", LayerKind::MaxPool2d { window: 2, stride: 2 }),
                            LayerSpec::new("flat", LayerKind::Flatten),
                        ],
                    },
                ),
                LayerSpec::new("rnn", LayerKind::BiGru { units: 5 }),
                LayerSpec::new("drop", LayerKind::Dropout { rate: 0.25 }),
                LayerSpec::new(
                    "out",
                    LayerKind::Dense {
                        units: 2,
                        activation: Activation::Softmax,
                    },
                ),
            ],
        }
    }

    #[test]
    fn infers_shapes_without_data() {
        let d = small();
        let shapes = d.infer_shapes().unwrap();
        assert_eq!(shapes, vec![vec![3, 64], vec![10], vec![10], vec![2]]);
        // conv 3*3*3*4+4, bigru 2*(3*5*64 + 3*25 + 3*5), dense 10*2+2
        assert_eq!(d.param_count().unwrap(), 112 + 2 * (960 + 75 + 15) + 22);
    }

    #[test]
    fn text_round_trip() {
        let d = small();
        let text = d.to_text();
        assert_eq!(ArchDescriptor::parse(&text).unwrap(), d);
    }

    #[test]
    fn junction_errors_name_both_layers() {
        let mut d = small();
        d.layers.swap(0, 1);
        let msg = d.infer_shapes().unwrap_err().to_string();
        assert!(msg.contains("input -> rnn"), "{msg}");
    }

    #[test]
    fn rejects_duplicate_names_and_class_mismatch() {
        let mut d = small();
        d.layers[2].name = "c1".into();
        assert!(matches!(d.infer_shapes(), Err(Error::Structure(_))));
        let mut d = small();
        d.classes = 3;
        assert!(matches!(d.infer_shapes(), Err(Error::Structure(_))));
    }

    #[test]
    fn parse_rejects_unknown_keys_and_short_children() {
        let bad = "model arch input=4 classes=0\nx dense units=2 activation=relu colour=red\n";
        assert!(ArchDescriptor::parse(bad).is_err());
        let bad = "model arch input=2x4 classes=0\ntd time_distributed layers=2\n  f flatten\n";
        assert!(ArchDescriptor::parse(bad).is_err());
    }
}
