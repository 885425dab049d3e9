use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer in `C1D(filters, kernel, stride, dropout)` / `GRU(units, dropout)` /
/// `Dense(nodes)` notation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
        dropout: f64,
    },
    Gru {
        units: usize,
        dropout: f64,
    },
    Dense {
        nodes: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv1d {
                filters,
                kernel,
                stride,
                dropout,
            } => write!(f, "C1D({filters},{kernel},{stride},{dropout})"),
            LayerSpec::Gru { units, dropout } => write!(f, "GRU({units},{dropout})"),
            LayerSpec::Dense { nodes } => write!(f, "Dense({nodes})"),
        }
    }
}

/// Layer stack: zero or more `C1D`, one `GRU`, then a softmax `Dense(classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(" -> "))
    }
}

fn parse_args(body: &str, name: &str, count: usize) -> Result<Vec<f64>> {
    let args: Vec<f64> = body
        .split(',')
        .map(|a| a.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidParameter(format!("bad arguments in {name}({body})")))?;
    if args.len() != count {
        return Err(Error::InvalidParameter(format!(
            "{name} takes {count} arguments, got {}",
            args.len()
        )));
    }
    Ok(args)
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::InvalidParameter(format!(
            "{what} must be a positive integer, got {v}"
        )))
    }
}

impl NetworkSpec {
    /// Parses e.g. `C1D(32,8,4,0.1) -> GRU(64,0.2) -> Dense(classes)`.
    /// `Dense(classes)` takes the class count given here.
    pub fn parse(text: &str, input_dim: usize, classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for token in text.split("->").flat_map(|t| t.split('→')) {
            let token = token.trim();
            let (name, rest) = token
                .split_once('(')
                .ok_or_else(|| Error::InvalidParameter(format!("bad layer {token:?}")))?;
            let body = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidParameter(format!("bad layer {token:?}")))?;
            let layer = match name.trim() {
                "C1D" => {
                    let a = parse_args(body, "C1D", 4)?;
                    LayerSpec::Conv1d {
                        filters: as_count(a[0], "filters")?,
                        kernel: as_count(a[1], "kernel")?,
                        stride: as_count(a[2], "stride")?,
                        dropout: a[3],
                    }
                }
                "GRU" => {
                    let a = parse_args(body, "GRU", 2)?;
                    LayerSpec::Gru {
                        units: as_count(a[0], "units")?,
                        dropout: a[1],
                    }
                }
                "Dense" => {
                    let nodes = if body.trim() == "classes" {
                        classes
                    } else {
                        as_count(parse_args(body, "Dense", 1)?[0], "nodes")?
                    };
                    LayerSpec::Dense { nodes }
                }
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown layer type {other:?}"
                    )))
                }
            };
            layers.push(layer);
        }
        let spec = Self {
            input_dim,
            classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.input_dim == 0 || self.classes < 2 {
            return bad("need input_dim >= 1 and at least 2 classes".into());
        }
        let n = self.layers.len();
        if n < 2 {
            return bad("network needs at least a GRU and a Dense layer".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv1d {
                    kernel,
                    stride,
                    dropout,
                    filters,
                } => {
                    if i >= n - 2 {
                        return bad("C1D layers must precede the GRU".into());
                    }
                    if filters == 0 || stride == 0 || stride >= kernel {
                        return bad(format!(
                            "{layer}: need filters >= 1 and 1 <= stride < kernel"
                        ));
                    }
                    if !(0.0..1.0).contains(&dropout) {
                        return bad(format!("{layer}: dropout must be in [0, 1)"));
                    }
                }
                LayerSpec::Gru { units, dropout } => {
                    if i != n - 2 {
                        return bad("exactly one GRU, directly before the Dense head".into());
                    }
                    if units == 0 || !(0.0..1.0).contains(&dropout) {
                        return bad(format!("{layer}: need units >= 1 and dropout in [0, 1)"));
                    }
                }
                LayerSpec::Dense { nodes } => {
                    if i != n - 1 {
                        return bad("Dense must be the final layer".into());
                    }
                    if nodes != self.classes {
                        return bad(format!(
                            "final Dense has {nodes} nodes for {} classes",
                            self.classes
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Shortest input sequence the convolution stack accepts.
    pub fn min_sequence_len(&self) -> usize {
        let mut need = 1;
        for layer in self.layers.iter().rev() {
            if let LayerSpec::Conv1d { kernel, stride, .. } = *layer {
                need = (need - 1) * stride + kernel;
            }
        }
        need
    }

    pub fn model1(input_dim: usize, classes: usize) -> Self {
        Self::parse(
            "C1D(32,8,4,0.1) -> C1D(64,4,2,0.2) -> GRU(64,0.2) -> Dense(classes)",
            input_dim,
            classes,
        )
        .expect("default model 1 is valid")
    }

    pub fn model2(input_dim: usize, classes: usize) -> Self {
        Self::parse(
            "C1D(16,16,8,0.3) -> GRU(96,0.3) -> Dense(classes)",
            input_dim,
            classes,
        )
        .expect("default model 2 is valid")
    }

    pub fn model3(input_dim: usize, classes: usize) -> Self {
        Self::parse(
            "C1D(48,4,2,0.1) -> C1D(48,4,2,0.1) -> GRU(32,0.1) -> Dense(classes)",
            input_dim,
            classes,
        )
        .expect("default model 3 is valid")
    }

    pub fn defaults(input_dim: usize, classes: usize) -> [Self; 3] {
        [
            Self::model1(input_dim, classes),
            Self::model2(input_dim, classes),
            Self::model3(input_dim, classes),
        ]
    }
}
