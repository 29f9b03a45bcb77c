use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    /// Linear layers with bias and relu.
    Mlp,
    /// Hidden linear layers (no bias) followed by batch norm and relu; plain linear head.
    MlpNorm,
    /// conv-bn-relu-pool twice, then a linear head.
    TinyCnn,
}

impl ArchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::MlpNorm => "mlp_norm",
            ArchKind::TinyCnn => "tiny_cnn",
        }
    }

    pub fn normalized(&self) -> bool {
        !matches!(self, ArchKind::Mlp)
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "mlp_norm" => Ok(ArchKind::MlpNorm),
            "tiny_cnn" => Ok(ArchKind::TinyCnn),
            other => Err(Error::Arch(format!("unknown kind `{other}`"))),
        }
    }
}

/// Network shape. Two parameter vectors can be merged iff their descriptors are equal.
///
/// `hidden` holds hidden-layer widths for the MLP kinds and the two conv
/// channel counts for `tiny_cnn`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub input_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

/// What a parameter segment is, which decides weight decay and scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Weight matrix or kernel; `normalized` when a batch norm follows it.
    Weight { normalized: bool },
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub role: Role,
    pub fan_in: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Weight decay applies to weights and normalization scales.
    pub fn decayed(&self) -> bool {
        matches!(self.role, Role::Weight { .. } | Role::NormScale)
    }
}

/// Flat layout of the trainable values and the running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub segments: Vec<Segment>,
    /// Channel count of every normalization layer, in forward order.
    pub norm_channels: Vec<usize>,
    pub param_count: usize,
    pub aux_count: usize,
}

impl Layout {
    /// Offset of normalization layer `i` in the aux block: means, then variances.
    pub fn aux_offset(&self, i: usize) -> usize {
        self.norm_channels[..i].iter().map(|c| 2 * c).sum()
    }
}

impl ArchDescriptor {
    /// `widths = [input, hidden..., classes]`.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        Self::mlp_kind(ArchKind::Mlp, widths)
    }

    pub fn mlp_norm(widths: &[usize]) -> Result<Self> {
        Self::mlp_kind(ArchKind::MlpNorm, widths)
    }

    fn mlp_kind(kind: ArchKind, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Arch("an mlp needs at least input and output widths".into()));
        }
        let arch = Self {
            kind,
            input_shape: vec![widths[0]],
            hidden: widths[1..widths.len() - 1].to_vec(),
            classes: widths[widths.len() - 1],
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `input = [channels, height, width]`, `channels = [c1, c2]`.
    pub fn tiny_cnn(input: [usize; 3], channels: [usize; 2], classes: usize) -> Result<Self> {
        let arch = Self {
            kind: ArchKind::TinyCnn,
            input_shape: input.to_vec(),
            hidden: channels.to_vec(),
            classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let zero = self.input_shape.contains(&0) || self.hidden.contains(&0) || self.classes == 0;
        if zero {
            return Err(Error::Arch(format!("zero-width layer in `{self}`")));
        }
        match self.kind {
            ArchKind::Mlp | ArchKind::MlpNorm if self.input_shape.len() != 1 => {
                Err(Error::Arch("mlp input must be a vector".into()))
            }
            ArchKind::TinyCnn => {
                if self.input_shape.len() != 3 || self.hidden.len() != 2 {
                    return Err(Error::Arch("tiny_cnn needs input CxHxW and two channel counts".into()));
                }
                if !self.input_shape[1].is_multiple_of(4) || !self.input_shape[2].is_multiple_of(4) {
                    return Err(Error::Arch("tiny_cnn spatial extents must be divisible by 4".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layout(&self) -> Layout {
        let mut segments = Vec::new();
        let mut norm_channels = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, role: Role, fan_in: usize| {
            let len: usize = shape.iter().product();
            segments.push(Segment {
                name,
                shape,
                offset,
                role,
                fan_in,
            });
            offset += len;
        };
        match self.kind {
            ArchKind::Mlp | ArchKind::MlpNorm => {
                let norm = self.kind == ArchKind::MlpNorm;
                let mut width = self.input_shape[0];
                for (i, &h) in self.hidden.iter().enumerate() {
                    push(format!("fc{i}.weight"), vec![width, h], Role::Weight { normalized: norm }, width);
                    if norm {
                        push(format!("bn{i}.scale"), vec![h], Role::NormScale, 0);
                        push(format!("bn{i}.shift"), vec![h], Role::NormShift, 0);
                        norm_channels.push(h);
                    } else {
                        push(format!("fc{i}.bias"), vec![h], Role::Bias, 0);
                    }
                    width = h;
                }
                push("head.weight".into(), vec![width, self.classes], Role::Weight { normalized: false }, width);
                push("head.bias".into(), vec![self.classes], Role::Bias, 0);
            }
            ArchKind::TinyCnn => {
                let mut c = self.input_shape[0];
                for (i, &o) in self.hidden.iter().enumerate() {
                    push(format!("conv{i}.weight"), vec![o, c, 3, 3], Role::Weight { normalized: true }, c * 9);
                    push(format!("bn{i}.scale"), vec![o], Role::NormScale, 0);
                    push(format!("bn{i}.shift"), vec![o], Role::NormShift, 0);
                    norm_channels.push(o);
                    c = o;
                }
                let flat = c * (self.input_shape[1] / 4) * (self.input_shape[2] / 4);
                push("head.weight".into(), vec![flat, self.classes], Role::Weight { normalized: false }, flat);
                push("head.bias".into(), vec![self.classes], Role::Bias, 0);
            }
        }
        let aux_count = norm_channels.iter().map(|c| 2 * c).sum();
        Layout {
            segments,
            norm_channels,
            param_count: offset,
            aux_count,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().param_count
    }
}

impl fmt::Display for ArchDescriptor {
    /// Canonical text form, e.g. `mlp_norm input=32 hidden=256,256 classes=8`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize], sep: &str| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
        write!(
            f,
            "{} input={} hidden={} classes={}",
            self.kind.as_str(),
            join(&self.input_shape, "x"),
            join(&self.hidden, ","),
            self.classes
        )
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Arch(format!("cannot parse `{s}`"));
        let mut parts = s.split_whitespace();
        let kind: ArchKind = parts.next().ok_or_else(bad)?.parse()?;
        let (mut input, mut hidden, mut classes) = (None, None, None);
        let list = |v: &str, sep: char| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(sep).map(|x| x.parse::<usize>().map_err(|_| bad())).collect()
        };
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "input" => input = Some(list(v, 'x')?),
                "hidden" => hidden = Some(list(v, ',')?),
                "classes" => classes = Some(v.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let arch = Self {
            kind,
            input_shape: input.ok_or_else(bad)?,
            hidden: hidden.ok_or_else(bad)?,
            classes: classes.ok_or_else(bad)?,
        };
        arch.validate()?;
        Ok(arch)
    }
}
