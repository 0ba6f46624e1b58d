//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is UTF-8 text:
//!
//! ```text
//! finevl-checkpoint 1
//! config_hash <hex>
//! step <n>
//! model <ModelConfig as one-line JSON>
//! param <name> <d1>x<d2>... <16-hex-digit IEEE-754 bits per value>
//! ...
//! end
//! ```
//!
//! Values are stored as raw bit patterns so a save/load round trip is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "finevl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every value, keeping names. Shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::dims("assign parameters", &[self.params.len()], &[values.len()]));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dims("assign parameters", p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: usize,
    pub params: ParamStore,
}

pub fn render_checkpoint(ck: &Checkpoint) -> Result<String> {
    let model = serde_json::to_string(&ck.config)
        .map_err(|e| Error::parse("checkpoint", e.to_string()))?;
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").ok();
    writeln!(out, "config_hash {}", ck.config_hash).ok();
    writeln!(out, "step {}", ck.step).ok();
    writeln!(out, "model {model}").ok();
    for p in ck.params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        write!(out, "param {} {} ", p.name, shape.join("x")).ok();
        for v in p.value.data() {
            write!(out, "{:016x}", v.to_bits()).ok();
        }
        out.push('\n');
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let bad = |m: String| Error::parse("checkpoint", m);
    let mut lines = text.lines();
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key} line")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key:?}, found {line:?}")))
    };
    let version = field(CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_hash = field("config_hash")?;
    let step = field("step")?
        .parse()
        .map_err(|e| bad(format!("step: {e}")))?;
    let config: ModelConfig =
        serde_json::from_str(&field("model")?).map_err(|e| bad(format!("model: {e}")))?;
    let mut params = ParamStore::new();
    let mut ended = false;
    for line in lines {
        if line == "end" {
            ended = true;
            break;
        }
        let rest = line
            .strip_prefix("param ")
            .ok_or_else(|| bad(format!("unexpected line {line:?}")))?;
        let mut parts = rest.split(' ');
        let (Some(name), Some(shape), Some(hex), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("malformed param line {rest:?}")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|e| bad(format!("{name} shape: {e}"))))
            .collect::<Result<_>>()?;
        if hex.len() % 16 != 0 {
            return Err(bad(format!("{name}: payload length {}", hex.len())));
        }
        let data = (0..hex.len() / 16)
            .map(|i| {
                u64::from_str_radix(&hex[i * 16..(i + 1) * 16], 16)
                    .map(f64::from_bits)
                    .map_err(|e| bad(format!("{name}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        params.add(name, Tensor::new(shape, data)?);
    }
    if !ended {
        return Err(bad("truncated: missing end marker".into()));
    }
    Ok(Checkpoint {
        config,
        config_hash,
        step,
        params,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, render_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read_to_string(path)?)
}
