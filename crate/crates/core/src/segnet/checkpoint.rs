//! Binary model checkpoints.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "DSALCKPT"
//! version      u32      1
//! config_len   u32      byte length of the config echo
//! config       UTF-8    `key=value` lines: depth, base_channels, classes,
//!                       input_height, input_width, aux_stage_lower,
//!                       aux_stage_middle, alpha_l, alpha_m, alpha_f, seed
//! seed         u64
//! round        u32
//! count        u32      number of tensors
//! per tensor, in parameter declaration order:
//!   name_len   u32
//!   name       UTF-8
//!   rank       u32
//!   dims       rank × u32
//!   values     prod(dims) × f32
//! ```

use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DSALCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub round: u32,
}

fn config_echo(c: &ModelConfig) -> String {
    let w = c.loss_weights;
    format!(
        "depth={}\nbase_channels={}\nclasses={}\ninput_height={}\ninput_width={}\n\
         aux_stage_lower={}\naux_stage_middle={}\nalpha_l={}\nalpha_m={}\nalpha_f={}\nseed={}\n",
        c.depth,
        c.base_channels,
        c.classes,
        c.input_size.0,
        c.input_size.1,
        c.aux_stage_lower,
        c.aux_stage_middle,
        w.alpha_l,
        w.alpha_m,
        w.alpha_f,
        c.seed
    )
}

fn parse_echo(text: &str) -> Result<ModelConfig, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut cfg = ModelConfig::default();
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("config line without '=': {line:?}")))?;
        let int = || value.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
        let real = || value.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        match key {
            "depth" => cfg.depth = int()?,
            "base_channels" => cfg.base_channels = int()?,
            "classes" => cfg.classes = int()?,
            "input_height" => cfg.input_size.0 = int()?,
            "input_width" => cfg.input_size.1 = int()?,
            "aux_stage_lower" => cfg.aux_stage_lower = int()?,
            "aux_stage_middle" => cfg.aux_stage_middle = int()?,
            "alpha_l" => cfg.loss_weights.alpha_l = real()?,
            "alpha_m" => cfg.loss_weights.alpha_m = real()?,
            "alpha_f" => cfg.loss_weights.alpha_f = real()?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
            other => return Err(bad(format!("unknown config key {other:?}"))),
        }
        seen += 1;
    }
    if seen != 11 {
        return Err(bad(format!("config echo has {seen} of 11 keys")));
    }
    Ok(cfg)
}

pub fn to_bytes(model: &Model<f32>, round: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let echo = config_echo(model.config());
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&model.config().seed.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str, ModelError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(len)?)
            .map_err(|e| ModelError::Checkpoint(format!("invalid UTF-8 at byte {at}: {e}")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = parse_echo(r.str()?)?;
    let seed = r.u64()?;
    if seed != config.seed {
        return Err(ModelError::Checkpoint(format!(
            "seed field {seed} disagrees with config echo {}",
            config.seed
        )));
    }
    let round = r.u32()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        names.push(r.str()?.to_owned());
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| {
            ModelError::Checkpoint(format!("tensor of shape {shape:?} is too large"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            buf.len() - r.pos
        )));
    }
    let model = Model::from_params(config, tensors)?;
    if let Some((p, name)) = model.params().iter().zip(&names).find(|(p, n)| p.name != **n) {
        return Err(ModelError::Checkpoint(format!(
            "tensor {name:?} found where {:?} was expected",
            p.name
        )));
    }
    Ok(Checkpoint { model, round })
}

pub fn save_checkpoint(model: &Model<f32>, round: u32, path: &Path) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, round))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build_model, LossWeights};

    #[test]
    fn echo_roundtrips_awkward_weights() {
        let cfg = ModelConfig {
            loss_weights: LossWeights::new(0.1, 1.0 / 3.0, 0.6),
            seed: u64::MAX,
            ..ModelConfig::default()
        };
        assert_eq!(parse_echo(&config_echo(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let model = build_model::<f32>(&ModelConfig {
            depth: 2,
            base_channels: 1,
            input_size: (4, 4),
            ..ModelConfig::default()
        })
        .unwrap();
        let bytes = to_bytes(&model, 3);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes(&magic).is_err());
        assert_eq!(from_bytes(&bytes).unwrap().round, 3);
    }
}
