//! `MOSC` checkpoint files.
//!
//! Layout (little-endian): magic `MOSC`, version u32, kind u8, tensor
//! count u32, then per tensor a u16 name length, name bytes, u8 rank,
//! u32 dims and f32 data. EMA weights reuse the raw names behind an
//! `ema.` prefix; any other tensors (optimizer state, counters) travel
//! as extras.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{BackboneKind, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"MOSC";
const VERSION: u32 = 1;
const EMA_PREFIX: &str = "ema.";

pub type NamedTensor = (String, Tensor<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub ema: Option<ModelParams<f32>>,
    /// Tensors that are neither raw nor EMA weights.
    pub extras: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self {
            params,
            ema: None,
            extras: Vec::new(),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.params.kind
    }

    /// EMA weights when present, raw weights otherwise.
    pub fn eval_params(&self) -> &ModelParams<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_extra(&mut self, name: &str, t: Tensor<f32>) {
        match self.extras.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.extras.push((name.to_string(), t)),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(ema) = &self.ema {
            if ema.kind != self.params.kind {
                return Err(Error::contract("EMA weights belong to a different backbone"));
            }
            tensors.extend(ema.named().into_iter().map(|(n, t)| (format!("{EMA_PREFIX}{n}"), t)));
        }
        tensors.extend(self.extras.iter().map(|(n, t)| (n.clone(), t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.params.kind.code());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name '{name}' too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing MOSC header".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = BackboneKind::from_code(r.take(1)?[0])?;
        let count = r.u32()? as usize;
        let mut raw = Vec::new();
        let mut ema = Vec::new();
        let mut extras = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if let Some(rest) = name.strip_prefix(EMA_PREFIX) {
                ema.push((rest.to_string(), t));
            } else if is_weight(&name) {
                raw.push((name, t));
            } else {
                extras.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = ModelParams::from_named(kind, &raw)?;
        if !params.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite weights".into()));
        }
        let ema = if ema.is_empty() {
            None
        } else {
            Some(ModelParams::from_named(kind, &ema)?)
        };
        Ok(Self { params, ema, extras })
    }
}

fn is_weight(name: &str) -> bool {
    matches!(
        name,
        "conv.weight" | "conv.bias" | "deconv.weight" | "deconv.bias" | "attn.wq" | "attn.wk" | "attn.wv" | "time_bias"
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes atomically via a sibling temporary file.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn round_trip_every_kind() {
        for kind in BackboneKind::ALL {
            let mut cfg = ModelConfig::new(kind);
            cfg.time_bias_steps = if kind == BackboneKind::Cnn { 7 } else { 0 };
            let mut ckpt = Checkpoint::new(init_model(&cfg, 1));
            ckpt.ema = Some(init_model(&cfg, 2));
            ckpt.set_extra("train.epoch", Tensor::scalar(3.0));
            let back = Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.eval_params(), ckpt.ema.as_ref().unwrap());
        }
    }

    #[test]
    fn cnn_size_matches_layout() {
        let ckpt = Checkpoint::new(init_model(&ModelConfig::new(BackboneKind::Cnn), 0));
        let bytes = ckpt.encode().unwrap();
        let names: usize = ["conv.weight", "conv.bias", "deconv.weight", "deconv.bias"]
            .iter()
            .map(|n| n.len())
            .sum();
        let header = 4 + 4 + 1 + 4;
        let per_tensor = 4 * (2 + 1);
        let dims = 4 * (4 + 1 + 4 + 1);
        assert_eq!(bytes.len(), header + per_tensor + names + dims + 803 * 4);
    }

    #[test]
    fn rejects_corruption() {
        let ckpt = Checkpoint::new(init_model(&ModelConfig::new(BackboneKind::CnnFullAttn), 0));
        let bytes = ckpt.encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::decode(&bad).is_err());
        // drop the projections by relabeling the kind as CNN: extra tensors
        // are tolerated, but a FULL kind without projections is not
        let cnn = Checkpoint::new(init_model(&ModelConfig::new(BackboneKind::Cnn), 0));
        let mut bytes = cnn.encode().unwrap();
        bytes[8] = BackboneKind::CnnFullAttn.code();
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("mosc-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.mosc");
        let ckpt = Checkpoint::new(init_model(&ModelConfig::new(BackboneKind::CnnTop1Attn), 5));
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        assert!(matches!(read_checkpoint(dir.join("missing")), Err(Error::Io { .. })));
        fs::remove_dir_all(dir).unwrap();
    }
}
