//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "2DMSE1\0\0"
//! version  u32 LE
//! config   u64 LE length, then UTF-8 JSON {encoder, train, final_loss}
//! tensors  until EOF, each:
//!            u32 LE name length, UTF-8 name,
//!            u32 LE rank, rank x u64 LE dims,
//!            f32 LE payload, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"2DMSE1\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub params: EncoderParams<f32>,
    pub train: TrainConfig,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    encoder: EncoderConfig,
    train: TrainConfig,
    final_loss: f64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            final_loss: self.final_loss,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let names = EncoderParams::<f32>::names(self.encoder.n_layers);
        for (name, t) in names.iter().zip(self.params.leaves()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = usize::try_from(r.u64()?).map_err(|_| bad("config block too large"))?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.encoder.validate()?;

        let names = EncoderParams::<f32>::names(meta.encoder.n_layers);
        let mut tensors = Vec::with_capacity(names.len());
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_owned();
            let expected = names
                .get(tensors.len())
                .ok_or_else(|| bad(format!("unexpected extra tensor {name:?}")))?;
            if &name != expected {
                return Err(bad(format!("expected tensor {expected:?}, found {name:?}")));
            }
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let nbytes = n.checked_mul(4).ok_or_else(|| bad("tensor size overflows"))?;
            let payload = r.take(nbytes).map_err(|_| {
                bad(format!("tensor {name}: payload shorter than {nbytes} bytes"))
            })?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(dims, data).map_err(|e| bad(e.to_string()))?);
        }
        if tensors.len() != names.len() {
            return Err(bad(format!(
                "truncated: {} of {} tensors present",
                tensors.len(),
                names.len()
            )));
        }
        let params = EncoderParams::from_leaves(meta.encoder.n_layers, tensors)?;
        params.validate(&meta.encoder)?;
        Ok(Self {
            encoder: meta.encoder,
            params,
            train: meta.train,
            final_loss: meta.final_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pooling;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let encoder = EncoderConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 6,
            max_seq_len: 5,
            pooling: Pooling::Mean,
        };
        let params = EncoderParams::init(&encoder, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        Checkpoint {
            encoder: encoder.clone(),
            params,
            train: TrainConfig {
                encoder,
                ..TrainConfig::default()
            },
            final_loss: 1.234567,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        // drop the whole final tensor record
        let last_len = 4 + "layers.1.ffn_norm.beta".len() + 4 + 8 + 4 * 4;
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - last_len]).is_err());
    }
}
