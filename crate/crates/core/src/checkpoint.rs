//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FXMM" | version: u32 | dtype: u8
//! train config text | model config text | log text     (u64 length + UTF-8)
//! epoch: u64 | best_epoch: u64 | bad_epochs: u64 | best_metric: f64
//! adam_steps: u64 | adam_lr: f64
//! tensor count: u64, then per tensor:
//!     name (u64 length + UTF-8) | rank: u64 | dims: u64 × rank | values
//! ```
//!
//! Parameters are named `param/<name>`, Adam moments `adam_m/<name>` and
//! `adam_v/<name>`. A checkpoint without moments has `adam_steps = 0` and no
//! moment records.

use std::fs;
use std::path::Path;

use fxmm_tensor::{DType, Scalar, Tensor};

use crate::config::{model_from_text, model_to_text};
use crate::model::ModelConfig;
use crate::optim::Adam;
use crate::params::Params;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FXMM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub train_config: String,
    pub model: ModelConfig,
    /// Log lines written so far.
    pub log: String,
    /// Completed epochs.
    pub epoch: u64,
    pub best_epoch: u64,
    pub bad_epochs: u64,
    pub best_metric: f64,
    pub params: Params<T>,
    pub adam: Option<Adam<T>>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_bytes(out, name.as_bytes());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.string()?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let bytes = self.take(numel.checked_mul(size).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes.chunks(size).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        put_bytes(&mut out, self.train_config.as_bytes());
        put_bytes(&mut out, model_to_text(&self.model).as_bytes());
        put_bytes(&mut out, self.log.as_bytes());
        for v in [self.epoch, self.best_epoch, self.bad_epochs] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        let (steps, lr) = self.adam.as_ref().map_or((0, 0.0), |a| (a.steps, a.lr));
        out.extend_from_slice(&steps.to_le_bytes());
        out.extend_from_slice(&lr.to_le_bytes());

        let moments = self.adam.is_some() as usize;
        let count = self.params.len() * (1 + 2 * moments);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_tensor(&mut out, &format!("param/{name}"), t.shape(), t.data());
        }
        if let Some(adam) = &self.adam {
            for (prefix, state) in [("adam_m", &adam.m), ("adam_v", &adam.v)] {
                for ((_, name, t), s) in self.params.iter().zip(state) {
                    put_tensor(&mut out, &format!("{prefix}/{name}"), t.shape(), s);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let train_config = r.string()?;
        let model = model_from_text(&r.string()?)?;
        let log = r.string()?;
        let (epoch, best_epoch, bad_epochs) = (r.u64()?, r.u64()?, r.u64()?);
        let best_metric = r.f64()?;
        let (steps, lr) = (r.u64()?, r.f64()?);
        let count = r.len()?;

        let mut params = Params::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let (name, t) = r.tensor::<T>()?;
            let (kind, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unnamed record `{name}`")))?;
            match kind {
                "param" => {
                    params.add(rest, t);
                }
                "adam_m" => m.push(t.into_data()),
                "adam_v" => v.push(t.into_data()),
                _ => return Err(Error::Checkpoint(format!("unknown record `{name}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let adam = if m.is_empty() {
            None
        } else if m.len() == params.len() && v.len() == params.len() {
            Some(Adam { lr, steps, m, v })
        } else {
            return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
        };
        Ok(Self {
            train_config,
            model,
            log,
            epoch,
            best_epoch,
            bad_epochs,
            best_metric,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = Params::new();
        params.add("a", Tensor::from_f64(vec![2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap());
        params.add("b", Tensor::from_f64(vec![3], &[7.0, 8.0, f64::MIN_POSITIVE]).unwrap());
        let mut adam = Adam::new(&params, 1e-3);
        adam.steps = 4;
        adam.m[1][2] = 0.5;
        Checkpoint {
            train_config: "seed = 3\n".into(),
            model: ModelConfig {
                num_items: 9,
                ..ModelConfig::default()
            },
            log: "1\t0.5\t0.1\t{}\n".into(),
            epoch: 1,
            best_epoch: 1,
            bad_epochs: 0,
            best_metric: 0.1,
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam.as_ref().unwrap().m[1][2], 0.5);
        assert_eq!(back.params.get(back.params.find("a").unwrap()).data(), &[1.0, -2.5, 3.25, 0.0]);

        let mut bare = ck.clone();
        bare.adam = None;
        let b = bare.to_bytes();
        assert_eq!(Checkpoint::<f32>::from_bytes(&b).unwrap().to_bytes(), b);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }
}
