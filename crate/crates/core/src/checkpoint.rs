//! Versioned binary checkpoints and checkpoint averaging.
//!
//! Layout (little-endian): magic `PSGCKPT1`, u64 step, u64 epoch, u64 length
//! + config JSON, u64 parameter count, then per parameter u64 name length,
//! name, u64 rank, u64 dims, f64 data. A trailing u8 flags optimizer
//! moments: u64 Adam step, then first and second moments per parameter in
//! parameter order.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, PsgModel};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub t: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    /// `{"model": ModelConfig, "run": ...}`.
    pub config: serde_json::Value,
    pub params: ParamStore<f64>,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &PsgModel<S>, step: u64, epoch: u64, run: serde_json::Value) -> Result<Self> {
        Ok(Checkpoint {
            step,
            epoch,
            config: serde_json::json!({ "model": model.config(), "run": run }),
            params: model.params().cast(),
            moments: None,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self
            .config
            .get("model")
            .ok_or_else(|| Error::Checkpoint("config snapshot has no model section".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn run_config(&self) -> Option<&serde_json::Value> {
        self.config.get("run")
    }

    pub fn to_model<S: Scalar>(&self) -> Result<PsgModel<S>> {
        PsgModel::from_params(self.model_config()?, self.params.cast())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, self.step);
        put(&mut out, self.epoch);
        let cfg = serde_json::to_vec(&self.config)?;
        put(&mut out, cfg.len() as u64);
        out.extend_from_slice(&cfg);
        put(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put(&mut out, d as u64);
            }
            put_data(&mut out, t.data());
        }
        match &self.moments {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                put(&mut out, m.t);
                for t in m.m.iter().chain(&m.v) {
                    put_data(&mut out, t.data());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a PSGCKPT1 file".into()));
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let n = r.len()?;
        let config: serde_json::Value = serde_json::from_slice(r.take(n)?)?;
        let count = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.len()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.len()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let data = r.data(shape.iter().product())?;
            params.add(name, Tensor::new(shape, data)?)?;
        }
        let moments = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let shapes: Vec<Vec<usize>> = params.iter().map(|(_, p)| p.shape().to_vec()).collect();
                let mut read_all = || -> Result<Vec<Tensor<f64>>> {
                    shapes
                        .iter()
                        .map(|s| Tensor::new(s.clone(), r.data(s.iter().product())?))
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(Moments { t, m, v })
            }
            f => return Err(Error::Checkpoint(format!("unknown moments flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            step,
            epoch,
            config,
            params,
            moments,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn put(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_data(out: &mut Vec<u8>, data: &[f64]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x)
            .ok()
            .filter(|&x| x <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {x}")))
    }

    fn data(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Element-wise mean of the parameters, as a running mean so identical
/// inputs reproduce their values exactly. Config and step come from the last
/// checkpoint; moments are dropped.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts
        .last()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let first = &ckpts[0];
    let mut mean = first.params.clone();
    for (k, c) in ckpts.iter().enumerate().skip(1) {
        first.params.check_schema(&c.params)?;
        let inv = 1.0 / (k + 1) as f64;
        for id in first.params.ids() {
            let src = c.params.get(id).data();
            for (m, &x) in mean.get_mut(id).data_mut().iter_mut().zip(src) {
                *m += (x - *m) * inv;
            }
        }
    }
    Ok(Checkpoint {
        step: last.step,
        epoch: last.epoch,
        config: last.config.clone(),
        params: mean,
        moments: None,
    })
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint{epoch}.bin"))
}

/// Per-epoch checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(n) = name
            .strip_prefix("checkpoint")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|r| r.parse::<u64>().ok())
        {
            found.push((n, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Vec<usize>, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, shape, v) in values {
            s.add(*n, Tensor::full(shape.clone(), *v).unwrap()).unwrap();
        }
        s
    }

    fn ckpt(params: ParamStore<f64>) -> Checkpoint {
        Checkpoint {
            step: 7,
            epoch: 2,
            config: serde_json::json!({"model": null, "run": {"x": 1}}),
            params,
            moments: None,
        }
    }

    #[test]
    fn binary_round_trip() {
        let mut c = ckpt(store(&[("a", vec![2, 3], 0.25), ("b", vec![4], -1.5)]));
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
        c.moments = Some(Moments {
            t: 3,
            m: c.params.iter().map(|(_, t)| t.map(|x| x * 2.0)).collect(),
            v: c.params.iter().map(|(_, t)| t.map(|x| x * x)).collect(),
        });
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn averaging_rules() {
        let a = ckpt(store(&[("w", vec![3], 0.1), ("b", vec![2], 7.3)]));
        let avg = average_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(avg.params, a.params);
        let zero = ckpt(store(&[("w", vec![3], 0.0)]));
        let two = ckpt(store(&[("w", vec![3], 2.0)]));
        let avg = average_checkpoints(&[zero.clone(), two]).unwrap();
        assert_eq!(avg.params.get(avg.params.id("w").unwrap()).data(), &[1.0, 1.0, 1.0]);
        let other = ckpt(store(&[("w", vec![4], 0.0)]));
        let err = average_checkpoints(&[zero, other]).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn listing_orders_by_epoch() {
        let dir = tempfile::tempdir().unwrap();
        for e in [10u64, 2, 1] {
            std::fs::write(checkpoint_path(dir.path(), e), b"").unwrap();
        }
        std::fs::write(dir.path().join("checkpoint_last.bin"), b"").unwrap();
        let names: Vec<String> = list_checkpoints(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["checkpoint1.bin", "checkpoint2.bin", "checkpoint10.bin"]);
    }
}
