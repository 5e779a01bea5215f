//! Checkpoint container: 8-byte magic, `u32` version, `u64` header length,
//! a JSON header, then every parameter's values followed by every
//! parameter's momentum as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::LossRecord;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"CPDETCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Iterations completed.
    pub iteration: usize,
    pub config: TrainConfig,
    pub params: Vec<ParamMeta>,
    pub loss_curve: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    values: Vec<Vec<f32>>,
    momentum: Vec<Vec<f32>>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    iteration: usize,
    store: &ParamStore,
    loss_curve: &[LossRecord],
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        iteration,
        config: config.clone(),
        params: store
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        loss_curve: loss_curve.to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 8 * store.num_scalars() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in store.iter() {
        buf.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    for p in store.iter() {
        buf.extend(p.momentum.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes).map_err(|_| ck("truncated tensor data"))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| ck("file too short"))?;
    if &magic != MAGIC {
        return Err(ck("bad magic"));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(|_| ck("file too short"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|_| ck("file too short"))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut json).map_err(|_| ck("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let sizes: Vec<usize> = header.params.iter().map(|p| p.shape.iter().product()).collect();
    let values = sizes.iter().map(|&n| read_f32s(&mut f, n)).collect::<Result<_>>()?;
    let momentum = sizes.iter().map(|&n| read_f32s(&mut f, n)).collect::<Result<_>>()?;
    if f.read(&mut [0u8; 1])? != 0 {
        return Err(ck("trailing bytes"));
    }
    Ok(Checkpoint {
        header,
        values,
        momentum,
    })
}

impl Checkpoint {
    /// Copies values and momentum into a store built from the same config.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.header.params.len() {
            return Err(ck(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter_mut().enumerate() {
            let meta = &self.header.params[i];
            if meta.name != p.name || meta.shape != p.value.shape() {
                return Err(ck(format!("tensor {i}: expected {} {:?}, found {} {:?}", p.name, p.value.shape(), meta.name, meta.shape)));
            }
            p.value.data_mut().copy_from_slice(&self.values[i]);
            p.momentum.data_mut().copy_from_slice(&self.momentum[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-9]));
        s.add("b", Tensor::from_vec(&[3], vec![7.0, 8.0, 9.0]));
        s.get_mut(a).momentum.data_mut()[1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let curve = vec![LossRecord {
            iteration: 0,
            lr: 1e-5,
            total: 1.0 / 3.0,
            terms: Default::default(),
        }];
        save_checkpoint(&p, &TrainConfig::default(), 4, &s, &curve).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.header.iteration, 4);
        assert_eq!(c.header.loss_curve, curve);
        let mut t = s.clone();
        for q in t.iter_mut() {
            q.value.fill(0.0);
            q.momentum.fill(0.0);
        }
        c.restore(&mut t).unwrap();
        for (x, y) in s.iter().zip(t.iter()) {
            assert_eq!(x.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(x.momentum.data(), y.momentum.data());
        }
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[4]));
        other.add("b", Tensor::zeros(&[3]));
        assert!(c.restore(&mut other).is_err());

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
