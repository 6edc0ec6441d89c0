//! `MSCK` checkpoints: named parameters, optimizer moments and the hash of
//! the configuration that produced them.
//!
//! Layout (little-endian): magic, u16 version, u64 config hash, u32 epoch,
//! f64 best validation accuracy, u32 parameter count, then per parameter a
//! length-prefixed name and a tensor; finally u8 optimizer flag and, when
//! set, u64 step, f64 lr and per parameter the first and second moments.

use std::path::Path;

use crate::binio::{put_f64, put_str, put_tensor, put_u16, put_u32, put_u64, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub lr: f64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub epoch: u32,
    pub best_val: f64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore<f32>, config_hash: u64, epoch: u32, best_val: f64, adam: Option<&AdamState>) -> Self {
        let params: Vec<(String, Tensor<f32>)> = store
            .iter()
            .map(|(_, name, t)| (name.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap()))
            .collect();
        let optimizer = adam.map(|a| {
            let moments = |m: &[Vec<f32>]| {
                params
                    .iter()
                    .zip(m)
                    .map(|((_, t), v)| Tensor::new(t.shape().to_vec(), v.clone()).unwrap())
                    .collect()
            };
            OptimizerSnapshot {
                step: a.step,
                lr: a.lr(),
                first: moments(&a.first),
                second: moments(&a.second),
            }
        });
        Self {
            config_hash,
            epoch,
            best_val,
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u16(&mut buf, CHECKPOINT_VERSION);
        put_u64(&mut buf, self.config_hash);
        put_u32(&mut buf, self.epoch);
        put_f64(&mut buf, self.best_val);
        put_u32(&mut buf, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut buf, name);
            put_tensor(&mut buf, t.shape(), t.data());
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                put_u64(&mut buf, o.step);
                put_f64(&mut buf, o.lr);
                for (a, b) in o.first.iter().zip(&o.second) {
                    put_tensor(&mut buf, a.shape(), a.data());
                    put_tensor(&mut buf, b.shape(), b.data());
                }
            }
        }
        buf
    }

    /// Parses a checkpoint; `expected_hash` rejects one written for another
    /// configuration.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        if let Some(expected) = expected_hash {
            if expected != config_hash {
                return Err(Error::HashMismatch {
                    expected,
                    found: config_hash,
                });
            }
        }
        let epoch = r.u32()?;
        let best_val = r.f64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let mut first = Vec::with_capacity(n);
                let mut second = Vec::with_capacity(n);
                for (_, p) in &params {
                    let a = r.tensor()?;
                    let b = r.tensor()?;
                    if a.shape() != p.shape() || b.shape() != p.shape() {
                        return Err(Error::format("optimizer moment shape differs from parameter"));
                    }
                    first.push(a);
                    second.push(b);
                }
                Some(OptimizerSnapshot { step, lr, first, second })
            }
            f => return Err(Error::format(format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Self {
            config_hash,
            epoch,
            best_val,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected_hash)
    }

    /// Copies every stored tensor into the same-named parameter of `store`.
    /// All store parameters must be present with matching shapes.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Architecture(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Architecture(format!("model has no parameter `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Geometry(format!(
                    "parameter `{name}`: checkpoint {:?}, model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Rebuilds the optimizer state for `store`, if one was saved.
    pub fn adam_state(&self, store: &ParamStore<f32>, config: AdamConfig) -> Option<AdamState> {
        let o = self.optimizer.as_ref()?;
        let mut state = AdamState::new(store, config);
        state.step = o.step;
        state.set_lr(o.lr);
        for (i, (_, name, _)) in store.iter().enumerate() {
            let k = self.params.iter().position(|(n, _)| n == name)?;
            state.first[i] = o.first[k].data().to_vec();
            state.second[i] = o.second[k].data().to_vec();
        }
        Some(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_requires_grad(true))
            .unwrap();
        s.add("a.b", Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap().with_requires_grad(true))
            .unwrap();
        s
    }

    #[test]
    fn round_trip_with_optimizer() {
        let s = store();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step = 7;
        adam.first[0] = vec![0.1, 0.2, 0.3, 0.4];
        adam.second[1] = vec![9.0, 8.0];
        let ck = Checkpoint::capture(&s, 42, 3, 0.75, Some(&adam));
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Some(42)).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.get_mut(id).data_mut().fill(0.0);
        }
        back.apply(&mut fresh).unwrap();
        assert_eq!(fresh.get(fresh.id("a.w").unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
        let restored = back.adam_state(&fresh, AdamConfig::default()).unwrap();
        assert_eq!(restored.step, 7);
        assert_eq!(restored.first, adam.first);
        assert_eq!(restored.second, adam.second);
    }

    #[test]
    fn hash_mismatch_refused() {
        let ck = Checkpoint::capture(&store(), 1, 0, 0.0, None);
        let err = Checkpoint::from_bytes(&ck.to_bytes(), Some(2)).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { expected: 2, found: 1 }));
    }

    #[test]
    fn corruption_detected() {
        let bytes = Checkpoint::capture(&store(), 1, 0, 0.0, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, None).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long, None).is_err());
    }

    #[test]
    fn apply_rejects_other_architecture() {
        let ck = Checkpoint::capture(&store(), 1, 0, 0.0, None);
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::<f32>::zeros(vec![3])).unwrap();
        other.add("a.b", Tensor::<f32>::zeros(vec![2])).unwrap();
        assert!(matches!(ck.apply(&mut other), Err(Error::Geometry(_))));
    }
}
