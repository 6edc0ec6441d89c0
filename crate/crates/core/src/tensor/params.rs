use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Models only hold [`ParamId`]s; the store owns the data, so one
/// architecture can be evaluated against stores of different precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    /// Total scalar count across all parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::len)
            .sum()
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
                n += 1;
            }
        }
        n
    }

    /// Copies `src_prefix*` tensors from `other` into `dst_prefix*` entries
    /// of matching name suffix and shape. Returns the copied names.
    pub fn load_prefixed(
        &mut self,
        other: &ParamStore<T>,
        src_prefix: &str,
        dst_prefix: &str,
        skip: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, t) in other.names.iter().zip(&other.tensors) {
            let Some(suffix) = name.strip_prefix(src_prefix) else {
                continue;
            };
            if skip(suffix) {
                continue;
            }
            let dst = format!("{dst_prefix}{suffix}");
            let Some(&i) = self.lookup.get(&dst) else {
                continue;
            };
            let target = &mut self.tensors[i];
            if target.shape() != t.shape() {
                return Err(Error::Geometry(format!(
                    "`{dst}` has shape {:?}, source `{name}` has {:?}",
                    target.shape(),
                    t.shape()
                )));
            }
            target.data_mut().copy_from_slice(t.data());
            copied.push(dst);
        }
        Ok(copied)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn load_prefixed_copies_matching_shapes() {
        let mut a = ParamStore::<f32>::new();
        a.add("src.conv0.w", Tensor::full(vec![2], 3.0)).unwrap();
        a.add("src.loc.w", Tensor::full(vec![2], 4.0)).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add("dst.conv0.w", Tensor::zeros(vec![2])).unwrap();
        b.add("dst.loc.w", Tensor::zeros(vec![2])).unwrap();
        let copied = b
            .load_prefixed(&a, "src.", "dst.", |s| s.starts_with("loc"))
            .unwrap();
        assert_eq!(copied, vec!["dst.conv0.w".to_string()]);
        assert_eq!(b.get(b.id("dst.conv0.w").unwrap()).data(), &[3.0, 3.0]);
        assert_eq!(b.get(b.id("dst.loc.w").unwrap()).data(), &[0.0, 0.0]);
    }

    #[test]
    fn freezing_by_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.add("ref.a", Tensor::zeros(vec![3])).unwrap();
        s.add("ms.a", Tensor::zeros(vec![5])).unwrap();
        assert_eq!(s.set_trainable("ref.", false), 1);
        assert_eq!(s.trainable_count(), 5);
        assert_eq!(s.param_count(), 8);
    }
}
