//! Named parameter storage partitioned into the network's weight groups.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight groups: feature extractor, classification head, regression
/// head, generator and the optional single-logit discriminator head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    F,
    LC,
    LR,
    G,
    DHead,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::F, Group::LC, Group::LR, Group::G, Group::DHead];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

/// Trainable weights are touched by optimizers; buffers (running
/// normalization statistics) only by forward passes in training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T: Scalar> {
    pub group: Group,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T: Scalar = f32> {
    entries: BTreeMap<String, Entry<T>>,
}

/// A batch-statistics observation to fold into running averages.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: Group, kind: ParamKind, tensor: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::Graph(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), Entry { group, kind, tensor });
        Ok(())
    }

    pub fn remove_group(&mut self, group: Group) {
        self.entries.retain(|_, e| e.group != group);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| NnError::Graph(format!("missing parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| NnError::Graph(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.entries.values().any(|e| e.group == group)
    }

    /// Names of trainable tensors in any of `groups`.
    pub fn trainable_in(&self, groups: &[Group]) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable && groups.contains(&e.group))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        Entry {
                            group: e.group,
                            kind: e.kind,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Folds batch statistics into `<prefix>.running_mean/var` with
    /// `running = momentum · running + (1 - momentum) · batch`.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>], momentum: f64) -> Result<()> {
        let m = T::lit(momentum);
        let one_m = T::one() - m;
        for u in updates {
            for (suffix, values) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let t = self.tensor_mut(&format!("{}.{suffix}", u.prefix))?;
                if t.numel() != values.len() {
                    return Err(NnError::Shape(format!("{}.{suffix}: {} statistics", u.prefix, values.len())));
                }
                for (r, &b) in t.data_mut().iter_mut().zip(values) {
                    *r = m * *r + one_m * b;
                }
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over names and bit patterns of every
    /// tensor (trainable and buffer) in `groups`.
    pub fn fingerprint(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, e) in self.entries.iter().filter(|(_, e)| groups.contains(&e.group)) {
            feed(name.as_bytes());
            for v in e.tensor.data() {
                feed(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a", Group::F, ParamKind::Trainable, Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Group::G, ParamKind::Trainable, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn group_tags_round_trip() {
        for g in Group::ALL {
            assert_eq!(Group::from_tag(g.tag()), Some(g));
        }
        assert_eq!(Group::from_tag(5), None);
    }

    #[test]
    fn running_updates_use_momentum() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("bn.running_mean", Group::F, ParamKind::Buffer, Tensor::zeros(&[1])).unwrap();
        s.insert("bn.running_var", Group::F, ParamKind::Buffer, Tensor::full(&[1], 1.0)).unwrap();
        let u = RunningUpdate {
            prefix: "bn".into(),
            mean: vec![10.0],
            var: vec![3.0],
        };
        s.apply_running_updates(&[u], 0.9).unwrap();
        assert!((s.tensor("bn.running_mean").unwrap().item() - 1.0).abs() < 1e-12);
        assert!((s.tensor("bn.running_var").unwrap().item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", Group::G, ParamKind::Trainable, Tensor::zeros(&[3])).unwrap();
        s.insert("v", Group::F, ParamKind::Trainable, Tensor::zeros(&[3])).unwrap();
        let before = s.fingerprint(&[Group::G]);
        s.tensor_mut("v").unwrap().data_mut()[0] = 1.0;
        assert_eq!(before, s.fingerprint(&[Group::G]));
        s.tensor_mut("w").unwrap().data_mut()[2] = f32::from_bits(1);
        assert_ne!(before, s.fingerprint(&[Group::G]));
    }
}
