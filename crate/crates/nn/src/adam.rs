//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::params::{Group, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a fixed set of parameter names.
///
/// The set is chosen at construction; [`Adam::step`] never writes any other
/// tensor of the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments for every trainable tensor of `groups`.
    pub fn new(config: AdamConfig, store: &ParameterStore<T>, groups: &[Group]) -> Self {
        let mut m = BTreeMap::new();
        for name in store.trainable_in(groups) {
            let shape = store.tensor(&name).expect("listed name").shape().to_vec();
            m.insert(name, Tensor::zeros(&shape));
        }
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    /// Rebuilds a state from stored moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|((a, x), (b, y))| a != b || x.shape() != y.shape()) {
            return Err(NnError::Shape("first and second moments disagree".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One update of every owned parameter. A parameter with no entry in
    /// `grads` is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, m) in &self.m {
            let p = store.tensor(name)?;
            if p.shape() != m.shape() {
                return Err(NnError::Shape(format!("{name}: parameter {:?} vs state {:?}", p.shape(), m.shape())));
            }
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(NnError::Shape(format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let t = T::from_u64(self.step).unwrap();
        let bc1 = T::one() - b1.powf(t);
        let bc2 = T::one() - b2.powf(t);
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).expect("moments share keys");
            let g = grads.get(name);
            let p = store.tensor_mut(name)?;
            for i in 0..p.numel() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
