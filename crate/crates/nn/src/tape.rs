//! Recorded forward pass and its reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NnError, Result};
use crate::layers::{BatchNormSaved, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) idx: usize,
}

pub(crate) enum Op<T> {
    Constant,
    Param,
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: BatchNormSaved<T>,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Tanh {
        x: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    MulConst {
        x: usize,
        factors: Vec<T>,
    },
    Reshape {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mae {
        pred: usize,
        target: Vec<T>,
    },
    BceReal {
        logits: usize,
        /// d loss / d logit, already divided by the batch size.
        dlogits: Vec<T>,
    },
    BceLogit {
        logit: usize,
        dlogits: Vec<T>,
    },
    FeatureMatch {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of one forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass that visits every op once.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<String, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a named trainable leaf. Registering the same name twice
    /// returns the existing handle, so gradients of shared weights add up.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&idx) = self.params.get(name) {
            return Var { tape: self.id, idx };
        }
        let var = self.push(value.clone(), Op::Param, true);
        self.params.insert(name.to_string(), var.idx);
        var
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var from another tape")].value
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NnError::Graph("variable is not recorded on this tape".into()));
        }
        Ok(v.idx)
    }

    pub(crate) fn node(&self, idx: usize) -> &Node<T> {
        &self.nodes[idx]
    }

    pub(crate) fn requires(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Pushes an op result after checking that every element is finite.
    pub(crate) fn record(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires = self.requires(inputs);
        Ok(self.push(value, op, requires))
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter registered on this tape. Parameters the loss does not
    /// depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(NnError::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Param = self.nodes[idx].op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, delta) in self.backprop(idx, &g)? {
                accumulate(&mut grads[input], delta);
            }
        }
        let mut out = BTreeMap::new();
        for (name, &idx) in &self.params {
            let g = if idx <= root { grads[idx].take() } else { None };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()));
            g.ensure_finite("backward")?;
            out.insert(name.clone(), g);
        }
        Ok(Gradients { by_name: out })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            by_name: iter.into_iter().collect(),
        }
    }
}
