//! Training objectives: cross-entropy, absolute error, the two binary
//! cross-entropies of the real/fake game, and feature matching.

use crate::error::{shape_err, Result};
use crate::functional::{lse_unchecked, sigmoid, softmax_unchecked, softplus};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// The four recorded terms of the discriminator objective and their sum.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss {
    pub ce: Var,
    pub mae: Var,
    pub bce_real: Var,
    pub bce_fake: Var,
    pub total: Var,
}

fn batch_logits<T: Scalar>(v: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if v.shape().len() != 2 || v.shape()[0] == 0 || v.shape()[1] == 0 {
        return shape_err(format!("{what}: expected [batch, classes], got {:?}", v.shape()));
    }
    Ok((v.shape()[0], v.shape()[1]))
}

impl<T: Scalar> Tape<T> {
    /// Batch mean of `-ln softmax(l)[y]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.index(logits)?;
        let lv = &self.node(li).value;
        let (batch, k) = batch_logits(lv, "cross_entropy")?;
        if labels.len() != batch || labels.iter().any(|&y| y >= k) {
            return shape_err(format!("cross_entropy: {} labels for batch {batch} of {k} classes", labels.len()));
        }
        lv.ensure_finite("cross_entropy")?;
        let mut probs = Vec::with_capacity(batch * k);
        let mut total = T::zero();
        for (row, &y) in labels.iter().enumerate() {
            let l = lv.row(row);
            total += lse_unchecked(l) - l[y];
            probs.extend(softmax_unchecked(l));
        }
        let value = Tensor::scalar(total / T::from_usize(batch).unwrap());
        let op = Op::CrossEntropy {
            logits: li,
            labels: labels.to_vec(),
            probs,
        };
        self.record("cross_entropy", value, op, &[li])
    }

    /// Batch mean of the per-sample sum of absolute errors.
    pub fn mae(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pi = self.index(pred)?;
        let pv = &self.node(pi).value;
        let (batch, _) = batch_logits(pv, "mae")?;
        if pv.shape() != target.shape() {
            return shape_err(format!("mae: prediction {:?} vs target {:?}", pv.shape(), target.shape()));
        }
        let sum: T = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
        let value = Tensor::scalar(sum / T::from_usize(batch).unwrap());
        let op = Op::Mae {
            pred: pi,
            target: target.data().to_vec(),
        };
        self.record("mae", value, op, &[pi])
    }

    /// Binary cross-entropy of the real-probability `Z/(Z+1)` derived from
    /// `K` class logits, against target 1 (`real`) or 0.
    pub fn bce_real_probability(&mut self, logits: Var, real: bool) -> Result<Var> {
        let li = self.index(logits)?;
        let lv = &self.node(li).value;
        let (batch, k) = batch_logits(lv, "bce_real_probability")?;
        lv.ensure_finite("bce_real_probability")?;
        let bt = T::from_usize(batch).unwrap();
        let mut total = T::zero();
        let mut dlogits = Vec::with_capacity(batch * k);
        for row in 0..batch {
            let l = lv.row(row);
            let lse = lse_unchecked(l);
            // -ln D = softplus(-lse); -ln(1 - D) = softplus(lse)
            let (loss, dlse) = if real {
                (softplus(-lse), -sigmoid(-lse))
            } else {
                (softplus(lse), sigmoid(lse))
            };
            total += loss;
            dlogits.extend(softmax_unchecked(l).into_iter().map(|p| dlse * p / bt));
        }
        let value = Tensor::scalar(total / bt);
        self.record("bce_real_probability", value, Op::BceReal { logits: li, dlogits }, &[li])
    }

    /// Binary cross-entropy of `sigmoid(logit)` for a single-logit head.
    pub fn bce_with_logit(&mut self, logit: Var, real: bool) -> Result<Var> {
        let li = self.index(logit)?;
        let lv = &self.node(li).value;
        let (batch, k) = batch_logits(lv, "bce_with_logit")?;
        if k != 1 {
            return shape_err(format!("bce_with_logit: expected one logit per sample, got {k}"));
        }
        let bt = T::from_usize(batch).unwrap();
        let mut total = T::zero();
        let mut dlogits = Vec::with_capacity(batch);
        for &x in lv.data() {
            let (loss, d) = if real {
                (softplus(-x), -sigmoid(-x))
            } else {
                (softplus(x), sigmoid(x))
            };
            total += loss;
            dlogits.push(d / bt);
        }
        let value = Tensor::scalar(total / bt);
        self.record("bce_with_logit", value, Op::BceLogit { logit: li, dlogits }, &[li])
    }

    /// Mean squared difference between the batch-mean feature vectors of
    /// `a` and `b`.
    pub fn feature_matching(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.node(ai).value, &self.node(bi).value);
        let (_, na) = batch_logits(av, "feature_matching")?;
        let (_, nb) = batch_logits(bv, "feature_matching")?;
        if na != nb {
            return shape_err(format!("feature_matching: {na} vs {nb} features"));
        }
        let diff = mean_difference(av, bv);
        let sq: T = diff.iter().map(|&d| d * d).sum();
        let value = Tensor::scalar(sq / T::from_usize(na).unwrap());
        self.record("feature_matching", value, Op::FeatureMatch { a: ai, b: bi }, &[ai, bi])
    }

    /// `CE(l_c, y_c) + λ·MAE(l_r, y_r) + BCE(D(x_u), 1) + BCE(D(x_g), 0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn discriminator_loss(
        &mut self,
        class_logits: Var,
        reg_logits: Var,
        labels: &[usize],
        targets: &Tensor<T>,
        unlabeled_logits: Var,
        generated_logits: Var,
        lambda: f64,
    ) -> Result<DiscriminatorLoss> {
        let ce = self.cross_entropy(class_logits, labels)?;
        let mae = self.mae(reg_logits, targets)?;
        let bce_real = self.bce_real_probability(unlabeled_logits, true)?;
        let bce_fake = self.bce_real_probability(generated_logits, false)?;
        let weighted = self.affine(mae, lambda, 0.0)?;
        let s = self.add(ce, weighted)?;
        let s = self.add(s, bce_real)?;
        let total = self.add(s, bce_fake)?;
        Ok(DiscriminatorLoss {
            ce,
            mae,
            bce_real,
            bce_fake,
            total,
        })
    }

    pub(crate) fn backprop_loss(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let gs = g.item();
        let mut out = Vec::new();
        match &self.node(idx).op {
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = &self.node(*logits).value;
                let k = lv.shape()[1];
                let bt = T::from_usize(labels.len()).unwrap();
                let mut d: Vec<T> = probs.iter().map(|&p| p * gs / bt).collect();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * k + y] -= gs / bt;
                }
                out.push((*logits, Tensor::new(lv.shape(), d)?));
            }
            Op::Mae { pred, target } => {
                let pv = &self.node(*pred).value;
                let bt = T::from_usize(pv.shape()[0]).unwrap();
                let d = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let diff = p - t;
                        if diff > T::zero() {
                            gs / bt
                        } else if diff < T::zero() {
                            -gs / bt
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*pred, Tensor::new(pv.shape(), d)?));
            }
            Op::BceReal { logits: li, dlogits } | Op::BceLogit { logit: li, dlogits } => {
                let shape = self.node(*li).value.shape();
                out.push((*li, Tensor::new(shape, dlogits.iter().map(|&d| d * gs).collect())?));
            }
            Op::FeatureMatch { a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                let n = av.shape()[1];
                let diff = mean_difference(av, bv);
                let nt = T::from_usize(n).unwrap();
                let two = T::lit(2.0);
                for (var, value, sign) in [(*a, av, T::one()), (*b, bv, -T::one())] {
                    let rows = T::from_usize(value.shape()[0]).unwrap();
                    let row: Vec<T> = diff.iter().map(|&d| sign * two * d * gs / (nt * rows)).collect();
                    let data = row.iter().copied().cycle().take(value.numel()).collect();
                    out.push((var, Tensor::new(value.shape(), data)?));
                }
            }
            _ => unreachable!("backprop_loss called on a non-loss op"),
        }
        Ok(out)
    }
}

fn mean_difference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let mean = |t: &Tensor<T>| {
        let n = t.shape()[1];
        let mut m = vec![T::zero(); n];
        for row in t.data().chunks(n) {
            for (acc, &v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let rows = T::from_usize(t.shape()[0]).unwrap();
        m.into_iter().map(|v| v / rows).collect::<Vec<T>>()
    };
    mean(a).into_iter().zip(mean(b)).map(|(x, y)| x - y).collect()
}
