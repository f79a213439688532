//! Per-patch prediction, cluster aggregation and evaluation metrics.

use std::path::Path;

use fenestra_nn::model::{self, NormMode, NUM_CLASSES, NUM_PARAMS, PATCH_SIZE};
use fenestra_nn::{Group, NnError, ParameterStore, Tape, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{assemble_grammar, AssembleConfig, GrammarError, GrammarParams, GrammarTree, WindowType, PATCH_EXTENT};
use crate::procgen::{InstancePlacement, PatchImage};
use crate::train::{load_checkpoint, Checkpoint, CheckpointError};

/// Smallest window side, in patch pixels, that predictions are widened to.
/// Keeps every prediction assemblable into a grammar.
pub const MIN_EXTENT: f64 = 8.0;
/// Smallest predicted cell size.
pub const MIN_CELL: f64 = 0.5;

const BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model: {0}")]
    Model(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("a cluster needs at least one member")]
    EmptyCluster,
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

impl From<NnError> for InferenceError {
    fn from(e: NnError) -> Self {
        InferenceError::Model(e.to_string())
    }
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub probabilities: [f64; NUM_CLASSES],
    /// `[p_u.x, p_u.y, p_b.x, p_b.y, s.w, s.h]` in patch pixels.
    pub params: [f64; NUM_PARAMS],
}

impl WindowPrediction {
    /// Most probable class; the lower index wins ties.
    pub fn argmax(&self) -> usize {
        ranked(&self.probabilities)[0]
    }

    pub fn window_type(&self) -> WindowType {
        WindowType::from_index(self.argmax()).expect("class index in range")
    }

    pub fn grammar_params(&self) -> GrammarParams {
        GrammarParams::from_array(self.params)
    }

    /// The `k` most probable classes, best first.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        ranked(&self.probabilities).into_iter().take(k).collect()
    }
}

/// Class indices by descending probability, ties by ascending index.
fn ranked(p: &[f64; NUM_CLASSES]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..NUM_CLASSES).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

/// Clamps raw regression output into a valid, assemblable parameter set:
/// coordinates into the patch, corners ordered, each side at least
/// [`MIN_EXTENT`] and cell sizes at least [`MIN_CELL`].
pub fn sanitize_params(raw: [f64; NUM_PARAMS]) -> [f64; NUM_PARAMS] {
    let mut p = raw.map(|v| if v.is_finite() { v.clamp(0.0, PATCH_EXTENT) } else { 0.0 });
    for axis in 0..2 {
        let (mut lo, mut hi) = (p[axis], p[axis + 2]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if hi - lo < MIN_EXTENT {
            let center = 0.5 * (lo + hi);
            lo = (center - 0.5 * MIN_EXTENT).clamp(0.0, PATCH_EXTENT - MIN_EXTENT);
            hi = lo + MIN_EXTENT;
        }
        p[axis] = lo;
        p[axis + 2] = hi;
    }
    p[4] = p[4].max(MIN_CELL);
    p[5] = p[5].max(MIN_CELL);
    p
}

/// Trained weights used for prediction. The class comes from the
/// classifier store and the parameters from the regressor store, which
/// is the same store for a multitask checkpoint.
#[derive(Debug, Clone)]
pub struct Recognizer {
    classifier: ParameterStore<f32>,
    regressor: Option<ParameterStore<f32>>,
}

impl Recognizer {
    /// Both heads from one checkpoint.
    pub fn new(ck: &Checkpoint) -> Result<Self> {
        require(&ck.store, &[Group::F, Group::LC, Group::LR], "checkpoint")?;
        Ok(Self {
            classifier: ck.store.clone(),
            regressor: None,
        })
    }

    /// Separately fine-tuned classifier and regressor; two passes per patch.
    pub fn pair(classifier: &Checkpoint, regressor: &Checkpoint) -> Result<Self> {
        require(&classifier.store, &[Group::F, Group::LC], "classifier checkpoint")?;
        require(&regressor.store, &[Group::F, Group::LR], "regressor checkpoint")?;
        Ok(Self {
            classifier: classifier.store.clone(),
            regressor: Some(regressor.store.clone()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(&load_checkpoint(path)?)
    }

    pub fn load_pair(classifier: &Path, regressor: &Path) -> Result<Self> {
        Self::pair(&load_checkpoint(classifier)?, &load_checkpoint(regressor)?)
    }

    pub fn predict_patch(&self, patch: &PatchImage) -> Result<WindowPrediction> {
        Ok(self.predict_batch(std::slice::from_ref(patch))?.remove(0))
    }

    /// Predictions in input order. Samples are independent in inference
    /// mode, so batching does not change results.
    pub fn predict_batch(&self, patches: &[PatchImage]) -> Result<Vec<WindowPrediction>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(BATCH) {
            let x = stack(chunk);
            let (logits, mut reg) = forward(&self.classifier, &x)?;
            if let Some(r) = &self.regressor {
                reg = forward(r, &x)?.1;
            }
            for i in 0..chunk.len() {
                let probs = fenestra_nn::softmax(&logits.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>())?;
                let raw: [f64; NUM_PARAMS] = std::array::from_fn(|k| reg.row(i)[k] as f64);
                out.push(WindowPrediction {
                    probabilities: probs.try_into().expect("nine classes"),
                    params: sanitize_params(raw),
                });
            }
        }
        Ok(out)
    }
}

fn require(store: &ParameterStore<f32>, groups: &[Group], what: &str) -> Result<()> {
    match groups.iter().find(|g| !store.has_group(**g)) {
        Some(g) => Err(InferenceError::Model(format!("{what} has no {g:?} weights"))),
        None => Ok(()),
    }
}

fn stack(patches: &[PatchImage]) -> Tensor<f32> {
    let data: Vec<f32> = patches.iter().flat_map(|p| p.to_planar()).collect();
    Tensor::new(&[patches.len(), 3, PATCH_SIZE, PATCH_SIZE], data).expect("sized")
}

fn forward(store: &ParameterStore<f32>, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model::network_forward(&mut tape, store, xv, &[], NormMode::Inference)?;
    Ok((tape.value(out.class_logits).clone(), tape.value(out.reg_logits).clone()))
}

pub fn predict_patch(model: &Recognizer, patch: &PatchImage) -> Result<WindowPrediction> {
    model.predict_patch(patch)
}

/// Majority vote over member argmaxes and mean of member parameters.
///
/// Among classes with the most votes the one with the largest summed
/// probability wins, then the lower index.
pub fn aggregate(members: &[WindowPrediction]) -> Result<(WindowType, GrammarParams)> {
    if members.is_empty() {
        return Err(InferenceError::EmptyCluster);
    }
    let mut votes = [0usize; NUM_CLASSES];
    let mut mass = [0.0f64; NUM_CLASSES];
    for m in members {
        votes[m.argmax()] += 1;
        for (acc, p) in mass.iter_mut().zip(&m.probabilities) {
            *acc += p;
        }
    }
    let best = (0..NUM_CLASSES)
        .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(mass[a].total_cmp(&mass[b])).then(b.cmp(&a)))
        .expect("nine classes");
    let n = members.len() as f64;
    let mean: [f64; NUM_PARAMS] = std::array::from_fn(|k| members.iter().map(|m| m.params[k]).sum::<f64>() / n);
    Ok((WindowType::from_index(best).expect("class index in range"), GrammarParams::from_array(mean)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedPrediction {
    pub window_type: WindowType,
    pub params: GrammarParams,
    pub grammar: GrammarTree,
    pub members: Vec<WindowPrediction>,
}

pub fn grouped_inference(model: &Recognizer, patches: &[PatchImage]) -> Result<GroupedPrediction> {
    let members = model.predict_batch(patches)?;
    group_predictions(members)
}

/// Aggregates existing member predictions and assembles the grammar.
pub fn group_predictions(members: Vec<WindowPrediction>) -> Result<GroupedPrediction> {
    let (window_type, params) = aggregate(&members)?;
    let grammar = assemble_grammar(window_type, &params, &AssembleConfig::default())?;
    Ok(GroupedPrediction {
        window_type,
        params,
        grammar,
        members,
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(InferenceError::Shape(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(InferenceError::Shape("no samples".into()));
    }
    Ok(())
}

/// Fraction of samples whose label is among the `k` most probable classes.
pub fn top_k_accuracy(probabilities: &[[f64; NUM_CLASSES]], labels: &[usize], k: usize) -> Result<f64> {
    check_lengths(probabilities.len(), labels.len())?;
    if !(1..=NUM_CLASSES).contains(&k) {
        return Err(InferenceError::Shape(format!("k = {k} outside 1..={NUM_CLASSES}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(InferenceError::Shape(format!("label {l} outside 0..{NUM_CLASSES}")));
    }
    let hits = probabilities.iter().zip(labels).filter(|(p, l)| ranked(p)[..k].contains(l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over samples of the summed absolute error of the six parameters.
pub fn mae_metric(predictions: &[[f64; NUM_PARAMS]], labels: &[[f64; NUM_PARAMS]]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| p.iter().zip(l).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub mae: f64,
    pub n: usize,
}

pub fn evaluate(predictions: &[WindowPrediction], labels: &[usize], targets: &[[f64; NUM_PARAMS]]) -> Result<EvalReport> {
    let probs: Vec<_> = predictions.iter().map(|p| p.probabilities).collect();
    let params: Vec<_> = predictions.iter().map(|p| p.params).collect();
    Ok(EvalReport {
        top1: top_k_accuracy(&probs, labels, 1)?,
        top2: top_k_accuracy(&probs, labels, 2)?,
        top3: top_k_accuracy(&probs, labels, 3)?,
        mae: mae_metric(&params, targets)?,
        n: labels.len(),
    })
}

/// A box on a facade.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberRef {
    pub facade_id: String,
    pub box_id: usize,
}

/// Windows sharing one geometry instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: String,
    pub members: Vec<MemberRef>,
    /// One per member, in member order.
    pub placements: Vec<InstancePlacement>,
    pub grammar: Option<GrammarTree>,
}

impl ClusterRecord {
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.members.is_empty() {
            return Err(format!("cluster {} has no members", self.id));
        }
        if self.placements.len() != self.members.len() {
            return Err(format!(
                "cluster {} has {} placements for {} members",
                self.id,
                self.placements.len(),
                self.members.len()
            ));
        }
        if let Some(p) = self.placements.iter().find(|p| p.cluster_id != self.id) {
            return Err(format!("placement for {} inside cluster {}", p.cluster_id, self.id));
        }
        Ok(())
    }
}
