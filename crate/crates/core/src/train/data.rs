use fenestra_nn::model::{NUM_PARAMS, PATCH_SIZE};
use fenestra_nn::Tensor;

use super::{Result, TrainError};
use crate::dataset::{LabeledPatch, SyntheticSample};
use crate::grammar::{GrammarParams, WindowType};
use crate::procgen::PatchImage;

const IMAGE_LEN: usize = 3 * PATCH_SIZE * PATCH_SIZE;

/// Labeled patches in recognizer layout, with class indices and targets.
#[derive(Debug, Clone, Default)]
pub struct LabeledPool {
    images: Vec<f32>,
    classes: Vec<usize>,
    targets: Vec<[f64; NUM_PARAMS]>,
}

impl LabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, image: &PatchImage, window_type: WindowType, params: &GrammarParams) {
        self.images.extend(image.to_planar());
        self.classes.push(window_type.index());
        self.targets.push(params.to_array());
    }

    pub fn from_synthetic(samples: &[SyntheticSample]) -> Self {
        let mut pool = Self::new();
        for s in samples {
            pool.push(&s.image, s.window_type, &s.params);
        }
        pool
    }

    pub fn from_patches(patches: &[LabeledPatch]) -> Self {
        let mut pool = Self::new();
        for p in patches {
            pool.push(&p.image, p.window_type, &p.params);
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn targets(&self) -> &[[f64; NUM_PARAMS]] {
        &self.targets
    }

    pub(crate) fn images(&self, idx: &[usize]) -> Tensor<f32> {
        gather(&self.images, idx)
    }

    pub(crate) fn labels(&self, idx: &[usize]) -> (Vec<usize>, Tensor<f32>) {
        let classes = idx.iter().map(|&i| self.classes[i]).collect();
        let targets: Vec<f32> = idx.iter().flat_map(|&i| self.targets[i].map(|v| v as f32)).collect();
        (classes, Tensor::new(&[idx.len(), NUM_PARAMS], targets).expect("sized"))
    }
}

/// Unlabeled patches in recognizer layout.
#[derive(Debug, Clone, Default)]
pub struct UnlabeledPool {
    images: Vec<f32>,
}

impl UnlabeledPool {
    pub fn new(images: &[PatchImage]) -> Self {
        Self {
            images: images.iter().flat_map(|p| p.to_planar()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len() / IMAGE_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub(crate) fn images(&self, idx: &[usize]) -> Tensor<f32> {
        gather(&self.images, idx)
    }
}

fn gather(images: &[f32], idx: &[usize]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * IMAGE_LEN);
    for &i in idx {
        data.extend_from_slice(&images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]);
    }
    Tensor::new(&[idx.len(), 3, PATCH_SIZE, PATCH_SIZE], data).expect("sized")
}


pub(crate) fn require_nonempty(what: &str, len: usize) -> Result<()> {
    if len == 0 {
        return Err(TrainError::Data(format!("{what} pool is empty")));
    }
    Ok(())
}
