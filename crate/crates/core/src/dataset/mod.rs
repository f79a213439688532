//! Annotated façades, window patches and synthetic corpora.

mod manifest;
mod patch;
mod synth;
mod voc;

use std::path::PathBuf;

use thiserror::Error;

use crate::grammar::GrammarError;
use crate::procgen::ProcgenError;

pub use manifest::{
    load_labeled, load_manifest, load_unlabeled, save_manifest, DatasetManifest, LabeledEntry, LabeledPatch, Split,
    UnlabeledEntry, MANIFEST_VERSION,
};
pub use patch::{dilated_box, extract_patch, PatchScale, DEFAULT_DILATION};
pub use synth::{entry_seed, sample_params, synth_corpus, synth_dataset, synth_sample, SynthConfig, SynthCorpus, SynthRanges, SyntheticSample};
pub use voc::{load_facade, load_voc, FacadeRecord, VocFile, WindowBox};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("XML: {0}")]
    Xml(String),
    #[error("box {box_id}: {message}")]
    Bounds { box_id: usize, message: String },
    #[error("manifest format: {0}")]
    Format(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Procgen(#[from] ProcgenError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DatasetError {
    let path = path.into();
    move |source| DatasetError::Io { path, source }
}
