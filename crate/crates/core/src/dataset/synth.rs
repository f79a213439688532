use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, DatasetManifest, LabeledEntry, Split, UnlabeledEntry, MANIFEST_VERSION};
use super::{io_err, Result};
use crate::grammar::{assemble_grammar, AssembleConfig, Division, GrammarParams, GrammarTree, WindowType, PATCH_EXTENT};
use crate::procgen::{rasterize_patch, PatchImage, StyleJitter, StyleParams};

/// Sampling ranges for synthetic windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRanges {
    /// Window side as a fraction of the patch side, per axis.
    pub coverage: (f64, f64),
    /// Inclusive range of divisions for a "many" split.
    pub many_divisions: (usize, usize),
    /// Relative jitter of the cell size around frame / divisions.
    pub cell_jitter: f64,
    /// First-row height of a two-row window as a fraction of the frame.
    pub two_row_split: (f64, f64),
    /// Range of the per-image noise standard deviation.
    pub noise: (f64, f64),
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            coverage: (0.55, 0.95),
            many_divisions: (3, 5),
            cell_jitter: 0.08,
            two_row_split: (0.3, 0.7),
            noise: (0.0, 0.06),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub per_class: usize,
    pub unlabeled: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub ranges: SynthRanges,
    pub style: StyleParams,
    pub jitter: StyleJitter,
    pub assemble: AssembleConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 10,
            unlabeled: 3000,
            test_per_class: 0,
            seed: 0,
            ranges: SynthRanges::default(),
            style: StyleParams::default(),
            jitter: StyleJitter::default(),
            assemble: AssembleConfig::default(),
        }
    }
}

/// Ground truth and image of one generated window.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub window_type: WindowType,
    pub params: GrammarParams,
    pub tree: GrammarTree,
    pub image: PatchImage,
}

/// Labeled training and test samples plus unlabeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub labeled: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
    pub unlabeled: Vec<PatchImage>,
}

const STREAM_LABELED: u64 = 0;
const STREAM_UNLABELED: u64 = 1;
const STREAM_TEST: u64 = 2;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent seed for entry `index` of generation stream `stream`.
pub fn entry_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ index)
}

fn split_size<R: Rng + ?Sized>(class: Division, frame: f64, ranges: &SynthRanges, uneven_two: bool, rng: &mut R) -> f64 {
    match class {
        Division::One => frame,
        Division::Two if uneven_two => frame * rng.random_range(ranges.two_row_split.0..=ranges.two_row_split.1),
        Division::Two => frame / 2.0,
        Division::Many => {
            let n = rng.random_range(ranges.many_divisions.0..=ranges.many_divisions.1);
            let j = ranges.cell_jitter;
            frame / n as f64 * rng.random_range(1.0 - j..=1.0 + j)
        }
    }
}

/// Parameters for a window of type `t`. The cell size is the size of one
/// generated cell, so assembling the result reproduces the type.
pub fn sample_params<R: Rng + ?Sized>(t: WindowType, ranges: &SynthRanges, assemble: &AssembleConfig, rng: &mut R) -> GrammarParams {
    let side = |rng: &mut R| PATCH_EXTENT * rng.random_range(ranges.coverage.0..=ranges.coverage.1);
    let (w, h) = (side(rng), side(rng));
    let x = rng.random_range(0.0..=PATCH_EXTENT - w);
    let y = rng.random_range(0.0..=PATCH_EXTENT - h);
    let t_border = assemble.border_fraction * w.min(h);
    let (fw, fh) = (w - 2.0 * t_border, h - 2.0 * t_border);
    let sw = split_size(t.cols, fw, ranges, false, rng);
    let sh = split_size(t.rows, fh, ranges, true, rng);
    GrammarParams::from_array([x, y, x + w, y + h, sw, sh])
}

/// One labeled window generated from `seed` alone.
pub fn synth_sample(t: WindowType, cfg: &SynthConfig, seed: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_params(t, &cfg.ranges, &cfg.assemble, &mut rng);
    let tree = assemble_grammar(t, &params, &cfg.assemble)?;
    let mut style = cfg.style.jittered(&cfg.jitter, &mut rng);
    let (lo, hi) = cfg.ranges.noise;
    style.noise = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let image = rasterize_patch(&tree, &style, rng.next_u64())?;
    Ok(SyntheticSample {
        window_type: t,
        params,
        tree,
        image,
    })
}

fn class_stream(cfg: &SynthConfig, stream: u64, per_class: usize) -> Result<Vec<SyntheticSample>> {
    let mut out = Vec::with_capacity(per_class * WindowType::COUNT);
    for t in WindowType::all() {
        for i in 0..per_class {
            let index = ((t.index() as u64) << 32) | i as u64;
            out.push(synth_sample(t, cfg, entry_seed(cfg.seed, stream, index))?);
        }
    }
    Ok(out)
}

/// Generates the corpus in memory, class-major for labeled splits.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let labeled = class_stream(cfg, STREAM_LABELED, cfg.per_class)?;
    let test = class_stream(cfg, STREAM_TEST, cfg.test_per_class)?;
    let unlabeled = (0..cfg.unlabeled)
        .map(|i| {
            let seed = entry_seed(cfg.seed, STREAM_UNLABELED, i as u64);
            let t = WindowType::from_index(ChaCha8Rng::seed_from_u64(seed).random_range(0..WindowType::COUNT)).expect("in range");
            synth_sample(t, cfg, splitmix(seed)).map(|s| s.image)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus { labeled, test, unlabeled })
}

/// Writes PNG patches under `out_dir` and a `manifest.json` describing them.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let corpus = synth_corpus(cfg)?;
    for sub in ["labeled", "test", "unlabeled"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
    };
    for (split, dir, samples) in [(Split::Train, "labeled", &corpus.labeled), (Split::Test, "test", &corpus.test)] {
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("{dir}/{i:05}_{}.png", s.window_type.to_string().replace('/', "_"));
            s.image.save_png(&out_dir.join(&rel))?;
            manifest.labeled.push(LabeledEntry {
                path: rel,
                split,
                window_type: s.window_type,
                params: s.params,
            });
        }
    }
    for (i, img) in corpus.unlabeled.iter().enumerate() {
        let rel = format!("unlabeled/{i:06}.png");
        img.save_png(&out_dir.join(&rel))?;
        manifest.unlabeled.push(UnlabeledEntry { path: rel });
    }
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
