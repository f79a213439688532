//! End-to-end acceptance report.
//!
//! Prints one `PASS` or `FAIL` line per criterion. The run succeeds even
//! when a line fails unless `ACCEPTANCE_STRICT=1` is set, so the report can
//! sit inside `cargo test --workspace` while a shortfall stays visible.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use fenestra_core::dataset::*;
use fenestra_core::grammar::*;
use fenestra_core::inference::*;
use fenestra_core::procgen::*;
use fenestra_core::train::*;
use fenestra_nn::model::{self, BackboneConfig, NormMode};
use fenestra_nn::{Group, NormSource, ParamKind, ParameterStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const PRETRAIN_EPOCHS: usize = 200;
const FINETUNE_EPOCHS: usize = 100;
const DROPOUT: f64 = 0.5;
const TEST_PER_CLASS: usize = 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Report {
    filters: Vec<String>,
    failed: usize,
    total: usize,
}

impl Report {
    fn selected(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.selected(name) {
            return;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        self.line(name, o.pass, &format!("{} [{secs:.1}s]", o.detail));
    }

    fn line(&mut self, name: &str, pass: bool, detail: &str) {
        self.total += 1;
        if !pass {
            self.failed += 1;
        }
        println!("{} {name} {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn finish(self) {
        println!("{} of {} criteria passed", self.total - self.failed, self.total);
        if self.failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

fn main() {
    // Free arguments select criteria by substring; flags from the test runner are ignored.
    let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut report = Report { filters, failed: 0, total: 0 };
    report.run("real_probability_equivalence", real_probability_equivalence);
    report.run("zero_logit_anchors", zero_logit_anchors);
    report.run("gradient_suite", gradient_suite);
    report.run("grammar_mesh_suite", grammar_mesh_suite);
    report.run("formats", formats);
    report.run("optimizer_partition", optimizer_partition);
    report.run("cli_training_determinism", cli_training_determinism);

    let trained = ["semi_supervised_direction", "semi_supervised_margins", "semi_supervised_runtime", "finetune_gain", "ce_halves_in_fifty_epochs", "grouped_inference"];
    if !trained.iter().any(|n| report.selected(n)) {
        return report.finish();
    }
    let start = Instant::now();
    let seeds: Vec<SeedResult> = SEEDS.iter().map(|&s| train_seed(s)).collect();
    println!("     trained {} seeds in {:.0}s", seeds.len(), start.elapsed().as_secs_f64());
    for s in &seeds {
        println!(
            "     seed {}: baseline {:.2}%/{:.2}  pipeline {:.2}%/{:.2}  multitask {:.2}%/{:.2}  finetuned classifier {:.2}%  finetuned regressor {:.2}  pipeline {:.0}s",
            s.seed,
            s.baseline.top1 * 100.0,
            s.baseline.mae,
            s.pipeline.top1 * 100.0,
            s.pipeline.mae,
            s.multitask.top1 * 100.0,
            s.multitask.mae,
            s.finetuned_classifier.top1 * 100.0,
            s.finetuned_regressor.mae,
            s.pipeline_time.as_secs_f64(),
        );
    }
    report.run("semi_supervised_direction", || semi_supervised(&seeds, false));
    report.run("semi_supervised_margins", || semi_supervised(&seeds, true));
    report.run("semi_supervised_runtime", || runtime(&seeds));
    report.run("finetune_gain", || finetune_gain(&seeds));
    report.run("ce_halves_in_fifty_epochs", || ce_decrease(&seeds[0].history));
    report.run("grouped_inference", || grouped(&seeds[0].pipeline_model));

    report.finish();
}

fn real_probability_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let scale = [1.0, 10.0, 40.0][i % 3];
        let logits: Vec<f64> = (0..9).map(|_| rng.random_range(-scale..scale)).collect();
        let mut padded = logits.clone();
        padded.push(0.0);
        let direct: f64 = fenestra_nn::softmax(&padded).unwrap()[..9].iter().sum();
        worst = worst.max((fenestra_nn::real_probability(&logits).unwrap() - direct).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(1),
        format!("max |diff| {worst:.2e} over 10000 vectors in {:.3}s", elapsed.as_secs_f64()),
    )
}

fn zero_logit_anchors() -> Outcome {
    let zeros = Tensor::<f64>::zeros(&[1, 9]);
    let p = fenestra_nn::real_probability(&[0.0f64; 9]).unwrap();
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(zeros);
    let ce = tape.cross_entropy(l, &[3]).unwrap();
    let real = tape.bce_real_probability(l, true).unwrap();
    let fake = tape.bce_real_probability(l, false).unwrap();
    let (ce, real, fake) = (tape.value(ce).item(), tape.value(real).item(), tape.value(fake).item());
    let errs = [
        (p - 0.9).abs(),
        (ce - 9f64.ln()).abs(),
        (real + 0.9f64.ln()).abs(),
        (fake + 0.1f64.ln()).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(worst <= 1e-9, format!("p_real {p:.12} CE {ce:.12} BCE {real:.12}/{fake:.12} max err {worst:.1e}"))
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-7;

fn fd_error<F>(store: &ParameterStore<f64>, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> fenestra_nn::Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).unwrap();
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let noise = 1e-13 * value.abs().max(1.0) / FD_STEP;
    let eval = |s: &ParameterStore<f64>| {
        let mut t = Tape::new();
        let l = build(&mut t, s).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (name, entry) in store.iter() {
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let n = entry.tensor.numel();
        let analytic = grads.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let base = entry.tensor.data()[i];
            let h = FD_STEP * base.abs().max(1.0);
            let mut plus = store.clone();
            plus.tensor_mut(name).unwrap().data_mut()[i] = base + h;
            let mut minus = store.clone();
            minus.tensor_mut(name).unwrap().data_mut()[i] = base - h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale < noise * (n as f64).sqrt() { 0.0 } else { norm(&diff) / scale.max(1e-12) };
        worst = worst.max(rel);
    }
    worst
}

fn values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn store_with(items: &[(&str, &[usize], Vec<f64>)]) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    for (name, shape, data) in items {
        s.insert(name, Group::F, ParamKind::Trainable, Tensor::new(shape, data.clone()).unwrap()).unwrap();
    }
    s
}

fn leaf(tape: &mut Tape<f64>, store: &ParameterStore<f64>, name: &str) -> Var {
    tape.param(name, store.tensor(name).unwrap())
}

/// Random linear functional of `y`, so every output element carries weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> fenestra_nn::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).numel();
    let w = Tensor::new(&shape, values(n, seed, -1.0, 1.0))?;
    let yw = tape.mul_const(y, &w)?;
    tape.sum(yw)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut results: Vec<(&str, f64)> = Vec::new();

    let s = store_with(&[
        ("x", &[3, 4], values(12, 1, -1.0, 1.0)),
        ("w", &[5, 4], values(20, 2, -1.0, 1.0)),
        ("b", &[5], values(5, 3, -1.0, 1.0)),
    ]);
    results.push((
        "linear",
        fd_error(&s, |t, s| {
            let (x, w, b) = (leaf(t, s, "x"), leaf(t, s, "w"), leaf(t, s, "b"));
            let y = t.linear(x, w, b)?;
            project(t, y, 9)
        }),
    ));

    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let s = store_with(&[
            ("x", &[2, 3, 6, 5], values(180, 4, -1.0, 1.0)),
            ("w", &[4, 3, 3, 3], values(108, 5, -1.0, 1.0)),
            ("b", &[4], values(4, 6, -1.0, 1.0)),
        ]);
        results.push((
            "conv2d",
            fd_error(&s, |t, s| {
                let (x, w, b) = (leaf(t, s, "x"), leaf(t, s, "w"), leaf(t, s, "b"));
                let y = t.conv2d(x, w, b, stride, pad)?;
                project(t, y, 10)
            }),
        ));
    }

    let s = store_with(&[
        ("x", &[2, 3, 3, 4], values(72, 7, -1.0, 1.0)),
        ("w", &[3, 2, 4, 4], values(96, 8, -1.0, 1.0)),
        ("b", &[2], values(2, 9, -1.0, 1.0)),
    ]);
    results.push((
        "conv_transpose2d",
        fd_error(&s, |t, s| {
            let (x, w, b) = (leaf(t, s, "x"), leaf(t, s, "w"), leaf(t, s, "b"));
            let y = t.conv_transpose2d(x, w, b, 2, 1)?;
            project(t, y, 11)
        }),
    ));

    let s = store_with(&[
        ("x", &[3, 2, 2, 2], values(24, 12, -2.0, 2.0)),
        ("gamma", &[2], values(2, 13, 0.5, 1.5)),
        ("beta", &[2], values(2, 14, -1.0, 1.0)),
    ]);
    results.push((
        "batch_norm",
        fd_error(&s, |t, s| {
            let (x, g, b) = (leaf(t, s, "x"), leaf(t, s, "gamma"), leaf(t, s, "beta"));
            let (y, _) = t.batch_norm(x, g, b, NormSource::Batch)?;
            project(t, y, 15)
        }),
    ));
    let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
    results.push((
        "batch_norm_running",
        fd_error(&s, |t, s| {
            let (x, g, b) = (leaf(t, s, "x"), leaf(t, s, "gamma"), leaf(t, s, "beta"));
            let (y, _) = t.batch_norm(x, g, b, NormSource::Running { mean: &mean, var: &var })?;
            project(t, y, 16)
        }),
    ));

    // Values kept away from the activation kinks.
    let off_zero = |seed| values(6, seed, 0.2, 1.5).into_iter().enumerate().map(|(i, v)| if i % 2 == 0 { v } else { -v }).collect();
    let s = store_with(&[("a", &[2, 3], off_zero(17)), ("b", &[2, 3], off_zero(18))]);
    let mask = Tensor::new(&[2, 3], vec![2.0, 0.0, 2.0, 0.0, 2.0, 2.0]).unwrap();
    results.push((
        "elementwise",
        fd_error(&s, |t, s| {
            let (a, b) = (leaf(t, s, "a"), leaf(t, s, "b"));
            let l = t.leaky_relu(a, 0.2)?;
            let r = t.relu(b)?;
            let th = t.tanh(a)?;
            let af = t.affine(b, -1.7, 0.3)?;
            let m = t.mul_const(a, &mask)?;
            let sum = t.add(l, r)?;
            let sum = t.add(sum, th)?;
            let sum = t.add(sum, m)?;
            let cat = t.concat_rows(&[sum, af, a])?;
            let mid = t.slice_rows(cat, 1, 4)?;
            let re = t.reshape(mid, &[2, 2, 3])?;
            project(t, re, 19)
        }),
    ));

    let s = store_with(&[("l", &[4, 9], values(36, 20, -3.0, 3.0)), ("r", &[4, 6], values(24, 21, 0.0, 10.0))]);
    let target = Tensor::new(&[4, 6], values(24, 22, 20.0, 30.0)).unwrap();
    results.push(("cross_entropy", fd_error(&s, |t, s| {
        let l = leaf(t, s, "l");
        t.cross_entropy(l, &[0, 3, 8, 3])
    })));
    results.push(("mae", fd_error(&s, |t, s| {
        let r = leaf(t, s, "r");
        t.mae(r, &target)
    })));

    let s = store_with(&[("l", &[3, 9], values(27, 23, -4.0, 4.0)), ("d", &[3, 1], values(3, 24, -3.0, 3.0))]);
    for real in [true, false] {
        results.push(("bce_real_probability", fd_error(&s, |t, s| {
            let l = leaf(t, s, "l");
            t.bce_real_probability(l, real)
        })));
        results.push(("bce_with_logit", fd_error(&s, |t, s| {
            let d = leaf(t, s, "d");
            t.bce_with_logit(d, real)
        })));
    }

    let s = store_with(&[("a", &[4, 5], values(20, 25, -1.0, 1.0)), ("b", &[3, 5], values(15, 26, -1.0, 2.0))]);
    results.push(("feature_matching", fd_error(&s, |t, s| {
        let (a, b) = (leaf(t, s, "a"), leaf(t, s, "b"));
        t.feature_matching(a, b)
    })));

    let s = store_with(&[("w", &[2, 2], vec![0.7, -0.4, 0.3, 1.1])]);
    let xl = Tensor::from_f64(&[2, 2], &[1.0, 0.5, -0.3, 0.8]).unwrap();
    let xu = Tensor::from_f64(&[3, 2], &[0.2, -0.6, 1.4, 0.1, -0.9, 0.7]).unwrap();
    let xg = Tensor::from_f64(&[2, 2], &[-0.5, -0.5, 0.9, 0.35]).unwrap();
    let targets = Tensor::from_f64(&[2, 2], &[3.0, -2.0, 0.25, 5.0]).unwrap();
    results.push(("discriminator_objective", fd_error(&s, |t, s| {
        let w = leaf(t, s, "w");
        let zero = t.constant(Tensor::zeros(&[2]));
        let mut head = |x: &Tensor<f64>| {
            let x = t.constant(x.clone());
            t.linear(x, w, zero)
        };
        let (ll, lu, lg) = (head(&xl)?, head(&xu)?, head(&xg)?);
        Ok(t.discriminator_loss(ll, ll, &[1, 0], &targets, lu, lg, 0.5)?.total)
    })));

    let cfg = BackboneConfig {
        channels: [2, 2, 3, 2],
        feature_dim: 4,
        gen_channels: 8,
        z_dim: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut recognizer = ParameterStore::<f64>::new();
    model::init_recognizer(&mut recognizer, &cfg, &mut rng).unwrap();
    model::init_discriminator_head(&mut recognizer, &cfg, &mut rng).unwrap();
    let x = Tensor::new(&[2, 3, 64, 64], values(2 * 3 * 64 * 64, 34, 0.0, 1.0)).unwrap();
    results.push(("recognizer_all_heads", fd_error(&recognizer, |t, s| {
        let xv = t.constant(x.clone());
        let out = model::network_forward(t, s, xv, &Group::ALL, NormMode::Train { update_running: false })?;
        let c = project(t, out.class_logits, 35)?;
        let r = project(t, out.reg_logits, 36)?;
        let d = t.sum(out.dhead_logit.expect("head present"))?;
        let cr = t.add(c, r)?;
        t.add(cr, d)
    })));
    let z = Tensor::new(&[2, 5], values(10, 41, -1.0, 1.0)).unwrap();
    let store = model::init_all::<f64, _>(&cfg, &mut rng).unwrap();
    let mut gen_only = ParameterStore::new();
    for (name, e) in store.iter() {
        let kind = if e.group == Group::G { e.kind } else { ParamKind::Buffer };
        gen_only.insert(name, e.group, kind, e.tensor.clone()).unwrap();
    }
    results.push(("generator_feature_matching", fd_error(&gen_only, |t, s| {
        let zv = t.constant(z.clone());
        let (xg, _) = model::generator_forward(t, s, zv, &[Group::G], NormMode::Train { update_running: false })?;
        let xu = t.constant(x.clone());
        let both = t.concat_rows(&[xu, xg])?;
        let out = model::network_forward(t, s, both, &[Group::G], NormMode::Train { update_running: false })?;
        let fu = t.slice_rows(out.features, 0, 2)?;
        let fg = t.slice_rows(out.features, 2, 2)?;
        t.feature_matching(fu, fg)
    })));

    let elapsed = start.elapsed();
    let (worst_name, worst) = results.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    outcome(
        worst < 1e-6 && elapsed < Duration::from_secs(120),
        format!("{} checks, worst relative error {worst:.2e} ({worst_name}) in {:.1}s", results.len(), elapsed.as_secs_f64()),
    )
}

// ------------------------------------------------------------ grammar, mesh

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/grammars")
}

fn grammar_mesh_suite() -> Outcome {
    let mut problems = Vec::new();
    let mut fixtures = Vec::new();
    for t in WindowType::all() {
        let name = t.to_string().replace('/', "_");
        let text = std::fs::read_to_string(fixture_dir().join(format!("{name}.json"))).unwrap();
        let tree = parse_grammar(&text).unwrap();
        if serialize_grammar(&tree) != text {
            problems.push(format!("{name}: serialization differs"));
        }
        if classify_tree(&tree) != t {
            problems.push(format!("{name}: classified as {}", classify_tree(&tree)));
        }
        fixtures.push((name, tree));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut assembled = 0;
    for t in WindowType::all() {
        for _ in 0..20 {
            let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
            let (w, h) = (rng.random_range(12.0..34.0), rng.random_range(12.0..34.0));
            let p = GrammarParams::from_array([x, y, x + w, y + h, rng.random_range(1.0..30.0), rng.random_range(1.0..30.0)]);
            match assemble_grammar(t, &p, &AssembleConfig::default()) {
                Ok(tree) if classify_tree(&tree) == t => assembled += 1,
                Ok(tree) => problems.push(format!("{t}: assembled tree classifies as {}", classify_tree(&tree))),
                Err(e) => problems.push(format!("{t}: {e}")),
            }
        }
    }

    let mut worst_obj: f64 = 0.0;
    let mut worst_area: f64 = 0.0;
    for (name, tree) in &fixtures {
        let layout = layout_cells(tree).unwrap();
        let cells: f64 = layout.cells.iter().map(Rect::area).sum();
        worst_area = worst_area.max((cells - layout.frame.area()).abs());
        let mesh = generate_window_mesh(tree, &DepthConfig::for_layout(&layout)).unwrap();
        if let Err(e) = mesh.check() {
            problems.push(format!("{name}: {e}"));
        }
        if mesh.edge_uses().values().any(|&n| n > 2) {
            problems.push(format!("{name}: edge used more than twice"));
        }
        let parsed = parse_obj(&export_mesh_obj(&mesh, name)).unwrap();
        let back = &parsed[0].mesh;
        if back.faces != mesh.faces || back.vertices.len() != mesh.vertices.len() {
            problems.push(format!("{name}: OBJ topology changed"));
        }
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            worst_obj = worst_obj.max(d);
        }
    }
    if worst_obj > 1e-6 {
        problems.push(format!("OBJ round trip moved a vertex by {worst_obj:e}"));
    }
    if worst_area > 1e-6 {
        problems.push(format!("cell areas miss the frame area by {worst_area:e}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("9 fixtures stable, {assembled}/180 assembled trees classify back, OBJ drift {worst_obj:.1e}, area gap {worst_area:.1e}")
        } else {
            problems.join("; ")
        },
    )
}

// ------------------------------------------------------------------ formats

fn small_checkpoint() -> Checkpoint {
    let corpus = synth_corpus(&SynthConfig {
        per_class: 1,
        unlabeled: 12,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = tiny_config();
    cfg.epochs = 2;
    pretrain_multitask(&LabeledPool::from_synthetic(&corpus.labeled), &UnlabeledPool::new(&corpus.unlabeled), &cfg)
        .unwrap()
        .checkpoint
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch: 4,
        backbone: BackboneSpec {
            channels: [4, 4, 8, 8],
            feature_dim: 16,
            gen_channels: 8,
            z_dim: 8,
        },
        ..TrainConfig::profile(Profile::Desk)
    }
}

fn formats() -> Outcome {
    let mut problems = Vec::new();
    let ck = small_checkpoint();
    let bytes = write_checkpoint(&ck);
    let back = read_checkpoint(&bytes).unwrap();
    if back != ck || write_checkpoint(&back) != bytes {
        problems.push("FFCK round trip is not exact".to_string());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ffck");
    save_checkpoint(&ck, &path).unwrap();
    if std::fs::read(&path).unwrap() != bytes || load_checkpoint(&path).unwrap() != ck {
        problems.push("FFCK file round trip is not exact".to_string());
    }

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&9u32.to_le_bytes());
    let mut trailing = bytes.clone();
    trailing.push(0);
    let cases: [(&str, Vec<u8>, fn(&CheckpointError) -> bool); 5] = [
        ("bad magic", magic, |e| matches!(e, CheckpointError::Format(_))),
        ("future version", version, |e| matches!(e, CheckpointError::Version { found: 9, .. })),
        ("truncated payload", bytes[..bytes.len() / 2].to_vec(), |e| matches!(e, CheckpointError::Truncated { .. })),
        ("truncated trailer", bytes[..bytes.len() - 3].to_vec(), |e| matches!(e, CheckpointError::Truncated { .. })),
        ("trailing bytes", trailing, |e| matches!(e, CheckpointError::Format(_))),
    ];
    for (what, data, expected) in cases {
        match read_checkpoint(&data) {
            Err(e) if expected(&e) => {}
            other => problems.push(format!("{what}: got {other:?}")),
        }
    }
    if !matches!(load_checkpoint(&dir.path().join("absent.ffck")), Err(CheckpointError::Io { .. })) {
        problems.push("missing checkpoint is not an I/O error".to_string());
    }

    let data = dir.path().join("data");
    let cfg = SynthConfig {
        per_class: 1,
        unlabeled: 2,
        test_per_class: 1,
        seed: 3,
        ..Default::default()
    };
    let m = synth_dataset(&cfg, &data).unwrap();
    let manifest = data.join("manifest.json");
    if load_manifest(&manifest).unwrap() != m {
        problems.push("manifest round trip differs".to_string());
    }
    let copy = dir.path().join("copy.json");
    save_manifest(&m, &copy).unwrap_or_else(|e| problems.push(format!("re-save: {e}")));
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("\"version\": 1", "\"version\": 7", 1)).unwrap();
    if !matches!(load_manifest(&manifest), Err(DatasetError::Format(_))) {
        problems.push("manifest version is not a format error".to_string());
    }
    std::fs::write(&manifest, "{").unwrap();
    if !matches!(load_manifest(&manifest), Err(DatasetError::Format(_))) {
        problems.push("broken manifest JSON is not a format error".to_string());
    }
    std::fs::write(&manifest, text).unwrap();
    let missing = data.join(&m.unlabeled[0].path);
    std::fs::remove_file(&missing).unwrap();
    match load_manifest(&manifest) {
        Err(DatasetError::MissingFile(p)) if p == missing => {}
        other => problems.push(format!("missing patch: got {other:?}")),
    }
    let detail = if problems.is_empty() {
        format!("FFCK {} bytes exact, 6 damaged checkpoints and 3 damaged manifests give the expected errors", bytes.len())
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

// ------------------------------------------------------------ partition

fn optimizer_partition() -> Outcome {
    let corpus = synth_corpus(&SynthConfig {
        per_class: 10,
        unlabeled: 300,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::profile(Profile::Desk);
    cfg.seed = 5;
    // 90 labeled in batches of 32 gives 3 iterations per epoch.
    cfg.epochs = 17;
    let mut events = Vec::new();
    let run = pretrain_multitask_observed(&LabeledPool::from_synthetic(&corpus.labeled), &UnlabeledPool::new(&corpus.unlabeled), &cfg, &mut |e| {
        if let TrainEvent::Update(u) = e {
            events.push(u)
        }
    })
    .unwrap();
    let idx = |g: Group| Group::ALL.iter().position(|&x| x == g).unwrap();
    let recognizer = [idx(Group::F), idx(Group::LC), idx(Group::LR)];
    let mut d_touched_g = 0;
    let mut g_touched_rec = 0;
    let (mut d_steps, mut g_steps) = (0, 0);
    for e in &events {
        match e.optimizer {
            Optimizer::Recognizer => {
                d_steps += 1;
                if e.before[idx(Group::G)] != e.after[idx(Group::G)] {
                    d_touched_g += 1;
                }
            }
            Optimizer::Generator => {
                g_steps += 1;
                if recognizer.iter().chain(&[idx(Group::DHead)]).any(|&i| e.before[i] != e.after[i]) {
                    g_touched_rec += 1;
                }
            }
        }
    }
    let steps = run.history.len();
    outcome(
        steps >= 50 && d_steps == steps && g_steps == steps && d_touched_g == 0 && g_touched_rec == 0,
        format!("{steps} iterations, {d_steps} recognizer steps changed G {d_touched_g} times, {g_steps} generator steps changed F/L_C/L_R {g_touched_rec} times"),
    )
}

// ------------------------------------------------------------ determinism

fn fenestra(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fenestra")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "fenestra {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn cli_training_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    fenestra(&["synth", "--seed", "7", "--out", &p("data")]);
    for run in ["a", "b"] {
        fenestra(&["train", "--data", &p("data"), "--profile", "desk", "--seed", "7", "--out", &p(&format!("{run}.ffck"))]);
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    let (ck, csv) = (read("a.ffck") == read("b.ffck"), read("a.csv") == read("b.csv"));
    let rows = read("a.csv").iter().filter(|&&b| b == b'\n').count() - 1;
    outcome(ck && csv, format!("checkpoints identical: {ck}, loss logs identical: {csv} ({rows} rows)"))
}

// ------------------------------------------------------------ experiments

struct SeedResult {
    seed: u64,
    baseline: EvalReport,
    pipeline: EvalReport,
    multitask: EvalReport,
    finetuned_classifier: EvalReport,
    finetuned_regressor: EvalReport,
    pipeline_time: Duration,
    history: Vec<LossRecord>,
    pipeline_model: Recognizer,
}

fn score(model: &Recognizer, test: &[SyntheticSample]) -> EvalReport {
    let patches: Vec<PatchImage> = test.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.window_type.index()).collect();
    let targets: Vec<[f64; 6]> = test.iter().map(|s| s.params.to_array()).collect();
    evaluate(&model.predict_batch(&patches).unwrap(), &labels, &targets).unwrap()
}

fn train_seed(seed: u64) -> SeedResult {
    let corpus = synth_corpus(&SynthConfig {
        per_class: 10,
        unlabeled: 3000,
        test_per_class: TEST_PER_CLASS,
        seed,
        ..Default::default()
    })
    .unwrap();
    let labeled = LabeledPool::from_synthetic(&corpus.labeled);
    let unlabeled = UnlabeledPool::new(&corpus.unlabeled);
    let mut cfg = TrainConfig::profile(Profile::Desk);
    cfg.seed = seed;
    cfg.epochs = PRETRAIN_EPOCHS;
    cfg.dropout = DROPOUT;
    let mut ft = cfg;
    ft.epochs = FINETUNE_EPOCHS;
    let tune = |init: &Checkpoint, mode| {
        let mut c = ft;
        c.mode = mode;
        finetune(init, &labeled, None, &c).unwrap().checkpoint
    };

    let base = pretrain_supervised(&labeled, &cfg).unwrap().checkpoint;
    let base_regressor = tune(&base, TrainMode::FinetuneRegressor);

    let start = Instant::now();
    let run = pretrain_multitask(&labeled, &unlabeled, &cfg).unwrap();
    let gan = run.checkpoint;
    let gan_regressor = tune(&gan, TrainMode::FinetuneRegressor);
    let pipeline_time = start.elapsed();
    let gan_classifier = tune(&gan, TrainMode::FinetuneClassifier);

    let test = &corpus.test;
    let pipeline_model = Recognizer::pair(&gan, &gan_regressor).unwrap();
    SeedResult {
        seed,
        baseline: score(&Recognizer::pair(&base, &base_regressor).unwrap(), test),
        pipeline: score(&pipeline_model, test),
        multitask: score(&Recognizer::new(&gan).unwrap(), test),
        finetuned_classifier: score(&Recognizer::new(&gan_classifier).unwrap(), test),
        finetuned_regressor: score(&Recognizer::new(&gan_regressor).unwrap(), test),
        pipeline_time,
        history: run.history,
        pipeline_model,
    }
}

fn mean(seeds: &[SeedResult], f: impl Fn(&SeedResult) -> f64) -> f64 {
    seeds.iter().map(f).sum::<f64>() / seeds.len() as f64
}

fn semi_supervised(seeds: &[SeedResult], margins: bool) -> Outcome {
    let (bt, pt) = (mean(seeds, |s| s.baseline.top1 * 100.0), mean(seeds, |s| s.pipeline.top1 * 100.0));
    let (bm, pm) = (mean(seeds, |s| s.baseline.mae), mean(seeds, |s| s.pipeline.mae));
    let gain = pt - bt;
    let reduction = (bm - pm) / bm;
    let pass = if margins { gain >= 2.0 && reduction >= 0.05 } else { pt >= bt && pm <= bm };
    outcome(
        pass,
        format!(
            "Top-1 {pt:.2}% vs {bt:.2}% ({gain:+.2} points, target +2), MAE {pm:.2} vs {bm:.2} ({:.1}% lower, target 5%)",
            reduction * 100.0
        ),
    )
}

fn runtime(seeds: &[SeedResult]) -> Outcome {
    let worst = seeds.iter().map(|s| s.pipeline_time).max().unwrap();
    outcome(
        worst <= Duration::from_secs(15 * 60),
        format!(
            "slowest pipeline run {:.0}s on {} core(s), budget 900s",
            worst.as_secs_f64(),
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn finetune_gain(seeds: &[SeedResult]) -> Outcome {
    let (mt, ct) = (mean(seeds, |s| s.multitask.top1 * 100.0), mean(seeds, |s| s.finetuned_classifier.top1 * 100.0));
    let (mm, rm) = (mean(seeds, |s| s.multitask.mae), mean(seeds, |s| s.finetuned_regressor.mae));
    outcome(
        ct > mt && rm < mm,
        format!("classifier Top-1 {ct:.2}% vs multitask {mt:.2}%, regressor MAE {rm:.2} vs multitask {mm:.2}"),
    )
}

fn ce_decrease(history: &[LossRecord]) -> Outcome {
    let mut by_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in history {
        if let Some(ce) = r.ce {
            let e = by_epoch.entry(r.epoch).or_default();
            e.0 += ce;
            e.1 += 1;
        }
    }
    let epoch_mean = |e: usize| by_epoch.get(&e).map(|(s, n)| s / *n as f64);
    match (epoch_mean(0), epoch_mean(49)) {
        (Some(first), Some(last)) => {
            let drop = 1.0 - last / first;
            outcome(drop >= 0.5, format!("mean CE epoch 1 {first:.4}, epoch 50 {last:.4} ({:.1}% lower)", drop * 100.0))
        }
        _ => outcome(false, "history is shorter than 50 epochs"),
    }
}

// ------------------------------------------------------------ grouping

const CLUSTERS: usize = 500;
const MEMBERS: usize = 5;

/// Same grammar for every member; each copy gets its own style, noise and
/// an opaque rectangle somewhere on the patch.
fn corrupted_cluster(t: WindowType, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (GrammarParams, Vec<PatchImage>) {
    let params = sample_params(t, &cfg.ranges, &cfg.assemble, rng);
    let tree = assemble_grammar(t, &params, &cfg.assemble).unwrap();
    let side = PATCH_PIXELS;
    let members = (0..MEMBERS)
        .map(|_| {
            let mut style = cfg.style.jittered(&cfg.jitter, rng);
            style.noise = rng.random_range(0.02..0.10);
            let clean = rasterize_patch(&tree, &style, rng.random()).unwrap();
            let mut px = clean.pixels().to_vec();
            let (w, h) = (rng.random_range(10..=24), rng.random_range(10..=24));
            let (x0, y0) = (rng.random_range(0..=side - w), rng.random_range(0..=side - h));
            let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    px[(y * side + x) * 3..][..3].copy_from_slice(&color);
                }
            }
            PatchImage::new(px).unwrap()
        })
        .collect();
    (params, members)
}

fn grouped(model: &Recognizer) -> Outcome {
    let cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let (mut member_hits, mut group_hits) = (0usize, 0usize);
    let (mut member_mae, mut group_mae) = (0.0, 0.0);
    let abs_err = |a: [f64; 6], b: [f64; 6]| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    for i in 0..CLUSTERS {
        let t = WindowType::from_index(i % WindowType::COUNT).unwrap();
        let (params, patches) = corrupted_cluster(t, &cfg, &mut rng);
        let target = params.to_array();
        let g = grouped_inference(model, &patches).unwrap();
        for m in &g.members {
            member_hits += usize::from(m.argmax() == t.index());
            member_mae += abs_err(m.params, target);
        }
        group_hits += usize::from(g.window_type == t);
        group_mae += abs_err(g.params.to_array(), target);
    }
    let members = (CLUSTERS * MEMBERS) as f64;
    let (mt, gt) = (100.0 * member_hits as f64 / members, 100.0 * group_hits as f64 / CLUSTERS as f64);
    let (mm, gm) = (member_mae / members, group_mae / CLUSTERS as f64);
    outcome(
        gt >= mt + 5.0 && gm <= mm,
        format!("grouped Top-1 {gt:.2}% vs per-member {mt:.2}% ({:+.2} points, need +5), grouped MAE {gm:.2} vs {mm:.2}", gt - mt),
    )
}
