use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fenestra_core::dataset::{load_labeled, load_manifest, load_unlabeled, synth_dataset, LabeledPatch, Split, SynthConfig};
use fenestra_core::grammar::{parse_grammar, GrammarTree};
use fenestra_core::inference::{evaluate, group_predictions, ClusterRecord, GroupedPrediction, Recognizer, WindowPrediction};
use fenestra_core::procgen::{export_mesh_obj, export_obj, instance_scene, window_mesh, PatchImage};
use fenestra_core::train::{
    finetune, load_checkpoint, pretrain_multitask, save_checkpoint, write_loss_csv, LabeledPool, LossRecord, TrainConfig, TrainError, TrainMode, UnlabeledPool,
};
use fenestra_server::{AppState, Session};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::{data_err, Cli, CliError};

type Result<T = ()> = std::result::Result<T, CliError>;

pub fn dispatch(cli: &Cli) -> Result {
    let train_cfg = match &cli.command {
        Command::Train(a) => Some(resolve_train(a)?),
        _ => None,
    };
    if cli.verbose {
        let resolved = json!({ "cli": cli, "train": train_cfg.as_ref().map(|(c, _)| c) });
        eprintln!("{}", serde_json::to_string_pretty(&resolved).expect("config serializes"));
    }
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => {
            let (cfg, init) = train_cfg.expect("resolved above");
            train(a, &cfg, init)
        }
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Mesh(a) => mesh(a),
        Command::Scene(a) => scene(a),
        Command::Serve(a) => serve(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result {
    let text = serde_json::to_string_pretty(value).map_err(data_err)? + "\n";
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: &SynthArgs) -> Result {
    let cfg = SynthConfig {
        per_class: a.per_class,
        unlabeled: a.unlabeled,
        test_per_class: a.test_per_class,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let m = synth_dataset(&cfg, &a.out).map_err(data_err)?;
    log::info!("wrote {} labeled and {} unlabeled patches to {}", m.labeled.len(), m.unlabeled.len(), a.out.display());
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) | TrainError::Mode(m) => CliError::Usage(m),
        TrainError::Divergence { step, reason, .. } => CliError::Divergence(format!("step {step}: {reason}")),
        other => data_err(other),
    }
}

/// Profile defaults, then the starting checkpoint's backbone, then flags.
fn resolve_train(a: &TrainArgs) -> Result<(TrainConfig, Option<fenestra_core::train::Checkpoint>)> {
    let mut cfg = TrainConfig::profile(a.profile);
    let init = match (&a.init, a.mode) {
        (None, TrainMode::PretrainMultitask) => None,
        (Some(_), TrainMode::PretrainMultitask) => return Err(CliError::Usage("--init is only used by the fine-tuning modes".into())),
        (None, mode) => return Err(CliError::Usage(format!("--mode {mode} needs --init"))),
        (Some(p), _) => {
            let ck = load_checkpoint(p).map_err(data_err)?;
            cfg.backbone = ck.config.backbone;
            Some(ck)
        }
    };
    cfg.mode = a.mode;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = &a.channels {
        cfg.backbone.channels = v.as_slice().try_into().map_err(|_| CliError::Usage("--channels takes four values".into()))?;
    }
    if let Some(v) = a.feature_dim {
        cfg.backbone.feature_dim = v;
    }
    if let Some(v) = a.gen_channels {
        cfg.backbone.gen_channels = v;
    }
    if let Some(v) = a.z_dim {
        cfg.backbone.z_dim = v;
    }
    cfg.validate().map_err(train_error)?;
    Ok((cfg, init))
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<LabeledPatch>> {
    let m = load_manifest(&dir.join("manifest.json")).map_err(data_err)?;
    load_labeled(&m, dir, split).map_err(data_err)
}

fn write_log(path: &Path, history: &[LossRecord]) -> Result {
    let mut buf = Vec::new();
    write_loss_csv(history, &mut buf).map_err(data_err)?;
    write_text(path, &String::from_utf8(buf).expect("csv output is UTF-8"))
}

fn train(a: &TrainArgs, cfg: &TrainConfig, init: Option<fenestra_core::train::Checkpoint>) -> Result {
    let m = load_manifest(&a.data.join("manifest.json")).map_err(data_err)?;
    let mut labeled = load_labeled(&m, &a.data, Split::Train).map_err(data_err)?;
    if let Some(n) = a.labeled_limit {
        labeled.truncate(n);
    }
    let labeled = LabeledPool::from_patches(&labeled);
    let unlabeled = if cfg.mode.is_adversarial() {
        Some(UnlabeledPool::new(&load_unlabeled(&m, &a.data).map_err(data_err)?))
    } else {
        None
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let result = match &init {
        None => pretrain_multitask(&labeled, unlabeled.as_ref().expect("pretraining is adversarial"), cfg),
        Some(ck) => finetune(ck, &labeled, unlabeled.as_ref(), cfg),
    };
    let run = match result {
        Ok(run) => run,
        Err(TrainError::Divergence { step, reason, history, .. }) => {
            write_log(&log_path, &history)?;
            return Err(CliError::Divergence(format!("step {step}: {reason}; loss log in {}", log_path.display())));
        }
        Err(e) => return Err(train_error(e)),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    save_checkpoint(&run.checkpoint, &a.out).map_err(data_err)?;
    write_log(&log_path, &run.history)?;
    log::info!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn load_model(a: &ModelArgs) -> Result<Recognizer> {
    match &a.regressor {
        None => Recognizer::load(&a.model),
        Some(r) => Recognizer::load_pair(&a.model, r),
    }
    .map_err(data_err)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn eval(a: &EvalArgs) -> Result {
    let model = load_model(&a.model)?;
    let patches = load_split(&a.data, split_of(a.split))?;
    if patches.is_empty() {
        return Err(CliError::Data(format!("no {:?} patches in {}", a.split, a.data.display())));
    }
    let images: Vec<PatchImage> = patches.iter().map(|p| p.image.clone()).collect();
    let preds = model.predict_batch(&images).map_err(data_err)?;
    let labels: Vec<usize> = patches.iter().map(|p| p.window_type.index()).collect();
    let targets: Vec<[f64; 6]> = patches.iter().map(|p| p.params.to_array()).collect();
    let report = evaluate(&preds, &labels, &targets).map_err(data_err)?;
    emit_json(&report, a.out.as_deref())
}

#[derive(Serialize)]
struct PatchOutput {
    source: PathBuf,
    class: usize,
    label: String,
    #[serde(flatten)]
    prediction: WindowPrediction,
    grammar: GrammarTree,
}

#[derive(Serialize)]
struct InferOutput {
    predictions: Vec<PatchOutput>,
    grouped: Option<GroupedPrediction>,
}

fn infer(a: &InferArgs) -> Result {
    let model = load_model(&a.model)?;
    let (sources, images): (Vec<PathBuf>, Vec<PatchImage>) = match &a.data {
        Some(dir) => load_split(dir, split_of(a.split))?.into_iter().map(|p| (p.path, p.image)).unzip(),
        None => {
            if a.patch.is_empty() {
                return Err(CliError::Usage("give --patch or --data".into()));
            }
            let images = a
                .patch
                .iter()
                .map(|p| PatchImage::load_png(p).map_err(data_err))
                .collect::<Result<Vec<_>>>()?;
            (a.patch.clone(), images)
        }
    };
    if images.is_empty() {
        return Err(CliError::Data("no patches to predict".into()));
    }
    let preds = model.predict_batch(&images).map_err(data_err)?;
    let predictions = sources
        .into_iter()
        .zip(&preds)
        .map(|(source, p)| {
            let single = group_predictions(vec![p.clone()]).map_err(data_err)?;
            Ok(PatchOutput {
                source,
                class: p.argmax(),
                label: p.window_type().to_string(),
                prediction: p.clone(),
                grammar: single.grammar,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grouped = if a.group { Some(group_predictions(preds).map_err(data_err)?) } else { None };
    emit_json(&InferOutput { predictions, grouped }, a.out.as_deref())
}

fn grammar_from_prediction(text: &str, index: usize) -> Result<GrammarTree> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(data_err)?;
    let g = if !v["grouped"].is_null() {
        &v["grouped"]["grammar"]
    } else if v["grammar"].is_object() {
        &v["grammar"]
    } else {
        &v["predictions"][index]["grammar"]
    };
    if !g.is_object() {
        return Err(CliError::Data(format!("no grammar at prediction {index}")));
    }
    parse_grammar(&g.to_string()).map_err(data_err)
}

fn mesh(a: &MeshArgs) -> Result {
    let tree = match (&a.grammar, &a.prediction) {
        (Some(g), _) => parse_grammar(&read_text(g)?).map_err(data_err)?,
        (None, Some(p)) => grammar_from_prediction(&read_text(p)?, a.index)?,
        (None, None) => return Err(CliError::Usage("give --grammar or --prediction".into())),
    };
    let mesh = window_mesh(&tree).map_err(data_err)?;
    let name = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("window");
    write_text(&a.out, &export_mesh_obj(&mesh, name))
}

fn scene(a: &SceneArgs) -> Result {
    let clusters: Vec<ClusterRecord> = serde_json::from_str(&read_text(&a.clusters)?).map_err(data_err)?;
    let mut meshes = BTreeMap::new();
    let mut placements = Vec::new();
    for c in &clusters {
        c.check().map_err(CliError::Data)?;
        let Some(tree) = &c.grammar else {
            log::warn!("cluster {} has no grammar, skipped", c.id);
            continue;
        };
        let mut any = false;
        for (m, p) in c.members.iter().zip(&c.placements) {
            if a.facade.as_ref().is_none_or(|f| *f == m.facade_id) {
                placements.push(p.clone());
                any = true;
            }
        }
        if any {
            meshes.insert(c.id.clone(), window_mesh(tree).map_err(data_err)?);
        }
    }
    let scene = instance_scene(meshes, placements).map_err(data_err)?;
    write_text(&a.out, &export_obj(&scene))
}

fn serve(a: &ServeArgs) -> Result {
    let mut state = AppState::new();
    if let Some(dir) = &a.facades {
        let mut xml: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xml"))
            .collect();
        xml.sort();
        let session = Session::load(&xml).map_err(data_err)?;
        log::info!("loaded {} façades", xml.len());
        state = state.with_session(session);
    }
    if let Some(model) = &a.model {
        state = state.with_model(load_model(&ModelArgs {
            model: model.clone(),
            regressor: a.regressor.clone(),
        })?);
    }
    if let Some(dir) = &a.snapshot_dir {
        state = state.with_snapshot_dir(dir);
    }
    let rt = tokio::runtime::Runtime::new().map_err(data_err)?;
    rt.block_on(fenestra_server::serve(a.addr, state, a.static_dir.clone())).map_err(data_err)
}
