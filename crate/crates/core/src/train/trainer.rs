use fenestra_nn::model::{self, BackboneConfig, NormMode, BN_MOMENTUM};
use fenestra_nn::{Adam, AdamConfig, Gradients, Group, NnError, ParameterStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{TrainConfig, TrainMode};
use super::data::{require_nonempty, LabeledPool, UnlabeledPool};
use super::log::LossRecord;
use super::{Result, TrainError};
use crate::dataset::entry_seed;

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const HEAD_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;

/// Which optimizer an [`UpdateEvent`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Recognizer,
    Generator,
}

/// Fingerprints of every weight group, in [`Group::ALL`] order, taken
/// immediately before and after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateEvent {
    pub step: u64,
    pub optimizer: Optimizer,
    pub before: [u64; 5],
    pub after: [u64; 5],
}

fn fingerprints(store: &ParameterStore<f32>) -> [u64; 5] {
    Group::ALL.map(|g| store.fingerprint(&[g]))
}

/// Progress reported to an observer during training.
#[derive(Debug)]
pub enum TrainEvent<'s> {
    Update(UpdateEvent),
    /// `epoch` epochs are complete; `store` holds the current weights.
    EpochEnd { epoch: usize, store: &'s ParameterStore<f32> },
}

type Observer<'a> = Option<&'a mut dyn FnMut(TrainEvent<'_>)>;

/// Final state of a run and its per-iteration losses.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Heads {
    Both,
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, Copy)]
struct Objective {
    heads: Heads,
    adversarial: bool,
}

impl Objective {
    fn for_mode(mode: TrainMode) -> Self {
        let (heads, adversarial) = match mode {
            TrainMode::PretrainMultitask => (Heads::Both, true),
            TrainMode::FinetuneClassifier => (Heads::Classifier, false),
            TrainMode::FinetuneRegressor => (Heads::Regressor, false),
            TrainMode::FinetuneClassifierGan => (Heads::Classifier, true),
            TrainMode::FinetuneRegressorGan => (Heads::Regressor, true),
        };
        Self { heads, adversarial }
    }

    fn groups(&self) -> Vec<Group> {
        match (self.heads, self.adversarial) {
            (Heads::Both, _) => vec![Group::F, Group::LC, Group::LR],
            (Heads::Classifier, _) => vec![Group::F, Group::LC],
            (Heads::Regressor, false) => vec![Group::F, Group::LR],
            (Heads::Regressor, true) => vec![Group::F, Group::LR, Group::DHead],
        }
    }
}

/// Freshly initialized recognizer and generator for `cfg`, with no
/// optimizer state.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(cfg.seed, INIT_STREAM, 0));
    let store = model::init_all(&BackboneConfig::from(cfg.backbone), &mut rng)?;
    Ok(Checkpoint {
        config: *cfg,
        epoch: 0,
        store,
        opt_d: None,
        opt_g: None,
    })
}

/// Adversarial multitask training from scratch.
pub fn pretrain_multitask(labeled: &LabeledPool, unlabeled: &UnlabeledPool, cfg: &TrainConfig) -> Result<TrainRun> {
    pretrain_observed(labeled, unlabeled, cfg, None)
}

/// [`pretrain_multitask`] reporting progress to `observer`.
pub fn pretrain_multitask_observed(
    labeled: &LabeledPool,
    unlabeled: &UnlabeledPool,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainRun> {
    pretrain_observed(labeled, unlabeled, cfg, Some(observer))
}

fn pretrain_observed(labeled: &LabeledPool, unlabeled: &UnlabeledPool, cfg: &TrainConfig, observer: Observer) -> Result<TrainRun> {
    if cfg.mode != TrainMode::PretrainMultitask {
        return Err(TrainError::Mode(format!("pretraining needs mode pretrain_multitask, got {}", cfg.mode)));
    }
    require_nonempty("unlabeled", unlabeled.len())?;
    let init = initial_checkpoint(cfg)?;
    let mut trainer = Trainer::new(init.store, cfg, Objective::for_mode(cfg.mode))?;
    trainer.observer = observer;
    trainer.run(labeled, Some(unlabeled))
}

/// Supervised-only multitask baseline: same initialization and labeled
/// batches as [`pretrain_multitask`], without the real/fake terms or the
/// generator update.
pub fn pretrain_supervised(labeled: &LabeledPool, cfg: &TrainConfig) -> Result<TrainRun> {
    supervised_observed(labeled, cfg, None)
}

/// [`pretrain_supervised`] reporting progress to `observer`.
pub fn pretrain_supervised_observed(labeled: &LabeledPool, cfg: &TrainConfig, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<TrainRun> {
    supervised_observed(labeled, cfg, Some(observer))
}

fn supervised_observed(labeled: &LabeledPool, cfg: &TrainConfig, observer: Observer) -> Result<TrainRun> {
    let init = initial_checkpoint(cfg)?;
    let objective = Objective {
        heads: Heads::Both,
        adversarial: false,
    };
    let mut trainer = Trainer::new(init.store, cfg, objective)?;
    trainer.observer = observer;
    trainer.run(labeled, None)
}

/// Continues training `init` under one of the fine-tuning modes. Only the
/// groups of the selected head, the feature extractor and, in the
/// adversarial modes, the generator (and a new discriminator head for the
/// regressor) change.
pub fn finetune(init: &Checkpoint, labeled: &LabeledPool, unlabeled: Option<&UnlabeledPool>, cfg: &TrainConfig) -> Result<TrainRun> {
    finetune_inner(init, labeled, unlabeled, cfg, None)
}

/// [`finetune`] reporting progress to `observer`.
pub fn finetune_observed(
    init: &Checkpoint,
    labeled: &LabeledPool,
    unlabeled: Option<&UnlabeledPool>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainRun> {
    finetune_inner(init, labeled, unlabeled, cfg, Some(observer))
}

fn finetune_inner(init: &Checkpoint, labeled: &LabeledPool, unlabeled: Option<&UnlabeledPool>, cfg: &TrainConfig, observer: Observer) -> Result<TrainRun> {
    if cfg.mode == TrainMode::PretrainMultitask {
        return Err(TrainError::Mode("fine-tuning needs one of the finetune modes".into()));
    }
    if BackboneConfig::from(cfg.backbone) != BackboneConfig::from(init.config.backbone) {
        return Err(TrainError::Config("backbone sizes differ from the initial checkpoint".into()));
    }
    let objective = Objective::for_mode(cfg.mode);
    let unlabeled = if objective.adversarial {
        let u = unlabeled.ok_or_else(|| TrainError::Data(format!("mode {} needs unlabeled data", cfg.mode)))?;
        require_nonempty("unlabeled", u.len())?;
        Some(u)
    } else {
        None
    };
    cfg.validate()?;
    let mut store = init.store.clone();
    if !store.has_group(Group::G) && objective.adversarial {
        return Err(TrainError::Mode("initial checkpoint has no generator".into()));
    }
    if cfg.mode == TrainMode::FinetuneRegressorGan {
        store.remove_group(Group::DHead);
        let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(cfg.seed, HEAD_STREAM, 0));
        model::init_discriminator_head(&mut store, &BackboneConfig::from(cfg.backbone), &mut rng)?;
    }
    let mut trainer = Trainer::new(store, cfg, objective)?;
    trainer.observer = observer;
    trainer.run(labeled, unlabeled)
}

/// Sampling without replacement that reshuffles when exhausted.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    cycles: usize,
}

impl Cycler {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0, cycles: 0 }
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
                self.cycles += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Splits a shuffled epoch into batches of at most `m`, never leaving a
/// single-sample batch behind.
fn epoch_batches(order: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(m).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

struct Trainer<'a> {
    cfg: TrainConfig,
    objective: Objective,
    groups: Vec<Group>,
    store: ParameterStore<f32>,
    opt_d: Adam<f32>,
    opt_g: Option<Adam<f32>>,
    step: u64,
    epoch: usize,
    history: Vec<LossRecord>,
    dropout_rng: ChaCha8Rng,
    observer: Observer<'a>,
}

enum Failure {
    Diverged(String),
    Other(TrainError),
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite(op) => Failure::Diverged(format!("non-finite value in {op}")),
            e => Failure::Other(e.into()),
        }
    }
}

fn check_grads(grads: &Gradients<f32>) -> Result<(), Failure> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Failure::Diverged(format!("non-finite gradient for {name}"))),
        None => Ok(()),
    }
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item() as f64
}

impl<'a> Trainer<'a> {
    fn new(store: ParameterStore<f32>, cfg: &TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamConfig::from(cfg.adam);
        let groups = objective.groups();
        let opt_d = Adam::new(adam, &store, &groups);
        let opt_g = objective.adversarial.then(|| Adam::new(adam, &store, &[Group::G]));
        Ok(Self {
            cfg: *cfg,
            objective,
            groups,
            store,
            opt_d,
            opt_g,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            dropout_rng: ChaCha8Rng::seed_from_u64(entry_seed(cfg.seed, DROPOUT_STREAM, 0)),
            observer: None,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg,
            epoch: self.epoch,
            store: self.store.clone(),
            opt_d: Some(self.opt_d.clone()),
            opt_g: self.opt_g.clone(),
        }
    }

    fn run(mut self, labeled: &LabeledPool, unlabeled: Option<&UnlabeledPool>) -> Result<TrainRun> {
        if labeled.len() < 2 {
            return Err(TrainError::Data(format!("need at least 2 labeled samples, got {}", labeled.len())));
        }
        let mut data_rng = ChaCha8Rng::seed_from_u64(entry_seed(self.cfg.seed, DATA_STREAM, 0));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(entry_seed(self.cfg.seed, NOISE_STREAM, 0));
        let mut unlabeled_draws = unlabeled.map(|u| Cycler::new(u.len(), &mut data_rng));
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut data_rng);
            for batch in epoch_batches(&order, self.cfg.batch) {
                let mut record = LossRecord::new(self.step, epoch);
                let unlabeled_batch = match (unlabeled, unlabeled_draws.as_mut()) {
                    (Some(pool), Some(c)) => Some(pool.images(&c.draw(self.cfg.batch, &mut data_rng))),
                    _ => None,
                };
                let result = match unlabeled_batch {
                    Some(xu) => {
                        let z = model::sample_noise(&mut noise_rng, self.cfg.batch, self.cfg.backbone.z_dim);
                        self.adversarial_step(labeled, &batch, xu, z, &mut record)
                    }
                    None => self.supervised_step(labeled, &batch, &mut record),
                };
                match result {
                    Ok(()) if record.is_finite() => {}
                    Ok(()) => return Err(self.diverged("non-finite loss".into())),
                    Err(Failure::Diverged(reason)) => return Err(self.diverged(reason)),
                    Err(Failure::Other(e)) => return Err(e),
                }
                self.history.push(record);
                self.step += 1;
            }
            self.epoch = epoch + 1;
            if let Some(observer) = self.observer.as_mut() {
                observer(TrainEvent::EpochEnd {
                    epoch: self.epoch,
                    store: &self.store,
                });
            }
            let last = self.history.last().expect("every epoch has a batch");
            log::info!(
                "{} epoch {}/{}: ce {:?} mae {:?} gen {:?}",
                self.cfg.mode,
                self.epoch,
                self.cfg.epochs,
                last.ce,
                last.mae,
                last.gen
            );
        }
        if let Some(c) = &unlabeled_draws {
            log::debug!("unlabeled pool cycled {} times", c.cycles);
        }
        Ok(TrainRun {
            checkpoint: self.checkpoint(),
            history: self.history,
        })
    }

    fn update(&mut self, which: Optimizer, grads: &Gradients<f32>) -> Result<(), Failure> {
        let before = self.observer.is_some().then(|| fingerprints(&self.store));
        let opt = match which {
            Optimizer::Recognizer => &mut self.opt_d,
            Optimizer::Generator => self.opt_g.as_mut().expect("adversarial objective owns a generator optimizer"),
        };
        opt.step(&mut self.store, grads)?;
        if let (Some(observer), Some(before)) = (self.observer.as_mut(), before) {
            observer(TrainEvent::Update(UpdateEvent {
                step: self.step,
                optimizer: which,
                before,
                after: fingerprints(&self.store),
            }));
        }
        Ok(())
    }

    /// Recognizer pass for the recognizer update, with training dropout.
    fn recognizer(&mut self, tape: &mut Tape<f32>, x: Var, update_running: bool) -> Result<model::RecognizerOutput<f32>, Failure> {
        let mode = NormMode::Train { update_running };
        let dropout = (self.cfg.dropout > 0.0).then_some((self.cfg.dropout, &mut self.dropout_rng as &mut dyn rand::RngCore));
        Ok(model::network_forward_with_dropout(tape, &self.store, x, &self.groups, mode, dropout)?)
    }

    fn diverged(&mut self, reason: String) -> TrainError {
        TrainError::Divergence {
            step: self.step,
            reason,
            checkpoint: Box::new(self.checkpoint()),
            history: std::mem::take(&mut self.history),
        }
    }

    /// Supervised terms on the labeled rows of `out`; returns their sum.
    fn supervised_loss(
        &self,
        tape: &mut Tape<f32>,
        class_logits: Var,
        reg: Var,
        labeled: &LabeledPool,
        batch: &[usize],
        record: &mut LossRecord,
    ) -> Result<Var, Failure> {
        let (classes, targets) = labeled.labels(batch);
        Ok(match self.objective.heads {
            Heads::Both => {
                let ce = tape.cross_entropy(class_logits, &classes)?;
                let mae = tape.mae(reg, &targets)?;
                record.ce = Some(scalar(tape, ce));
                record.mae = Some(scalar(tape, mae));
                let weighted = tape.affine(mae, self.cfg.lambda, 0.0)?;
                tape.add(ce, weighted)?
            }
            Heads::Classifier => {
                let ce = tape.cross_entropy(class_logits, &classes)?;
                record.ce = Some(scalar(tape, ce));
                ce
            }
            Heads::Regressor => {
                let mae = tape.mae(reg, &targets)?;
                record.mae = Some(scalar(tape, mae));
                mae
            }
        })
    }

    fn supervised_step(&mut self, labeled: &LabeledPool, batch: &[usize], record: &mut LossRecord) -> Result<(), Failure> {
        let mut tape = Tape::new();
        let x = tape.constant(labeled.images(batch));
        let out = self.recognizer(&mut tape, x, true)?;
        let loss = self.supervised_loss(&mut tape, out.class_logits, out.reg_logits, labeled, batch, record)?;
        let grads = tape.backward(loss)?;
        check_grads(&grads)?;
        self.update(Optimizer::Recognizer, &grads)?;
        self.store.apply_running_updates(&out.running, BN_MOMENTUM)?;
        Ok(())
    }

    fn adversarial_step(
        &mut self,
        labeled: &LabeledPool,
        batch: &[usize],
        xu: fenestra_nn::Tensor<f32>,
        z: fenestra_nn::Tensor<f32>,
        record: &mut LossRecord,
    ) -> Result<(), Failure> {
        // Generator pass, kept for the generator update below. The
        // recognizer update only sees its output as a constant.
        let mut gen_tape = Tape::new();
        let zv = gen_tape.constant(z);
        let (xg_var, gen_running) =
            model::generator_forward(&mut gen_tape, &self.store, zv, &[Group::G], NormMode::Train { update_running: true })?;
        let xg = gen_tape.value(xg_var).clone();

        // Recognizer update with the generator frozen.
        let n_l = batch.len();
        let n_u = xu.rows();
        let mut tape = Tape::new();
        let xl = labeled.images(batch);
        let mut real = xl.into_data();
        real.extend_from_slice(xu.data());
        let real = fenestra_nn::Tensor::new(&[n_l + n_u, 3, model::PATCH_SIZE, model::PATCH_SIZE], real)?;
        let xr = tape.constant(real);
        let real_out = self.recognizer(&mut tape, xr, true)?;
        let xgc = tape.constant(xg);
        let fake_out = self.recognizer(&mut tape, xgc, false)?;

        let lc_l = tape.slice_rows(real_out.class_logits, 0, n_l)?;
        let lr_l = tape.slice_rows(real_out.reg_logits, 0, n_l)?;
        let supervised = self.supervised_loss(&mut tape, lc_l, lr_l, labeled, batch, record)?;
        let (bce_real, bce_fake) = if self.objective.heads == Heads::Regressor {
            let du = real_out.dhead_logit.ok_or_else(|| Failure::Other(TrainError::Mode("missing discriminator head".into())))?;
            let dg = fake_out.dhead_logit.expect("same store");
            let du = tape.slice_rows(du, n_l, n_u)?;
            (tape.bce_with_logit(du, true)?, tape.bce_with_logit(dg, false)?)
        } else {
            let lc_u = tape.slice_rows(real_out.class_logits, n_l, n_u)?;
            (tape.bce_real_probability(lc_u, true)?, tape.bce_real_probability(fake_out.class_logits, false)?)
        };
        record.bce_real = Some(scalar(&tape, bce_real));
        record.bce_fake = Some(scalar(&tape, bce_fake));
        let total = tape.add(supervised, bce_real)?;
        let total = tape.add(total, bce_fake)?;
        let grads = tape.backward(total)?;
        check_grads(&grads)?;
        self.update(Optimizer::Recognizer, &grads)?;
        self.store.apply_running_updates(&real_out.running, BN_MOMENTUM)?;

        // Generator update against the refreshed, now frozen, recognizer.
        let xu_var = gen_tape.constant(xu);
        let fu = model::network_forward(&mut gen_tape, &self.store, xu_var, &[], NormMode::Train { update_running: false })?;
        let fg = model::network_forward(&mut gen_tape, &self.store, xg_var, &[], NormMode::Train { update_running: false })?;
        let gen_loss = gen_tape.feature_matching(fg.features, fu.features)?;
        record.gen = Some(scalar(&gen_tape, gen_loss));
        let grads = gen_tape.backward(gen_loss)?;
        check_grads(&grads)?;
        self.update(Optimizer::Generator, &grads)?;
        self.store.apply_running_updates(&gen_running, BN_MOMENTUM)?;
        Ok(())
    }
}
