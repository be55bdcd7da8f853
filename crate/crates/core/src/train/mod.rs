//! Two-stage training: each expert alone on its superclass, then the guidance
//! gate on the fused output. Also evaluation over a dataset.

mod adam;
mod metrics;
mod plateau;

pub use adam::Adam;
pub use metrics::{confusion_matrix, ClassMetrics, ConfusionCounts, MetricsReport};
pub use plateau::PlateauScheduler;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{choose_subjects, Activity, Dataset, Superclass, Window};
use crate::error::{Error, Result};
use crate::model::{argmax, Architecture, FusionModel, Guidance, Pathway};
use crate::nn::{Mode, Module, TensorRole};
use crate::tensor::{Graph, Tensor, Var, NLL_EPS};

/// Windows per forward pass when evaluating.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stage II only: keep expert parameters fixed and train the gate alone.
    pub freeze_experts: bool,
    /// Fraction of training subjects held out for validation.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 100,
            lr: 1e-3,
            seed: 42,
            freeze_experts: true,
            val_fraction: 0.1,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            epochs: 50,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_acc,lr";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.4},{:e}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.lr
        )
    }
}

/// A model that maps a batch to class probabilities.
pub trait Objective: Module + Clone + Sync {
    /// Probabilities [batch, classes]. `train` selects the training-time forward.
    fn probs(&self, g: &mut Graph, x: Var, train: bool) -> Result<Var>;
}

impl Objective for Pathway {
    fn probs(&self, g: &mut Graph, x: Var, train: bool) -> Result<Var> {
        self.forward(g, x, if train { Mode::Train } else { Mode::Eval })
    }
}

/// The fused model as trained in Stage II.
#[derive(Clone, Debug)]
pub struct FusionStage {
    pub model: FusionModel,
    pub freeze_experts: bool,
}

impl Objective for FusionStage {
    fn probs(&self, g: &mut Graph, x: Var, train: bool) -> Result<Var> {
        let guidance = if train { Mode::Train } else { Mode::Eval };
        let experts = if train && !self.freeze_experts { Mode::Train } else { Mode::Eval };
        Ok(self.model.forward(g, x, experts, guidance)?.probs)
    }
}

impl Module for FusionStage {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.model.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.model.visit_mut(f)
    }
}

/// Windows paired with class indices.
#[derive(Clone, Debug)]
pub struct Labeled {
    signals: Vec<Tensor>,
    targets: Vec<usize>,
}

impl Labeled {
    pub fn new(windows: &[Window], classes: &[Activity]) -> Result<Self> {
        let targets = windows
            .iter()
            .map(|w| {
                classes.iter().position(|&c| c == w.label).ok_or_else(|| {
                    Error::Data(format!("window label {} is not among the model classes {classes:?}", w.label))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Labeled {
            signals: windows.iter().map(|w| w.signal.clone()).collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Stacks the selected windows into `[batch, channels, len]`.
    pub fn batch_inputs(&self, idx: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = idx.iter().map(|&i| &self.signals[i]).collect();
        Tensor::stack(&items)
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.batch_inputs(idx)?, idx.iter().map(|&i| self.targets[i]).collect()))
    }
}

/// Eval-mode probability rows for every window, computed in parallel chunks
/// and concatenated in order.
pub fn predict_probs<M: Objective>(model: &M, data: &Labeled) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<Vec<f64>>> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, _) = data.batch(chunk)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let p = model.probs(&mut g, xv, false)?;
            let t = g.value(p);
            let n = t.shape()[1];
            Ok(t.data().chunks_exact(n).map(<[f64]>::to_vec).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean negative log-likelihood and accuracy in eval mode.
pub fn loss_and_accuracy<M: Objective>(model: &M, data: &Labeled) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let probs = predict_probs(model, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &t) in probs.iter().zip(data.targets()) {
        loss -= (row[t] + NLL_EPS).ln();
        correct += usize::from(argmax(row) == t);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Holds out `fraction` of the subjects (at least one when there are two or
/// more subjects) for validation. With fewer than two subjects, or a zero
/// fraction, the training data doubles as validation data.
pub fn validation_split(d: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let subjects = d.subjects();
    if fraction <= 0.0 || subjects.len() < 2 {
        return (d.clone(), d.clone());
    }
    let k = ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len() - 1);
    let (val, _) = choose_subjects(&subjects, k, seed);
    let train = d.filter(|w| val.binary_search(&w.subject).is_err());
    let held = d.filter(|w| val.binary_search(&w.subject).is_ok());
    (train, held)
}

/// Mini-batch Adam loop with plateau scheduling and best-validation snapshots.
pub struct Trainer<M: Objective> {
    model: M,
    train: Labeled,
    val: Labeled,
    cfg: TrainConfig,
    batch: usize,
    adam: Adam,
    scheduler: PlateauScheduler,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochLog>,
    best: Option<(f64, usize, M)>,
}

impl<M: Objective> Trainer<M> {
    pub fn new(model: M, train: Labeled, val: Labeled, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.len() < 2 {
            return Err(Error::Data(format!(
                "need at least two training windows, have {}",
                train.len()
            )));
        }
        if val.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(11);
        Ok(Trainer {
            batch: cfg.batch_size.min(train.len()),
            model,
            train,
            val,
            cfg: cfg.clone(),
            adam: Adam::default(),
            scheduler: PlateauScheduler::new(cfg.lr),
            rng,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn train_data(&self) -> &Labeled {
        &self.train
    }

    /// One pass over the shuffled training windows; the trailing partial batch is dropped.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.scheduler.lr();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks_exact(self.batch) {
            let (x, y) = self.train.batch(idx)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let p = self.model.probs(&mut g, xv, true)?;
            let loss = g.nll(p, &y)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Contract(format!("training loss became {value} in epoch {}", self.epoch)));
            }
            let grads = g.backward(loss)?;
            self.adam.step_module(&mut self.model, &grads, lr)?;
            self.model.apply_stat_updates(g.stat_updates());
            total += value;
            batches += 1;
        }
        let (val_loss, val_acc) = loss_and_accuracy(&self.model, &self.val)?;
        self.scheduler.update(val_loss);
        if self.best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            self.best = Some((val_loss, self.epoch, self.model.clone()));
        }
        let log = EpochLog {
            epoch: self.epoch,
            train_loss: total / batches as f64,
            val_loss,
            val_acc,
            lr,
        };
        self.history.push(log);
        self.epoch += 1;
        Ok(log)
    }

    /// Runs the configured number of epochs, reporting each.
    pub fn run(&mut self, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
        }
        Ok(())
    }

    /// The snapshot with the lowest validation loss.
    pub fn finish(self) -> TrainOutcome<M> {
        let (best_val_loss, best_epoch, model) = self
            .best
            .unwrap_or((f64::INFINITY, 0, self.model));
        TrainOutcome {
            model,
            history: self.history,
            best_epoch,
            best_val_loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// A trained single-superclass pathway.
#[derive(Clone, Debug)]
pub struct Expert {
    pub superclass: Superclass,
    pub labels: Vec<Activity>,
    pub arch: Architecture,
    pub pathway: Pathway,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Conditions worth reporting that did not stop training.
    pub notes: Vec<String>,
}

fn expert_name(which: Superclass) -> &'static str {
    match which {
        Superclass::Static => "static",
        Superclass::Dynamic => "dynamic",
    }
}

/// Builds the Stage I trainer for one superclass.
pub fn stage1_trainer(
    data: &Dataset,
    which: Superclass,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(Trainer<Pathway>, Vec<Activity>, Vec<String>)> {
    arch.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("no {which} windows to train on")));
    }
    if let Some(w) = data.windows.iter().find(|w| w.superclass() != which) {
        return Err(Error::Contract(format!("{which} expert given a {} window", w.label)));
    }
    let labels = data.kind.labels_of(which);
    let mut notes = Vec::new();
    let present: std::collections::BTreeSet<Activity> = data.windows.iter().map(|w| w.label).collect();
    if present.len() < 2 {
        notes.push(format!("{which} training data holds a single class: {present:?}"));
    }
    let (train, val) = validation_split(data, cfg.val_fraction, cfg.seed);
    let pathway = Pathway::new(expert_name(which), arch.pathway(which), cfg.seed)?;
    let trainer = Trainer::new(
        pathway,
        Labeled::new(&train.windows, &labels)?,
        Labeled::new(&val.windows, &labels)?,
        cfg,
    )?;
    Ok((trainer, labels, notes))
}

/// Stage I: trains one expert on windows of its superclass only.
pub fn train_stage1(
    data: &Dataset,
    which: Superclass,
    arch: &Architecture,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Expert> {
    let (mut trainer, labels, notes) = stage1_trainer(data, which, arch, cfg)?;
    trainer.run(on_epoch)?;
    let out = trainer.finish();
    Ok(Expert {
        superclass: which,
        labels,
        arch: arch.clone(),
        pathway: out.model,
        history: out.history,
        best_epoch: out.best_epoch,
        notes,
    })
}

/// Combines two experts with a freshly initialized gate.
pub fn assemble_experts(static_expert: &Expert, dynamic_expert: &Expert, seed: u64) -> Result<FusionModel> {
    if static_expert.superclass != Superclass::Static || dynamic_expert.superclass != Superclass::Dynamic {
        return Err(Error::Incompatible("experts given in the wrong roles".into()));
    }
    let (a, b) = (&static_expert.arch, &dynamic_expert.arch);
    if a.in_channels != b.in_channels || a.window_len != b.window_len {
        return Err(Error::Incompatible(format!(
            "experts take different inputs: {}x{} and {}x{}",
            a.in_channels, a.window_len, b.in_channels, b.window_len
        )));
    }
    let arch = Architecture {
        static_path: static_expert.pathway.config.clone(),
        dynamic_path: dynamic_expert.pathway.config.clone(),
        ..a.clone()
    };
    let guidance = Guidance::new(&arch.guidance, seed)?;
    FusionModel::assemble(
        arch,
        static_expert.pathway.clone(),
        dynamic_expert.pathway.clone(),
        guidance,
        &static_expert.labels,
        &dynamic_expert.labels,
    )
}

/// Builds the Stage II trainer over the full (both-superclass) dataset.
pub fn stage2_trainer(
    data: &Dataset,
    static_expert: &Expert,
    dynamic_expert: &Expert,
    cfg: &TrainConfig,
) -> Result<Trainer<FusionStage>> {
    if data.is_empty() {
        return Err(Error::Data("no windows to train on".into()));
    }
    let model = assemble_experts(static_expert, dynamic_expert, cfg.seed)?;
    let expected = data.kind.class_order();
    if model.class_order() != expected.as_slice() {
        return Err(Error::Incompatible(format!(
            "experts cover {:?}, {} needs {expected:?}",
            model.class_order(),
            data.kind
        )));
    }
    let (train, val) = validation_split(data, cfg.val_fraction, cfg.seed);
    let classes = model.class_order().to_vec();
    Trainer::new(
        FusionStage {
            model,
            freeze_experts: cfg.freeze_experts,
        },
        Labeled::new(&train.windows, &classes)?,
        Labeled::new(&val.windows, &classes)?,
        cfg,
    )
}

/// Stage II: trains the gate (and the experts too when not frozen) on the fused loss.
pub fn train_stage2(
    data: &Dataset,
    static_expert: &Expert,
    dynamic_expert: &Expert,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<FusionModel>> {
    let mut trainer = stage2_trainer(data, static_expert, dynamic_expert, cfg)?;
    trainer.run(on_epoch)?;
    let out = trainer.finish();
    Ok(TrainOutcome {
        model: out.model.model,
        history: out.history,
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
    })
}

/// Fused predictions for a dataset.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub probs: Vec<Vec<f64>>,
    pub gates: Vec<f64>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

pub fn predict_dataset(model: &FusionModel, data: &Dataset) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty test set".into()));
    }
    let labeled = Labeled::new(&data.windows, model.class_order()).map_err(|e| match e {
        Error::Data(m) => Error::Incompatible(m),
        other => other,
    })?;
    let idx: Vec<usize> = (0..labeled.len()).collect();
    let chunks: Vec<(Vec<Vec<f64>>, Vec<f64>)> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, _) = labeled.batch(chunk)?;
            let pv = model.predict_batch(&x)?;
            let n = pv.probs.shape()[1];
            let rows = pv.probs.data().chunks_exact(n).map(<[f64]>::to_vec).collect();
            Ok((rows, pv.gate.into_data()))
        })
        .collect::<Result<_>>()?;
    let mut probs = Vec::with_capacity(labeled.len());
    let mut gates = Vec::with_capacity(labeled.len());
    for (p, g) in chunks {
        probs.extend(p);
        gates.extend(g);
    }
    let predicted = probs.iter().map(|r| argmax(r)).collect();
    Ok(Predictions {
        probs,
        gates,
        predicted,
        truth: labeled.targets,
    })
}

pub fn evaluate(model: &FusionModel, test: &Dataset) -> Result<MetricsReport> {
    let p = predict_dataset(model, test)?;
    let labels = model.class_order().iter().map(|a| a.abbrev().to_string()).collect();
    MetricsReport::from_predictions(&p.predicted, &p.truth, labels)
}
