//! SGD training with a step-decay schedule, evaluation reports and the
//! ablation grid.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, SampleRecord};
use crate::diff::Tape;
use crate::embedding::{enforce_norm_constraint, EmbeddingLossKind};
use crate::error::{Error, Result};
use crate::model::{forward, fully_convolutional_inference, losses, Model, ModelConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::posegraph::{apply_bn_updates, Mode, PoseBackboneKind};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, base_lr: 0.01, decay_factor: 0.1, decay_every: 10, batch_size: 8, seed: 0, model: ModelConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("epochs, batch_size and decay_every must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr = {} must be > 0", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor = {} must lie in (0, 1]", self.decay_factor)));
        }
        self.model.validate()
    }
}

/// `base_lr · decay_factor^⌊epoch / decay_every⌋`, evaluated as a division by
/// the reciprocal power so a decade schedule lands exactly on 1e-3, 1e-4, ….
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as f64;
    cfg.base_lr / libm::pow(1.0 / cfg.decay_factor, k)
}

/// `p ← p − lr·g` for every trainable parameter with a gradient, then the
/// projections are rescaled to unit Frobenius norm. A non-finite gradient
/// rejects the whole step before anything is changed.
pub fn sgd_step(store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
    if grads.grads.len() != store.len() {
        return Err(Error::Config(format!("{} gradients for {} parameters", grads.grads.len(), store.len())));
    }
    for (e, g) in store.entries().iter().zip(&grads.grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::shape("sgd_step", format!("{}: {:?} vs {:?}", e.name, g.shape(), e.value.shape())));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }
    }
    let updates: Vec<(String, crate::diff::Tensor)> = store
        .entries()
        .iter()
        .zip(&grads.grads)
        .filter(|(e, _)| e.trainable)
        .filter_map(|(e, g)| g.as_ref().map(|g| (e, g)))
        .map(|(e, g)| {
            let data = e.value.data().iter().zip(g.data()).map(|(p, g)| p - lr * g).collect();
            crate::diff::Tensor::new(e.value.shape(), data).map(|t| (e.name.clone(), t))
        })
        .collect::<Result<_>>()?;
    for (name, value) in updates {
        store.set(&name, value)?;
    }
    enforce_norm_constraint(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub classification: f64,
    pub embedding: f64,
    pub attention: f64,
    /// Weights the total was assembled with.
    pub lambda1: f64,
    pub lambda2: f64,
    /// Frobenius norms of the projections after the step.
    pub projection_norms: [f64; 2],
}

impl StepRecord {
    pub fn decomposition_error(&self) -> f64 {
        let recombined = self.lambda1 * self.classification + (1.0 - self.lambda1) * self.embedding + self.lambda2 * self.attention;
        libm::fabs(self.total - recombined)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub classification: f64,
    pub embedding: f64,
    pub attention: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn max_decomposition_error(&self) -> f64 {
        self.steps.iter().map(StepRecord::decomposition_error).fold(0.0, f64::max)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place on `data` and returns the loss history.
pub fn train_loop(model: &mut Model, data: &[SampleRecord], cfg: &TrainConfig) -> Result<History> {
    train_loop_with(model, data, cfg, |_| {})
}

/// As [`train_loop`], calling `on_epoch` after every epoch.
pub fn train_loop_with(
    model: &mut Model,
    data: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|s| s.label >= model.config.classes) {
        return Err(Error::Data(format!("sample {} has label {} but the model has {} classes", bad.id, bad.label, model.config.classes)));
    }
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(1 << 63 | epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 4];
        let mut correct = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let (video, poses, labels) = make_batch(&batch, model.config.t_p)?;
            let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seed);
            dropout.set_stream((epoch as u64) << 32 | b as u64);
            let mut tape = Tape::new();
            let params = model.params.bind(&mut tape, true);
            let out = forward(&mut tape, model, &params, &video, &poses, Mode::Train, Some(&mut dropout))?;
            let terms = losses(&mut tape, model, &out, &labels)?;
            let mut grads = tape.backward(terms.total)?;
            let grads = ParamGrads { grads: params.collect(&mut grads) };
            let probs = tape.value(out.probs);
            correct += probs.data().chunks(model.config.classes).zip(&labels).filter(|(p, &l)| argmax(p) == l).count();
            let values = [terms.total, terms.classification, terms.embedding, terms.attention].map(|v| tape.value(v).item());
            let bn = out.bn_updates();
            drop(tape);
            sgd_step(&mut model.params, &grads, lr)?;
            apply_bn_updates(&mut model.params, &bn)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * batch.len() as f64;
            }
            let norms = [crate::embedding::VISUAL_PROJECTION, crate::embedding::POSE_PROJECTION]
                .map(|n| model.params.get(n).map_or(0.0, |t| t.frobenius_norm()));
            history.steps.push(StepRecord {
                epoch,
                step,
                lr,
                total: values[0],
                classification: values[1],
                embedding: values[2],
                attention: values[3],
                lambda1: model.config.effective_lambda1(),
                lambda2: model.config.lambda2,
                projection_norms: norms,
            });
            step += 1;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            total: sums[0] / n,
            classification: sums[1] / n,
            embedding: sums[2] / n,
            attention: sums[3] / n,
            train_acc: correct as f64 / n,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.0e} loss {:.4} (ce {:.4}, emb {:.4}, att {:.3}) train acc {:.3}",
            record.total,
            record.classification,
            record.embedding,
            record.attention,
            record.train_acc
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes with no test sample.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_predictions(classes: usize, predictions: Vec<Prediction>) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for p in &predictions {
            confusion[p.label][p.predicted] += 1;
        }
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        let hits: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let accuracy = if predictions.is_empty() { 0.0 } else { hits as f64 / predictions.len() as f64 };
        Self { accuracy, per_class, confusion, predictions }
    }

    /// Accuracy over the samples whose label is `a` or `b`.
    pub fn pair_accuracy(&self, a: usize, b: usize) -> Option<f64> {
        let pair: Vec<&Prediction> = self.predictions.iter().filter(|p| p.label == a || p.label == b).collect();
        (!pair.is_empty()).then(|| pair.iter().filter(|p| p.predicted == p.label).count() as f64 / pair.len() as f64)
    }
}

/// Scores every sample with fully-convolutional inference (running batch-norm
/// statistics, no dropout); ties go to the lowest class index.
pub fn evaluate(model: &Model, data: &[SampleRecord], batch_size: usize) -> Result<EvalReport> {
    let k = model.config.classes;
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&SampleRecord> = chunk.iter().collect();
        if let Some(bad) = batch.iter().find(|s| s.label >= k) {
            return Err(Error::Data(format!("sample {} has label {} but the model has {k} classes", bad.id, bad.label)));
        }
        let (video, poses, _) = make_batch(&batch, model.config.t_p)?;
        let probs = fully_convolutional_inference(model, &video, &poses)?;
        for (s, row) in batch.iter().zip(probs.data().chunks(k)) {
            predictions.push(Prediction { id: s.id.clone(), label: s.label, predicted: argmax(row), probs: row.to_vec() });
        }
    }
    Ok(EvalReport::from_predictions(k, predictions))
}

/// One model configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub attention: bool,
    pub embedding: bool,
    pub pose_backbone_kind: PoseBackboneKind,
    pub coupler: bool,
    pub loss: EmbeddingLossKind,
}

impl AblationVariant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            attention_enabled: self.attention,
            embedding_enabled: self.embedding,
            pose_backbone_kind: self.pose_backbone_kind,
            coupler_enabled: self.coupler,
            embedding_loss_kind: self.loss,
            ..base.clone()
        }
    }
}

fn variant(attention: bool, embedding: bool, kind: PoseBackboneKind, coupler: bool, loss: EmbeddingLossKind) -> AblationVariant {
    let name = if !attention {
        "backbone".to_string()
    } else {
        let kind = match kind {
            PoseBackboneKind::Gcn => "gcn",
            PoseBackboneKind::Recurrent => "lstm",
        };
        let coupling = if coupler { "coupled" } else { "dissociated" };
        let emb = if embedding { loss.name() } else { "noemb" };
        format!("{kind}-{coupling}-{emb}")
    };
    AblationVariant { name, attention, embedding, pose_backbone_kind: kind, coupler, loss }
}

/// Backbone alone; attention without embedding for each pose backbone and
/// coupling choice; attention with embedding for each of those and each loss.
pub fn ablation_grid() -> Vec<AblationVariant> {
    let mut grid = vec![variant(false, false, PoseBackboneKind::Gcn, true, EmbeddingLossKind::Ne)];
    for kind in [PoseBackboneKind::Gcn, PoseBackboneKind::Recurrent] {
        for coupler in [true, false] {
            grid.push(variant(true, false, kind, coupler, EmbeddingLossKind::Ne));
            for loss in EmbeddingLossKind::ALL {
                grid.push(variant(true, true, kind, coupler, loss));
            }
        }
    }
    grid
}

pub fn find_variant(name: &str) -> Option<AblationVariant> {
    ablation_grid().into_iter().find(|v| v.name == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    /// Test accuracy and the reversed-pair accuracy, or the failure message.
    pub outcome: core::result::Result<(f64, Option<f64>), String>,
}

/// Trains and evaluates every `(variant, seed)` cell. A failing cell is
/// recorded and the grid continues.
pub fn ablate(
    train: &[SampleRecord],
    test: &[SampleRecord],
    base: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    pair: (usize, usize),
    mut on_cell: impl FnMut(&AblationCell),
) -> Result<Vec<AblationCell>> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("the ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut cells = Vec::new();
    for v in variants {
        for &seed in seeds {
            let cfg = TrainConfig { seed, model: v.apply(&base.model), ..base.clone() };
            let outcome = run_cell(train, test, &cfg, pair).map_err(|e| e.to_string());
            let cell = AblationCell { variant: v.name.clone(), seed, outcome };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

fn run_cell(train: &[SampleRecord], test: &[SampleRecord], cfg: &TrainConfig, pair: (usize, usize)) -> Result<(f64, Option<f64>)> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    train_loop(&mut model, train, cfg)?;
    let report = evaluate(&model, test, cfg.batch_size)?;
    Ok((report.accuracy, report.pair_accuracy(pair.0, pair.1)))
}

/// Mean and sample standard deviation of the successful cells of a variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub mean: f64,
    pub std: f64,
    pub pair_mean: Option<f64>,
}

pub fn summarize(cells: &[AblationCell]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for c in cells {
        if !names.contains(&c.variant.as_str()) {
            names.push(&c.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == name).collect();
            let ok: Vec<(f64, Option<f64>)> = mine.iter().filter_map(|c| c.outcome.clone().ok()).collect();
            let n = ok.len() as f64;
            let mean = if ok.is_empty() { f64::NAN } else { ok.iter().map(|o| o.0).sum::<f64>() / n };
            let std = if ok.len() < 2 {
                0.0
            } else {
                libm::sqrt(ok.iter().map(|o| (o.0 - mean) * (o.0 - mean)).sum::<f64>() / (n - 1.0))
            };
            let pairs: Vec<f64> = ok.iter().filter_map(|o| o.1).collect();
            let pair_mean = (!pairs.is_empty()).then(|| pairs.iter().sum::<f64>() / pairs.len() as f64);
            VariantSummary { variant: name.into(), runs: ok.len(), failures: mine.len() - ok.len(), mean, std, pair_mean }
        })
        .collect()
}
