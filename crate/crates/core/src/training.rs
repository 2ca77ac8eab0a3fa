//! Mini-batch training, confusion-matrix metrics and k-fold cross-validation
//! over an in-memory [`PatchSet`].

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_norm_stats, kfold_split, NormStats, PatchSet};
use crate::error::{Error, Result};
use crate::models::{DISCOVERY_CLASSES, IMPACT_CLASSES};
use crate::nn::{self, Mode, NetworkSpec, OptimizerConfig, OptimizerState, Tensor, WeightSet};

/// Which label of a patch record a network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Discovery,
    Impact,
}

impl Task {
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Task::Discovery => &DISCOVERY_CLASSES,
            Task::Impact => &IMPACT_CLASSES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "discovery" => Ok(Task::Discovery),
            "impact" => Ok(Task::Impact),
            other => Err(format!("unknown task {other:?} (discovery|impact)")),
        }
    }
}

/// Indices of the usable records and their class ids for `task`. Impact
/// training skips records whose impact is unknown.
pub fn task_labels(set: &PatchSet, task: Task) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::new();
    let mut cls = Vec::new();
    for (i, r) in set.manifest.records.iter().enumerate() {
        let c = match task {
            Task::Discovery => Some(r.label.index()),
            Task::Impact => r.impact.map(|c| c.index()),
        };
        if let Some(c) = c {
            idx.push(i);
            cls.push(c);
        }
    }
    (idx, cls)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Folds for cross-validation; below 2 trains once on everything.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Usage("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Counts indexed `[actual][predicted]`. Entries are f64 so fold averages
/// stay representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let c = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0.0; c]; c],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<f64>>) -> Result<Self> {
        let c = classes.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension(format!("confusion matrix must be {c}x{c}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn add(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1.0;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> f64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> f64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            return 0.0;
        }
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum::<f64>() / t
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.col_sum(c))
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.row_sum(c))
    }

    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        ratio(2.0 * p * r, p + r)
    }

    pub fn f1_per_class(&self) -> Vec<f64> {
        (0..self.classes.len()).map(|c| self.f1(c)).collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f = self.f1_per_class();
        f.iter().sum::<f64>() / f.len() as f64
    }

    /// Element-wise mean of equally shaped matrices.
    pub fn mean(ms: &[ConfusionMatrix]) -> Result<ConfusionMatrix> {
        let first = ms.first().ok_or_else(|| Error::Input("no matrices to average".into()))?;
        let mut out = ConfusionMatrix::new(first.classes.clone());
        for m in ms {
            if m.classes.len() != out.classes.len() {
                return Err(Error::Dimension("matrices of different class counts".into()));
            }
            for (o, r) in out.counts.iter_mut().zip(&m.counts) {
                for (a, b) in o.iter_mut().zip(r) {
                    *a += b;
                }
            }
        }
        let n = ms.len() as f64;
        out.counts.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Counts rounded to one decimal, for reporting averages.
    pub fn rounded(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| r.iter().map(|v| (v * 10.0).round() / 10.0).collect())
            .collect()
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_acc: f64,
    pub train_loss: f64,
    /// NaN when training without a validation split.
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_acc", "val_acc", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_acc.to_string(),
                e.val_acc.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: WeightSet<f32>,
    pub stats: NormStats,
    pub history: TrainHistory,
    /// Final-epoch validation result, when a validation split was given.
    pub validation: Option<Evaluation>,
}

fn output_classes(spec: &NetworkSpec, set: &PatchSet) -> Result<usize> {
    let shape = spec.output_shape(set.size(), set.size())?;
    let dims = shape.dims();
    if dims.iter().rev().skip(1).any(|&d| d != 1) {
        return Err(Error::Dimension(format!(
            "network maps a {}-px patch to {:?}, expected a single distribution",
            set.size(),
            dims
        )));
    }
    Ok(*dims.last().unwrap())
}

fn make_batch(set: &PatchSet, stats: &NormStats, items: &[usize]) -> Result<Tensor<f32>> {
    let s = set.size();
    let per = s * s * set.bands();
    let mut data = Vec::with_capacity(items.len() * per);
    for &i in items {
        let start = data.len();
        data.extend_from_slice(&set.patches[i]);
        stats.apply(&mut data[start..]);
    }
    Tensor::from_vec(&[items.len(), s, s, set.bands()], data)
}

fn one_hot(labels: &[usize], classes: usize, shape: &[usize]) -> Result<Tensor<f32>> {
    let mut t = vec![0.0f32; labels.len() * classes];
    for (k, &c) in labels.iter().enumerate() {
        t[k * classes + c] = 1.0;
    }
    Tensor::from_vec(shape, t)
}

fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode metrics on `items` (indices into `set`) with class ids `labels`.
pub fn evaluate(
    spec: &NetworkSpec,
    weights: &WeightSet<f32>,
    set: &PatchSet,
    stats: &NormStats,
    items: &[usize],
    labels: &[usize],
    class_names: &[String],
    batch_size: usize,
) -> Result<Evaluation> {
    let classes = output_classes(spec, set)?;
    if class_names.len() != classes {
        return Err(Error::Dimension(format!("{} class names for a {classes}-way output", class_names.len())));
    }
    let mut cm = ConfusionMatrix::new(class_names.to_vec());
    let mut loss_sum = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (chunk, lab) in items.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let x = make_batch(set, stats, chunk)?;
        let trace = nn::forward(spec, weights, &x, Mode::Eval, &mut rng)?;
        let out = trace.output_data();
        let targets = one_hot(lab, classes, &[out.len()])?;
        loss_sum += nn::ops::cross_entropy(out, targets.data(), classes) as f64 * chunk.len() as f64;
        for (p, &y) in out.chunks_exact(classes).zip(lab) {
            cm.add(y, argmax(p));
        }
    }
    let n = items.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: cm.accuracy(),
        loss: loss_sum / n,
        f1: cm.f1_per_class(),
        confusion: cm,
    })
}

/// Glorot initialization with the last parametric layer zeroed, so an
/// untrained network predicts the uniform distribution. Hidden layers start
/// learning from the second step.
pub fn initial_weights(spec: &NetworkSpec, seed: u64) -> Result<WeightSet<f32>> {
    let mut w = WeightSet::<f32>::glorot(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Some(last) = w.layers.iter_mut().rev().find(|l| !l.is_empty()) {
        for t in last.iter_mut() {
            t.data_mut().fill(0.0);
        }
    }
    Ok(w)
}

/// Train from [`initial_weights`] on `train` (with class ids
/// `train_labels`), normalizing with statistics of the training items only.
/// Validation, when given, is evaluated after every epoch.
pub fn train(
    spec: &NetworkSpec,
    set: &PatchSet,
    train: (&[usize], &[usize]),
    validation: Option<(&[usize], &[usize])>,
    class_names: &[String],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (items, labels) = train;
    if items.is_empty() || items.len() != labels.len() {
        return Err(Error::Input("empty or mislabeled training split".into()));
    }
    let classes = output_classes(spec, set)?;
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::Input(format!("label {bad} outside the {classes}-way output")));
    }
    let stats = compute_norm_stats(set, items)?;
    let mut weights = initial_weights(spec, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, &weights);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd5a6_1266_f0c9_392c);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = TrainHistory::default();
    let mut last_eval = None;

    for epoch in 1..=config.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let idx: Vec<usize> = chunk.iter().map(|&k| items[k]).collect();
            let lab: Vec<usize> = chunk.iter().map(|&k| labels[k]).collect();
            let x = make_batch(set, &stats, &idx)?;
            let trace = nn::forward(spec, &weights, &x, Mode::Train, &mut drop_rng)?;
            let targets = one_hot(&lab, classes, &trace.output_shape())?;
            let (loss, grads) = nn::backward(spec, &weights, &trace, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss} at epoch {epoch}, batch {}", b + 1)));
            }
            for (p, &y) in trace.output_data().chunks_exact(classes).zip(&lab) {
                correct += (argmax(p) == y) as usize;
            }
            loss_sum += loss as f64 * idx.len() as f64;
            opt.step(&mut weights, &grads)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
        }
        let n = items.len() as f64;
        let (val_acc, val_loss) = match validation {
            Some((vi, vl)) => {
                let ev = evaluate(spec, &weights, set, &stats, vi, vl, class_names, config.batch_size)?;
                let r = (ev.accuracy, ev.loss);
                last_eval = Some(ev);
                r
            }
            None => (f64::NAN, f64::NAN),
        };
        let e = EpochStats {
            epoch,
            train_acc: correct as f64 / n,
            train_loss: loss_sum / n,
            val_acc,
            val_loss,
        };
        log::info!(
            "epoch {epoch}: train acc {:.4} loss {:.4}, val acc {:.4} loss {:.4}",
            e.train_acc,
            e.train_loss,
            e.val_acc,
            e.val_loss
        );
        history.epochs.push(e);
    }
    Ok(TrainOutcome {
        weights,
        stats,
        history,
        validation: last_eval,
    })
}

/// Loss of a freshly initialized network on its first training batch.
pub fn initial_loss(spec: &NetworkSpec, set: &PatchSet, task: Task, config: &TrainConfig) -> Result<f64> {
    let (items, labels) = task_labels(set, task);
    let classes = output_classes(spec, set)?;
    let stats = compute_norm_stats(set, &items)?;
    let weights = initial_weights(spec, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.batch_size.min(items.len());
    let x = make_batch(set, &stats, &items[..n])?;
    let trace = nn::forward(spec, &weights, &x, Mode::Eval, &mut rng)?;
    let targets = one_hot(&labels[..n], classes, &trace.output_shape())?;
    Ok(nn::ops::cross_entropy(trace.output_data(), targets.data(), classes) as f64)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub evaluation: Evaluation,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub task: Task,
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_confusion: ConfusionMatrix,
}

impl CvReport {
    /// Fold with the highest validation accuracy (lowest index on ties).
    pub fn best_fold(&self) -> &FoldResult {
        let mut best = &self.folds[0];
        for f in &self.folds[1..] {
            if f.accuracy > best.accuracy {
                best = f;
            }
        }
        best
    }

    pub fn metrics_json(&self) -> serde_json::Value {
        let m = &self.mean_confusion;
        serde_json::json!({
            "task": self.task,
            "k": self.k,
            "accuracy": self.mean_accuracy,
            "accuracy_std": self.std_accuracy,
            "f1": m.f1_per_class(),
            "macro_f1": m.macro_f1(),
            "classes": m.classes,
            "confusion_matrix": m.rounded(),
            "best_fold": self.best_fold().fold,
            "folds": self.folds.iter().map(|f| serde_json::json!({
                "fold": f.fold,
                "seed": f.seed,
                "accuracy": f.accuracy,
                "f1": f.evaluation.f1,
                "confusion_matrix": f.evaluation.confusion.counts,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn write_metrics(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.metrics_json())?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    /// Per-fold histories in one CSV, with a leading fold column.
    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fold", "epoch", "train_acc", "val_acc", "train_loss", "val_loss"])?;
        for f in &self.folds {
            for e in &f.outcome.history.epochs {
                w.write_record([
                    f.fold.to_string(),
                    e.epoch.to_string(),
                    e.train_acc.to_string(),
                    e.val_acc.to_string(),
                    e.train_loss.to_string(),
                    e.val_loss.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Stratified k-fold cross-validation. Each fold trains from its own seed
/// (`config.seed + fold`) and recomputes normalization on its training part.
/// Folds run concurrently on the current rayon pool.
pub fn cross_validate(spec: &NetworkSpec, set: &PatchSet, task: Task, config: &TrainConfig) -> Result<CvReport> {
    config.validate()?;
    if config.k < 2 {
        return Err(Error::Usage(format!("cross-validation needs k >= 2, got {}", config.k)));
    }
    let (items, labels) = task_labels(set, task);
    let split = kfold_split(&labels, config.k, config.seed)?;
    let names = task.class_names();
    let folds = (0..config.k)
        .into_par_iter()
        .map(|fold| {
            let pick = |ix: &[usize]| -> (Vec<usize>, Vec<usize>) {
                (ix.iter().map(|&k| items[k]).collect(), ix.iter().map(|&k| labels[k]).collect())
            };
            let (ti, tl) = pick(&split.train(fold));
            let (vi, vl) = pick(split.validation(fold));
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(fold as u64),
                ..config.clone()
            };
            let outcome = train(spec, set, (&ti, &tl), Some((&vi, &vl)), &names, &cfg)?;
            let evaluation = outcome.validation.clone().expect("validation split given");
            log::info!("fold {}: validation accuracy {:.4}", fold + 1, evaluation.accuracy);
            Ok(FoldResult {
                fold,
                seed: cfg.seed,
                accuracy: evaluation.accuracy,
                evaluation,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    let mats: Vec<ConfusionMatrix> = folds.iter().map(|f| f.evaluation.confusion.clone()).collect();
    Ok(CvReport {
        task,
        k: config.k,
        mean_confusion: ConfusionMatrix::mean(&mats)?,
        folds,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    })
}

/// Train once on every labeled record of `task`, without validation.
pub fn train_all(spec: &NetworkSpec, set: &PatchSet, task: Task, config: &TrainConfig) -> Result<TrainOutcome> {
    let (items, labels) = task_labels(set, task);
    train(spec, set, (&items, &labels), None, &task.class_names(), config)
}
