//! Mini-batch SGD with momentum, subject-level evaluation under both
//! resampling strategies, and the binary classification metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{piece, resample_head_first, NormalizationStats, Subject};
use crate::error::{Error, Result};
use crate::model::{Cue, Inputs, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probability of the depressed class at or above which a subject is
/// predicted depressed.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            momentum: 0.9,
            batch_size: 8,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Velocity per trainable parameter; buffers have none.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Option<Vec<f64>>>,
}

impl MomentumState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params
                .entries()
                .iter()
                .map(|e| e.trainable().then(|| vec![0.0; e.tensor.numel()]))
                .collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocity.get(index)?.as_deref()
    }
}

/// `v ← μ·v + g`, then `w ← w − lr·v` for every trainable parameter, using
/// the gradients accumulated in the store.
pub fn sgd_step(
    params: &mut ParamStore,
    state: &mut MomentumState,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Config(
            "momentum state does not match the parameter set".into(),
        ));
    }
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let tensor = params.get_mut(id);
        let grad = tensor.grad().ok_or(Error::MissingGrad(name))?.to_vec();
        let v = state.velocity[id.index()]
            .as_mut()
            .expect("trainable parameters carry a velocity");
        for ((w, v), g) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *w -= cfg.learning_rate * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Score the first fixed-length window of each subject.
    #[default]
    HeadFirst,
    /// Score every fixed-length piece and average the depressed-class
    /// probabilities.
    Average,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::HeadFirst, Strategy::Average];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::HeadFirst => "head-first",
            Strategy::Average => "average",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts from `(label, prediction)` pairs with 1 as the positive class.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Self::default();
        for (label, pred) in pairs {
            match (label, pred) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (0, _) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Accuracy, recall, precision and F1. A ratio with a zero denominator is
/// reported as 0.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::EmptyDataset("metrics"));
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(c.tp + c.tn, c.total());
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy,
        recall,
        precision,
        f1,
    })
}

/// Normalized, fixed-length network inputs for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub subject_id: String,
    pub label: u8,
    /// `(T, D_cue)` per cue.
    pub frames: BTreeMap<Cue, Tensor>,
}

/// Turns raw subjects into network inputs: windows of the model length
/// are cut in raw space (zero-padded), then z-scored with statistics fit
/// on head-first windows of the training subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    length: usize,
    stats: BTreeMap<Cue, NormalizationStats>,
}

impl Preprocessor {
    pub fn fit(train: &[&Subject], cues: &[Cue], length: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training split"));
        }
        let mut stats = BTreeMap::new();
        for &cue in cues {
            let windows = train
                .iter()
                .map(|s| Ok(resample_head_first(s.cue(cue)?, length)))
                .collect::<Result<Vec<_>>>()?;
            stats.insert(cue, NormalizationStats::fit(&windows)?);
        }
        Ok(Self { length, stats })
    }

    /// Reuses statistics fit earlier, e.g. ones stored in a checkpoint.
    pub fn from_stats(length: usize, stats: BTreeMap<Cue, NormalizationStats>) -> Self {
        Self { length, stats }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn stats(&self) -> &BTreeMap<Cue, NormalizationStats> {
        &self.stats
    }

    /// The head-first window of a subject.
    pub fn head_first(&self, subject: &Subject) -> Result<Example> {
        self.window(subject, 0)
    }

    /// Every piece of a subject; cues of unequal length are aligned on the
    /// longest one.
    pub fn pieces(&self, subject: &Subject) -> Result<Vec<Example>> {
        let mut longest = 1;
        for &cue in self.stats.keys() {
            longest = longest.max(subject.cue(cue)?.len());
        }
        (0..longest.div_ceil(self.length))
            .map(|i| self.window(subject, i))
            .collect()
    }

    fn window(&self, subject: &Subject, index: usize) -> Result<Example> {
        let mut frames = BTreeMap::new();
        for (&cue, stats) in &self.stats {
            let raw = piece(subject.cue(cue)?, index, self.length);
            let z = stats.apply(&raw).map_err(|e| e.in_subject(&subject.id))?;
            frames.insert(cue, z.frames);
        }
        Ok(Example {
            subject_id: subject.id.clone(),
            label: subject.label,
            frames,
        })
    }
}

/// Stacks examples into `(batch, T, D)` inputs per cue.
pub fn stack(examples: &[&Example]) -> Result<Inputs> {
    let first = examples.first().ok_or(Error::EmptyDataset("batch"))?;
    let mut inputs = BTreeMap::new();
    for (&cue, t) in &first.frames {
        let shape = t.shape();
        let mut data = Vec::with_capacity(examples.len() * t.numel());
        for ex in examples {
            let x = ex
                .frames
                .get(&cue)
                .ok_or_else(|| Error::MissingBranch(cue.to_string()).in_subject(&ex.subject_id))?;
            if x.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: shape.to_vec(),
                    right: x.shape().to_vec(),
                }
                .in_subject(&ex.subject_id));
            }
            data.extend_from_slice(x.data());
        }
        inputs.insert(
            cue,
            Tensor::new(&[examples.len(), shape[0], shape[1]], data)?,
        );
    }
    Ok(inputs)
}

/// Eval-mode depressed-class probability of each example.
pub fn score(network: &Network, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let refs: Vec<&Example> = examples.iter().collect();
    let mut scores = Vec::with_capacity(examples.len());
    for chunk in refs.chunks(batch_size.max(1)) {
        let probs = network.predict(&stack(chunk)?)?;
        scores.extend(probs.iter().map(|p| p[1]));
    }
    Ok(scores)
}

pub fn predict_label(depressed_probability: f64) -> u8 {
    u8::from(depressed_probability >= DECISION_THRESHOLD)
}

/// Mean of piece scores, the subject-level score of the average strategy.
pub fn average_score(piece_scores: &[f64]) -> f64 {
    piece_scores.iter().sum::<f64>() / piece_scores.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectScore {
    pub subject_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub scores: Vec<SubjectScore>,
}

/// Scores each subject under `strategy` and thresholds the
/// depressed-class probability.
pub fn evaluate(
    network: &Network,
    subjects: &[&Subject],
    prep: &Preprocessor,
    strategy: Strategy,
    batch_size: usize,
) -> Result<Evaluation> {
    if subjects.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let mut examples = Vec::new();
    let mut owners = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let windows = match strategy {
            Strategy::HeadFirst => vec![prep.head_first(s)?],
            Strategy::Average => prep.pieces(s)?,
        };
        owners.extend(std::iter::repeat_n(i, windows.len()));
        examples.extend(windows);
    }
    let piece_scores = score(network, &examples, batch_size)?;
    let mut per_subject = vec![Vec::new(); subjects.len()];
    for (owner, s) in owners.into_iter().zip(piece_scores) {
        per_subject[owner].push(s);
    }
    let scores: Vec<SubjectScore> = subjects
        .iter()
        .zip(&per_subject)
        .map(|(s, p)| SubjectScore {
            subject_id: s.id.clone(),
            label: s.label,
            score: average_score(p),
        })
        .collect();
    let counts =
        ConfusionCounts::from_pairs(scores.iter().map(|s| (s.label, predict_label(s.score))));
    Ok(Evaluation {
        counts,
        metrics: compute_metrics(&counts)?,
        scores,
    })
}

/// Head-first metrics of prepared examples.
pub fn evaluate_examples(
    network: &Network,
    examples: &[Example],
    batch_size: usize,
) -> Result<(ConfusionCounts, Metrics)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let scores = score(network, examples, batch_size)?;
    let counts = ConfusionCounts::from_pairs(
        examples
            .iter()
            .zip(&scores)
            .map(|(e, &s)| (e.label, predict_label(s))),
    );
    Ok((counts, compute_metrics(&counts)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,mean_loss,train_acc,val_acc,val_f1";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.mean_loss,
            self.train_accuracy,
            opt(self.val_accuracy),
            opt(self.val_f1)
        )
    }
}

/// Append-only CSV training log.
pub struct LogWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

impl LogWriter {
    /// Creates (truncating) the log and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", record.csv_line()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// What [`train`] reports after each epoch.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    /// Set when this epoch has the best validation F1 so far (or, without
    /// validation data, on every epoch).
    pub improved: bool,
    pub network: &'a Network,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_params: ParamStore,
}

/// Trains in place. Each epoch shuffles the training examples with a
/// generator seeded once from `cfg.seed`, takes one momentum step per
/// mini-batch (the last batch may be smaller), then scores the training
/// and validation sets in eval mode. `on_epoch` may end training early by
/// returning `ControlFlow::Break`.
pub fn train(
    network: &mut Network,
    train_set: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(EpochEvent<'_>) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = MomentumState::new(network.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = network.params().clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = examples.iter().map(|e| usize::from(e.label)).collect();
            let step = network.train_step(&stack(&examples)?, &labels)?;
            if !step.loss.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            loss_sum += step.loss * batch.len() as f64;
            let params = network.params_mut();
            params.zero_grads();
            params.accumulate(&step.grads)?;
            params.apply_stat_updates(&step.stat_updates);
            sgd_step(params, &mut state, cfg)?;
        }

        let (_, train_metrics) = evaluate_examples(network, train_set, cfg.batch_size)?;
        let val = if validation.is_empty() {
            None
        } else {
            Some(evaluate_examples(network, validation, cfg.batch_size)?.1)
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            train_accuracy: train_metrics.accuracy,
            val_accuracy: val.map(|m| m.accuracy),
            val_f1: val.map(|m| m.f1),
        };
        let score = val.map_or(f64::INFINITY, |m| m.f1);
        let improved = score > best_f1 || val.is_none();
        if improved {
            best_f1 = score;
            best_epoch = epoch;
            best_params = network.params().clone();
        }
        let flow = on_epoch(EpochEvent {
            record: &record,
            improved,
            network,
        })?;
        log.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_params,
    })
}

/// Holds out a seeded, per-class fraction of the training subjects for
/// hyperparameter tuning. Returns `(fit, held_out)`.
pub fn tuning_split<'a>(
    subjects: &[&'a Subject],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<&'a Subject>, Vec<&'a Subject>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "tuning ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for label in [0, 1] {
        let mut class: Vec<&Subject> = subjects
            .iter()
            .copied()
            .filter(|s| s.label == label)
            .collect();
        class.shuffle(&mut rng);
        let n_held = (class.len() as f64 * ratio).round() as usize;
        held.extend(class.drain(..n_held));
        fit.extend(class);
    }
    fit.sort_by(|a, b| a.id.cmp(&b.id));
    held.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((fit, held))
}

/// One row of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: Strategy,
    pub split: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricsRow {
    pub fn new(strategy: Strategy, split: impl Into<String>, eval: &Evaluation) -> Self {
        let (m, c) = (eval.metrics, eval.counts);
        Self {
            strategy,
            split: split.into(),
            accuracy: m.accuracy,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
        }
    }

    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp,
            tn: self.tn,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
