//! Optimizers, the training loop and evaluation metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Precision, Var};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::synth::{Split, Targets};
use crate::tensor::Tensor;
use crate::zoo::{FusionNet, TaskKind};

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Optimizer with per-parameter state, stepped in parameter order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        match self.spec {
            OptimizerSpec::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.data_mut().iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
                }
            }
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerSpec,
    pub loss: Loss,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub precision: Precision,
}

/// Classification and regression metrics; fields that do not apply (or are
/// undefined, like the correlation of a constant predictor) are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub f_macro: Option<f64>,
    pub f_per_class: Vec<f64>,
    pub mae: Option<f64>,
    pub pearson: Option<f64>,
}

impl Metrics {
    /// `(name, value)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![("loss".to_string(), self.loss)];
        if self.accuracy.is_some() {
            out.push(("accuracy".into(), self.accuracy));
            out.push(("f_macro".into(), self.f_macro));
            for (c, f) in self.f_per_class.iter().enumerate() {
                out.push((format!("f_class{c}"), Some(*f)));
            }
        }
        if self.mae.is_some() {
            out.push(("mae".into(), self.mae));
            out.push(("pearson".into(), self.pearson));
        }
        out
    }
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(pred: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// Accuracy, per-class F-score and their macro mean. A class with no true
/// positives scores F = 0.
pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Metrics {
    let cm = confusion_matrix(pred, labels, classes);
    let correct: usize = (0..classes).map(|c| cm[c][c]).sum();
    let f_per_class: Vec<f64> = (0..classes)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let actual: usize = cm[c].iter().sum();
            let predicted: usize = cm.iter().map(|row| row[c]).sum();
            if tp == 0.0 {
                return 0.0;
            }
            let precision = tp / predicted as f64;
            let recall = tp / actual as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .collect();
    Metrics {
        accuracy: Some(correct as f64 / labels.len().max(1) as f64),
        f_macro: Some(f_per_class.iter().sum::<f64>() / classes as f64),
        f_per_class,
        ..Default::default()
    }
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Metrics {
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len().max(1) as f64;
    Metrics {
        mae: Some(mae),
        pearson: pearson(pred, target),
        ..Default::default()
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn loss_node(g: &mut Graph, out: Var, targets: &Targets, loss: Loss) -> Result<Var> {
    match (loss, targets) {
        (Loss::CrossEntropy, Targets::Classes(y)) => g.cross_entropy(out, y),
        (Loss::Mse, Targets::Values(y)) => g.mse(out, y),
        (Loss::Mse, Targets::Classes(_)) | (Loss::CrossEntropy, Targets::Values(_)) => Err(Error::config(format!(
            "{loss:?} loss does not match the dataset targets"
        ))),
    }
}

fn default_loss(task: TaskKind) -> Loss {
    match task {
        TaskKind::Classification => Loss::CrossEntropy,
        TaskKind::Regression => Loss::Mse,
    }
}

/// Evaluation-mode metrics over a whole split, processed in chunks.
pub fn evaluate(model: &FusionNet, split: &Split, precision: Precision) -> Result<Metrics> {
    const CHUNK: usize = 256;
    let n = split.len();
    let mut outputs: Vec<f64> = Vec::new();
    let mut width = 1;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (inputs, _) = split.gather(&idx)?;
        let (out, _) = model.predict(&inputs, precision)?;
        width = out.shape()[1];
        outputs.extend_from_slice(out.data());
    }
    let out = Tensor::new(vec![n, width], outputs)?;
    let loss = {
        let mut g = Graph::new();
        let v = g.constant(out.clone())?;
        let l = loss_node(&mut g, v, &split.targets, default_loss(model.spec.task))?;
        g.value(l).data()[0]
    };
    let mut metrics = match &split.targets {
        Targets::Classes(y) => classification_metrics(&argmax_rows(&out), y, model.spec.outputs),
        Targets::Values(y) => regression_metrics(out.data(), y),
    };
    metrics.loss = Some(loss);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Metrics,
    pub val: Metrics,
}

/// Trains `model` in place. All randomness (data order, dropout draws)
/// derives from `seed`; initialization is the caller's. Batches of one
/// sample are skipped when the model has fusion placements, since training
/// batch norm needs two samples.
pub fn train(
    model: &mut FusionNet,
    train_split: &Split,
    val_split: &Split,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    model.spec.check_inputs(&train_split.sample_shapes())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);
    let mut opt = Optimizer::new(cfg.optimizer);
    let needs_pairs = !model.placements.is_empty();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_split.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            if needs_pairs && idx.len() < 2 {
                continue;
            }
            let (inputs, targets) = train_split.gather(idx)?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch: b },
                other => other,
            };
            let mut g = Graph::with_precision(cfg.precision);
            let (leaves, vars) = model.bind_leaves(&mut g)?;
            let xs = inputs
                .into_iter()
                .map(|t| g.constant(t))
                .collect::<Result<Vec<_>>>()
                .map_err(diverged)?;
            let out = model
                .forward(&mut g, &vars, &xs, Mode::Train, &mut dropout_rng)
                .map_err(diverged)?;
            let loss = loss_node(&mut g, out.output, &targets, cfg.loss).map_err(diverged)?;
            let grads = g.backward(loss)?;
            let grads: Vec<Vec<f64>> = leaves.iter().map(|&v| grads.wrt(&g, v)).collect();
            if grads.iter().flatten().any(|d| !d.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            opt.step(model.params_mut(), &grads)?;
            model.update_running(&out.batch_stats);
            loss_sum += g.value(loss).data()[0] * idx.len() as f64;
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::invalid("no usable training batch"));
        }
        let train_metrics = Metrics {
            loss: Some(loss_sum / seen as f64),
            ..Default::default()
        };
        let val = if val_split.is_empty() {
            Metrics::default()
        } else {
            evaluate(model, val_split, cfg.precision)?
        };
        history.push(EpochRecord {
            epoch,
            train: train_metrics,
            val,
        });
    }
    Ok(history)
}

/// Formats a metric value; undefined metrics print as `undefined`.
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.10}"),
        None => "undefined".to_string(),
    }
}

/// `epoch,split,metric,value` rows for the history plus a final test row set.
pub fn metrics_csv(history: &[EpochRecord], test: Option<&Metrics>) -> String {
    let mut s = String::from("epoch,split,metric,value\n");
    for rec in history {
        for (split, m) in [("train", &rec.train), ("val", &rec.val)] {
            if m.loss.is_none() {
                continue;
            }
            for (name, v) in m.rows() {
                let _ = writeln!(s, "{},{split},{name},{}", rec.epoch, fmt_metric(v));
            }
        }
    }
    if let Some(m) = test {
        let epoch = history.last().map_or(0, |r| r.epoch);
        for (name, v) in m.rows() {
            let _ = writeln!(s, "{epoch},test,{name},{}", fmt_metric(v));
        }
    }
    s
}
