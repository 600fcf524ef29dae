//! Experiment configuration and multi-seed runners.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::synth::{generate_dataset, Dataset, TaskSpec};
use crate::train::{evaluate, train, EpochRecord, Metrics, TrainConfig};
use crate::zoo::{build_fusion_network, FusionNet, FusionNetSpec, TaskKind};

/// A named network to train; baselines are networks with a baseline head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Method {
    pub name: String,
    pub network: FusionNetSpec,
    /// Modalities feeding the encoders, in order; all of them by default.
    #[serde(default)]
    pub inputs: Option<Vec<usize>>,
    /// Pick each placement's block width from `C_min/4, C_min/2, C_min` by
    /// validation accuracy before the final run.
    #[serde(default)]
    pub select_block_channels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the failing field path on schema errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| Error::Config(format!("task: {e}")))?;
        if self.methods.is_empty() {
            return Err(Error::config("no methods listed"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds listed"));
        }
        let shapes: Vec<Vec<usize>> = (0..self.task.modalities()).map(|m| self.task.sample_shape(m)).collect();
        for (i, m) in self.methods.iter().enumerate() {
            let err = |e: Error| Error::Config(format!("methods[{i}] ({}): {e}", m.name));
            m.network.validate().map_err(err)?;
            if m.network.task != TaskKind::Classification || m.network.outputs != self.task.classes {
                return Err(err(Error::config(format!(
                    "synthetic tasks need a {}-class classifier",
                    self.task.classes
                ))));
            }
            let inputs = self.method_inputs(i)?;
            let method_shapes: Vec<Vec<usize>> = inputs.iter().map(|&k| shapes[k].clone()).collect();
            m.network.check_inputs(&method_shapes).map_err(err)?;
        }
        Ok(())
    }

    /// Modality index feeding each encoder of method `i`.
    pub fn method_inputs(&self, i: usize) -> Result<Vec<usize>> {
        let m = &self.methods[i];
        let inputs = m
            .inputs
            .clone()
            .unwrap_or_else(|| (0..self.task.modalities()).collect());
        if inputs.len() != m.network.encoders.len() {
            return Err(Error::Config(format!(
                "method {}: {} inputs for {} encoders",
                m.name,
                inputs.len(),
                m.network.encoders.len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&k| k >= self.task.modalities()) {
            return Err(Error::Config(format!("method {}: no modality {bad}", m.name)));
        }
        Ok(inputs)
    }
}

/// Selects the modalities feeding a method out of a dataset.
fn project(data: &Dataset, inputs: &[usize]) -> Dataset {
    let pick = |s: &crate::synth::Split| crate::synth::Split {
        inputs: inputs.iter().map(|&k| s.inputs[k].clone()).collect(),
        targets: s.targets.clone(),
    };
    Dataset {
        spec: data.spec.clone(),
        train: pick(&data.train),
        val: pick(&data.val),
        test: pick(&data.test),
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub test: Metrics,
    pub model: FusionNet,
}

impl RunResult {
    pub fn params(&self) -> usize {
        self.model.param_count()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Candidate block widths per placement: a quarter, half and all of the
/// smallest tapped channel count (zero widths dropped, duplicates merged).
pub fn block_channel_grid(spec: &FusionNetSpec) -> Vec<Vec<usize>> {
    spec.placements
        .iter()
        .map(|pl| {
            let c_min = pl
                .taps
                .iter()
                .map(|t| spec.encoders[t.encoder].widths[t.layer])
                .min()
                .unwrap_or(0);
            let mut grid: Vec<usize> = [c_min / 4, c_min / 2, c_min].into_iter().filter(|&c| c > 0).collect();
            grid.dedup();
            grid
        })
        .collect()
}

/// `spec` with grid entry `k` (clamped to each placement's grid) as block
/// width. The reduction factor becomes its gcd with the new width.
fn with_grid_entry(spec: &FusionNetSpec, grid: &[Vec<usize>], k: usize) -> FusionNetSpec {
    let mut out = spec.clone();
    for (pl, g) in out.placements.iter_mut().zip(grid) {
        if let Some(&c) = g.get(k.min(g.len().saturating_sub(1))) {
            pl.msaf.block_channels = c;
            pl.msaf.reduction = gcd(pl.msaf.reduction, c);
        }
    }
    out
}

/// Trains one network per grid entry and returns the spec with the best
/// final validation accuracy (earliest entry on ties), plus every
/// `(entry, accuracy)` tried.
pub fn select_block_channels(
    spec: &FusionNetSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(FusionNetSpec, Vec<(usize, f64)>)> {
    let grid = block_channel_grid(spec);
    let entries = grid.iter().map(Vec::len).max().unwrap_or(0);
    if entries == 0 {
        return Ok((spec.clone(), Vec::new()));
    }
    let mut tried = Vec::with_capacity(entries);
    let mut best: Option<(f64, FusionNetSpec)> = None;
    for k in 0..entries {
        let candidate = with_grid_entry(spec, &grid, k);
        let mut model = build_fusion_network(&candidate, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let history = train(&mut model, &data.train, &data.val, cfg, seed)?;
        let acc = history.last().and_then(|h| h.val.accuracy).unwrap_or(0.0);
        tried.push((k, acc));
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, candidate));
        }
    }
    Ok((best.expect("at least one entry").1, tried))
}

/// Builds the network from `seed`, trains it and scores the test split.
pub fn run_one(spec: &FusionNetSpec, data: &Dataset, cfg: &TrainConfig, seed: u64, name: &str) -> Result<RunResult> {
    let mut model = build_fusion_network(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let history = train(&mut model, &data.train, &data.val, cfg, seed)?;
    let test = evaluate(&model, &data.test, cfg.precision)?;
    Ok(RunResult {
        method: name.to_string(),
        seed,
        history,
        test,
        model,
    })
}

/// Every method on every seed, in config order. With `jobs > 1` runs are
/// spread over a thread pool; results do not depend on the job count.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, jobs: usize) -> Result<Vec<RunResult>> {
    let mut tasks = Vec::new();
    for i in 0..cfg.methods.len() {
        let inputs = cfg.method_inputs(i)?;
        for &seed in &cfg.seeds {
            tasks.push((i, inputs.clone(), seed));
        }
    }
    let run = |(i, inputs, seed): &(usize, Vec<usize>, u64)| {
        let m = &cfg.methods[*i];
        let data = project(data, inputs);
        let spec = if m.select_block_channels {
            select_block_channels(&m.network, &data, &cfg.train, *seed)?.0
        } else {
            m.network.clone()
        };
        run_one(&spec, &data, &cfg.train, *seed, &m.name)
    };
    if jobs <= 1 {
        return tasks.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| tasks.par_iter().map(run).collect())
}

/// Generates the configured dataset and runs every method on it.
pub fn run_config(cfg: &ExperimentConfig, jobs: usize) -> Result<(Dataset, Vec<RunResult>)> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.task)?;
    let results = run_experiment(cfg, &data, jobs)?;
    Ok((data, results))
}

/// Sample mean and standard error (`s / √n`, zero for a single run).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean_accuracy: f64,
    pub stderr: f64,
    pub runs: usize,
    pub params: usize,
}

/// Per-method test accuracy summary, in first-appearance order.
pub fn summarize(results: &[RunResult]) -> Vec<MethodSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.method.as_str()) {
            names.push(&r.method);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.method == name).collect();
            let acc: Vec<f64> = runs.iter().map(|r| r.test.accuracy.unwrap_or(f64::NAN)).collect();
            let (mean, se) = mean_stderr(&acc);
            MethodSummary {
                method: name.to_string(),
                mean_accuracy: mean,
                stderr: se,
                runs: runs.len(),
                params: runs[0].params(),
            }
        })
        .collect()
}

/// Summaries sorted by descending mean accuracy; ties keep config order.
pub fn rank(mut summaries: Vec<MethodSummary>) -> Vec<MethodSummary> {
    summaries.sort_by(|a, b| b.mean_accuracy.total_cmp(&a.mean_accuracy));
    summaries
}

pub fn summary_csv(summaries: &[MethodSummary]) -> String {
    let mut s = String::from("method,mean_accuracy,stderr,runs,params\n");
    for m in summaries {
        s.push_str(&format!(
            "{},{:.10},{:.10},{},{}\n",
            m.method, m.mean_accuracy, m.stderr, m.runs, m.params
        ));
    }
    s
}

pub fn compare_csv(ranked: &[MethodSummary]) -> String {
    let mut s = String::from("rank,method,mean_accuracy,stderr,params\n");
    for (i, m) in ranked.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{:.10},{:.10},{}\n",
            i + 1,
            m.method,
            m.mean_accuracy,
            m.stderr,
            m.params
        ));
    }
    s
}
