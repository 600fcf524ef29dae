//! Synthetic multimodal tasks and their on-disk container.
//!
//! `complementary_classification` gives every modality a random template per
//! class, collapsed into one shared template for the classes that modality
//! does not disambiguate. `alternating_dominance_sequence` puts the class
//! signal in one modality per time segment and pure noise in the other.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msaf::container::{get_f64, get_f64s, get_u32, get_u8, put_f64s, put_u32};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Features `[N, C_m, extent]`.
    ComplementaryClassification,
    /// Features `[N, extent, C_m]`; exactly two modalities.
    AlternatingDominanceSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: SynthKind,
    /// Channels per modality; its length is the modality count.
    pub channels: Vec<usize>,
    /// Positions (complementary) or time steps (alternating).
    pub extent: usize,
    pub classes: usize,
    /// Classes each modality disambiguates (complementary only).
    #[serde(default)]
    pub split: Vec<Vec<usize>>,
    /// Steps per dominance segment (alternating only).
    #[serde(default)]
    pub period: usize,
    /// Which modality holds the signal in the first segment (alternating).
    #[serde(default)]
    pub phase: usize,
    /// Standard deviation of the additive gaussian noise.
    pub sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn modalities(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.extent == 0 {
            return Err(Error::config("task needs modalities with positive channels and extent"));
        }
        if self.classes < 2 {
            return Err(Error::config("task needs at least two classes"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise level must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        match self.kind {
            SynthKind::ComplementaryClassification => {
                if self.split.len() != self.modalities() {
                    return Err(Error::config(format!(
                        "split lists {} modalities, task has {}",
                        self.split.len(),
                        self.modalities()
                    )));
                }
                let mut covered = vec![false; self.classes];
                for (m, classes) in self.split.iter().enumerate() {
                    for &c in classes {
                        *covered.get_mut(c).ok_or_else(|| {
                            Error::config(format!("modality {m} lists class {c} of {}", self.classes))
                        })? = true;
                    }
                }
                if let Some(c) = covered.iter().position(|&v| !v) {
                    return Err(Error::config(format!("class {c} is disambiguated by no modality")));
                }
            }
            SynthKind::AlternatingDominanceSequence => {
                if self.modalities() != 2 {
                    return Err(Error::config("alternating task has exactly two modalities"));
                }
                if self.period == 0 || self.extent % self.period != 0 {
                    return Err(Error::config(format!(
                        "extent {} is not divisible by period {}",
                        self.extent, self.period
                    )));
                }
                if self.phase > 1 {
                    return Err(Error::config("phase must be 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Per-sample shape of modality `m`.
    pub fn sample_shape(&self, m: usize) -> Vec<usize> {
        match self.kind {
            SynthKind::ComplementaryClassification => vec![self.channels[m], self.extent],
            SynthKind::AlternatingDominanceSequence => vec![self.extent, self.channels[m]],
        }
    }

    /// Modality carrying the signal at time step `t` (alternating tasks).
    pub fn active_modality(&self, t: usize) -> usize {
        (t / self.period + self.phase) % 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// One split: a `[N, ...]` tensor per modality and `N` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Vec<Tensor>,
    pub targets: Targets,
}

impl Split {
    pub fn new(inputs: Vec<Tensor>, targets: Targets) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("split without modalities"));
        }
        if let Some(t) = inputs.iter().find(|t| t.shape()[0] != targets.len()) {
            return Err(Error::shape("split", t.shape(), &[targets.len()]));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Per-sample shapes (without the leading sample axis).
    pub fn sample_shapes(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|t| t.shape()[1..].to_vec()).collect()
    }

    /// Gathers the given samples into batched tensors.
    pub fn gather(&self, idx: &[usize]) -> Result<(Vec<Tensor>, Targets)> {
        let inputs = self
            .inputs
            .iter()
            .map(|t| {
                let per: usize = t.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = idx.len();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((inputs, self.targets.select(idx)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn gaussian_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Exactly balanced labels (`i mod K`) in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// Template index modality `m` uses for class `y`: the class itself if the
/// modality disambiguates it, otherwise one shared "collapsed" slot.
pub fn template_slot(spec: &TaskSpec, m: usize, y: usize) -> usize {
    if spec.split[m].contains(&y) {
        y
    } else {
        spec.classes
    }
}

/// Noise-free class templates: `templates[m][slot]`, where slot `K` is the
/// collapsed template (complementary) or `templates[m][y]` (alternating).
pub fn templates(spec: &TaskSpec) -> Result<Vec<Vec<Tensor>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slots = match spec.kind {
        SynthKind::ComplementaryClassification => spec.classes + 1,
        SynthKind::AlternatingDominanceSequence => spec.classes,
    };
    Ok((0..spec.modalities())
        .map(|m| {
            (0..slots)
                .map(|_| gaussian_tensor(&spec.sample_shape(m), &mut rng))
                .collect()
        })
        .collect())
}

fn generate(spec: &TaskSpec, expected: SynthKind) -> Result<Dataset> {
    if spec.kind != expected {
        return Err(Error::config(format!(
            "generator for {expected:?} given a {:?} task",
            spec.kind
        )));
    }
    let tpl = templates(spec)?;
    // Template draws use the base stream; samples use their own.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut make = |n: usize| -> Result<Split> {
        let labels = balanced_labels(n, spec.classes, &mut rng);
        let mut inputs = Vec::with_capacity(spec.modalities());
        for m in 0..spec.modalities() {
            let shape = spec.sample_shape(m);
            let per: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n * per);
            for &y in &labels {
                let clean: Vec<f64> = match spec.kind {
                    SynthKind::ComplementaryClassification => tpl[m][template_slot(spec, m, y)].data().to_vec(),
                    SynthKind::AlternatingDominanceSequence => {
                        let c = spec.channels[m];
                        let t = tpl[m][y].data();
                        (0..per)
                            .map(|i| if spec.active_modality(i / c) == m { t[i] } else { 0.0 })
                            .collect()
                    }
                };
                for v in clean {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(v + spec.sigma * noise);
                }
            }
            let mut full = vec![n];
            full.extend(shape);
            inputs.push(Tensor::new(full, data)?);
        }
        Split::new(inputs, Targets::Classes(labels))
    };
    let train = make(spec.n_train)?;
    let val = make(spec.n_val)?;
    let test = make(spec.n_test)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

pub fn gen_complementary(spec: &TaskSpec) -> Result<Dataset> {
    generate(spec, SynthKind::ComplementaryClassification)
}

pub fn gen_alternating(spec: &TaskSpec) -> Result<Dataset> {
    generate(spec, SynthKind::AlternatingDominanceSequence)
}

/// Dispatches on the task kind.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    generate(spec, spec.kind)
}

pub const DATASET_MAGIC: &[u8; 4] = b"MSDS";
pub const DATASET_VERSION: u32 = 1;

/// Layout: magic, version, spec JSON (u32 length + UTF-8), then per split a
/// sample count, modality count, per modality rank + dims + row-major f64s,
/// and the targets (kind byte, then u32 labels or f64 values).
pub fn write_dataset_to(w: &mut impl Write, data: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, DATASET_VERSION)?;
    let json = serde_json::to_vec(&data.spec)?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    for split in [&data.train, &data.val, &data.test] {
        put_u32(w, split.len() as u32)?;
        put_u32(w, split.inputs.len() as u32)?;
        for t in &split.inputs {
            put_u32(w, t.rank() as u32)?;
            for &d in t.shape() {
                put_u32(w, d as u32)?;
            }
            put_f64s(w, t.data())?;
        }
        match &split.targets {
            Targets::Classes(v) => {
                w.write_all(&[0])?;
                for &c in v {
                    put_u32(w, c as u32)?;
                }
            }
            Targets::Values(v) => {
                w.write_all(&[1])?;
                put_f64s(w, v)?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut json = vec![0u8; get_u32(r)? as usize];
    r.read_exact(&mut json)?;
    let spec: TaskSpec = serde_json::from_slice(&json)?;
    let mut read_split = || -> Result<Split> {
        let n = get_u32(r)? as usize;
        let m = get_u32(r)? as usize;
        let mut inputs = Vec::with_capacity(m);
        for _ in 0..m {
            let rank = get_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| get_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            inputs.push(Tensor::new(shape, get_f64s(r, len)?)?);
        }
        let targets = match get_u8(r)? {
            0 => Targets::Classes((0..n).map(|_| get_u32(r).map(|c| c as usize)).collect::<Result<_>>()?),
            1 => Targets::Values((0..n).map(|_| get_f64(r)).collect::<Result<_>>()?),
            k => return Err(Error::Format(format!("unknown target kind {k}"))),
        };
        Split::new(inputs, targets)
    };
    let train = read_split()?;
    let val = read_split()?;
    let test = read_split()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(Dataset { spec, train, val, test })
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}
