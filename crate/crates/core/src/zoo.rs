//! Toy encoders, fusion networks assembled from them, and the early/late
//! fusion baselines.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Mode, Precision, Var};
use crate::error::{Error, Result};
use crate::msaf::{fuse, init_msaf, AttentionRecord, MsafConfig, MsafParams, MsafVars};
use crate::nn::{
    global_average_pool, param_leaves, uniform_fan_in, Binder, FeatureVar, Linear, LinearVars, Parameterized,
};
use crate::seq::{plan_segments, seq_fuse};
use crate::tensor::{AxisSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Input `[batch, channels, length]`.
    Conv1d,
    /// Input `[batch, channels, height, width]`.
    Conv2d,
    /// Elman cell over `[batch, time, channels]`.
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub in_channels: usize,
    /// Output channels (or hidden size) of each layer.
    pub widths: Vec<usize>,
    /// Kernel size per conv layer (square for conv2d). Unused by recurrent
    /// encoders.
    #[serde(default)]
    pub kernels: Vec<usize>,
    /// Defaults to relu for convolutions and tanh for the recurrent cell.
    #[serde(default)]
    pub activation: Option<Activation>,
}

impl EncoderSpec {
    pub fn conv1d(in_channels: usize, widths: &[usize], kernels: &[usize]) -> Self {
        Self {
            kind: EncoderKind::Conv1d,
            in_channels,
            widths: widths.to_vec(),
            kernels: kernels.to_vec(),
            activation: None,
        }
    }

    pub fn conv2d(in_channels: usize, widths: &[usize], kernels: &[usize]) -> Self {
        Self {
            kind: EncoderKind::Conv2d,
            ..Self::conv1d(in_channels, widths, kernels)
        }
    }

    pub fn recurrent(in_channels: usize, widths: &[usize]) -> Self {
        Self {
            kind: EncoderKind::Recurrent,
            ..Self::conv1d(in_channels, widths, &[])
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(match self.kind {
            EncoderKind::Recurrent => Activation::Tanh,
            _ => Activation::Relu,
        })
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    /// Axis roles of the input and of every tap.
    pub fn axes(&self) -> AxisSpec {
        match self.kind {
            EncoderKind::Conv1d => AxisSpec::channels_first(1),
            EncoderKind::Conv2d => AxisSpec::channels_first(2),
            EncoderKind::Recurrent => AxisSpec::sequence_major(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config(format!(
                "encoder needs positive input channels and layer widths, got {} and {:?}",
                self.in_channels, self.widths
            )));
        }
        match self.kind {
            EncoderKind::Recurrent => {
                if !self.kernels.is_empty() {
                    return Err(Error::config("recurrent encoders take no kernel sizes"));
                }
                if self.activation() == Activation::Relu {
                    return Err(Error::config("recurrent cell activation must be tanh or identity"));
                }
            }
            _ => {
                if self.kernels.len() != self.widths.len() || self.kernels.contains(&0) {
                    return Err(Error::config(format!(
                        "{} layer widths need as many positive kernel sizes, got {:?}",
                        self.widths.len(),
                        self.kernels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-sample output shape of every layer for a per-sample input shape
    /// (no batch axis).
    pub fn tap_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let expect_rank = self.axes().rank() - 1;
        let channel_axis = match self.kind {
            EncoderKind::Recurrent => 1,
            _ => 0,
        };
        if input.len() != expect_rank || input[channel_axis] != self.in_channels {
            return Err(Error::shape("encoder input", input, &[self.in_channels]));
        }
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.layers());
        for (k, &w) in self.widths.iter().enumerate() {
            match self.kind {
                EncoderKind::Recurrent => shape[1] = w,
                _ => {
                    let kernel = self.kernels[k];
                    for extent in &mut shape[1..] {
                        if *extent < kernel {
                            return Err(Error::shape("encoder conv", input, &self.kernels));
                        }
                        *extent -= kernel - 1;
                    }
                    shape[0] = w;
                }
            }
            out.push(shape.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight: [out, in, kh, kw]`; conv1d uses `kh = 1`.
    Conv { weight: Tensor, bias: Tensor },
    /// `h_t = act(W_x x_t + b + W_h h_{t-1})`.
    Recurrent { input: Linear, hidden: Tensor },
}

#[derive(Debug, Clone, Copy)]
pub enum LayerVars {
    Conv { weight: Var, bias: Var },
    Recurrent { input: LinearVars, hidden: Var },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<LayerVars>,
}

/// Every tap and the globally pooled final features `[batch, out]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub taps: Vec<FeatureVar>,
    pub features: Var,
}

impl Encoder {
    pub fn init(spec: &EncoderSpec, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        spec.validate()?;
        let mut n_in = spec.in_channels;
        let mut layers = Vec::with_capacity(spec.layers());
        for (k, &w) in spec.widths.iter().enumerate() {
            layers.push(match spec.kind {
                EncoderKind::Recurrent => Layer::Recurrent {
                    input: Linear::init(n_in, w, rng),
                    hidden: uniform_fan_in(&[w, w], w, rng),
                },
                kind => {
                    let kw = spec.kernels[k];
                    let kh = if kind == EncoderKind::Conv2d { kw } else { 1 };
                    Layer::Conv {
                        weight: uniform_fan_in(&[w, n_in, kh, kw], n_in * kh * kw, rng),
                        bias: Tensor::zeros(&[w]),
                    }
                }
            });
            n_in = w;
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Result<EncoderVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Conv { .. } => LayerVars::Conv {
                        weight: b.next_var()?,
                        bias: b.next_var()?,
                    },
                    Layer::Recurrent { input, .. } => LayerVars::Recurrent {
                        input: input.bind(b)?,
                        hidden: b.next_var()?,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderVars { layers })
    }

    fn activate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.spec.activation() {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }

    /// Runs layer `k` on the output of layer `k - 1` (or the input).
    pub fn layer_forward(&self, g: &mut Graph, vars: &EncoderVars, k: usize, x: Var) -> Result<Var> {
        match vars.layers[k] {
            LayerVars::Conv { weight, bias } => {
                let y = if self.spec.kind == EncoderKind::Conv1d {
                    let s = g.shape(x).to_vec();
                    if s.len() != 3 {
                        return Err(Error::shape("conv1d", &s, g.shape(weight)));
                    }
                    let lifted = g.reshape(x, &[s[0], s[1], 1, s[2]])?;
                    let y = g.conv2d(lifted, weight, bias)?;
                    let ys = g.shape(y).to_vec();
                    g.reshape(y, &[ys[0], ys[1], ys[3]])?
                } else {
                    g.conv2d(x, weight, bias)?
                };
                self.activate(g, y)
            }
            LayerVars::Recurrent { input, hidden } => {
                let s = g.shape(x).to_vec();
                if s.len() != 3 {
                    return Err(Error::shape("recurrent", &s, g.shape(input.weight)));
                }
                let (batch, steps) = (s[0], s[1]);
                let width = g.shape(hidden)[0];
                let projected = input.forward(g, x)?;
                let no_bias = g.constant(Tensor::zeros(&[width]))?;
                let mut states = Vec::with_capacity(steps);
                let mut h: Option<Var> = None;
                for t in 0..steps {
                    let xt = g.slice_axis(projected, 1, t, 1)?;
                    let mut pre = g.reshape(xt, &[batch, width])?;
                    if let Some(prev) = h {
                        let rec = g.affine(prev, hidden, no_bias)?;
                        pre = g.add(pre, rec)?;
                    }
                    let ht = self.activate(g, pre)?;
                    states.push(ht);
                    h = Some(ht);
                }
                let stacked = g.stack(&states)?;
                g.permute(stacked, &[1, 0, 2])
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &EncoderVars, x: Var) -> Result<EncoderOutput> {
        let axes = self.spec.axes();
        let mut cur = x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            cur = self.layer_forward(g, vars, k, cur)?;
            taps.push(FeatureVar::new(g, cur, axes.clone())?);
        }
        let last = taps.last().expect("validated non-empty").clone();
        let features = global_average_pool(g, &last)?;
        Ok(EncoderOutput { taps, features })
    }

    /// Tap values and pooled features for a concrete batch.
    pub fn encode(&self, input: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let vars = self.bind_constants(&mut g)?;
        let out = self.forward(&mut g, &vars, x)?;
        let taps = out.taps.iter().map(|t| g.value(t.var).clone()).collect();
        Ok((taps, g.value(out.features).clone()))
    }

    fn bind_constants(&self, g: &mut Graph) -> Result<EncoderVars> {
        let leaves = self
            .params()
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut b = Binder::new(&leaves);
        let vars = self.bind(&mut b)?;
        b.finish()?;
        Ok(vars)
    }
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { weight, bias } => out.extend([weight, bias]),
                Layer::Recurrent { input, hidden } => {
                    out.extend(input.params());
                    out.push(hidden);
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { weight, bias } => out.extend([weight, bias]),
                Layer::Recurrent { input, hidden } => {
                    out.extend(input.params_mut());
                    out.push(hidden);
                }
            }
        }
        out
    }
}

/// Output of layer `layer` of encoder `encoder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    pub encoder: usize,
    pub layer: usize,
}

/// One MSAF module (or `q` of them) joining the listed taps. The fused
/// features replace the tap outputs and continue through later layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub taps: Vec<Tap>,
    pub msaf: MsafConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Head {
    /// Per-encoder classifiers, logits summed.
    SumLogits,
    /// Per-encoder classifiers, logits averaged.
    AverageLogits,
    /// Pooled features concatenated into one classifier.
    ConcatFc,
    /// Mean of per-encoder class probabilities; emits their log.
    LateAverage,
    /// Renormalized product of per-encoder probabilities; emits summed
    /// log-probabilities.
    LateMultiply,
    /// Concatenated features through one hidden relu layer.
    EarlyConcatFc { hidden: usize },
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::SumLogits => "sum_logits",
            Head::AverageLogits => "average_logits",
            Head::ConcatFc => "concat_fc",
            Head::LateAverage => "late_average",
            Head::LateMultiply => "late_multiply",
            Head::EarlyConcatFc { .. } => "early_concat_fc",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            Head::LateAverage | Head::LateMultiply | Head::EarlyConcatFc { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionNetSpec {
    pub encoders: Vec<EncoderSpec>,
    #[serde(default)]
    pub placements: Vec<Placement>,
    pub head: Head,
    /// Class count, or 1 for regression.
    pub outputs: usize,
    pub task: TaskKind,
}

impl FusionNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::config("network needs at least one encoder"));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            e.validate()
                .map_err(|err| Error::config(format!("encoder {i}: {err}")))?;
        }
        if self.outputs == 0 {
            return Err(Error::config("output dimension must be positive"));
        }
        if self.task == TaskKind::Regression && self.outputs != 1 {
            return Err(Error::config("regression networks emit a single output"));
        }
        match self.head {
            Head::LateAverage | Head::LateMultiply if self.task == TaskKind::Regression => {
                return Err(Error::config(
                    "probability-level late fusion needs a classification task",
                ));
            }
            Head::EarlyConcatFc { hidden: 0 } => return Err(Error::config("hidden width must be positive")),
            _ => {}
        }
        if self.head.is_baseline() && self.encoders.len() < 2 {
            return Err(Error::config("baselines fuse at least two encoders"));
        }
        let mut last_layer: Vec<Option<usize>> = vec![None; self.encoders.len()];
        for (p, pl) in self.placements.iter().enumerate() {
            pl.msaf
                .validate()
                .map_err(|err| Error::config(format!("placement {p}: {err}")))?;
            if pl.taps.len() < 2 {
                return Err(Error::config(format!(
                    "placement {p} needs taps on at least two encoders"
                )));
            }
            for (i, t) in pl.taps.iter().enumerate() {
                let enc = self
                    .encoders
                    .get(t.encoder)
                    .ok_or_else(|| Error::config(format!("placement {p}: no encoder {}", t.encoder)))?;
                if t.layer >= enc.layers() {
                    return Err(Error::config(format!(
                        "placement {p}: encoder {} has no layer {}",
                        t.encoder, t.layer
                    )));
                }
                if pl.taps[..i].iter().any(|o| o.encoder == t.encoder) {
                    return Err(Error::config(format!("placement {p} taps encoder {} twice", t.encoder)));
                }
                if last_layer[t.encoder].is_some_and(|l| t.layer <= l) {
                    return Err(Error::config(format!(
                        "placement {p}: taps on encoder {} must move to later layers",
                        t.encoder
                    )));
                }
                last_layer[t.encoder] = Some(t.layer);
                if pl.msaf.segments > 1 && enc.kind != EncoderKind::Recurrent {
                    return Err(Error::config(format!(
                        "placement {p}: segmenting needs sequence taps, encoder {} is {:?}",
                        t.encoder, enc.kind
                    )));
                }
            }
        }
        Ok(())
    }

    fn tap_channels(&self, tap: Tap) -> usize {
        self.encoders[tap.encoder].widths[tap.layer]
    }

    /// Checks per-sample input shapes against every encoder and placement.
    /// Errors list the tap shapes involved.
    pub fn check_inputs(&self, inputs: &[Vec<usize>]) -> Result<()> {
        self.validate()?;
        if inputs.len() != self.encoders.len() {
            return Err(Error::invalid(format!(
                "{} inputs for {} encoders",
                inputs.len(),
                self.encoders.len()
            )));
        }
        let taps = self
            .encoders
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (e, s))| {
                e.tap_shapes(s)
                    .map_err(|err| Error::invalid(format!("encoder {i}: {err}")))
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, pl) in self.placements.iter().enumerate() {
            let shapes: Vec<&Vec<usize>> = pl.taps.iter().map(|t| &taps[t.encoder][t.layer]).collect();
            let q = pl.msaf.segments;
            if q > 1 {
                let lengths: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
                if let Err(err) = plan_segments(&lengths, q) {
                    return Err(Error::invalid(format!(
                        "placement {p}: tap shapes {shapes:?} cannot be cut into {q} segments: {err}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The same network without any fusion placements.
    pub fn without_placements(&self) -> Self {
        Self {
            placements: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    PerEncoder(Vec<Linear>),
    Concat(Linear),
    Mlp(Linear, Linear),
}

#[derive(Debug, Clone)]
pub enum HeadVars {
    PerEncoder(Vec<LinearVars>),
    Concat(LinearVars),
    Mlp(LinearVars, LinearVars),
}

impl HeadParams {
    fn linears(&self) -> Vec<&Linear> {
        match self {
            HeadParams::PerEncoder(ls) => ls.iter().collect(),
            HeadParams::Concat(l) => vec![l],
            HeadParams::Mlp(a, b) => vec![a, b],
        }
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        match self {
            HeadParams::PerEncoder(ls) => ls.iter_mut().collect(),
            HeadParams::Concat(l) => vec![l],
            HeadParams::Mlp(a, b) => vec![a, b],
        }
    }

    fn bind(&self, b: &mut Binder<'_>) -> Result<HeadVars> {
        Ok(match self {
            HeadParams::PerEncoder(ls) => HeadVars::PerEncoder(ls.iter().map(|l| l.bind(b)).collect::<Result<_>>()?),
            HeadParams::Concat(l) => HeadVars::Concat(l.bind(b)?),
            HeadParams::Mlp(x, y) => HeadVars::Mlp(x.bind(b)?, y.bind(b)?),
        })
    }
}

/// Attention of one fusion module for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleAttention {
    /// `msaf{p}` for placement `p`, `msaf{p}.seg{j}` for its segments.
    pub module: String,
    pub record: AttentionRecord,
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    /// Logits `[batch, outputs]` (or the regression value `[batch, 1]`).
    pub output: Var,
    pub attention: Vec<ModuleAttention>,
    /// One entry per placement segment, in placement order.
    pub batch_stats: Vec<Option<BatchStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    pub spec: FusionNetSpec,
    pub encoders: Vec<Encoder>,
    /// `q` parameter sets per placement.
    pub placements: Vec<Vec<MsafParams>>,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
pub struct NetVars {
    pub encoders: Vec<EncoderVars>,
    pub placements: Vec<Vec<MsafVars>>,
    pub head: HeadVars,
}

/// Builds and initializes a network. Encoders are initialized first, then
/// placements, then the head, all from `rng`.
pub fn build_fusion_network(spec: &FusionNetSpec, rng: &mut (impl Rng + ?Sized)) -> Result<FusionNet> {
    spec.validate()?;
    let encoders = spec
        .encoders
        .iter()
        .map(|e| Encoder::init(e, rng))
        .collect::<Result<Vec<_>>>()?;
    let placements = spec
        .placements
        .iter()
        .map(|pl| {
            let channels: Vec<usize> = pl.taps.iter().map(|&t| spec.tap_channels(t)).collect();
            (0..pl.msaf.segments)
                .map(|_| init_msaf(&channels, &pl.msaf, rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let feats: Vec<usize> = spec.encoders.iter().map(EncoderSpec::out_channels).collect();
    let total: usize = feats.iter().sum();
    let head = match spec.head {
        Head::SumLogits | Head::AverageLogits | Head::LateAverage | Head::LateMultiply => {
            HeadParams::PerEncoder(feats.iter().map(|&f| Linear::init(f, spec.outputs, rng)).collect())
        }
        Head::ConcatFc => HeadParams::Concat(Linear::init(total, spec.outputs, rng)),
        Head::EarlyConcatFc { hidden } => HeadParams::Mlp(
            Linear::init(total, hidden, rng),
            Linear::init(hidden, spec.outputs, rng),
        ),
    };
    Ok(FusionNet {
        spec: spec.clone(),
        encoders,
        placements,
        head,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LateAverage,
    LateMultiply,
    EarlyConcatFc,
}

/// A placement-free network combining `encoders` with a baseline head.
/// `hidden` is the early-fusion hidden width.
pub fn build_baseline(
    kind: BaselineKind,
    encoders: &[EncoderSpec],
    classes: usize,
    hidden: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<FusionNet> {
    let head = match kind {
        BaselineKind::LateAverage => Head::LateAverage,
        BaselineKind::LateMultiply => Head::LateMultiply,
        BaselineKind::EarlyConcatFc => Head::EarlyConcatFc { hidden },
    };
    let spec = FusionNetSpec {
        encoders: encoders.to_vec(),
        placements: Vec::new(),
        head,
        outputs: classes,
        task: TaskKind::Classification,
    };
    build_fusion_network(&spec, rng)
}

impl FusionNet {
    pub fn bind(&self, b: &mut Binder<'_>) -> Result<NetVars> {
        let encoders = self.encoders.iter().map(|e| e.bind(b)).collect::<Result<_>>()?;
        let placements = self
            .placements
            .iter()
            .map(|segs| segs.iter().map(|p| p.bind(b)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let head = self.head.bind(b)?;
        Ok(NetVars {
            encoders,
            placements,
            head,
        })
    }

    /// Binds every parameter as a fresh leaf; returns the leaves too.
    pub fn bind_leaves(&self, g: &mut Graph) -> Result<(Vec<Var>, NetVars)> {
        let leaves = param_leaves(g, self)?;
        let mut b = Binder::new(&leaves);
        let vars = self.bind(&mut b)?;
        b.finish()?;
        Ok((leaves, vars))
    }

    /// Parameters of everything except the fusion placements.
    pub fn backbone_param_count(&self) -> usize {
        let enc: usize = self.encoders.iter().map(Parameterized::param_count).sum();
        let head: usize = self.head.linears().iter().map(|l| l.param_count()).sum();
        enc + head
    }

    /// Threads every modality through its encoder, fusing at each placement.
    /// `inputs[i]` feeds encoder `i` in its native layout.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &NetVars,
        inputs: &[Var],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<NetOutput> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::invalid(format!(
                "{} inputs for {} encoders",
                inputs.len(),
                self.encoders.len()
            )));
        }
        let mut current: Vec<Var> = inputs.to_vec();
        let mut done = vec![0usize; self.encoders.len()];
        let mut attention = Vec::new();
        let mut batch_stats = Vec::new();

        for (p, (pl, params)) in self.spec.placements.iter().zip(&self.placements).enumerate() {
            let mut taps = Vec::with_capacity(pl.taps.len());
            for t in &pl.taps {
                let enc = &self.encoders[t.encoder];
                while done[t.encoder] <= t.layer {
                    let k = done[t.encoder];
                    current[t.encoder] = enc.layer_forward(g, &vars.encoders[t.encoder], k, current[t.encoder])?;
                    done[t.encoder] += 1;
                }
                taps.push(FeatureVar::new(g, current[t.encoder], enc.spec.axes())?);
            }
            let shapes: Vec<Vec<usize>> = taps.iter().map(|t| g.shape(t.var).to_vec()).collect();
            let context = |err: Error| Error::invalid(format!("placement {p} with tap shapes {shapes:?}: {err}"));
            let q = pl.msaf.segments;
            let fused = if q == 1 {
                let out = fuse(g, &taps, &params[0], &vars.placements[p][0], &pl.msaf, mode, rng).map_err(context)?;
                attention.push(ModuleAttention {
                    module: format!("msaf{p}"),
                    record: out.attention,
                });
                batch_stats.push(out.batch_stats);
                out.features
            } else {
                let out = seq_fuse(g, &taps, params, &vars.placements[p], &pl.msaf, mode, rng).map_err(context)?;
                for (j, rec) in out.attention.into_iter().enumerate() {
                    attention.push(ModuleAttention {
                        module: format!("msaf{p}.seg{j}"),
                        record: rec,
                    });
                }
                batch_stats.extend(out.batch_stats);
                out.features
            };
            for (t, f) in pl.taps.iter().zip(fused) {
                current[t.encoder] = f.var;
            }
        }

        let mut pooled = Vec::with_capacity(self.encoders.len());
        for (i, enc) in self.encoders.iter().enumerate() {
            while done[i] < enc.layers.len() {
                current[i] = enc.layer_forward(g, &vars.encoders[i], done[i], current[i])?;
                done[i] += 1;
            }
            let fv = FeatureVar::new(g, current[i], enc.spec.axes())?;
            pooled.push(global_average_pool(g, &fv)?);
        }

        let output = self.head_forward(g, &vars.head, &pooled)?;
        Ok(NetOutput {
            output,
            attention,
            batch_stats,
        })
    }

    fn head_forward(&self, g: &mut Graph, head: &HeadVars, pooled: &[Var]) -> Result<Var> {
        match (self.spec.head, head) {
            (Head::ConcatFc, HeadVars::Concat(l)) => {
                let x = g.concat(pooled, 1)?;
                l.forward(g, x)
            }
            (Head::EarlyConcatFc { .. }, HeadVars::Mlp(a, b)) => {
                let x = g.concat(pooled, 1)?;
                let h = a.forward(g, x)?;
                let h = g.relu(h)?;
                b.forward(g, h)
            }
            (kind, HeadVars::PerEncoder(ls)) => {
                let logits = ls
                    .iter()
                    .zip(pooled)
                    .map(|(l, &x)| l.forward(g, x))
                    .collect::<Result<Vec<_>>>()?;
                let n = logits.len() as f64;
                match kind {
                    Head::SumLogits => g.add_all(&logits),
                    Head::AverageLogits => {
                        let s = g.add_all(&logits)?;
                        g.scale(s, 1.0 / n)
                    }
                    Head::LateAverage => {
                        let probs = logits.iter().map(|&l| g.softmax(l, 1)).collect::<Result<Vec<_>>>()?;
                        let s = g.add_all(&probs)?;
                        let mean = g.scale(s, 1.0 / n)?;
                        g.log(mean)
                    }
                    Head::LateMultiply => {
                        let logp = logits
                            .iter()
                            .map(|&l| g.log_softmax(l, 1))
                            .collect::<Result<Vec<_>>>()?;
                        g.add_all(&logp)
                    }
                    _ => unreachable!("head parameters match the head kind"),
                }
            }
            _ => Err(Error::invalid("head parameters do not match the head kind")),
        }
    }

    /// Folds training-mode statistics from [`NetOutput::batch_stats`] into
    /// every placement's running estimates.
    pub fn update_running(&mut self, stats: &[Option<BatchStats>]) {
        let mut it = stats.iter();
        for segs in &mut self.placements {
            for p in segs {
                if let Some(Some(s)) = it.next() {
                    p.norm.update_running(s);
                }
            }
        }
    }

    /// Evaluation-mode outputs for concrete inputs.
    pub fn predict(&self, inputs: &[Tensor], precision: Precision) -> Result<(Tensor, Vec<ModuleAttention>)> {
        let mut g = Graph::with_precision(precision);
        let xs = inputs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let consts = self
            .params()
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut b = Binder::new(&consts);
        let vars = self.bind(&mut b)?;
        b.finish()?;
        // Evaluation never draws from the generator.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &vars, &xs, Mode::Eval, &mut rng)?;
        Ok((g.value(out.output).clone(), out.attention))
    }
}

impl Parameterized for FusionNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.encoders.iter().flat_map(|e| e.params()).collect();
        for segs in &self.placements {
            for p in segs {
                out.extend(p.params());
            }
        }
        for l in self.head.linears() {
            out.extend(l.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        for segs in &mut self.placements {
            for p in segs {
                out.extend(p.params_mut());
            }
        }
        for l in self.head.linears_mut() {
            out.extend(l.params_mut());
        }
        out
    }
}

/// Row-wise softmax of `[batch, classes]` logits.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("probabilities", s, &[2]));
    }
    let k = s[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
    Tensor::new(s.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tap_shapes_follow_valid_convolution() {
        let spec = EncoderSpec::conv2d(3, &[4, 5], &[3, 2]);
        assert_eq!(spec.tap_shapes(&[3, 8, 6]).unwrap(), vec![vec![4, 6, 4], vec![5, 5, 3]]);
        assert!(spec.tap_shapes(&[3, 2, 6]).is_err());
        let rnn = EncoderSpec::recurrent(2, &[3]);
        assert_eq!(rnn.tap_shapes(&[7, 2]).unwrap(), vec![vec![7, 3]]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(EncoderSpec::conv1d(2, &[0], &[1]).validate().is_err());
        assert!(EncoderSpec::conv1d(2, &[3], &[]).validate().is_err());
        assert!(EncoderSpec::recurrent(0, &[3]).validate().is_err());
        let mut r = EncoderSpec::recurrent(2, &[3]);
        r.activation = Some(Activation::Relu);
        assert!(r.validate().is_err());
    }

    #[test]
    fn placements_must_advance_per_encoder() {
        let enc = EncoderSpec::conv1d(2, &[4, 4], &[1, 1]);
        let pl = |layer| Placement {
            taps: vec![Tap { encoder: 0, layer }, Tap { encoder: 1, layer }],
            msaf: MsafConfig::new(2, 1),
        };
        let mut spec = FusionNetSpec {
            encoders: vec![enc.clone(), enc],
            placements: vec![pl(0), pl(1)],
            head: Head::SumLogits,
            outputs: 3,
            task: TaskKind::Classification,
        };
        spec.validate().unwrap();
        spec.placements = vec![pl(1), pl(1)];
        assert!(spec.validate().is_err());
        spec.placements = vec![pl(0)];
        spec.placements[0].msaf.segments = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn param_count_matches_tensors() {
        let spec = FusionNetSpec {
            encoders: vec![EncoderSpec::conv1d(2, &[4], &[3]), EncoderSpec::recurrent(3, &[5])],
            placements: vec![],
            head: Head::EarlyConcatFc { hidden: 6 },
            outputs: 2,
            task: TaskKind::Classification,
        };
        let net = build_fusion_network(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let conv = 4 * 2 * 3 + 4;
        let rnn = 5 * 3 + 5 + 5 * 5;
        let head = 9 * 6 + 6 + 6 * 2 + 2;
        assert_eq!(net.param_count(), conv + rnn + head);
        assert_eq!(net.backbone_param_count(), net.param_count());
    }
}
