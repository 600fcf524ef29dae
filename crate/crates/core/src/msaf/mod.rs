//! Multimodal split attention fusion.
//!
//! Every modality's feature map is cut channel-wise into blocks of `C`
//! channels. Per-modality block sums are pooled into descriptors, the
//! descriptors are summed across modalities and squeezed to `C / r` features,
//! and a per-block linear head turns that joint vector into logits. A
//! softmax across *all* blocks of *all* modalities gives one attention value
//! per block and channel, which rescales its block by `λ + (1 − λ)·A` before
//! the blocks are concatenated back into their modality.

pub(crate) mod container;

pub use container::{read_params, read_params_from, write_params, write_params_to, MAGIC, VERSION};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_1d, global_average_pool, param_leaves, softmax_stack, BatchNorm1d, BatchNormVars, Binder, FeatureVar,
    Linear, LinearVars, Parameterized,
};
use crate::tensor::{ModalityFeature, Tensor};

/// How the per-modality block sum that feeds each descriptor is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorSum {
    /// Sum over the modality's own blocks.
    #[default]
    PerModality,
    /// Sum over the blocks of modalities `1..=m`. Experimental.
    Cumulative,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsafConfig {
    /// Channels per feature block (`C`).
    pub block_channels: usize,
    /// Reduction factor `r`; the joint representation has `C / r` features.
    pub reduction: usize,
    /// Suppression floor `λ`.
    #[serde(default)]
    pub lambda: f64,
    /// BlockDropout probability.
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub dropout_enabled: bool,
    /// Time segments `q`, each fused by its own parameter set.
    #[serde(default = "one")]
    pub segments: usize,
    #[serde(default)]
    pub descriptor: DescriptorSum,
}

impl MsafConfig {
    pub fn new(block_channels: usize, reduction: usize) -> Self {
        Self {
            block_channels,
            reduction,
            lambda: 0.0,
            dropout_p: 0.0,
            dropout_enabled: false,
            segments: 1,
            descriptor: DescriptorSum::PerModality,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self.dropout_enabled = p > 0.0;
        self
    }

    pub fn with_segments(mut self, q: usize) -> Self {
        self.segments = q;
        self
    }

    /// `C' = C / r`.
    pub fn reduced(&self) -> usize {
        self.block_channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels == 0 {
            return Err(Error::config("block_channels must be at least 1"));
        }
        if self.reduction == 0 || self.block_channels % self.reduction != 0 {
            return Err(Error::config(format!(
                "reduction {} must divide block_channels {}",
                self.reduction, self.block_channels
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.segments == 0 {
            return Err(Error::config("segments must be at least 1"));
        }
        Ok(())
    }
}

/// `⌈C_m / C⌉` for every modality.
pub fn block_counts(channels: &[usize], block_channels: usize) -> Vec<usize> {
    channels.iter().map(|c| c.div_ceil(block_channels)).collect()
}

/// Trainable state of one MSAF module.
#[derive(Debug, Clone, PartialEq)]
pub struct MsafParams {
    /// Channel count of each fused modality.
    pub channels: Vec<usize>,
    /// `W_Z: [C', C]`, `b_Z: [C']`.
    pub join: Linear,
    pub norm: BatchNorm1d,
    /// One `[C, C']` head per block, ordered by modality then block index.
    pub blocks: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MsafVars {
    pub join: LinearVars,
    pub norm: BatchNormVars,
    pub blocks: Vec<LinearVars>,
}

impl MsafParams {
    pub fn block_channels(&self) -> usize {
        self.join.n_in()
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Result<MsafVars> {
        Ok(MsafVars {
            join: self.join.bind(b)?,
            norm: self.norm.bind(b)?,
            blocks: self.blocks.iter().map(|l| l.bind(b)).collect::<Result<_>>()?,
        })
    }

    /// Binds every parameter as a fresh leaf of `g`.
    pub fn bind_leaves(&self, g: &mut Graph) -> Result<MsafVars> {
        let leaves = param_leaves(g, self)?;
        let mut b = Binder::new(&leaves);
        let vars = self.bind(&mut b)?;
        b.finish()?;
        Ok(vars)
    }

    fn check(&self, config: &MsafConfig) -> Result<()> {
        let c = config.block_channels;
        let reduced = config.reduced();
        let expected: usize = block_counts(&self.channels, c).iter().sum();
        let ok = self.join.weight.shape() == [reduced, c]
            && self.join.bias.shape() == [reduced]
            && self.norm.features() == reduced
            && self.blocks.len() == expected
            && self
                .blocks
                .iter()
                .all(|l| l.weight.shape() == [c, reduced] && l.bias.shape() == [c]);
        if !ok {
            return Err(Error::config(format!(
                "parameters do not match channels {:?} with C={c}, r={}",
                self.channels, config.reduction
            )));
        }
        Ok(())
    }
}

impl Parameterized for MsafParams {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.join.params();
        out.extend(self.norm.params());
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.join.params_mut();
        out.extend(self.norm.params_mut());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

/// Fresh parameters: fan-in uniform weights, zero biases, unit scale.
pub fn init_msaf(channels: &[usize], config: &MsafConfig, rng: &mut (impl Rng + ?Sized)) -> Result<MsafParams> {
    config.validate()?;
    if channels.len() < 2 {
        return Err(Error::config("fusion needs at least two modalities"));
    }
    if channels.contains(&0) {
        return Err(Error::config("modality with zero channels"));
    }
    let c = config.block_channels;
    let reduced = config.reduced();
    let join = Linear::init(c, reduced, rng);
    let n_blocks: usize = block_counts(channels, c).iter().sum();
    let blocks = (0..n_blocks).map(|_| Linear::init(reduced, c, rng)).collect();
    Ok(MsafParams {
        channels: channels.to_vec(),
        join,
        norm: BatchNorm1d::new(reduced),
        blocks,
    })
}

/// Closed-form parameter count: `(C·C' + C') + [2C'] + N_B·(C'·C + C)`.
pub fn msaf_param_count(channels: &[usize], config: &MsafConfig, include_norm: bool) -> usize {
    let c = config.block_channels;
    let reduced = config.reduced();
    let n_blocks: usize = block_counts(channels, c).iter().sum();
    let norm = if include_norm { 2 * reduced } else { 0 };
    c * reduced + reduced + norm + n_blocks * (reduced * c + c)
}

/// One modality cut into `C`-channel blocks, each `[batch, C, positions]`.
#[derive(Debug, Clone)]
pub struct SplitModality {
    pub blocks: Vec<Var>,
    /// Zero channels appended to the last block.
    pub pad_width: usize,
    pub channels: usize,
    source: FeatureVar,
    permuted_shape: Vec<usize>,
}

pub type BlockSet = Vec<SplitModality>;

pub fn split_channels(g: &mut Graph, x: &FeatureVar, block_channels: usize) -> Result<SplitModality> {
    if block_channels == 0 {
        return Err(Error::config("block_channels must be at least 1"));
    }
    let (flat, permuted_shape) = x.to_canonical(g)?;
    let shape = g.shape(flat).to_vec();
    let (batch, channels, positions) = (shape[0], shape[1], shape[2]);
    let n = channels.div_ceil(block_channels);
    let pad_width = n * block_channels - channels;
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * block_channels;
        let len = block_channels.min(channels - start);
        let mut block = if start == 0 && len == channels {
            flat
        } else {
            g.slice_axis(flat, 1, start, len)?
        };
        if len < block_channels {
            let zeros = g.constant(Tensor::zeros(&[batch, block_channels - len, positions]))?;
            block = g.concat(&[block, zeros], 1)?;
        }
        blocks.push(block);
    }
    Ok(SplitModality {
        blocks,
        pad_width,
        channels,
        source: x.clone(),
        permuted_shape,
    })
}

/// `D_m`: global average pool of the element-wise block sum `S_m`.
pub fn modality_descriptor(g: &mut Graph, blocks: &[Var]) -> Result<Var> {
    let sum = g.add_all(blocks)?;
    let pooled = FeatureVar::new(g, sum, crate::tensor::AxisSpec::channels_first(1))?;
    global_average_pool(g, &pooled)
}

/// `Z = ReLU(BN(W_Z · Σ_m D_m + b_Z))`.
pub fn joint_representation(
    g: &mut Graph,
    descriptors: &[Var],
    join: &LinearVars,
    norm_vars: &BatchNormVars,
    norm: &BatchNorm1d,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let c = g.shape(join.weight)[1];
    for &d in descriptors {
        if g.shape(d).len() != 2 || g.shape(d)[1] != c {
            return Err(Error::shape("joint_representation", g.shape(d), &[c]));
        }
    }
    let joint = g.add_all(descriptors)?;
    let reduced = join.forward(g, joint)?;
    let (normed, stats) = batch_norm_1d(g, reduced, norm_vars, norm, mode)?;
    Ok((g.relu(normed)?, stats))
}

/// Softmax, per channel, of every block's logits `U = W·Z + b` across all
/// blocks of all modalities.
pub fn block_attention(g: &mut Graph, z: Var, heads: &[LinearVars], n_blocks: usize) -> Result<Vec<Var>> {
    if heads.len() != n_blocks {
        return Err(Error::invalid(format!(
            "{} attention heads for {n_blocks} blocks",
            heads.len()
        )));
    }
    let logits = heads.iter().map(|h| h.forward(g, z)).collect::<Result<Vec<_>>>()?;
    softmax_stack(g, &logits)
}

/// BlockDropout: one Bernoulli(1 − p) draw per block, shared by every batch
/// item and channel, scaled by `1 / (1 − p)`. Identity outside training or
/// when `p = 0`. Returns the scaled mask when one was applied.
pub fn block_dropout(
    g: &mut Graph,
    attention: &[Var],
    p: f64,
    rng: &mut dyn RngCore,
    mode: Mode,
) -> Result<(Vec<Var>, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout_p {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((attention.to_vec(), None));
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..attention.len())
        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let scaled = attention
        .iter()
        .zip(&mask)
        .map(|(&a, &m)| g.scale(a, m))
        .collect::<Result<Vec<_>>>()?;
    Ok((scaled, Some(mask)))
}

/// `B̂ = [λ + (1 − λ)·A] ⊙ B`, per block, attention broadcast over positions.
pub fn highlight(g: &mut Graph, blockset: &BlockSet, attention: &[Var], lambda: f64) -> Result<Vec<Vec<Var>>> {
    let n: usize = blockset.iter().map(|m| m.blocks.len()).sum();
    if attention.len() != n {
        return Err(Error::invalid(format!(
            "{} attention tensors for {n} blocks",
            attention.len()
        )));
    }
    let mut attn = attention.iter();
    let mut out = Vec::with_capacity(blockset.len());
    for m in blockset {
        let mut blocks = Vec::with_capacity(m.blocks.len());
        for &b in &m.blocks {
            let a = *attn.next().expect("counted above");
            let shape = g.shape(b);
            if g.shape(a) != &shape[..2] {
                return Err(Error::shape("highlight", shape, g.shape(a)));
            }
            let multiplier = g.scale_shift(a, 1.0 - lambda, lambda)?;
            blocks.push(g.mul_channel(b, multiplier)?);
        }
        out.push(blocks);
    }
    Ok(out)
}

/// Concatenates each modality's highlighted blocks, drops padding and
/// restores the original layout.
pub fn merge(g: &mut Graph, blockset: &BlockSet, highlighted: &[Vec<Var>]) -> Result<Vec<FeatureVar>> {
    blockset
        .iter()
        .zip(highlighted)
        .map(|(m, blocks)| {
            let joined = if blocks.len() == 1 {
                blocks[0]
            } else {
                g.concat(blocks, 1)?
            };
            let trimmed = if m.pad_width > 0 {
                g.slice_axis(joined, 1, 0, m.channels)?
            } else {
                joined
            };
            let restored = m.source.from_canonical(g, trimmed, &m.permuted_shape)?;
            FeatureVar::new(g, restored, m.source.axes.clone())
        })
        .collect()
}

pub fn highlight_merge(g: &mut Graph, blockset: &BlockSet, attention: &[Var], lambda: f64) -> Result<Vec<FeatureVar>> {
    let highlighted = highlight(g, blockset, attention, lambda)?;
    merge(g, blockset, &highlighted)
}

/// Attention of one block for every batch item and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAttention {
    pub modality: usize,
    pub block: usize,
    /// `[batch, C]`, before any dropout scaling.
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub blocks: Vec<BlockAttention>,
    /// Scaled BlockDropout mask, one entry per block, when dropout ran.
    pub mask: Option<Vec<f64>>,
}

impl AttentionRecord {
    pub fn batch(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.values.shape()[0])
    }

    pub fn block_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.values.shape()[1])
    }

    pub fn n_modalities(&self) -> usize {
        self.blocks.iter().map(|b| b.modality + 1).max().unwrap_or(0)
    }
}

/// Graph-level result of one fusion.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub features: Vec<FeatureVar>,
    pub attention: AttentionRecord,
    /// Attention after dropout, one node per block.
    pub attention_vars: Vec<Var>,
    pub batch_stats: Option<BatchStats>,
}

/// Full split → join → highlight pipeline on graph nodes.
pub fn fuse(
    g: &mut Graph,
    features: &[FeatureVar],
    params: &MsafParams,
    vars: &MsafVars,
    config: &MsafConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<FusionOutput> {
    config.validate()?;
    params.check(config)?;
    if features.len() < 2 {
        return Err(Error::config("fusion needs at least two modalities"));
    }
    if features.len() != params.channels.len() {
        return Err(Error::invalid(format!(
            "{} features for parameters fusing {} modalities",
            features.len(),
            params.channels.len()
        )));
    }
    let batch = features[0].batch(g);
    for (m, (f, &c)) in features.iter().zip(&params.channels).enumerate() {
        if f.channels(g) != c || f.batch(g) != batch {
            return Err(Error::invalid(format!(
                "modality {m}: shape {:?} does not match {c} channels, batch {batch}",
                g.shape(f.var)
            )));
        }
    }

    let c = config.block_channels;
    let blockset: BlockSet = features
        .iter()
        .map(|f| split_channels(g, f, c))
        .collect::<Result<_>>()?;

    let descriptors = match config.descriptor {
        DescriptorSum::PerModality => blockset
            .iter()
            .map(|m| modality_descriptor(g, &m.blocks))
            .collect::<Result<Vec<_>>>()?,
        DescriptorSum::Cumulative => {
            let mut acc = Vec::new();
            let mut out = Vec::new();
            for m in &blockset {
                acc.extend(m.blocks.iter().copied());
                out.push(modality_descriptor(g, &acc)?);
            }
            out
        }
    };

    let (z, batch_stats) = joint_representation(g, &descriptors, &vars.join, &vars.norm, &params.norm, mode)?;
    let n_blocks = blockset.iter().map(|m| m.blocks.len()).sum();
    let attention = block_attention(g, z, &vars.blocks, n_blocks)?;

    let mut blocks = Vec::with_capacity(n_blocks);
    let mut it = attention.iter();
    for (m, split) in blockset.iter().enumerate() {
        for i in 0..split.blocks.len() {
            let a = *it.next().expect("one attention per block");
            blocks.push(BlockAttention {
                modality: m,
                block: i,
                values: g.value(a).clone(),
            });
        }
    }

    let p = if config.dropout_enabled { config.dropout_p } else { 0.0 };
    let (dropped, mask) = block_dropout(g, &attention, p, rng, mode)?;
    let fused = highlight_merge(g, &blockset, &dropped, config.lambda)?;
    Ok(FusionOutput {
        features: fused,
        attention: AttentionRecord { blocks, mask },
        attention_vars: dropped,
        batch_stats,
    })
}

/// Value-level result of [`msaf_forward`].
#[derive(Debug, Clone)]
pub struct MsafOutput {
    pub features: Vec<ModalityFeature>,
    pub attention: AttentionRecord,
    pub batch_stats: Option<BatchStats>,
}

/// Runs one MSAF module on concrete tensors. Outputs have the shapes and
/// axis layouts of the inputs.
pub fn msaf_forward(
    features: &[ModalityFeature],
    params: &MsafParams,
    config: &MsafConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<MsafOutput> {
    let mut g = Graph::new();
    let inputs = features
        .iter()
        .map(|f| {
            let v = g.constant(f.tensor.clone())?;
            FeatureVar::new(&g, v, f.axes.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let vars = params.bind_leaves(&mut g)?;
    let out = fuse(&mut g, &inputs, params, &vars, config, mode, rng)?;
    let fused = out
        .features
        .iter()
        .zip(features)
        .map(|(fv, f)| ModalityFeature {
            tensor: g.value(fv.var).clone(),
            axes: f.axes.clone(),
            modality: f.modality,
        })
        .collect();
    Ok(MsafOutput {
        features: fused,
        attention: out.attention,
        batch_stats: out.batch_stats,
    })
}
