//! Time-segmented fusion for sequence features: every modality is cut into
//! `q` segments along its sequence axis and segment `j` of all modalities is
//! fused by its own MSAF parameter set.

use rand::RngCore;

use crate::autodiff::{BatchStats, Graph, Mode};
use crate::error::{Error, Result};
use crate::msaf::{fuse, AttentionRecord, MsafConfig, MsafParams, MsafVars};
use crate::nn::FeatureVar;
use crate::tensor::ModalityFeature;

/// Per-modality `(start, len)` ranges along the sequence axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub q: usize,
    pub ranges: Vec<Vec<(usize, usize)>>,
}

/// `q` segments of `⌊S/q⌋` steps per modality; the remainder joins the
/// second-last segment.
pub fn plan_segments(lengths: &[usize], q: usize) -> Result<SegmentPlan> {
    if q == 0 {
        return Err(Error::config("segment count must be at least 1"));
    }
    let ranges = lengths
        .iter()
        .enumerate()
        .map(|(m, &s)| {
            if s < q {
                return Err(Error::config(format!(
                    "modality {m} has sequence length {s}, shorter than {q} segments"
                )));
            }
            let base = s / q;
            let mut lens = vec![base; q];
            let extra = s % q;
            lens[q.saturating_sub(2)] += extra;
            let mut start = 0;
            Ok(lens
                .into_iter()
                .map(|len| {
                    let r = (start, len);
                    start += len;
                    r
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentPlan { q, ranges })
}

#[derive(Debug, Clone)]
pub struct SeqFusionOutput {
    pub features: Vec<FeatureVar>,
    /// One record per segment.
    pub attention: Vec<AttentionRecord>,
    pub batch_stats: Vec<Option<BatchStats>>,
}

fn sequence_axis(g: &Graph, f: &FeatureVar, m: usize) -> Result<(usize, usize)> {
    let axis = f
        .axes
        .sequence
        .ok_or_else(|| Error::Axis(format!("modality {m} has no sequence axis")))?;
    Ok((axis, g.shape(f.var)[axis]))
}

pub fn seq_fuse(
    g: &mut Graph,
    features: &[FeatureVar],
    params: &[MsafParams],
    vars: &[MsafVars],
    config: &MsafConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<SeqFusionOutput> {
    let q = config.segments;
    if params.len() != q || vars.len() != q {
        return Err(Error::config(format!(
            "{} parameter sets for {q} segments",
            params.len()
        )));
    }
    if q == 1 {
        let out = fuse(g, features, &params[0], &vars[0], config, mode, rng)?;
        return Ok(SeqFusionOutput {
            features: out.features,
            attention: vec![out.attention],
            batch_stats: vec![out.batch_stats],
        });
    }

    let axes = features
        .iter()
        .enumerate()
        .map(|(m, f)| sequence_axis(g, f, m))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = axes.iter().map(|&(_, len)| len).collect();
    let plan = plan_segments(&lengths, q)?;

    let mut pieces: Vec<Vec<crate::Var>> = vec![Vec::with_capacity(q); features.len()];
    let mut attention = Vec::with_capacity(q);
    let mut batch_stats = Vec::with_capacity(q);
    for j in 0..q {
        let segment = features
            .iter()
            .enumerate()
            .map(|(m, f)| {
                let (start, len) = plan.ranges[m][j];
                let v = g.slice_axis(f.var, axes[m].0, start, len)?;
                FeatureVar::new(g, v, f.axes.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let out = fuse(g, &segment, &params[j], &vars[j], config, mode, rng)?;
        for (m, f) in out.features.into_iter().enumerate() {
            pieces[m].push(f.var);
        }
        attention.push(out.attention);
        batch_stats.push(out.batch_stats);
    }

    let fused = features
        .iter()
        .zip(pieces)
        .zip(&axes)
        .map(|((f, parts), &(axis, _))| {
            let v = g.concat(&parts, axis)?;
            FeatureVar::new(g, v, f.axes.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeqFusionOutput {
        features: fused,
        attention,
        batch_stats,
    })
}

#[derive(Debug, Clone)]
pub struct SeqMsafOutput {
    pub features: Vec<ModalityFeature>,
    pub attention: Vec<AttentionRecord>,
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// Value-level [`seq_fuse`].
pub fn seq_msaf_forward(
    features: &[ModalityFeature],
    params: &[MsafParams],
    config: &MsafConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<SeqMsafOutput> {
    let mut g = Graph::new();
    let inputs = features
        .iter()
        .map(|f| {
            let v = g.constant(f.tensor.clone())?;
            FeatureVar::new(&g, v, f.axes.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let vars = params
        .iter()
        .map(|p| p.bind_leaves(&mut g))
        .collect::<Result<Vec<_>>>()?;
    let out = seq_fuse(&mut g, &inputs, params, &vars, config, mode, rng)?;
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
    Ok(SeqMsafOutput {
        features: fused,
        attention: out.attention,
        batch_stats: out.batch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lens(plan: &SegmentPlan, m: usize) -> Vec<usize> {
        plan.ranges[m].iter().map(|r| r.1).collect()
    }

    #[test]
    fn even_split() {
        let p = plan_segments(&[10], 5).unwrap();
        assert_eq!(lens(&p, 0), vec![2; 5]);
    }

    #[test]
    fn remainder_joins_second_last() {
        let p = plan_segments(&[11], 5).unwrap();
        assert_eq!(lens(&p, 0), vec![2, 2, 2, 3, 2]);
        assert_eq!(p.ranges[0][4], (9, 2));
    }

    #[test]
    fn single_segment_covers_everything() {
        let p = plan_segments(&[7], 1).unwrap();
        assert_eq!(p.ranges[0], vec![(0, 7)]);
    }

    #[test]
    fn too_short_sequence_names_modality() {
        let err = plan_segments(&[8, 2], 3).unwrap_err().to_string();
        assert!(err.contains("modality 1"), "{err}");
    }

    #[test]
    fn each_modality_uses_its_own_length() {
        let p = plan_segments(&[9, 4], 2).unwrap();
        assert_eq!(lens(&p, 0), vec![5, 4]);
        assert_eq!(lens(&p, 1), vec![2, 2]);
    }
}
