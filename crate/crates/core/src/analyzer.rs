//! Closed-form parameter/FLOP accounting and attention summaries.
//!
//! FLOPs count two per multiply-accumulate of a weight matrix, times the
//! batch; biases, pooling, softmax and normalization are free.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::msaf::{block_counts, msaf_param_count, AttentionRecord, MsafConfig};
use crate::synth::{Split, Targets};
use crate::zoo::FusionNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Msaf,
    MmtmRef,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Msaf => "msaf",
            ModuleKind::MmtmRef => "mmtm_ref",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub kind: ModuleKind,
    pub channels: Vec<usize>,
    /// `None` for the reference module.
    pub config: Option<MsafConfig>,
    pub params: usize,
    pub params_with_norm: usize,
    pub flops: u64,
    pub batch: usize,
}

pub fn count_msaf(channels: &[usize], config: &MsafConfig, batch: usize) -> Result<CountReport> {
    config.validate()?;
    if channels.is_empty() || channels.contains(&0) {
        return Err(Error::config("channel counts must be positive"));
    }
    let c = config.block_channels as u64;
    let reduced = config.reduced() as u64;
    let n_blocks: u64 = block_counts(channels, config.block_channels).iter().sum::<usize>() as u64;
    let macs = c * reduced + n_blocks * reduced * c;
    Ok(CountReport {
        kind: ModuleKind::Msaf,
        channels: channels.to_vec(),
        config: Some(config.clone()),
        params: msaf_param_count(channels, config, false),
        params_with_norm: msaf_param_count(channels, config, true),
        flops: 2 * batch as u64 * macs,
        batch,
    })
}

/// Squeeze-excitation style reference with squeeze width `ΣC_m / 2`: one
/// joint squeeze layer and one excitation layer per modality.
pub fn count_mmtm_ref(channels: &[usize], batch: usize) -> Result<CountReport> {
    let total: usize = channels.iter().sum();
    if channels.is_empty() || channels.contains(&0) {
        return Err(Error::config("channel counts must be positive"));
    }
    if total % 2 != 0 {
        return Err(Error::config(format!(
            "reference module needs an even channel total, got {total}"
        )));
    }
    let squeeze = total / 2;
    let macs = total * squeeze + channels.iter().map(|c| squeeze * c).sum::<usize>();
    let params = macs + squeeze + total;
    Ok(CountReport {
        kind: ModuleKind::MmtmRef,
        channels: channels.to_vec(),
        config: None,
        params,
        params_with_norm: params,
        flops: 2 * batch as u64 * macs as u64,
        batch,
    })
}

/// For each channel width `n`, two `n`-channel modalities counted as MSAF
/// (`C = n/2`, `r = 4`) and as the reference module.
pub fn sweep_counts(widths: &[usize], batch: usize) -> Result<Vec<(CountReport, CountReport)>> {
    if widths.is_empty() {
        return Err(Error::config("empty channel sweep"));
    }
    widths
        .iter()
        .map(|&n| {
            let channels = [n, n];
            let msaf = count_msaf(&channels, &MsafConfig::new(n / 2, 4), batch)
                .map_err(|e| Error::Config(format!("{n} channels: {e}")))?;
            Ok((msaf, count_mmtm_ref(&channels, batch)?))
        })
        .collect()
}

/// `channels,module,params,params_with_norm,flops,batch`; per-modality
/// channel counts are joined with `;`.
pub fn counts_csv<'a>(reports: impl IntoIterator<Item = &'a CountReport>) -> String {
    let mut s = String::from("channels,module,params,params_with_norm,flops,batch\n");
    for r in reports {
        let channels: Vec<String> = r.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            channels.join(";"),
            r.kind.name(),
            r.params,
            r.params_with_norm,
            r.flops,
            r.batch
        );
    }
    s
}

/// One module's attention for a batch, with a class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledAttention {
    pub module: String,
    pub record: AttentionRecord,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Mean per class, summed over each modality's blocks.
    PerClass,
    /// Mean per block over all samples, one group per module.
    PerModule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub module: String,
    /// `None` when pooled over every class.
    pub class: Option<usize>,
    pub modality: usize,
    /// `None` when summed over the modality's blocks.
    pub block: Option<usize>,
    pub channel: usize,
    pub value: f64,
}

pub fn attention_summary(records: &[LabeledAttention], grouping: Grouping) -> Result<Vec<SummaryRow>> {
    let mut modules: Vec<&str> = Vec::new();
    // (module, class, modality, block, channel) -> (sum, count)
    let mut acc: BTreeMap<(usize, Option<usize>, usize, usize, usize), (f64, usize)> = BTreeMap::new();
    for r in records {
        let batch = r.record.batch();
        if r.labels.len() != batch {
            return Err(Error::Invalid(format!(
                "module {}: {} labels for a batch of {batch}",
                r.module,
                r.labels.len()
            )));
        }
        let module = match modules.iter().position(|&m| m == r.module) {
            Some(i) => i,
            None => {
                modules.push(&r.module);
                modules.len() - 1
            }
        };
        for b in &r.record.blocks {
            let c = b.values.shape()[1];
            for (i, &y) in r.labels.iter().enumerate() {
                let class = match grouping {
                    Grouping::PerClass => Some(y),
                    Grouping::PerModule => None,
                };
                for ch in 0..c {
                    let e = acc.entry((module, class, b.modality, b.block, ch)).or_insert((0.0, 0));
                    e.0 += b.values.data()[i * c + ch];
                    e.1 += 1;
                }
            }
        }
    }
    let means = acc.into_iter().map(|(k, (s, n))| (k, s / n as f64));
    let rows = match grouping {
        Grouping::PerModule => means
            .map(|((m, class, modality, block, channel), value)| SummaryRow {
                module: modules[m].to_string(),
                class,
                modality,
                block: Some(block),
                channel,
                value,
            })
            .collect(),
        Grouping::PerClass => {
            let mut summed: BTreeMap<(usize, Option<usize>, usize, usize), f64> = BTreeMap::new();
            for ((m, class, modality, _, channel), v) in means {
                *summed.entry((m, class, modality, channel)).or_insert(0.0) += v;
            }
            summed
                .into_iter()
                .map(|((m, class, modality, channel), value)| SummaryRow {
                    module: modules[m].to_string(),
                    class,
                    modality,
                    block: None,
                    channel,
                    value,
                })
                .collect()
        }
    };
    Ok(rows)
}

/// `module_id,class,modality,block,channel,value`; pooled classes print as
/// `all` and modality sums as `sum`.
pub fn attention_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("module_id,class,modality,block,channel,value\n");
    for r in rows {
        let class = r.class.map_or("all".to_string(), |c| c.to_string());
        let block = r.block.map_or("sum".to_string(), |b| b.to_string());
        let _ = writeln!(
            s,
            "{},{class},{},{block},{},{:.17e}",
            r.module, r.modality, r.channel, r.value
        );
    }
    s
}

/// Raw per-sample attention: `module_id,sample,class,modality,block,channel,value`.
/// Samples are numbered across records of the same module in order.
pub fn attention_records_csv(records: &[LabeledAttention]) -> String {
    let mut s = String::from("module_id,sample,class,modality,block,channel,value\n");
    let mut offsets: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let offset = offsets.entry(&r.module).or_insert(0);
        for b in &r.record.blocks {
            let c = b.values.shape()[1];
            for (i, y) in r.labels.iter().enumerate() {
                for ch in 0..c {
                    let _ = writeln!(
                        s,
                        "{},{},{y},{},{},{ch},{:.17e}",
                        r.module,
                        *offset + i,
                        b.modality,
                        b.block,
                        b.values.data()[i * c + ch]
                    );
                }
            }
        }
        *offset += r.labels.len();
    }
    s
}

/// Runs the model in evaluation mode over a labelled split and collects
/// every module's attention.
pub fn collect_attention(model: &FusionNet, split: &Split, precision: Precision) -> Result<Vec<LabeledAttention>> {
    const CHUNK: usize = 256;
    let labels = match &split.targets {
        Targets::Classes(y) => y,
        Targets::Values(_) => return Err(Error::invalid("attention summaries need class labels")),
    };
    let mut out = Vec::new();
    for start in (0..split.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(split.len())).collect();
        let (inputs, _) = split.gather(&idx)?;
        let (_, attention) = model.predict(&inputs, precision)?;
        for a in attention {
            out.push(LabeledAttention {
                module: a.module,
                record: a.record,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            });
        }
    }
    Ok(out)
}
