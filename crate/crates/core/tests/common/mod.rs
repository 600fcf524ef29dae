//! Independent loop implementations used as oracles by several test targets.
#![allow(dead_code)]

use msaf::autodiff::Mode;
use msaf::msaf::{init_msaf, MsafConfig, MsafParams};
use msaf::{AxisSpec, ModalityFeature, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One randomly drawn fusion problem on `[batch, C_m, positions]` features.
pub struct Instance {
    pub features: Vec<ModalityFeature>,
    pub params: MsafParams,
    pub config: MsafConfig,
    pub mode: Mode,
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Randomizes every parameter (including biases, scale/shift and running
/// statistics) so no term of the forward pass is trivially zero or one.
pub fn perturb_params(p: &mut MsafParams, rng: &mut impl Rng) {
    use msaf::nn::Parameterized;
    for t in p.params_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    for v in &mut p.norm.running_mean {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in &mut p.norm.running_var {
        *v = rng.random_range(0.2..2.0);
    }
}

/// Draws a tiny instance with at most `max_channels` channels per modality.
/// Channel counts are frequently not multiples of `C`, exercising padding.
pub fn random_instance(seed: u64, max_channels: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=3);
    let block_channels = rng.random_range(1..=4);
    let divisors: Vec<usize> = (1..=block_channels).filter(|r| block_channels % r == 0).collect();
    let reduction = divisors[rng.random_range(0..divisors.len())];
    let lambda = if rng.random_bool(0.2) {
        0.0
    } else {
        rng.random_range(0.0..1.0)
    };
    let config = MsafConfig::new(block_channels, reduction).with_lambda(lambda);
    let batch = rng.random_range(2..=4);
    let channels: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_channels)).collect();
    let mut params = init_msaf(&channels, &config, &mut rng).unwrap();
    perturb_params(&mut params, &mut rng);
    let features = channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let positions = rng.random_range(1..=4);
            let t = random_tensor(&[batch, c, positions], &mut rng);
            ModalityFeature::new(t, AxisSpec::channels_first(1), i).unwrap()
        })
        .collect();
    let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
    Instance {
        features,
        params,
        config,
        mode,
    }
}

/// Oracle output: fused features and per-block attention `[block][b][c]`.
pub struct OracleOutput {
    pub features: Vec<Vec<f64>>,
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Split, join and highlight written as explicit loops over flat buffers.
/// Features must be `[batch, C_m, positions]`.
pub fn straight_line_msaf(features: &[ModalityFeature], p: &MsafParams, cfg: &MsafConfig, mode: Mode) -> OracleOutput {
    let c = cfg.block_channels;
    let cr = c / cfg.reduction;
    let batch = features[0].tensor.shape()[0];
    let eps = 1e-5;

    // Descriptors D_m[b][ch]: spatial mean of the per-modality block sum.
    let mut g = vec![vec![0.0; c]; batch];
    let mut n_blocks = Vec::new();
    for f in features {
        let s = f.tensor.shape();
        let (cm, pos) = (s[1], s[2]);
        let nb = cm.div_ceil(c);
        n_blocks.push(nb);
        for b in 0..batch {
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..nb {
                    let src = i * c + ch;
                    if src < cm {
                        for q in 0..pos {
                            sum += f.tensor.at(&[b, src, q]);
                        }
                    }
                }
                g[b][ch] += sum / pos as f64;
            }
        }
    }

    // Z = relu(bn(W_Z G + b_Z)).
    let w = &p.join.weight;
    let mut pre = vec![vec![0.0; cr]; batch];
    for b in 0..batch {
        for j in 0..cr {
            let mut acc = p.join.bias.at(&[j]);
            for ch in 0..c {
                acc += w.at(&[j, ch]) * g[b][ch];
            }
            pre[b][j] = acc;
        }
    }
    let mut z = vec![vec![0.0; cr]; batch];
    for j in 0..cr {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = (0..batch).map(|b| pre[b][j]).sum::<f64>() / batch as f64;
                let var = (0..batch).map(|b| (pre[b][j] - mean).powi(2)).sum::<f64>() / batch as f64;
                (mean, var)
            }
            Mode::Eval => (p.norm.running_mean[j], p.norm.running_var[j]),
        };
        for b in 0..batch {
            let y = p.norm.gamma.at(&[j]) * (pre[b][j] - mean) / (var + eps).sqrt() + p.norm.beta.at(&[j]);
            z[b][j] = y.max(0.0);
        }
    }

    // Logits, then softmax across every block.
    let total: usize = n_blocks.iter().sum();
    let mut u = vec![vec![vec![0.0; c]; batch]; total];
    for (k, head) in p.blocks.iter().enumerate() {
        for b in 0..batch {
            for ch in 0..c {
                let mut acc = head.bias.at(&[ch]);
                for j in 0..cr {
                    acc += head.weight.at(&[ch, j]) * z[b][j];
                }
                u[k][b][ch] = acc;
            }
        }
    }
    let mut a = u.clone();
    for b in 0..batch {
        for ch in 0..c {
            let denom: f64 = (0..total).map(|k| u[k][b][ch].exp()).sum();
            for k in 0..total {
                a[k][b][ch] = u[k][b][ch].exp() / denom;
            }
        }
    }

    // Highlight and merge, dropping padding.
    let mut out = Vec::new();
    let mut first_block = 0;
    for f in features {
        let s = f.tensor.shape();
        let (cm, pos) = (s[1], s[2]);
        let mut y = vec![0.0; batch * cm * pos];
        for b in 0..batch {
            for src in 0..cm {
                let k = first_block + src / c;
                let mult = cfg.lambda + (1.0 - cfg.lambda) * a[k][b][src % c];
                for q in 0..pos {
                    y[(b * cm + src) * pos + q] = mult * f.tensor.at(&[b, src, q]);
                }
            }
        }
        first_block += cm.div_ceil(c);
        out.push(y);
    }
    OracleOutput {
        features: out,
        attention: a,
    }
}
