//! Finite-difference sweep over randomly drawn tiny fusion problems: plain
//! MSAF (evaluation and training mode), segmented MSAF for `q ∈ {1,2,3}`, and
//! whole networks under every head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Precision, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_with, GradCheckOptions, DEFAULT_EPS, DOUBLE_TOLERANCE, SINGLE_TOLERANCE};
use crate::msaf::{fuse, init_msaf, MsafConfig, MsafParams};
use crate::nn::{Binder, FeatureVar, Parameterized};
use crate::seq::seq_fuse;
use crate::tensor::{AxisSpec, Tensor};
use crate::zoo::{build_fusion_network, EncoderSpec, FusionNet, FusionNetSpec, Head, Placement, Tap, TaskKind};

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Random configurations per component.
    pub configs: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub eps: f64,
    pub precision: Precision,
    /// Fault-injection offset added to every analytic gradient.
    pub analytic_bias: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            configs: 20,
            seed: 0,
            eps: DEFAULT_EPS,
            precision: Precision::Double,
            analytic_bias: 0.0,
        }
    }
}

impl SuiteOptions {
    pub fn tolerance(&self) -> f64 {
        match self.precision {
            Precision::Double => DOUBLE_TOLERANCE,
            Precision::Single => SINGLE_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub component: String,
    pub cases: usize,
    pub worst: f64,
    /// Gradient entries compared, and entries skipped at relu kinks.
    pub checked: usize,
    pub skipped: usize,
}

/// Outcome of one random instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Case {
    pub error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub components: Vec<ComponentResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.components.iter().filter(|c| !(c.worst < self.tolerance)).collect()
    }

    pub fn passes(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.components.iter().map(|c| c.worst).fold(0.0, f64::max)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn perturb_msaf(p: &mut MsafParams, rng: &mut ChaCha8Rng) {
    for t in p.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    p.norm
        .running_mean
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
    p.norm
        .running_var
        .iter_mut()
        .for_each(|v| *v = rng.random_range(0.2..2.0));
}

fn perturb_net(net: &mut FusionNet, rng: &mut ChaCha8Rng) {
    for t in net.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    for p in net.placements.iter_mut().flatten() {
        p.norm
            .running_mean
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
        p.norm
            .running_var
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.3..1.5));
    }
}

fn random_config(rng: &mut ChaCha8Rng, min_c: usize) -> MsafConfig {
    let c = rng.random_range(min_c..=4);
    let divisors: Vec<usize> = (1..=c).filter(|r| c % r == 0).collect();
    let r = divisors[rng.random_range(0..divisors.len())];
    let lambda = if rng.random_bool(0.2) {
        0.0
    } else {
        rng.random_range(0.0..0.9)
    };
    MsafConfig::new(c, r).with_lambda(lambda)
}

/// Weighted sum of every fused output, so each output element gets a
/// distinct sensitivity.
fn weighted_sum(g: &mut Graph, outs: &[FeatureVar], weights: &[Tensor]) -> Result<Var> {
    let mut sums = Vec::with_capacity(outs.len());
    for (f, w) in outs.iter().zip(weights) {
        let w = g.constant(w.clone())?;
        let y = g.mul(f.var, w)?;
        sums.push(g.sum_all(y)?);
    }
    g.add_all(&sums)
}

fn check(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], opts: &SuiteOptions) -> Result<Case> {
    let report = grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps: opts.eps,
            precision: opts.precision,
            analytic_bias: opts.analytic_bias,
        },
    )?;
    Ok(Case {
        error: report.max_rel_error,
        checked: report.analytic.iter().map(Vec::len).sum::<usize>() - report.skipped.len(),
        skipped: report.skipped.len(),
    })
}

/// Plain MSAF on `[batch, C_m, positions]` features. Training-mode batch
/// norm cancels `b_Z` exactly (zero gradient), so it is held constant there;
/// those cases also use a batch of at least three and `C ≥ 2` so no
/// parameter's gradient vanishes identically.
fn msaf_case(seed: u64, mode: Mode, opts: &SuiteOptions) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = mode == Mode::Train;
    let m = rng.random_range(2..=3);
    let config = random_config(&mut rng, if train { 2 } else { 1 });
    let batch = rng.random_range(if train { 3..=4 } else { 1..=4 });
    let channels: Vec<usize> = (0..m).map(|_| rng.random_range(1..=6)).collect();
    let mut params = init_msaf(&channels, &config, &mut rng)?;
    perturb_msaf(&mut params, &mut rng);
    let features: Vec<Tensor> = channels
        .iter()
        .map(|&c| uniform(&[batch, c, rng.random_range(1..=4)], -1.0, 1.0, &mut rng))
        .collect();
    let weights: Vec<Tensor> = features
        .iter()
        .map(|f| uniform(f.shape(), -1.0, 1.0, &mut rng))
        .collect();

    let param_tensors: Vec<Tensor> = params.params().into_iter().cloned().collect();
    // Index 1 is b_Z in binding order.
    let frozen = if train { Some(1) } else { None };
    let mut inputs: Vec<Tensor> = param_tensors
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != frozen)
        .map(|(_, t)| t.clone())
        .collect();
    let n_free = inputs.len();
    inputs.extend(features);
    check(
        |g, vars| {
            let mut bound = Vec::with_capacity(param_tensors.len());
            let mut free = vars[..n_free].iter();
            for (i, t) in param_tensors.iter().enumerate() {
                if Some(i) == frozen {
                    bound.push(g.constant(t.clone())?);
                } else {
                    bound.push(*free.next().expect("counted"));
                }
            }
            let mut b = Binder::new(&bound);
            let pv = params.bind(&mut b)?;
            b.finish()?;
            let feats = vars[n_free..]
                .iter()
                .map(|&v| FeatureVar::new(g, v, AxisSpec::channels_first(1)))
                .collect::<Result<Vec<_>>>()?;
            let out = fuse(
                g,
                &feats,
                &params,
                &pv,
                &config,
                mode,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?;
            weighted_sum(g, &out.features, &weights)
        },
        &inputs,
        opts,
    )
}

/// Segmented MSAF on sequence-major `[batch, time, C_m]` features.
fn seq_case(seed: u64, q: usize, opts: &SuiteOptions) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_config(&mut rng, 1).with_segments(q);
    let batch = rng.random_range(1..=3);
    let channels: Vec<usize> = (0..2).map(|_| rng.random_range(1..=5)).collect();
    let params = (0..q)
        .map(|_| {
            let mut p = init_msaf(&channels, &config, &mut rng)?;
            perturb_msaf(&mut p, &mut rng);
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<Tensor> = channels
        .iter()
        .map(|&c| uniform(&[batch, rng.random_range(q..=q + 3), c], -1.0, 1.0, &mut rng))
        .collect();
    let weights: Vec<Tensor> = features
        .iter()
        .map(|f| uniform(f.shape(), -1.0, 1.0, &mut rng))
        .collect();
    let counts: Vec<usize> = params.iter().map(|p| p.params().len()).collect();
    let mut inputs: Vec<Tensor> = params.iter().flat_map(|p| p.params().into_iter().cloned()).collect();
    let n_params = inputs.len();
    inputs.extend(features);
    check(
        |g, vars| {
            let mut offset = 0;
            let mut seg_vars = Vec::with_capacity(q);
            for (p, &n) in params.iter().zip(&counts) {
                let mut b = Binder::new(&vars[offset..offset + n]);
                seg_vars.push(p.bind(&mut b)?);
                b.finish()?;
                offset += n;
            }
            let feats = vars[n_params..]
                .iter()
                .map(|&v| FeatureVar::new(g, v, AxisSpec::sequence_major()))
                .collect::<Result<Vec<_>>>()?;
            let out = seq_fuse(
                g,
                &feats,
                &params,
                &seg_vars,
                &config,
                Mode::Eval,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?;
            weighted_sum(g, &out.features, &weights)
        },
        &inputs,
        opts,
    )
}

/// A two-encoder network under `head` with one random placement; the loss
/// is cross-entropy against random labels, differentiated with respect to
/// every parameter and input.
fn network_case(seed: u64, head: Head, opts: &SuiteOptions) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recurrent = rng.random_bool(0.5);
    let batch = rng.random_range(1..=3);
    let classes = 3;
    let steps = rng.random_range(3..=5);
    let mut encoders = Vec::new();
    let mut inputs = Vec::new();
    for _ in 0..2 {
        let c_in = rng.random_range(1..=3);
        let widths = [rng.random_range(2..=4), rng.random_range(2..=4)];
        if recurrent {
            encoders.push(EncoderSpec::recurrent(c_in, &widths));
            inputs.push(uniform(&[batch, steps, c_in], -1.0, 1.0, &mut rng));
        } else {
            let kernels = [rng.random_range(1..=2), rng.random_range(1..=2)];
            encoders.push(EncoderSpec::conv1d(c_in, &widths, &kernels));
            inputs.push(uniform(&[batch, c_in, steps], -1.0, 1.0, &mut rng));
        }
    }
    let layer = rng.random_range(0..=1);
    let mut msaf = random_config(&mut rng, 1);
    if recurrent {
        msaf = msaf.with_segments(rng.random_range(1..=2));
    }
    let spec = FusionNetSpec {
        encoders,
        placements: vec![Placement {
            taps: vec![Tap { encoder: 0, layer }, Tap { encoder: 1, layer }],
            msaf,
        }],
        head,
        outputs: classes,
        task: TaskKind::Classification,
    };
    let mut net = build_fusion_network(&spec, &mut rng)?;
    perturb_net(&mut net, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let n_params = net.params().len();
    let mut all: Vec<Tensor> = net.params().into_iter().cloned().collect();
    all.extend(inputs);
    check(
        |g, vars| {
            let mut b = Binder::new(&vars[..n_params]);
            let nv = net.bind(&mut b)?;
            b.finish()?;
            let out = net.forward(g, &nv, &vars[n_params..], Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            g.cross_entropy(out.output, &labels)
        },
        &all,
        opts,
    )
}

pub const HEADS: [Head; 6] = [
    Head::SumLogits,
    Head::AverageLogits,
    Head::ConcatFc,
    Head::LateAverage,
    Head::LateMultiply,
    Head::EarlyConcatFc { hidden: 3 },
];

/// Runs every component on `opts.configs` random instances each.
pub fn run_grad_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut components = Vec::new();
    let mut run = |name: String, case: &dyn Fn(u64) -> Result<Case>| -> Result<()> {
        let mut r = ComponentResult {
            component: name,
            cases: opts.configs,
            worst: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in 0..opts.configs {
            let c = case(opts.seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
            r.worst = if c.error.is_nan() {
                f64::INFINITY
            } else {
                r.worst.max(c.error)
            };
            r.checked += c.checked;
            r.skipped += c.skipped;
        }
        components.push(r);
        Ok(())
    };
    run("msaf_forward/eval".into(), &|s| msaf_case(s, Mode::Eval, opts))?;
    run("msaf_forward/train".into(), &|s| msaf_case(s, Mode::Train, opts))?;
    for q in 1..=3 {
        run(format!("seq_msaf_forward/q{q}"), &|s| seq_case(s, q, opts))?;
    }
    for head in HEADS {
        run(format!("head/{}", head.name()), &|s| network_case(s, head, opts))?;
    }
    Ok(SuiteReport {
        components,
        tolerance: opts.tolerance(),
    })
}
