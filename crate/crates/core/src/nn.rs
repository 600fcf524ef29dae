//! Parameter containers and the graph-level building blocks shared by the
//! fusion module and the encoders.

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Mode, Var, BATCH_NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{AxisSpec, Tensor};

/// Anything owning trainable tensors.
///
/// `params` and `params_mut` must list tensors in the same order, and the
/// type's `bind` method must consume a [`Binder`] in that order too.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Creates one differentiable leaf per parameter, in declaration order.
pub fn param_leaves(g: &mut Graph, m: &(impl Parameterized + ?Sized)) -> Result<Vec<Var>> {
    m.params().into_iter().map(|t| g.leaf(t.clone())).collect()
}

/// Hands out parameter leaves in declaration order.
pub struct Binder<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Binder<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::invalid("parameter binder exhausted"))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.vars.len() {
            return Err(Error::invalid(format!(
                "bound {} of {} parameter leaves",
                self.pos,
                self.vars.len()
            )));
        }
        Ok(())
    }
}

/// Fan-in uniform initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Dense layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn init(n_in: usize, n_out: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        Self {
            weight: uniform_fan_in(&[n_out, n_in], n_in, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: b.next_var()?,
            bias: b.next_var()?,
        })
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.weight, self.bias)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Scale/shift parameters and running statistics of a 1-D batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Result<BatchNormVars> {
        Ok(BatchNormVars {
            gamma: b.next_var()?,
            beta: b.next_var()?,
        })
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

impl Parameterized for BatchNorm1d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Batch norm over `x: [batch, features]`; batch statistics in training
/// mode, running statistics in evaluation mode.
pub fn batch_norm_1d(
    g: &mut Graph,
    x: Var,
    vars: &BatchNormVars,
    state: &BatchNorm1d,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let running = match mode {
        Mode::Train => None,
        Mode::Eval => Some((state.running_mean.as_slice(), state.running_var.as_slice())),
    };
    g.batch_norm(x, vars.gamma, vars.beta, running)
}

/// A graph node carrying a feature map and its axis roles.
#[derive(Debug, Clone)]
pub struct FeatureVar {
    pub var: Var,
    pub axes: AxisSpec,
}

impl FeatureVar {
    pub fn new(g: &Graph, var: Var, axes: AxisSpec) -> Result<Self> {
        axes.validate(g.shape(var).len())?;
        Ok(Self { var, axes })
    }

    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.var)[self.axes.channel]
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.var)[self.axes.batch]
    }

    /// Reorders to `[batch, channel, positions]`, flattening all pooled axes.
    /// Returns the view and the permuted (pre-flatten) shape needed to undo it.
    pub fn to_canonical(&self, g: &mut Graph) -> Result<(Var, Vec<usize>)> {
        let perm = self.axes.canonical_perm();
        let permuted = if perm.iter().enumerate().all(|(i, &p)| i == p) {
            self.var
        } else {
            g.permute(self.var, &perm)?
        };
        let shape = g.shape(permuted).to_vec();
        let positions: usize = shape[2..].iter().product();
        let flat = g.reshape(permuted, &[shape[0], shape[1], positions])?;
        Ok((flat, shape))
    }

    /// Inverse of [`FeatureVar::to_canonical`].
    pub fn from_canonical(&self, g: &mut Graph, x: Var, permuted_shape: &[usize]) -> Result<Var> {
        let perm = self.axes.canonical_perm();
        let y = g.reshape(x, permuted_shape)?;
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(y);
        }
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        g.permute(y, &inverse)
    }
}

/// Per batch item and channel, the mean over every spatial (and sequence)
/// position. Returns `[batch, channels]`.
pub fn global_average_pool(g: &mut Graph, x: &FeatureVar) -> Result<Var> {
    if x.axes.pooled_axes().is_empty() {
        return Err(Error::Axis(
            "global_average_pool needs at least one spatial axis".into(),
        ));
    }
    let (flat, _) = x.to_canonical(g)?;
    g.mean_axis(flat, 2)
}

/// Softmax across a list of same-shaped logit blocks, independently at every
/// element position.
pub fn softmax_stack(g: &mut Graph, blocks: &[Var]) -> Result<Vec<Var>> {
    let first = *blocks
        .first()
        .ok_or_else(|| Error::invalid("softmax_stack of an empty block list"))?;
    let shape = g.shape(first).to_vec();
    for &b in blocks {
        if g.shape(b) != shape.as_slice() {
            return Err(Error::shape("softmax_stack", &shape, g.shape(b)));
        }
    }
    let stacked = g.stack(blocks)?;
    let attn = g.softmax(stacked, 0)?;
    (0..blocks.len())
        .map(|i| {
            let s = g.slice_axis(attn, 0, i, 1)?;
            g.reshape(s, &shape)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = uniform_fan_in(&[16, 16], 16, &mut rng);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn binder_counts_leaves() {
        let mut g = Graph::new();
        let lin = Linear::init(3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let leaves = param_leaves(&mut g, &lin).unwrap();
        let mut b = Binder::new(&leaves);
        let vars = lin.bind(&mut b).unwrap();
        b.finish().unwrap();
        assert_eq!(g.value(vars.weight), &lin.weight);
        assert_eq!(g.value(vars.bias), &lin.bias);
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut bn = BatchNorm1d::new(1);
        bn.update_running(&BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        });
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.2).abs() < 1e-15);
    }
}
