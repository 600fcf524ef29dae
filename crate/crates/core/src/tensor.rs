//! Dense row-major tensors and the axis metadata that lets fusion code find
//! the channel, spatial and sequence dimensions of a feature map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Gradient buffer filled by [`crate::autodiff::Gradients::attach`].
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[offset(&self.shape, index)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Flat offset of a multi-index in a row-major layout.
pub fn offset(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        debug_assert!(i < d);
        acc * d + i
    })
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` element counts.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Role of every axis of a feature tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub batch: usize,
    pub channel: usize,
    #[serde(default)]
    pub spatial: Vec<usize>,
    #[serde(default)]
    pub sequence: Option<usize>,
}

impl AxisSpec {
    /// `[batch, channel, spatial...]`, the layout convolutional encoders emit.
    pub fn channels_first(spatial_dims: usize) -> Self {
        Self {
            batch: 0,
            channel: 1,
            spatial: (2..2 + spatial_dims).collect(),
            sequence: None,
        }
    }

    /// `[batch, time, channel]`, the layout recurrent encoders emit.
    pub fn sequence_major() -> Self {
        Self {
            batch: 0,
            channel: 2,
            spatial: Vec::new(),
            sequence: Some(1),
        }
    }

    pub fn rank(&self) -> usize {
        2 + self.spatial.len() + usize::from(self.sequence.is_some())
    }

    /// Axes averaged by global pooling: every spatial axis plus the sequence
    /// axis, in ascending order.
    pub fn pooled_axes(&self) -> Vec<usize> {
        let mut axes = self.spatial.clone();
        axes.extend(self.sequence);
        axes.sort_unstable();
        axes
    }

    /// Permutation bringing a tensor to `[batch, channel, pooled...]`.
    pub fn canonical_perm(&self) -> Vec<usize> {
        let mut perm = vec![self.batch, self.channel];
        perm.extend(self.pooled_axes());
        perm
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        let mut seen = vec![false; rank];
        let all = [self.batch, self.channel]
            .into_iter()
            .chain(self.spatial.iter().copied())
            .chain(self.sequence);
        for axis in all {
            if axis >= rank {
                return Err(Error::Axis(format!("axis {axis} out of range for rank {rank}")));
            }
            if std::mem::replace(&mut seen[axis], true) {
                return Err(Error::Axis(format!("axis {axis} assigned twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Axis(format!("{self:?} does not cover all {rank} axes")));
        }
        Ok(())
    }
}

/// One modality's feature map together with its axis roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeature {
    pub tensor: Tensor,
    pub axes: AxisSpec,
    pub modality: usize,
}

impl ModalityFeature {
    pub fn new(tensor: Tensor, axes: AxisSpec, modality: usize) -> Result<Self> {
        axes.validate(tensor.rank())?;
        Ok(Self { tensor, axes, modality })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[self.axes.channel]
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[self.axes.batch]
    }

    pub fn sequence_len(&self) -> Option<usize> {
        self.axes.sequence.map(|a| self.tensor.shape()[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(axis_split(&[2, 3, 4], 1), (2, 3, 4));
    }

    #[test]
    fn axis_spec_validation() {
        assert!(AxisSpec::channels_first(2).validate(4).is_ok());
        assert!(AxisSpec::channels_first(2).validate(5).is_err());
        let dup = AxisSpec {
            batch: 0,
            channel: 0,
            spatial: vec![1],
            sequence: None,
        };
        assert!(dup.validate(2).is_err());
        assert_eq!(AxisSpec::sequence_major().canonical_perm(), vec![0, 2, 1]);
    }
}
