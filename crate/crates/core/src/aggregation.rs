//! Bag-to-patient aggregation: channel-wise max pooling, mean pooling, and a
//! learned 1-D convolution over a canonically ordered bag.
//!
//! The convolutional aggregator sorts patches by descending L2 norm (ties by
//! original index), convolves every channel independently along the patch
//! axis with zero padding, then max-pools the resulting sequence. With a delta
//! kernel it reduces exactly to [`max_pool_bag`].

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::domain::{Embedding, FeatureBag};
use crate::error::{Error, Result};
use crate::nn::{Module, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Max,
    Avg,
    Conv,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 3] = [AggregatorKind::Max, AggregatorKind::Avg, AggregatorKind::Conv];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Max => "max",
            AggregatorKind::Avg => "avg",
            AggregatorKind::Conv => "conv",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max" => Ok(AggregatorKind::Max),
            "avg" | "mean" => Ok(AggregatorKind::Avg),
            "conv" => Ok(AggregatorKind::Conv),
            other => Err(Error::Config(format!(
                "unknown aggregator '{other}' (expected max, avg or conv)"
            ))),
        }
    }
}

/// Depthwise kernel of shape `(D, kernel_size)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvAggregatorParams {
    pub kernel: Array2<f64>,
}

pub const DEFAULT_KERNEL_SIZE: usize = 3;

impl ConvAggregatorParams {
    pub fn new(kernel: Array2<f64>) -> Result<Self> {
        let ks = kernel.ncols();
        if ks == 0 || ks.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv kernel size must be odd and >= 1, got {ks}"
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conv aggregator kernel".into()));
        }
        Ok(ConvAggregatorParams {
            kernel: kernel.as_standard_layout().into_owned(),
        })
    }

    /// Delta kernel: every channel passes through unchanged.
    pub fn identity(dim: usize, kernel_size: usize) -> Result<Self> {
        let mut k = Array2::zeros((dim, kernel_size));
        if kernel_size % 2 == 1 {
            k.column_mut(kernel_size / 2).fill(1.0);
        }
        ConvAggregatorParams::new(k)
    }

    /// Delta kernel plus small uniform noise.
    pub fn init(rng: &mut Rng, dim: usize, kernel_size: usize) -> Result<Self> {
        let mut p = ConvAggregatorParams::identity(dim, kernel_size)?;
        p.kernel.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.ncols()
    }
}

impl Module for ConvAggregatorParams {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.kernel.as_slice().expect("standard layout")]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.kernel.as_slice_mut().expect("standard layout")]
    }
}

/// Channel-wise maximum over the bag.
pub fn max_pool_bag(bag: &FeatureBag) -> Embedding {
    let (out, _) = max_pool(bag.patches().view());
    Embedding::new(out).expect("max of finite values is finite")
}

/// Channel-wise arithmetic mean over the bag.
pub fn avg_pool_bag(bag: &FeatureBag) -> Embedding {
    Embedding::new(mean_pool(bag.patches().view())).expect("mean of finite values is finite")
}

pub fn conv_aggregate(bag: &FeatureBag, params: &ConvAggregatorParams) -> Result<Embedding> {
    if params.dim() != bag.dim() {
        return Err(Error::dim("conv aggregator kernel rows", bag.dim(), params.dim()));
    }
    let (out, _) = conv_pool(bag.patches().view(), params);
    Embedding::new(out)
}

/// Returns the channel maxima and, per channel, the first row attaining it.
pub(crate) fn max_pool(x: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<usize>) {
    let d = x.ncols();
    let mut best = x.row(0).to_vec();
    let mut arg = vec![0usize; d];
    for (i, row) in x.rows().into_iter().enumerate().skip(1) {
        for c in 0..d {
            if row[c] > best[c] {
                best[c] = row[c];
                arg[c] = i;
            }
        }
    }
    (best, arg)
}

/// Channel means with Neumaier-compensated summation.
pub(crate) fn mean_pool(x: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|c| compensated_sum(x.column(c).iter().copied()) / n)
        .collect()
}

pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Descending squared L2 norm, ties broken by original row index.
pub(crate) fn canonical_order(x: ArrayView2<'_, f64>) -> Vec<usize> {
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order
}

pub(crate) struct ConvTrace {
    order: Vec<usize>,
    /// Per channel, the sorted position whose convolution output is maximal.
    argmax: Vec<usize>,
}

pub(crate) fn conv_pool(x: ArrayView2<'_, f64>, params: &ConvAggregatorParams) -> (Vec<f64>, ConvTrace) {
    let order = canonical_order(x);
    let n = x.nrows();
    let d = x.ncols();
    let ks = params.kernel_size();
    let half = ks / 2;
    let mut best = vec![f64::NEG_INFINITY; d];
    let mut argmax = vec![0usize; d];
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..ks {
                let pos = i as isize + j as isize - half as isize;
                if pos < 0 || pos >= n as isize {
                    continue;
                }
                acc += params.kernel[[c, j]] * x[[order[pos as usize], c]];
            }
            if acc > best[c] || i == 0 {
                best[c] = acc;
                argmax[c] = i;
            }
        }
    }
    (best, ConvTrace { order, argmax })
}

/// Aggregator instance used inside a trainable pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregator {
    Max,
    Avg,
    Conv {
        params: ConvAggregatorParams,
        trainable: bool,
    },
}

pub(crate) enum AggregateCache {
    Max(Vec<usize>),
    Avg(usize),
    Conv(ConvTrace),
}

impl Aggregator {
    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::Max => AggregatorKind::Max,
            Aggregator::Avg => AggregatorKind::Avg,
            Aggregator::Conv { .. } => AggregatorKind::Conv,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Aggregator::Conv { trainable: true, .. })
    }

    pub fn conv_params(&self) -> Option<&ConvAggregatorParams> {
        match self {
            Aggregator::Conv { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn aggregate(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub(crate) fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, AggregateCache)> {
        if x.nrows() == 0 {
            return Err(Error::Precondition("cannot aggregate an empty bag".into()));
        }
        Ok(match self {
            Aggregator::Max => {
                let (out, arg) = max_pool(x);
                (out, AggregateCache::Max(arg))
            }
            Aggregator::Avg => (mean_pool(x), AggregateCache::Avg(x.nrows())),
            Aggregator::Conv { params, .. } => {
                if params.dim() != x.ncols() {
                    return Err(Error::dim("conv aggregator kernel rows", x.ncols(), params.dim()));
                }
                let (out, trace) = conv_pool(x, params);
                (out, AggregateCache::Conv(trace))
            }
        })
    }

    /// Gradient with respect to the bag matrix; kernel gradients go to `grad`
    /// when supplied.
    pub(crate) fn backward(
        &self,
        cache: &AggregateCache,
        x: ArrayView2<'_, f64>,
        d_out: &[f64],
        grad: Option<&mut ConvAggregatorParams>,
    ) -> Array2<f64> {
        let mut dx = Array2::zeros(x.raw_dim());
        match (self, cache) {
            (Aggregator::Max, AggregateCache::Max(arg)) => {
                for (c, &i) in arg.iter().enumerate() {
                    dx[[i, c]] += d_out[c];
                }
            }
            (Aggregator::Avg, AggregateCache::Avg(n)) => {
                let inv = 1.0 / *n as f64;
                for mut row in dx.rows_mut() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = d_out[c] * inv;
                    }
                }
            }
            (Aggregator::Conv { params, .. }, AggregateCache::Conv(trace)) => {
                let n = x.nrows() as isize;
                let ks = params.kernel_size();
                let half = ks as isize / 2;
                let mut grad = grad;
                for (c, &i) in trace.argmax.iter().enumerate() {
                    let g = d_out[c];
                    for j in 0..ks {
                        let pos = i as isize + j as isize - half;
                        if pos < 0 || pos >= n {
                            continue;
                        }
                        let row = trace.order[pos as usize];
                        dx[[row, c]] += params.kernel[[c, j]] * g;
                        if let Some(gr) = grad.as_deref_mut() {
                            gr.kernel[[c, j]] += x[[row, c]] * g;
                        }
                    }
                }
            }
            _ => unreachable!("aggregate cache does not match aggregator"),
        }
        dx
    }
}

/// Builds a fresh aggregator of the requested kind for a run of width `dim`.
pub fn build_aggregator(
    kind: AggregatorKind,
    dim: usize,
    rng: &mut Rng,
    freeze_identity_kernel: bool,
) -> Result<Aggregator> {
    Ok(match kind {
        AggregatorKind::Max => Aggregator::Max,
        AggregatorKind::Avg => Aggregator::Avg,
        AggregatorKind::Conv if freeze_identity_kernel => Aggregator::Conv {
            params: ConvAggregatorParams::identity(dim, DEFAULT_KERNEL_SIZE)?,
            trainable: false,
        },
        AggregatorKind::Conv => Aggregator::Conv {
            params: ConvAggregatorParams::init(rng, dim, DEFAULT_KERNEL_SIZE)?,
            trainable: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bag(rows: Array2<f64>) -> FeatureBag {
        FeatureBag::new(rows).unwrap()
    }

    #[test]
    fn max_pool_two_patches() {
        let e = max_pool_bag(&bag(array![[1.0, -2.0], [0.0, 5.0]]));
        assert_eq!(e.as_slice(), &[1.0, 5.0]);
    }

    #[test]
    fn singleton_bag_is_identity() {
        let b = bag(array![[0.3, -1.5, 2.0]]);
        assert_eq!(max_pool_bag(&b).as_slice(), &[0.3, -1.5, 2.0]);
        assert_eq!(avg_pool_bag(&b).as_slice(), &[0.3, -1.5, 2.0]);
        let id = ConvAggregatorParams::identity(3, 3).unwrap();
        assert_eq!(conv_aggregate(&b, &id).unwrap().as_slice(), &[0.3, -1.5, 2.0]);
    }

    #[test]
    fn avg_pool_mean_and_idempotence() {
        assert_eq!(
            avg_pool_bag(&bag(array![[2.0, 0.0], [0.0, 2.0]])).as_slice(),
            &[1.0, 1.0]
        );
        let e = [0.1, -7.25, 3.3];
        let copies = Array2::from_shape_fn((7, 3), |(_, c)| e[c]);
        let out = avg_pool_bag(&bag(copies));
        for (a, b) in out.as_slice().iter().zip(e.iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn kernel_size_must_be_odd() {
        assert!(ConvAggregatorParams::new(Array2::zeros((2, 2))).is_err());
        assert!(ConvAggregatorParams::new(Array2::zeros((2, 0))).is_err());
        assert!(ConvAggregatorParams::new(Array2::zeros((2, 1))).is_ok());
    }

    #[test]
    fn conv_rejects_wrong_kernel_width() {
        let b = bag(array![[1.0, 2.0]]);
        let p = ConvAggregatorParams::identity(3, 3).unwrap();
        assert!(matches!(conv_aggregate(&b, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn canonical_order_sorts_by_norm_then_index() {
        let x = array![[1.0, 0.0], [3.0, 0.0], [0.0, 1.0], [0.0, -3.0]];
        assert_eq!(canonical_order(x.view()), vec![1, 3, 0, 2]);
    }

    #[test]
    fn empty_matrix_rejected_by_pipeline_aggregator() {
        let x = Array2::<f64>::zeros((0, 4));
        assert!(Aggregator::Max.forward(x.view()).is_err());
    }
}
