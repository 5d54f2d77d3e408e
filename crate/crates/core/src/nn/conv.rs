use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Linear, Module, Rng};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// 3x3 convolution, stride 2, zero padding 1, followed by ReLU.
///
/// Activations are channels-last matrices of shape `(H * W, C)`; the kernel is
/// stored as an im2col weight of shape `(C_in * 9, C_out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    out: Array2<f64>,
    in_hw: (usize, usize),
}

pub fn output_size(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

impl Conv2d {
    pub fn init(rng: &mut Rng, in_channels: usize, out_channels: usize) -> Self {
        let lin = Linear::init(rng, in_channels * KERNEL * KERNEL, out_channels, 2f64.sqrt());
        Conv2d {
            weight: lin.weight,
            bias: lin.bias,
            in_channels,
            out_channels,
        }
    }

    fn im2col(&self, x: ArrayView2<'_, f64>, (h, w): (usize, usize)) -> Array2<f64> {
        let (oh, ow) = (output_size(h), output_size(w));
        let c = self.in_channels;
        let mut cols = Array2::zeros((oh * ow, c * KERNEL * KERNEL));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..KERNEL {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = x.row(iy as usize * w + ix as usize);
                        for ch in 0..c {
                            row[(ch * KERNEL + ky) * KERNEL + kx] = src[ch];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Returns the post-ReLU activation and its spatial size.
    pub fn forward(&self, x: ArrayView2<'_, f64>, hw: (usize, usize)) -> (Array2<f64>, (usize, usize), ConvCache) {
        let cols = self.im2col(x, hw);
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        out.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        let out_hw = (output_size(hw.0), output_size(hw.1));
        let cache = ConvCache {
            cols,
            out: out.clone(),
            in_hw: hw,
        };
        (out, out_hw, cache)
    }

    /// Backward through ReLU and the convolution. The input gradient is only
    /// assembled when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: ArrayView2<'_, f64>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut dz = dout.to_owned();
        dz.zip_mut_with(&cache.out, |d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
        grad.weight += &cache.cols.t().dot(&dz);
        grad.bias += &dz.sum_axis(Axis(0));
        if !need_input_grad {
            return None;
        }
        let dcols = dz.dot(&self.weight.t());
        let (h, w) = cache.in_hw;
        let (oh, ow) = (output_size(h), output_size(w));
        let mut dx = Array2::zeros((h * w, self.in_channels));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                for ky in 0..KERNEL {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let mut dst = dx.row_mut(iy as usize * w + ix as usize);
                        for ch in 0..self.in_channels {
                            dst[ch] += row[(ch * KERNEL + ky) * KERNEL + kx];
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes_halve() {
        assert_eq!(output_size(32), 16);
        assert_eq!(output_size(16), 8);
        assert_eq!(output_size(5), 3);
        assert_eq!(output_size(1), 1);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = crate::nn::rng_from_seed(11);
        let conv = Conv2d::init(&mut rng, 2, 3);
        let (h, w) = (5, 4);
        let x = Array2::from_shape_fn((h * w, 2), |(p, c)| ((p * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let (out, (oh, ow), _) = conv.forward(x.view(), (h, w));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..3 {
                    let mut acc = conv.bias[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight[[(ci * 3 + ky) * 3 + kx, co]]
                                        * x[[iy as usize * w + ix as usize, ci]];
                                }
                            }
                        }
                    }
                    let expected = acc.max(0.0);
                    assert!((out[[oy * ow + ox, co]] - expected).abs() < 1e-12);
                }
            }
        }
    }
}
