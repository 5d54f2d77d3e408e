//! `concat(e_path, e_rad) -> ReLU(affine) -> affine -> two logits`.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::nn::{relu_inplace, Linear, Module, Rng};

pub const DEFAULT_MLP_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFusion {
    pub hidden: Linear,
    pub out: Linear,
}

pub(crate) struct MlpCache {
    x: Array2<f64>,
    h: Array2<f64>,
}

impl MlpFusion {
    pub fn init(rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        MlpFusion {
            hidden: Linear::init(rng, 2 * dim, hidden, 2f64.sqrt()),
            out: Linear::init(rng, hidden, 2, 1.0),
        }
    }

    pub(crate) fn forward(&self, e_path: &[f64], e_rad: &[f64]) -> ([f64; 2], MlpCache) {
        let x = Array2::from_shape_fn((1, e_path.len() + e_rad.len()), |(_, c)| {
            if c < e_path.len() {
                e_path[c]
            } else {
                e_rad[c - e_path.len()]
            }
        });
        let mut h = self.hidden.forward(x.view());
        relu_inplace(&mut h);
        let logits = self.out.forward(h.view());
        ([logits[[0, 0]], logits[[0, 1]]], MlpCache { x, h })
    }

    pub(crate) fn backward(&self, cache: &MlpCache, d_logits: [f64; 2], grad: &mut MlpFusion) -> (Vec<f64>, Vec<f64>) {
        let dl = Array2::from_shape_vec((1, 2), d_logits.to_vec()).expect("two logits");
        let mut dh = self.out.backward(cache.h.view(), dl.view(), &mut grad.out);
        dh.zip_mut_with(&cache.h, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        let dx = self.hidden.backward(cache.x.view(), dh.view(), &mut grad.hidden);
        let dim = dx.ncols() / 2;
        (dx.slice(s![0, ..dim]).to_vec(), dx.slice(s![0, dim..]).to_vec())
    }
}

impl Module for MlpFusion {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.hidden.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}
