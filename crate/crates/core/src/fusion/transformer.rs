//! Pre-norm ViT-style encoder over the three-token sequence
//! `[pathology, radiology, class]` with learned position encodings.
//!
//! Attention uses bias-free Q/K/V projections into `heads * head_dim`
//! channels and a biased output projection back to D. The class token's final
//! state goes through a layer norm and an affine two-logit head.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, Module, Rng};

pub const TOKENS: usize = 3;
/// Positions start at unit scale: the tokens go straight into a layer norm,
/// and a sizeable per-token offset keeps the embedding's magnitude visible.
const POSITION_INIT: f64 = 1.0;
pub const CLASS_TOKEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
}

impl TransformerConfig {
    /// Depth 8, 12 heads of width 64, MLP hidden 1024.
    pub fn full() -> Self {
        TransformerConfig {
            depth: 8,
            heads: 12,
            head_dim: 64,
            mlp_hidden: 1024,
        }
    }

    pub fn desk() -> Self {
        TransformerConfig {
            depth: 2,
            heads: 2,
            head_dim: 8,
            mlp_hidden: 64,
        }
    }

    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(
                "transformer depth, heads, head_dim and mlp_hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub attn_out: Linear,
    pub ln_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

struct BlockCache {
    ln_attn: LayerNormCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln_mlp: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl EncoderBlock {
    fn init(rng: &mut Rng, dim: usize, cfg: &TransformerConfig) -> Self {
        let inner = cfg.inner();
        EncoderBlock {
            ln_attn: LayerNorm::new(dim),
            w_q: Linear::init(rng, dim, inner, 1.0).weight,
            w_k: Linear::init(rng, dim, inner, 1.0).weight,
            w_v: Linear::init(rng, dim, inner, 1.0).weight,
            attn_out: Linear::init(rng, inner, dim, 0.5),
            ln_mlp: LayerNorm::new(dim),
            mlp_in: Linear::init(rng, dim, cfg.mlp_hidden, 1.0),
            mlp_out: Linear::init(rng, cfg.mlp_hidden, dim, 0.5),
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>, cfg: &TransformerConfig) -> (Array2<f64>, BlockCache) {
        let (h, ln_attn) = self.ln_attn.forward(x);
        let q = h.dot(&self.w_q);
        let k = h.dot(&self.w_k);
        let v = h.dot(&self.w_v);
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let mut o = Array2::zeros(q.raw_dim());
        let mut attn = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let cols = s![.., hd * cfg.head_dim..(hd + 1) * cfg.head_dim];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|v| v * scale);
            softmax_rows(&mut scores);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }
        let mut x_mid = self.attn_out.forward(o.view());
        x_mid += &x;

        let (h2, ln_mlp) = self.ln_mlp.forward(x_mid.view());
        let pre_act = self.mlp_in.forward(h2.view());
        let act = pre_act.mapv(gelu);
        let mut out = self.mlp_out.forward(act.view());
        out += &x_mid;
        (
            out,
            BlockCache {
                ln_attn,
                h,
                q,
                k,
                v,
                attn,
                o,
                ln_mlp,
                h2,
                pre_act,
                act,
            },
        )
    }

    fn backward(
        &self,
        cache: &BlockCache,
        d_out: Array2<f64>,
        cfg: &TransformerConfig,
        grad: &mut EncoderBlock,
    ) -> Array2<f64> {
        // feed-forward sublayer
        let d_act = self.mlp_out.backward(cache.act.view(), d_out.view(), &mut grad.mlp_out);
        let mut d_pre = d_act;
        d_pre.zip_mut_with(&cache.pre_act, |d, &z| *d *= gelu_grad(z));
        let d_h2 = self.mlp_in.backward(cache.h2.view(), d_pre.view(), &mut grad.mlp_in);
        let mut d_mid = d_out;
        d_mid += &self.ln_mlp.backward(&cache.ln_mlp, d_h2.view(), &mut grad.ln_mlp);

        // attention sublayer
        let d_o = self.attn_out.backward(cache.o.view(), d_mid.view(), &mut grad.attn_out);
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let mut d_q = Array2::zeros(cache.q.raw_dim());
        let mut d_k = Array2::zeros(cache.k.raw_dim());
        let mut d_v = Array2::zeros(cache.v.raw_dim());
        for hd in 0..cfg.heads {
            let cols = s![.., hd * cfg.head_dim..(hd + 1) * cfg.head_dim];
            let a = &cache.attn[hd];
            let d_oh = d_o.slice(cols);
            let d_a = d_oh.dot(&cache.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&a.t().dot(&d_oh));
            let row_dot = (&d_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut d_s = &d_a - &row_dot;
            d_s *= a;
            d_s.mapv_inplace(|v| v * scale);
            d_q.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
        }
        grad.w_q += &cache.h.t().dot(&d_q);
        grad.w_k += &cache.h.t().dot(&d_k);
        grad.w_v += &cache.h.t().dot(&d_v);
        let d_h = d_q.dot(&self.w_q.t()) + d_k.dot(&self.w_k.t()) + d_v.dot(&self.w_v.t());
        let mut d_x = d_mid;
        d_x += &self.ln_attn.backward(&cache.ln_attn, d_h.view(), &mut grad.ln_attn);
        d_x
    }
}

impl Module for EncoderBlock {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.ln_attn.params();
        p.push(self.w_q.as_slice().expect("standard layout"));
        p.push(self.w_k.as_slice().expect("standard layout"));
        p.push(self.w_v.as_slice().expect("standard layout"));
        p.extend(self.attn_out.params());
        p.extend(self.ln_mlp.params());
        p.extend(self.mlp_in.params());
        p.extend(self.mlp_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.ln_attn.params_mut();
        p.push(self.w_q.as_slice_mut().expect("standard layout"));
        p.push(self.w_k.as_slice_mut().expect("standard layout"));
        p.push(self.w_v.as_slice_mut().expect("standard layout"));
        p.extend(self.attn_out.params_mut());
        p.extend(self.ln_mlp.params_mut());
        p.extend(self.mlp_in.params_mut());
        p.extend(self.mlp_out.params_mut());
        p
    }
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerFusion {
    pub config: TransformerConfig,
    pub class_token: Array1<f64>,
    pub positions: Array2<f64>,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

pub(crate) struct TransformerCache {
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    class_state: Array2<f64>,
}

impl TransformerFusion {
    pub fn init(rng: &mut Rng, dim: usize, config: TransformerConfig) -> Self {
        let class_token = Array1::from_shape_fn(dim, |_| rng.random_range(-0.02..0.02));
        let positions = Array2::from_shape_fn((TOKENS, dim), |_| rng.random_range(-POSITION_INIT..POSITION_INIT));
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock::init(rng, dim, &config))
            .collect();
        TransformerFusion {
            config,
            class_token,
            positions,
            blocks,
            final_norm: LayerNorm::new(dim),
            head: Linear::init(rng, dim, 2, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.class_token.len()
    }

    pub(crate) fn forward(&self, e_path: &[f64], e_rad: &[f64]) -> ([f64; 2], TransformerCache) {
        let dim = self.dim();
        let mut x = self.positions.clone();
        for c in 0..dim {
            x[[0, c]] += e_path[c];
            x[[1, c]] += e_rad[c];
            x[[CLASS_TOKEN, c]] += self.class_token[c];
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, cache) = b.forward(x.view(), &self.config);
            caches.push(cache);
            x = out;
        }
        let class_row = x.slice(s![CLASS_TOKEN..CLASS_TOKEN + 1, ..]);
        let (class_state, final_norm) = self.final_norm.forward(class_row);
        let logits = self.head.forward(class_state.view());
        (
            [logits[[0, 0]], logits[[0, 1]]],
            TransformerCache {
                blocks: caches,
                final_norm,
                class_state,
            },
        )
    }

    /// Returns gradients with respect to the pathology and radiology embeddings.
    pub(crate) fn backward(
        &self,
        cache: &TransformerCache,
        d_logits: [f64; 2],
        grad: &mut TransformerFusion,
    ) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let dl = Array2::from_shape_vec((1, 2), d_logits.to_vec()).expect("two logits");
        let d_state = self.head.backward(cache.class_state.view(), dl.view(), &mut grad.head);
        let d_class = self
            .final_norm
            .backward(&cache.final_norm, d_state.view(), &mut grad.final_norm);
        let mut d_x = Array2::zeros((TOKENS, dim));
        d_x.row_mut(CLASS_TOKEN).assign(&d_class.row(0));
        for (i, b) in self.blocks.iter().enumerate().rev() {
            d_x = b.backward(&cache.blocks[i], d_x, &self.config, &mut grad.blocks[i]);
        }
        grad.positions += &d_x;
        grad.class_token += &d_x.row(CLASS_TOKEN);
        (d_x.row(0).to_vec(), d_x.row(1).to_vec())
    }
}

impl Module for TransformerFusion {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = vec![
            self.class_token.as_slice().expect("standard layout"),
            self.positions.as_slice().expect("standard layout"),
        ];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.final_norm.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = vec![
            self.class_token.as_slice_mut().expect("standard layout"),
            self.positions.as_slice_mut().expect("standard layout"),
        ];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.final_norm.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}
