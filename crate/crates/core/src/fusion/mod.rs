//! Decision-level, feature-level and multi-level fusion of the pathology and
//! radiology streams.

mod mlp;
mod pipeline;
mod strategy;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{Embedding, Label, Probability};
use crate::error::{Error, Result};
use crate::nn::{weighted_cross_entropy, Module, Rng};

pub use mlp::{MlpFusion, DEFAULT_MLP_HIDDEN};
pub use pipeline::{train_feature_fusion, train_feature_fusion_with, FeatureFusionModel, RadiologyInit, RadiologyPath};
pub use strategy::{predict_strategy, FusionSpec, Strategy, StrategyConfig, TrainedArtifacts};
pub use transformer::{EncoderBlock, TransformerConfig, TransformerFusion};

use mlp::MlpCache;
use transformer::TransformerCache;

/// Mean of the two modality probabilities.
pub fn decision_fuse(p_path: Probability, p_rad: Probability) -> Probability {
    hull_mean(&[p_path, p_rad])
}

/// Mean of the pathology, radiology and feature-fusion probabilities.
pub fn m2fuse(p_path: Probability, p_rad: Probability, p_fea: Probability) -> Probability {
    hull_mean(&[p_path, p_rad, p_fea])
}

fn hull_mean(ps: &[Probability]) -> Probability {
    let lo = ps.iter().map(|p| p.value()).fold(f64::INFINITY, f64::min);
    let hi = ps.iter().map(|p| p.value()).fold(f64::NEG_INFINITY, f64::max);
    let mean = ps.iter().map(|p| p.value()).sum::<f64>() / ps.len() as f64;
    // rounding of the sum can step one ulp outside the inputs
    Probability::new(mean.clamp(lo, hi)).expect("mean of probabilities is a probability")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Transformer,
    Mlp,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Transformer => "transformer",
            BackboneKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "transformer" | "vit" => Ok(BackboneKind::Transformer),
            "mlp" | "cnn" => Ok(BackboneKind::Mlp),
            other => Err(Error::Config(format!(
                "unknown backbone '{other}' (expected transformer or mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case")]
pub enum BackboneConfig {
    Transformer(TransformerConfig),
    Mlp { hidden: usize },
}

impl BackboneConfig {
    pub fn mlp() -> Self {
        BackboneConfig::Mlp {
            hidden: DEFAULT_MLP_HIDDEN,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneConfig::Transformer(_) => BackboneKind::Transformer,
            BackboneConfig::Mlp { .. } => BackboneKind::Mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::Transformer(t) => t.validate(),
            BackboneConfig::Mlp { hidden: 0 } => Err(Error::Config("MLP hidden width must be positive".into())),
            BackboneConfig::Mlp { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case")]
pub enum Backbone {
    Transformer(TransformerFusion),
    Mlp(MlpFusion),
}

/// Learned predictor over a pair of modality embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub dim: usize,
    pub backbone: Backbone,
}

pub(crate) enum BackboneCache {
    Transformer(TransformerCache),
    Mlp(MlpCache),
}

impl FusionModel {
    pub fn init(rng: &mut Rng, dim: usize, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        let backbone = match *config {
            BackboneConfig::Transformer(t) => Backbone::Transformer(TransformerFusion::init(rng, dim, t)),
            BackboneConfig::Mlp { hidden } => Backbone::Mlp(MlpFusion::init(rng, dim, hidden)),
        };
        Ok(FusionModel { dim, backbone })
    }

    pub fn kind(&self) -> BackboneKind {
        match self.backbone {
            Backbone::Transformer(_) => BackboneKind::Transformer,
            Backbone::Mlp(_) => BackboneKind::Mlp,
        }
    }

    fn check(&self, e_path: &[f64], e_rad: &[f64]) -> Result<()> {
        if e_path.len() != self.dim {
            return Err(Error::dim("pathology embedding", self.dim, e_path.len()));
        }
        if e_rad.len() != self.dim {
            return Err(Error::dim("radiology embedding", self.dim, e_rad.len()));
        }
        Ok(())
    }

    pub fn logits(&self, e_path: &[f64], e_rad: &[f64]) -> Result<[f64; 2]> {
        Ok(self.forward(e_path, e_rad)?.0)
    }

    pub(crate) fn forward(&self, e_path: &[f64], e_rad: &[f64]) -> Result<([f64; 2], BackboneCache)> {
        self.check(e_path, e_rad)?;
        Ok(match &self.backbone {
            Backbone::Transformer(t) => {
                let (l, c) = t.forward(e_path, e_rad);
                (l, BackboneCache::Transformer(c))
            }
            Backbone::Mlp(m) => {
                let (l, c) = m.forward(e_path, e_rad);
                (l, BackboneCache::Mlp(c))
            }
        })
    }

    /// Accumulates parameter gradients; returns gradients for both embeddings.
    pub(crate) fn backward(
        &self,
        cache: &BackboneCache,
        d_logits: [f64; 2],
        grad: &mut FusionModel,
    ) -> (Vec<f64>, Vec<f64>) {
        match (&self.backbone, cache, &mut grad.backbone) {
            (Backbone::Transformer(t), BackboneCache::Transformer(c), Backbone::Transformer(g)) => {
                t.backward(c, d_logits, g)
            }
            (Backbone::Mlp(m), BackboneCache::Mlp(c), Backbone::Mlp(g)) => m.backward(c, d_logits, g),
            _ => unreachable!("backbone cache does not match architecture"),
        }
    }
}

/// Loss and gradients of one weighted cross-entropy evaluation.
#[derive(Debug, Clone)]
pub struct FusionGradient {
    pub loss: f64,
    pub params: FusionModel,
    pub d_path: Vec<f64>,
    pub d_rad: Vec<f64>,
}

impl FusionModel {
    /// Weighted cross-entropy of one embedding pair and its gradients with
    /// respect to every parameter and both embeddings.
    pub fn loss_gradient(&self, e_path: &[f64], e_rad: &[f64], label: Label, weight: f64) -> Result<FusionGradient> {
        let (logits, cache) = self.forward(e_path, e_rad)?;
        let (loss, d) = weighted_cross_entropy(logits, label.class_index(), weight);
        let mut params = self.zeros_like();
        let (d_path, d_rad) = self.backward(&cache, d, &mut params);
        Ok(FusionGradient {
            loss,
            params,
            d_path,
            d_rad,
        })
    }

    pub fn loss(&self, e_path: &[f64], e_rad: &[f64], label: Label, weight: f64) -> Result<f64> {
        Ok(weighted_cross_entropy(self.logits(e_path, e_rad)?, label.class_index(), weight).0)
    }
}

impl Module for FusionModel {
    fn params(&self) -> Vec<&[f64]> {
        match &self.backbone {
            Backbone::Transformer(t) => t.params(),
            Backbone::Mlp(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.backbone {
            Backbone::Transformer(t) => t.params_mut(),
            Backbone::Mlp(m) => m.params_mut(),
        }
    }
}

/// MSI probability of a fusion model for one embedding pair.
pub fn feature_fuse(model: &FusionModel, e_path: &Embedding, e_rad: &Embedding) -> Result<Probability> {
    Probability::from_logits(model.logits(e_path.as_slice(), e_rad.as_slice())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{rng_from_seed, Linear};

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    #[test]
    fn decision_and_m2_means() {
        assert_eq!(decision_fuse(p(0.2), p(0.8)).value(), 0.5);
        assert!((m2fuse(p(0.9), p(0.6), p(0.9)).value() - 0.8).abs() < 1e-15);
        for v in [0.0, 0.1, 0.3, 0.7, 1.0, 1.0 / 3.0] {
            assert_eq!(decision_fuse(p(v), p(v)).value(), v);
            assert_eq!(m2fuse(p(v), p(v), p(v)).value(), v);
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut rng = rng_from_seed(3);
        for cfg in [
            BackboneConfig::Transformer(TransformerConfig {
                depth: 1,
                heads: 2,
                head_dim: 3,
                mlp_hidden: 5,
            }),
            BackboneConfig::Mlp { hidden: 7 },
        ] {
            let mut m = FusionModel::init(&mut rng, 4, &cfg).unwrap();
            match &mut m.backbone {
                Backbone::Transformer(t) => t.head = Linear::zeros(4, 2),
                Backbone::Mlp(mm) => mm.out = Linear::zeros(7, 2),
            }
            let e = Embedding::new(vec![0.3, -1.0, 2.0, 0.5]).unwrap();
            let f = Embedding::new(vec![1.0, 1.0, -4.0, 0.0]).unwrap();
            assert_eq!(feature_fuse(&m, &e, &f).unwrap().value(), 0.5);
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let mut rng = rng_from_seed(0);
        let m = FusionModel::init(&mut rng, 4, &BackboneConfig::mlp()).unwrap();
        let e = Embedding::new(vec![0.0; 4]).unwrap();
        let short = Embedding::new(vec![0.0; 3]).unwrap();
        assert!(matches!(
            feature_fuse(&m, &e, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn backbone_names_parse() {
        assert_eq!(
            "transformer".parse::<BackboneKind>().unwrap(),
            BackboneKind::Transformer
        );
        assert_eq!("cnn".parse::<BackboneKind>().unwrap(), BackboneKind::Mlp);
        assert!("rnn".parse::<BackboneKind>().is_err());
    }
}
