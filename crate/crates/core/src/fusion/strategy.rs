//! Prediction strategies and their dispatch over trained artifacts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{decision_fuse, m2fuse, BackboneConfig, FeatureFusionModel, TransformerConfig};
use crate::aggregation::AggregatorKind;
use crate::domain::{PatientRecord, Probability};
use crate::encoders::{EncoderInput, EncoderModel, FrozenEncoder, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PathoUni,
    RadioUni,
    Decision,
    Feature,
    GuidedFeature,
    M2fusion,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::PathoUni,
        Strategy::RadioUni,
        Strategy::Decision,
        Strategy::Feature,
        Strategy::GuidedFeature,
        Strategy::M2fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PathoUni => "patho_uni",
            Strategy::RadioUni => "radio_uni",
            Strategy::Decision => "decision",
            Strategy::Feature => "feature",
            Strategy::GuidedFeature => "guided_feature",
            Strategy::M2fusion => "m2fusion",
        }
    }

    pub fn needs_pathology(self) -> bool {
        matches!(self, Strategy::PathoUni | Strategy::Decision | Strategy::M2fusion)
    }

    pub fn needs_radiology(self) -> bool {
        !matches!(self, Strategy::PathoUni | Strategy::Feature)
    }

    pub fn needs_fusion(self) -> bool {
        matches!(self, Strategy::Feature | Strategy::GuidedFeature | Strategy::M2fusion)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// Identity of a trained feature-fusion artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub guided: bool,
    pub aggregator: AggregatorKind,
    pub backbone: BackboneConfig,
    pub identity_conv_kernel: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub aggregator: AggregatorKind,
    pub backbone: BackboneConfig,
    pub guided: bool,
    /// Training schedule of the fusion model (unused by non-fusion strategies).
    pub train: TrainConfig,
    /// Debug: conv aggregator with a fixed delta kernel.
    #[serde(default)]
    pub identity_conv_kernel: bool,
}

impl StrategyConfig {
    /// Max-pool aggregation and a transformer backbone; m2fusion uses the
    /// guided feature model.
    pub fn new(strategy: Strategy, transformer: TransformerConfig, train: TrainConfig) -> Self {
        StrategyConfig {
            strategy,
            aggregator: AggregatorKind::Max,
            backbone: BackboneConfig::Transformer(transformer),
            guided: matches!(strategy, Strategy::GuidedFeature | Strategy::M2fusion),
            train,
            identity_conv_kernel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.strategy, self.guided) {
            (Strategy::Feature, true) => {
                return Err(Error::Config(
                    "strategy 'feature' is unguided; use 'guided_feature'".into(),
                ))
            }
            (Strategy::GuidedFeature, false) => {
                return Err(Error::Config("strategy 'guided_feature' requires guided = true".into()))
            }
            _ => {}
        }
        if self.identity_conv_kernel && self.aggregator != AggregatorKind::Conv {
            return Err(Error::Config(
                "identity_conv_kernel applies only to the conv aggregator".into(),
            ));
        }
        self.backbone.validate()?;
        if self.strategy.needs_fusion() {
            self.train.validate()?;
        }
        Ok(())
    }

    pub fn fusion_spec(&self) -> Option<FusionSpec> {
        self.strategy.needs_fusion().then_some(FusionSpec {
            guided: self.guided,
            aggregator: self.aggregator,
            backbone: self.backbone,
            identity_conv_kernel: self.identity_conv_kernel,
            train: self.train.clone(),
        })
    }

    /// Row label, e.g. `guided_feature[max+transformer]`.
    pub fn name(&self) -> String {
        if !self.strategy.needs_fusion() {
            return self.strategy.name().to_string();
        }
        let agg = if self.identity_conv_kernel {
            "conv-identity".to_string()
        } else {
            self.aggregator.to_string()
        };
        let guide = match (self.strategy, self.guided) {
            (Strategy::M2fusion, false) => ",unguided",
            _ => "",
        };
        format!("{}[{}+{}{}]", self.strategy, agg, self.backbone.kind(), guide)
    }
}

/// Models trained for one fold.
#[derive(Debug, Clone, Default)]
pub struct TrainedArtifacts {
    pub pathology: Option<EncoderModel>,
    pub radiology: Option<FrozenEncoder>,
    pub fusion: Vec<(FusionSpec, FeatureFusionModel)>,
}

impl TrainedArtifacts {
    pub fn fusion_for(&self, spec: &FusionSpec) -> Option<&FeatureFusionModel> {
        self.fusion.iter().find(|(s, _)| s == spec).map(|(_, m)| m)
    }

    fn pathology(&self) -> Result<&EncoderModel> {
        self.pathology
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact("pathology encoder".into()))
    }

    fn radiology(&self) -> Result<&FrozenEncoder> {
        self.radiology
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact("radiology encoder".into()))
    }
}

/// Routes one patient through the composition that defines `cfg.strategy`.
pub fn predict_strategy(
    cfg: &StrategyConfig,
    artifacts: &TrainedArtifacts,
    patient: &PatientRecord,
) -> Result<Probability> {
    let mode = cfg.train.patient_mode;
    let path = || artifacts.pathology()?.predict_patient(patient, mode);
    let rad = || {
        artifacts
            .radiology()?
            .predict_proba(EncoderInput::from(&patient.radiology))
    };
    let fea = || {
        let spec = cfg.fusion_spec().expect("fusion strategy");
        if spec.guided && artifacts.radiology.is_none() {
            return Err(Error::MissingArtifact(
                "frozen radiology encoder for guided fusion".into(),
            ));
        }
        artifacts
            .fusion_for(&spec)
            .ok_or_else(|| Error::MissingArtifact(format!("fusion model for {}", cfg.name())))?
            .predict(patient)
    };
    match cfg.strategy {
        Strategy::PathoUni => path(),
        Strategy::RadioUni => rad(),
        Strategy::Decision => Ok(decision_fuse(path()?, rad()?)),
        Strategy::Feature | Strategy::GuidedFeature => fea(),
        Strategy::M2fusion => Ok(m2fuse(path()?, rad()?, fea()?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("late".parse::<Strategy>().is_err());
    }

    #[test]
    fn guided_flag_must_match_strategy() {
        let mut c = StrategyConfig::new(Strategy::Feature, TransformerConfig::desk(), TrainConfig::default());
        assert!(c.validate().is_ok());
        c.guided = true;
        assert!(c.validate().is_err());
        let mut g = StrategyConfig::new(
            Strategy::GuidedFeature,
            TransformerConfig::desk(),
            TrainConfig::default(),
        );
        assert!(g.guided);
        g.guided = false;
        assert!(g.validate().is_err());
    }
}
