//! End-to-end feature-level fusion: patch projection, bag aggregation,
//! radiology embedding and a fusion backbone trained on patient labels.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BackboneCache, FusionModel, StrategyConfig};
use crate::aggregation::{build_aggregator, AggregateCache, Aggregator, ConvAggregatorParams};
use crate::domain::{ClassCounts, DataSplit, Embedding, Label, PatientId, PatientRecord, Probability, Provenance};
use crate::encoders::{class_weights, EncoderCache, EncoderInput, EncoderModel, EncoderNet, FrozenEncoder, Modality};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::nn::{self, relu_inplace, weighted_cross_entropy, Linear, Module, Optimizer};

const TAG_AGGREGATOR: u64 = 0x4147_4752;
const TAG_RADIOLOGY: u64 = 0x5241_4449;
const TAG_SHUFFLE: u64 = 0x5348_5546;

/// Where the fusion model's radiology embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", content = "encoder", rename_all = "snake_case")]
pub enum RadiologyPath {
    Frozen(FrozenEncoder),
    Trainable(EncoderModel),
}

impl RadiologyPath {
    pub fn encoder(&self) -> &EncoderModel {
        match self {
            RadiologyPath::Frozen(f) => f.model(),
            RadiologyPath::Trainable(m) => m,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, RadiologyPath::Frozen(_))
    }
}

/// How the radiology path is initialized for fusion training.
#[derive(Debug, Clone, Copy)]
pub enum RadiologyInit<'a> {
    /// Fresh encoder trained jointly with the fusion model.
    Scratch,
    /// Pre-trained encoder whose embeddings stay fixed.
    Frozen(&'a FrozenEncoder),
    /// Pre-trained encoder that keeps training with the fusion model.
    FineTune(&'a EncoderModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFusionModel {
    pub dim: usize,
    pub patch_proj: Linear,
    pub aggregator: Aggregator,
    pub radiology: RadiologyPath,
    pub fusion: FusionModel,
    pub provenance: Provenance,
}

struct Trace {
    h: Array2<f64>,
    agg: AggregateCache,
    rad: Option<EncoderCache>,
    backbone: BackboneCache,
    logits: [f64; 2],
}

struct Grads {
    patch_proj: Linear,
    kernel: Option<ConvAggregatorParams>,
    radiology: Option<EncoderNet>,
    fusion: FusionModel,
}

impl Grads {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.patch_proj.params();
        if let Some(k) = &self.kernel {
            p.extend(k.params());
        }
        if let Some(r) = &self.radiology {
            p.extend(r.params());
        }
        p.extend(self.fusion.params());
        p
    }
}

impl FeatureFusionModel {
    /// Aggregated pathology embedding (width D) of a bag.
    pub fn pathology_embedding(&self, record: &PatientRecord) -> Result<Embedding> {
        let mut h = self.project(record)?;
        relu_inplace(&mut h);
        Embedding::new(self.aggregator.aggregate(h.view())?)
    }

    pub fn radiology_embedding(&self, record: &PatientRecord) -> Result<Embedding> {
        self.radiology.encoder().embed_radiology(record)
    }

    pub fn logits(&self, record: &PatientRecord) -> Result<[f64; 2]> {
        let e_path = self.pathology_embedding(record)?;
        let e_rad = self.radiology_embedding(record)?;
        self.fusion.logits(e_path.as_slice(), e_rad.as_slice())
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<Probability> {
        Probability::from_logits(self.logits(record)?)
    }

    fn project(&self, record: &PatientRecord) -> Result<Array2<f64>> {
        let x = record.bag.patches();
        if x.ncols() != self.patch_proj.input_dim() {
            return Err(Error::dim(
                format!("bag of patient {}", record.patient_id),
                self.patch_proj.input_dim(),
                x.ncols(),
            ));
        }
        Ok(self.patch_proj.forward(x.view()))
    }

    fn forward(&self, record: &PatientRecord, cached_rad: Option<&[f64]>) -> Result<Trace> {
        let mut h = self.project(record)?;
        relu_inplace(&mut h);
        let (e_path, agg) = self.aggregator.forward(h.view())?;
        let (e_rad, rad) = match (&self.radiology, cached_rad) {
            (RadiologyPath::Frozen(_), Some(e)) => (e.to_vec(), None),
            (RadiologyPath::Frozen(f), None) => (f.embed(EncoderInput::from(&record.radiology))?.into_vec(), None),
            (RadiologyPath::Trainable(m), _) => {
                let (e, _, cache) = m.forward(EncoderInput::from(&record.radiology))?;
                (e, Some(cache))
            }
        };
        let (logits, backbone) = self.fusion.forward(&e_path, &e_rad)?;
        Ok(Trace {
            h,
            agg,
            rad,
            backbone,
            logits,
        })
    }

    fn backward(&self, record: &PatientRecord, trace: &Trace, d_logits: [f64; 2], grad: &mut Grads) {
        let (d_path, d_rad) = self.fusion.backward(&trace.backbone, d_logits, &mut grad.fusion);
        let mut dh = self
            .aggregator
            .backward(&trace.agg, trace.h.view(), &d_path, grad.kernel.as_mut());
        dh.zip_mut_with(&trace.h, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        self.patch_proj
            .accumulate(record.bag.patches().view(), dh.view(), &mut grad.patch_proj);
        if let (RadiologyPath::Trainable(m), Some(cache), Some(g)) =
            (&self.radiology, &trace.rad, grad.radiology.as_mut())
        {
            m.backward(cache, Some(&d_rad), None, g);
        }
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            patch_proj: self.patch_proj.zeros_like(),
            kernel: match &self.aggregator {
                Aggregator::Conv {
                    params,
                    trainable: true,
                } => Some(params.zeros_like()),
                _ => None,
            },
            radiology: match &self.radiology {
                RadiologyPath::Trainable(m) => Some(m.net.zeros_like()),
                RadiologyPath::Frozen(_) => None,
            },
            fusion: self.fusion.zeros_like(),
        }
    }

    /// Trainable parameters in the same order as `Grads::params`.
    fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.patch_proj.params_mut();
        if let Aggregator::Conv {
            params,
            trainable: true,
        } = &mut self.aggregator
        {
            p.extend(params.params_mut());
        }
        if let RadiologyPath::Trainable(m) = &mut self.radiology {
            p.extend(m.net.params_mut());
        }
        p.extend(self.fusion.params_mut());
        p
    }

    fn all_finite(&self) -> bool {
        self.patch_proj.all_finite()
            && self.aggregator.conv_params().is_none_or(|k| k.all_finite())
            && self.radiology.encoder().all_finite()
            && self.fusion.all_finite()
    }
}

/// Trains the feature-level fusion pipeline described by `cfg`.
///
/// Unguided: both modality paths start from scratch. Guided: radiology
/// embeddings come from `frozen` (required), and the pathology patch
/// projection starts from the trained pathology encoder when one is given.
pub fn train_feature_fusion(
    split: &DataSplit<'_>,
    held_out: &BTreeSet<PatientId>,
    cfg: &StrategyConfig,
    frozen: Option<&FrozenEncoder>,
    pathology: Option<&EncoderModel>,
) -> Result<FeatureFusionModel> {
    match (cfg.guided, frozen) {
        (true, Some(f)) => train_feature_fusion_with(split, held_out, cfg, RadiologyInit::Frozen(f), pathology),
        (true, None) => Err(Error::MissingArtifact(
            "guided feature fusion needs a frozen radiology encoder".into(),
        )),
        (false, _) => train_feature_fusion_with(split, held_out, cfg, RadiologyInit::Scratch, None),
    }
}

pub fn train_feature_fusion_with(
    split: &DataSplit<'_>,
    held_out: &BTreeSet<PatientId>,
    cfg: &StrategyConfig,
    radiology: RadiologyInit<'_>,
    pathology: Option<&EncoderModel>,
) -> Result<FeatureFusionModel> {
    let tc = &cfg.train;
    tc.validate()?;
    let counts = split.train_counts();
    if counts.msi == 0 || counts.mss == 0 {
        return Err(Error::Training(format!(
            "feature fusion: training set has a single class (MSI {}, MSS {})",
            counts.msi, counts.mss
        )));
    }
    let split_ids = split.seen_ids();
    let mut patients: BTreeSet<PatientId> = split_ids.clone();
    let radiology = match radiology {
        RadiologyInit::Scratch => RadiologyPath::Trainable(EncoderModel::init_for(
            Modality::Radiology,
            split,
            nn::derive_seed(tc.seed, TAG_RADIOLOGY),
        )?),
        RadiologyInit::Frozen(f) => {
            f.provenance().check_disjoint(held_out)?;
            patients.extend(f.provenance().patients.iter().cloned());
            RadiologyPath::Frozen(f.clone())
        }
        RadiologyInit::FineTune(m) => {
            m.provenance.check_disjoint(held_out)?;
            patients.extend(m.provenance.patients.iter().cloned());
            RadiologyPath::Trainable(m.clone())
        }
    };
    let pretrained_patch = match pathology {
        Some(m) => {
            m.provenance.check_disjoint(held_out)?;
            patients.extend(m.provenance.patients.iter().cloned());
            match &m.net {
                EncoderNet::Affine(a) if m.modality == Modality::Pathology => Some(a.hidden.clone()),
                _ => {
                    return Err(Error::Config(
                        "pathology initialization needs an affine pathology encoder".into(),
                    ))
                }
            }
        }
        None => None,
    };
    if radiology.encoder().dim != split.dim {
        return Err(Error::dim(
            "radiology encoder width",
            split.dim,
            radiology.encoder().dim,
        ));
    }
    let provenance = Provenance::new(format!("{} fusion", cfg.name()), patients);
    // training data itself must not overlap the held-out patients
    Provenance::new("fusion training split", split_ids).check_disjoint(held_out)?;

    let input_dim = split.train[0].bag.dim();
    let mut init_rng = nn::rng_from_seed(tc.seed);
    let mut patch_proj = Linear::init(&mut init_rng, input_dim, split.dim, 2f64.sqrt());
    if let Some(p) = pretrained_patch {
        if (p.input_dim(), p.output_dim()) != (input_dim, split.dim) {
            return Err(Error::dim("pretrained pathology projection", input_dim, p.input_dim()));
        }
        patch_proj = p;
    }
    let fusion = FusionModel::init(&mut init_rng, split.dim, &cfg.backbone)?;
    let mut agg_rng = nn::rng_from_seed(nn::derive_seed(tc.seed, TAG_AGGREGATOR));
    let aggregator = build_aggregator(cfg.aggregator, split.dim, &mut agg_rng, cfg.identity_conv_kernel)?;
    let mut model = FeatureFusionModel {
        dim: split.dim,
        patch_proj,
        aggregator,
        radiology,
        fusion,
        provenance,
    };

    let cached: Vec<Option<Vec<f64>>> = match &model.radiology {
        RadiologyPath::Frozen(f) => split
            .train
            .iter()
            .map(|r| f.embed(EncoderInput::from(&r.radiology)).map(|e| Some(e.into_vec())))
            .collect::<Result<_>>()?,
        RadiologyPath::Trainable(_) => vec![None; split.train.len()],
    };

    let weights = class_weights(counts);
    let mut rng = nn::rng_from_seed(nn::derive_seed(tc.seed, TAG_SHUFFLE));
    let mut opt = Optimizer::new(tc.optimizer, tc.learning_rate, tc.weight_decay);
    let mut best: Option<(f64, FeatureFusionModel)> = None;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let mut grad = model.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &k in chunk {
                let r = split.train[k];
                let trace = model.forward(r, cached[k].as_deref())?;
                let target = r.label.class_index();
                let (_, d) = weighted_cross_entropy(trace.logits, target, weights[target]);
                model.backward(r, &trace, [d[0] * scale, d[1] * scale], &mut grad);
            }
            opt.step(model.trainable_params_mut(), grad.params());
        }
        if !model.all_finite() {
            return Err(Error::Training("feature fusion diverged".into()));
        }
        if let Some(score) = validation_auc(&model, &split.validation)? {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.clone()));
            }
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(model))
}

fn validation_auc(model: &FeatureFusionModel, validation: &[&PatientRecord]) -> Result<Option<f64>> {
    let counts = ClassCounts::of(validation.iter().map(|r| &r.label));
    if counts.msi == 0 || counts.mss == 0 {
        return Ok(None);
    }
    let scores = validation
        .iter()
        .map(|r| model.predict(r))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = validation.iter().map(|r| r.label).collect();
    Ok(Some(auc(&scores, &labels)?))
}
