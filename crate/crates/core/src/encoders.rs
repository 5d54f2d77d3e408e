//! Uni-modal encoders: a patch classifier for pathology features and a 2.5D
//! classifier for six-channel radiology blocks (or an affine head when the
//! radiology stream is already an embedding).
//!
//! Every encoder exposes its penultimate activation (width D) as the
//! embedding and a two-logit head whose softmax gives the MSI probability.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregation::compensated_sum;
use crate::domain::{
    ClassCounts, DataSplit, Embedding, Label, PatientRecord, Probability, Provenance, RadiologyBlock, RadiologyInput,
    RADIOLOGY_CHANNELS,
};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::nn::{
    self, relu_inplace, weighted_cross_entropy, Conv2d, ConvCache, Linear, Module, Optimizer, OptimizerKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Pathology,
    Radiology,
}

/// How patch probabilities become one patient probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientMode {
    #[default]
    Mean,
    Majority,
}

impl FromStr for PatientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PatientMode::Mean),
            "majority" => Ok(PatientMode::Majority),
            other => Err(Error::Config(format!("unknown patient mode '{other}'"))),
        }
    }
}

impl fmt::Display for PatientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatientMode::Mean => "mean",
            PatientMode::Majority => "majority",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub patient_mode: PatientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            patient_mode: PatientMode::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }
}

/// Inverse-frequency class weights `n / (2 n_c)`, indexed by class index.
pub fn class_weights(counts: ClassCounts) -> [f64; 2] {
    let n = counts.total() as f64;
    [n / (2.0 * counts.mss as f64), n / (2.0 * counts.msi as f64)]
}

/// Input to an encoder: a feature vector or a six-channel block.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Features(&'a [f64]),
    Block(&'a RadiologyBlock),
}

impl<'a> From<&'a RadiologyInput> for EncoderInput<'a> {
    fn from(r: &'a RadiologyInput) -> Self {
        match r {
            RadiologyInput::Block(b) => EncoderInput::Block(b),
            RadiologyInput::Embedding(e) => EncoderInput::Features(e.as_slice()),
        }
    }
}

/// `features -> ReLU(affine) -> embedding -> affine -> logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineEncoder {
    pub hidden: Linear,
    pub head: Linear,
}

impl AffineEncoder {
    pub fn init(rng: &mut nn::Rng, input_dim: usize, dim: usize) -> Self {
        AffineEncoder {
            hidden: Linear::init(rng, input_dim, dim, 2f64.sqrt()),
            head: Linear::init(rng, dim, 2, 1.0),
        }
    }

    pub fn embed_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = self.hidden.forward(x);
        relu_inplace(&mut h);
        h
    }

    /// Accumulates gradients given upstream gradients on the embedding and/or logits.
    pub fn backward_batch(
        &self,
        x: ArrayView2<'_, f64>,
        h: &Array2<f64>,
        d_embed: Option<Array2<f64>>,
        d_logits: Option<ArrayView2<'_, f64>>,
        grad: &mut AffineEncoder,
    ) {
        let mut dh = d_embed.unwrap_or_else(|| Array2::zeros(h.raw_dim()));
        if let Some(dl) = d_logits {
            dh += &self.head.backward(h.view(), dl, &mut grad.head);
        }
        dh.zip_mut_with(h, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        self.hidden.accumulate(x, dh.view(), &mut grad.hidden);
    }
}

impl Module for AffineEncoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.hidden.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.hidden.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Channel widths of the three stride-2 conv blocks.
pub const DEFAULT_CONV_WIDTHS: [usize; 3] = [8, 16, 16];

/// Three conv blocks, global average pooling, `ReLU(affine)` to width D, head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvEncoder {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<Conv2d>,
    pub proj: Linear,
    pub head: Linear,
}

pub struct ConvEncoderCache {
    blocks: Vec<ConvCache>,
    last_hw: (usize, usize),
    pooled: Array2<f64>,
    embedding: Array2<f64>,
}

impl ConvEncoder {
    pub fn init(rng: &mut nn::Rng, height: usize, width: usize, widths: &[usize], dim: usize) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut in_ch = RADIOLOGY_CHANNELS;
        for &w in widths {
            blocks.push(Conv2d::init(rng, in_ch, w));
            in_ch = w;
        }
        ConvEncoder {
            height,
            width,
            blocks,
            proj: Linear::init(rng, in_ch, dim, 2f64.sqrt()),
            head: Linear::init(rng, dim, 2, 1.0),
        }
    }

    fn check_block(&self, block: &RadiologyBlock) -> Result<()> {
        if block.height() != self.height {
            return Err(Error::dim("radiology block height", self.height, block.height()));
        }
        if block.width() != self.width {
            return Err(Error::dim("radiology block width", self.width, block.width()));
        }
        Ok(())
    }

    pub fn forward(&self, block: &RadiologyBlock) -> Result<(Vec<f64>, [f64; 2], ConvEncoderCache)> {
        self.check_block(block)?;
        let data = block.data();
        let (c, h, w) = data.dim();
        // channels-last (H*W, C)
        let mut x = Array2::zeros((h * w, c));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    x[[y * w + xx, ch]] = data[[ch, y, xx]];
                }
            }
        }
        let mut hw = (h, w);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let (out, out_hw, cache) = conv.forward(x.view(), hw);
            caches.push(cache);
            x = out;
            hw = out_hw;
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty activation").insert_axis(Axis(0));
        let mut embedding = self.proj.forward(pooled.view());
        relu_inplace(&mut embedding);
        let logits = self.head.forward(embedding.view());
        Ok((
            embedding.row(0).to_vec(),
            [logits[[0, 0]], logits[[0, 1]]],
            ConvEncoderCache {
                blocks: caches,
                last_hw: hw,
                pooled,
                embedding,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ConvEncoderCache,
        d_embed: Option<&[f64]>,
        d_logits: Option<[f64; 2]>,
        grad: &mut ConvEncoder,
    ) {
        let dim = cache.embedding.ncols();
        let mut de = match d_embed {
            Some(d) => Array2::from_shape_vec((1, dim), d.to_vec()).expect("embedding width"),
            None => Array2::zeros((1, dim)),
        };
        if let Some(dl) = d_logits {
            let dl = Array2::from_shape_vec((1, 2), dl.to_vec()).expect("two logits");
            de += &self.head.backward(cache.embedding.view(), dl.view(), &mut grad.head);
        }
        de.zip_mut_with(&cache.embedding, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        let dpooled = self.proj.backward(cache.pooled.view(), de.view(), &mut grad.proj);
        let positions = cache.last_hw.0 * cache.last_hw.1;
        let mut dx = Array2::from_shape_fn((positions, dpooled.ncols()), |(_, c)| {
            dpooled[[0, c]] / positions as f64
        });
        for (i, conv) in self.blocks.iter().enumerate().rev() {
            let need = i > 0;
            match conv.backward(&cache.blocks[i], dx.view(), &mut grad.blocks[i], need) {
                Some(d) => dx = d,
                None => break,
            }
        }
    }
}

impl Module for ConvEncoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.proj.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p: Vec<&mut [f64]> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.proj.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum EncoderNet {
    Affine(AffineEncoder),
    Conv(ConvEncoder),
}

impl EncoderNet {
    pub fn arch_tag(&self) -> &'static str {
        match self {
            EncoderNet::Affine(_) => "affine",
            EncoderNet::Conv(_) => "conv2.5d",
        }
    }
}

impl Module for EncoderNet {
    fn params(&self) -> Vec<&[f64]> {
        match self {
            EncoderNet::Affine(m) => m.params(),
            EncoderNet::Conv(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            EncoderNet::Affine(m) => m.params_mut(),
            EncoderNet::Conv(m) => m.params_mut(),
        }
    }
}

/// Trained (or freshly initialized) uni-modal encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub modality: Modality,
    pub dim: usize,
    pub seed: u64,
    pub net: EncoderNet,
    pub provenance: Provenance,
}

pub(crate) enum EncoderCache {
    Affine { x: Array2<f64>, h: Array2<f64> },
    Conv(ConvEncoderCache),
}

impl EncoderModel {
    /// Fresh encoder sized for the cohort's radiology or pathology stream.
    pub fn init_for(modality: Modality, split: &DataSplit<'_>, seed: u64) -> Result<Self> {
        let first = split
            .train
            .first()
            .ok_or_else(|| Error::Training("no training patients".into()))?;
        let mut rng = nn::rng_from_seed(seed);
        let net = match modality {
            Modality::Pathology => EncoderNet::Affine(AffineEncoder::init(&mut rng, first.bag.dim(), split.dim)),
            Modality::Radiology => match &first.radiology {
                RadiologyInput::Embedding(e) => EncoderNet::Affine(AffineEncoder::init(&mut rng, e.len(), split.dim)),
                RadiologyInput::Block(b) => EncoderNet::Conv(ConvEncoder::init(
                    &mut rng,
                    b.height(),
                    b.width(),
                    &DEFAULT_CONV_WIDTHS,
                    split.dim,
                )),
            },
        };
        Ok(EncoderModel {
            modality,
            dim: split.dim,
            seed,
            net,
            provenance: Provenance::new(format!("{modality:?} encoder").to_lowercase(), split.seen_ids()),
        })
    }

    pub fn input_dim(&self) -> Option<usize> {
        match &self.net {
            EncoderNet::Affine(m) => Some(m.hidden.input_dim()),
            EncoderNet::Conv(_) => None,
        }
    }

    pub(crate) fn forward(&self, input: EncoderInput<'_>) -> Result<(Vec<f64>, [f64; 2], EncoderCache)> {
        match (&self.net, input) {
            (EncoderNet::Affine(m), EncoderInput::Features(x)) => {
                if x.len() != m.hidden.input_dim() {
                    return Err(Error::dim("encoder input", m.hidden.input_dim(), x.len()));
                }
                let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
                let h = m.embed_batch(x.view());
                let logits = m.head.forward(h.view());
                Ok((
                    h.row(0).to_vec(),
                    [logits[[0, 0]], logits[[0, 1]]],
                    EncoderCache::Affine { x, h },
                ))
            }
            (EncoderNet::Conv(m), EncoderInput::Block(b)) => {
                let (e, l, c) = m.forward(b)?;
                Ok((e, l, EncoderCache::Conv(c)))
            }
            (EncoderNet::Affine(_), EncoderInput::Block(_)) => {
                Err(Error::Config("affine encoder cannot consume a radiology block".into()))
            }
            (EncoderNet::Conv(_), EncoderInput::Features(_)) => Err(Error::Config(
                "2.5D encoder expects a six-channel block, got a feature vector".into(),
            )),
        }
    }

    pub(crate) fn backward(
        &self,
        cache: &EncoderCache,
        d_embed: Option<&[f64]>,
        d_logits: Option<[f64; 2]>,
        grad: &mut EncoderNet,
    ) {
        match (&self.net, cache, grad) {
            (EncoderNet::Affine(m), EncoderCache::Affine { x, h }, EncoderNet::Affine(g)) => {
                let de = d_embed.map(|d| Array2::from_shape_vec((1, d.len()), d.to_vec()).expect("row"));
                let dl = d_logits.map(|d| Array2::from_shape_vec((1, 2), d.to_vec()).expect("row"));
                m.backward_batch(x.view(), h, de, dl.as_ref().map(|a| a.view()), g);
            }
            (EncoderNet::Conv(m), EncoderCache::Conv(c), EncoderNet::Conv(g)) => m.backward(c, d_embed, d_logits, g),
            _ => unreachable!("encoder cache does not match architecture"),
        }
    }

    /// Penultimate activation (width D).
    pub fn embed(&self, input: EncoderInput<'_>) -> Result<Embedding> {
        let (e, _, _) = self.forward(input)?;
        Embedding::new(e)
    }

    pub fn logits(&self, input: EncoderInput<'_>) -> Result<[f64; 2]> {
        Ok(self.forward(input)?.1)
    }

    /// Softmax over the two-logit head, MSI component.
    pub fn predict_proba(&self, input: EncoderInput<'_>) -> Result<Probability> {
        Probability::from_logits(self.logits(input)?)
    }

    /// Embeddings of every row of a feature matrix (affine encoders only).
    pub fn embed_rows(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match &self.net {
            EncoderNet::Affine(m) => {
                if x.ncols() != m.hidden.input_dim() {
                    return Err(Error::dim("encoder input", m.hidden.input_dim(), x.ncols()));
                }
                Ok(m.embed_batch(x))
            }
            EncoderNet::Conv(_) => Err(Error::Config("2.5D encoder cannot embed feature rows".into())),
        }
    }

    /// Per-patch MSI probabilities for a pathology bag.
    pub fn patch_probabilities(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Probability>> {
        let h = self.embed_rows(x)?;
        let EncoderNet::Affine(m) = &self.net else {
            unreachable!()
        };
        let logits = m.head.forward(h.view());
        logits
            .rows()
            .into_iter()
            .map(|r| Probability::from_logits([r[0], r[1]]))
            .collect()
    }

    /// Patient-level probability for this encoder's modality.
    pub fn predict_patient(&self, record: &PatientRecord, mode: PatientMode) -> Result<Probability> {
        match self.modality {
            Modality::Pathology => patient_prediction(&self.patch_probabilities(record.bag.patches().view())?, mode),
            Modality::Radiology => self.predict_proba(EncoderInput::from(&record.radiology)),
        }
    }

    pub fn embed_radiology(&self, record: &PatientRecord) -> Result<Embedding> {
        self.embed(EncoderInput::from(&record.radiology))
    }

    /// Weighted cross-entropy of one input and the gradient for every parameter.
    pub fn loss_gradient(&self, input: EncoderInput<'_>, label: Label, weight: f64) -> Result<(f64, EncoderNet)> {
        let (_, logits, cache) = self.forward(input)?;
        let (loss, d) = weighted_cross_entropy(logits, label.class_index(), weight);
        let mut grad = self.net.zeros_like();
        self.backward(&cache, None, Some(d), &mut grad);
        Ok((loss, grad))
    }

    pub fn loss(&self, input: EncoderInput<'_>, label: Label, weight: f64) -> Result<f64> {
        Ok(weighted_cross_entropy(self.logits(input)?, label.class_index(), weight).0)
    }
}

impl Module for EncoderModel {
    fn params(&self) -> Vec<&[f64]> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }
}

/// Read-only handle to a trained encoder. Holds no mutable path to the
/// parameters, so no optimizer can update them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder(Arc<EncoderModel>);

impl Serialize for FrozenEncoder {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FrozenEncoder {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        EncoderModel::deserialize(deserializer).map(freeze)
    }
}

pub fn freeze(model: EncoderModel) -> FrozenEncoder {
    FrozenEncoder(Arc::new(model))
}

impl FrozenEncoder {
    pub fn model(&self) -> &EncoderModel {
        &self.0
    }

    pub fn embed(&self, input: EncoderInput<'_>) -> Result<Embedding> {
        self.0.embed(input)
    }

    pub fn predict_proba(&self, input: EncoderInput<'_>) -> Result<Probability> {
        self.0.predict_proba(input)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.0.provenance
    }

    pub fn params_snapshot(&self) -> Vec<f64> {
        self.0.flat()
    }
}

/// Mean of patch probabilities, or the fraction of patches voting MSI (p > 0.5).
pub fn patient_prediction(patch_probs: &[Probability], mode: PatientMode) -> Result<Probability> {
    if patch_probs.is_empty() {
        return Err(Error::Precondition(
            "patient prediction needs at least one patch".into(),
        ));
    }
    let n = patch_probs.len() as f64;
    let p = match mode {
        PatientMode::Mean => compensated_sum(patch_probs.iter().map(|p| p.value())) / n,
        PatientMode::Majority => patch_probs.iter().filter(|p| p.value() > 0.5).count() as f64 / n,
    };
    // the compensated mean of values in [0, 1] can exceed 1 by an ulp
    Probability::new(p.min(1.0))
}

fn require_both_classes(split: &DataSplit<'_>, what: &str) -> Result<ClassCounts> {
    let counts = split.train_counts();
    if counts.msi == 0 || counts.mss == 0 {
        return Err(Error::Training(format!(
            "{what}: training set has a single class (MSI {}, MSS {})",
            counts.msi, counts.mss
        )));
    }
    Ok(counts)
}

/// Validation AUC for checkpoint selection; `None` when undefined.
fn validation_auc(model: &EncoderModel, validation: &[&PatientRecord], mode: PatientMode) -> Result<Option<f64>> {
    let counts = ClassCounts::of(validation.iter().map(|r| &r.label));
    if counts.msi == 0 || counts.mss == 0 {
        return Ok(None);
    }
    let scores = validation
        .iter()
        .map(|r| model.predict_patient(r, mode))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = validation.iter().map(|r| r.label).collect();
    Ok(Some(auc(&scores, &labels)?))
}

/// Keeps the parameters with the best validation AUC (earliest on ties).
pub(crate) struct BestCheckpoint<T> {
    best: Option<(f64, T)>,
}

impl<T: Clone> BestCheckpoint<T> {
    pub(crate) fn new() -> Self {
        BestCheckpoint { best: None }
    }

    pub(crate) fn offer(&mut self, score: Option<f64>, candidate: &T) {
        let Some(score) = score else { return };
        if self.best.as_ref().is_none_or(|(b, _)| score > *b) {
            self.best = Some((score, candidate.clone()));
        }
    }

    pub(crate) fn into_best_or(self, last: T) -> T {
        self.best.map(|(_, t)| t).unwrap_or(last)
    }
}

/// Trains the patch-level classifier on patches labeled with their patient's status.
pub fn train_pathology_unimodal(split: &DataSplit<'_>, cfg: &TrainConfig) -> Result<EncoderModel> {
    cfg.validate()?;
    require_both_classes(split, "pathology encoder")?;
    let input_dim = split.train[0].bag.dim();
    if let Some(r) = split
        .train
        .iter()
        .chain(split.validation.iter())
        .find(|r| r.bag.dim() != input_dim)
    {
        return Err(Error::dim(
            format!("bag of patient {}", r.patient_id),
            input_dim,
            r.bag.dim(),
        ));
    }

    let mut model = EncoderModel::init_for(Modality::Pathology, split, cfg.seed)?;
    let mut rng = nn::rng_from_seed(nn::derive_seed(cfg.seed, 0x5041_5448));

    let mut patches: Vec<(usize, usize)> = Vec::new();
    for (pi, r) in split.train.iter().enumerate() {
        patches.extend((0..r.bag.len()).map(|j| (pi, j)));
    }
    let patch_labels: Vec<Label> = patches.iter().map(|&(pi, _)| split.train[pi].label).collect();
    let weights = class_weights(ClassCounts::of(patch_labels.iter()));

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut best = BestCheckpoint::new();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), input_dim));
            for (row, &k) in chunk.iter().enumerate() {
                let (pi, j) = patches[k];
                x.row_mut(row).assign(&split.train[pi].bag.patch(j));
            }
            let EncoderNet::Affine(net) = &model.net else {
                unreachable!()
            };
            let h = net.embed_batch(x.view());
            let logits = net.head.forward(h.view());
            let mut dlogits = Array2::zeros((chunk.len(), 2));
            let scale = 1.0 / chunk.len() as f64;
            for (row, &k) in chunk.iter().enumerate() {
                let target = patch_labels[k].class_index();
                let (_, d) = weighted_cross_entropy([logits[[row, 0]], logits[[row, 1]]], target, weights[target]);
                dlogits[[row, 0]] = d[0] * scale;
                dlogits[[row, 1]] = d[1] * scale;
            }
            let mut grad = net.zeros_like();
            net.backward_batch(x.view(), &h, None, Some(dlogits.view()), &mut grad);
            opt.step(model.net.params_mut(), grad.params());
        }
        if !model.all_finite() {
            return Err(Error::Training("pathology encoder diverged".into()));
        }
        best.offer(validation_auc(&model, &split.validation, cfg.patient_mode)?, &model.net);
    }
    model.net = best.into_best_or(model.net);
    Ok(model)
}

/// Trains the radiology classifier: 2.5D conv net over blocks, or an affine
/// head over precomputed radiology embeddings.
pub fn train_radiology_unimodal(split: &DataSplit<'_>, cfg: &TrainConfig) -> Result<EncoderModel> {
    cfg.validate()?;
    let counts = require_both_classes(split, "radiology encoder")?;
    let kind = split.train[0].radiology.kind();
    for r in split.train.iter().chain(split.validation.iter()) {
        if let RadiologyInput::Block(b) = &r.radiology {
            let c = b.data().dim().0;
            if c != RADIOLOGY_CHANNELS {
                return Err(Error::dim("radiology block channels", RADIOLOGY_CHANNELS, c));
            }
        }
        if r.radiology.kind() != kind {
            return Err(Error::Config(format!(
                "patient {} has a radiology input of a different shape",
                r.patient_id
            )));
        }
    }

    let mut model = EncoderModel::init_for(Modality::Radiology, split, cfg.seed)?;
    let weights = class_weights(counts);
    let mut rng = nn::rng_from_seed(nn::derive_seed(cfg.seed, 0x5241_4449));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut best = BestCheckpoint::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = model.net.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &k in chunk {
                let r = split.train[k];
                let (_, logits, cache) = model.forward(EncoderInput::from(&r.radiology))?;
                let target = r.label.class_index();
                let (_, d) = weighted_cross_entropy(logits, target, weights[target]);
                model.backward(&cache, None, Some([d[0] * scale, d[1] * scale]), &mut grad);
            }
            opt.step(model.net.params_mut(), grad.params());
        }
        if !model.all_finite() {
            return Err(Error::Training("radiology encoder diverged".into()));
        }
        best.offer(validation_auc(&model, &split.validation, cfg.patient_mode)?, &model.net);
    }
    model.net = best.into_best_or(model.net);
    Ok(model)
}
