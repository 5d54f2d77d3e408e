//! Cross-validated experiment and ablation runners.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::auc;
use super::folds::{FoldAssignment, FoldSplit};
use crate::aggregation::AggregatorKind;
use crate::domain::{Cohort, Label, PatientId, Probability, RadiologyInput};
use crate::encoders::{freeze, train_pathology_unimodal, train_radiology_unimodal, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    predict_strategy, train_feature_fusion, BackboneConfig, Strategy, StrategyConfig, TrainedArtifacts,
    TransformerConfig,
};
use crate::nn::derive_seed;

const TAG_PATHOLOGY: u64 = 1;
const TAG_RADIOLOGY: u64 = 2;
const TAG_FUSION: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub k: usize,
    pub seed: u64,
    /// Schedule of the pathology uni-modal encoder.
    pub pathology: TrainConfig,
    /// Schedule of the radiology uni-modal encoder (also the frozen guide).
    pub radiology: TrainConfig,
    pub strategies: Vec<StrategyConfig>,
}

impl ExperimentConfig {
    /// All six strategies, desk-sized transformer, five folds.
    pub fn desk(seed: u64) -> Self {
        let encoder = TrainConfig {
            epochs: 80,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let fusion = TrainConfig {
            epochs: 8,
            batch_size: 8,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            k: 5,
            seed,
            pathology: encoder.clone(),
            radiology: encoder,
            strategies: Strategy::ALL
                .into_iter()
                .map(|s| StrategyConfig::new(s, TransformerConfig::desk(), fusion.clone()))
                .collect(),
        }
    }

    /// As [`ExperimentConfig::desk`] with the full-size transformer.
    pub fn paper_shape(seed: u64) -> Self {
        let mut cfg = ExperimentConfig::desk(seed);
        for s in &mut cfg.strategies {
            s.backbone = BackboneConfig::Transformer(TransformerConfig::full());
        }
        cfg
    }

    pub fn with_strategies(mut self, strategies: &[Strategy]) -> Self {
        let template = self.strategies[0].clone();
        self.strategies = strategies
            .iter()
            .map(|&s| StrategyConfig {
                strategy: s,
                guided: matches!(s, Strategy::GuidedFeature | Strategy::M2fusion),
                ..template.clone()
            })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies requested".into()));
        }
        self.pathology.validate()?;
        self.radiology.validate()?;
        for s in &self.strategies {
            s.validate()?;
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Table labels: bare strategy names when they are unique, full names otherwise.
    pub fn row_labels(&self) -> Vec<String> {
        let names: BTreeSet<Strategy> = self.strategies.iter().map(|s| s.strategy).collect();
        if names.len() == self.strategies.len() {
            self.strategies.iter().map(|s| s.strategy.name().to_string()).collect()
        } else {
            self.strategies.iter().map(StrategyConfig::name).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub name: String,
    pub config: StrategyConfig,
    pub fold_auc: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub strategy: String,
    pub fold: usize,
    pub patient_id: PatientId,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMetadata {
    pub kind: String,
    pub seed: u64,
    pub k: usize,
    pub config_hash: String,
    pub cohort_fingerprint: String,
    /// Per-rotation seeds derived from the master seed.
    pub fold_seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub metadata: ResultMetadata,
    pub rows: Vec<StrategyResult>,
    #[serde(skip)]
    pub scores: Vec<PatientScore>,
}

impl ExperimentResult {
    pub fn row(&self, name: &str) -> Option<&StrategyResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn average_of(&self, strategy: Strategy) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.config.strategy == strategy)
            .map(|r| r.average)
    }
}

/// Digest of ids, labels and every stored value of a cohort.
pub fn cohort_fingerprint(cohort: &Cohort) -> String {
    let mut h = Sha256::new();
    h.update((cohort.dim as u64).to_le_bytes());
    for r in &cohort.records {
        h.update(r.patient_id.as_str().as_bytes());
        h.update([0, r.label.class_index() as u8]);
        for v in r.bag.patches().iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        match &r.radiology {
            RadiologyInput::Embedding(e) => e.as_slice().iter().for_each(|v| h.update(v.to_bits().to_le_bytes())),
            RadiologyInput::Block(b) => b.data().iter().for_each(|v| h.update(v.to_bits().to_le_bytes())),
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Trains whatever the strategies need on the split's training folds.
pub fn train_artifacts(split: &FoldSplit<'_>, cfg: &ExperimentConfig, fold_seed: u64) -> Result<TrainedArtifacts> {
    let data = split.training();
    let held_out = split.test_ids();
    let mut artifacts = TrainedArtifacts::default();
    let strategies = &cfg.strategies;
    let guided = strategies.iter().any(|s| s.fusion_spec().is_some_and(|f| f.guided));
    if guided || strategies.iter().any(|s| s.strategy.needs_pathology()) {
        let m = train_pathology_unimodal(&data, &cfg.pathology.with_seed(derive_seed(fold_seed, TAG_PATHOLOGY)))?;
        m.provenance.check_disjoint(&held_out)?;
        artifacts.pathology = Some(m);
    }
    if guided || strategies.iter().any(|s| s.strategy.needs_radiology()) {
        let m = train_radiology_unimodal(&data, &cfg.radiology.with_seed(derive_seed(fold_seed, TAG_RADIOLOGY)))?;
        m.provenance.check_disjoint(&held_out)?;
        artifacts.radiology = Some(freeze(m));
    }
    for s in strategies {
        let Some(spec) = s.fusion_spec() else { continue };
        if artifacts.fusion_for(&spec).is_some() {
            continue;
        }
        let seeded = StrategyConfig {
            train: s.train.with_seed(derive_seed(fold_seed, TAG_FUSION)),
            ..s.clone()
        };
        let model = train_feature_fusion(
            &data,
            &held_out,
            &seeded,
            artifacts.radiology.as_ref(),
            artifacts.pathology.as_ref(),
        )?;
        model.provenance.check_disjoint(&held_out)?;
        artifacts.fusion.push((spec, model));
    }
    Ok(artifacts)
}

struct FoldOutcome {
    aucs: Vec<f64>,
    scores: Vec<Vec<PatientScore>>,
}

fn run_fold(
    cohort: &Cohort,
    folds: &FoldAssignment,
    cfg: &ExperimentConfig,
    labels: &[String],
    rotation: usize,
    fold_seed: u64,
) -> Result<FoldOutcome> {
    let split = folds.split(cohort, rotation)?;
    let artifacts = train_artifacts(&split, cfg, fold_seed)?;
    let test_labels: Vec<Label> = split.test.iter().map(|r| r.label).collect();
    let mut aucs = Vec::with_capacity(cfg.strategies.len());
    let mut scores = Vec::with_capacity(cfg.strategies.len());
    for (s, name) in cfg.strategies.iter().zip(labels) {
        let probs = split
            .test
            .iter()
            .map(|r| predict_strategy(s, &artifacts, r))
            .collect::<Result<Vec<Probability>>>()?;
        aucs.push(auc(&probs, &test_labels)?);
        scores.push(
            split
                .test
                .iter()
                .zip(&probs)
                .map(|(r, p)| PatientScore {
                    strategy: name.clone(),
                    fold: rotation,
                    patient_id: r.patient_id.clone(),
                    label: r.label,
                    score: p.value(),
                })
                .collect(),
        );
    }
    Ok(FoldOutcome { aucs, scores })
}

/// Runs every rotation of the fold assignment and tabulates test AUCs per
/// strategy. Folds are evaluated on up to `jobs` worker threads.
pub fn run_experiment(
    cohort: &Cohort,
    folds: &FoldAssignment,
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<ExperimentResult> {
    run_tagged(cohort, folds, cfg, jobs, "experiment")
}

fn run_tagged(
    cohort: &Cohort,
    folds: &FoldAssignment,
    cfg: &ExperimentConfig,
    jobs: usize,
    kind: &str,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if folds.k != cfg.k {
        return Err(Error::Config(format!(
            "fold assignment has k = {} but the config says {}",
            folds.k, cfg.k
        )));
    }
    let labels = cfg.row_labels();
    let fold_seeds: Vec<u64> = (0..cfg.k).map(|r| derive_seed(cfg.seed, r as u64)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<FoldOutcome> = pool.install(|| {
        (0..cfg.k)
            .into_par_iter()
            .map(|r| run_fold(cohort, folds, cfg, &labels, r, fold_seeds[r]))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::with_capacity(cfg.strategies.len());
    let mut scores = Vec::new();
    for (i, (s, name)) in cfg.strategies.iter().zip(&labels).enumerate() {
        let fold_auc: Vec<f64> = outcomes.iter().map(|o| o.aucs[i]).collect();
        let average = fold_auc.iter().sum::<f64>() / fold_auc.len() as f64;
        rows.push(StrategyResult {
            name: name.clone(),
            config: s.clone(),
            fold_auc,
            average,
        });
        for o in &outcomes {
            scores.extend(o.scores[i].iter().cloned());
        }
    }
    Ok(ExperimentResult {
        metadata: ResultMetadata {
            kind: kind.to_string(),
            seed: cfg.seed,
            k: cfg.k,
            config_hash: cfg.hash(),
            cohort_fingerprint: cohort_fingerprint(cohort),
            fold_seeds,
            config: cfg.clone(),
        },
        rows,
        scores,
    })
}

/// Options of an aggregator × backbone sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub aggregators: Vec<AggregatorKind>,
    pub backbones: Vec<BackboneConfig>,
    pub guided: bool,
    /// Adds a conv row with a fixed delta kernel, which must match the max row.
    pub identity_conv_row: bool,
    pub fusion_train: TrainConfig,
}

impl AblationConfig {
    pub fn strategies(&self) -> Vec<StrategyConfig> {
        let strategy = if self.guided {
            Strategy::GuidedFeature
        } else {
            Strategy::Feature
        };
        let mut out = Vec::new();
        for &backbone in &self.backbones {
            for &aggregator in &self.aggregators {
                out.push(StrategyConfig {
                    strategy,
                    aggregator,
                    backbone,
                    guided: self.guided,
                    train: self.fusion_train.clone(),
                    identity_conv_kernel: false,
                });
            }
            if self.identity_conv_row {
                out.push(StrategyConfig {
                    strategy,
                    aggregator: AggregatorKind::Conv,
                    backbone,
                    guided: self.guided,
                    train: self.fusion_train.clone(),
                    identity_conv_kernel: true,
                });
            }
        }
        out
    }
}

/// Feature-fusion rows for every aggregator × backbone pair.
pub fn run_ablation(
    cohort: &Cohort,
    folds: &FoldAssignment,
    base: &ExperimentConfig,
    ablation: &AblationConfig,
    jobs: usize,
) -> Result<ExperimentResult> {
    if ablation.aggregators.is_empty() || ablation.backbones.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one aggregator and one backbone".into(),
        ));
    }
    let cfg = ExperimentConfig {
        strategies: ablation.strategies(),
        ..base.clone()
    };
    let mut result = run_tagged(cohort, folds, &cfg, jobs, "ablation")?;
    for row in &mut result.rows {
        row.name = ablation_label(&row.config);
    }
    let labels = cfg.row_labels();
    for s in &mut result.scores {
        if let Some(i) = labels.iter().position(|l| *l == s.strategy) {
            s.strategy = ablation_label(&cfg.strategies[i]);
        }
    }
    Ok(result)
}

/// `aggregator+backbone`, the row label of an ablation table.
pub fn ablation_label(cfg: &StrategyConfig) -> String {
    let agg = if cfg.identity_conv_kernel {
        "conv-identity".to_string()
    } else {
        cfg.aggregator.to_string()
    };
    format!("{agg}+{}", cfg.backbone.kind())
}
