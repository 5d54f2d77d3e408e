use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{read_scores, write_run_outputs};
use super::{parse_strategies, AblateArgs, BayesArgs, ExperimentArgs, GenerateArgs, Preset, RunArgs};
use crate::bayes::{
    chain_check, counterexample_search, empirical_joint_from_run, fusion_benefit_probe, ChainReport, CorrectnessTriple,
    JointDistribution3, ProbeReport,
};
use crate::domain::{Cohort, PatientId};
use crate::error::{Error, Result};
use crate::evaluation::{
    run_ablation, run_experiment, stratified_kfold, AblationConfig, ExperimentConfig, ExperimentResult,
};
use crate::fusion::{BackboneConfig, BackboneKind, Strategy, TransformerConfig};
use crate::io::{load_cohort, read_json, save_cohort, write_json};
use crate::synthdata::{generate_cohort, GeneratorConfig};

/// Optional overrides read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

impl ConfigFile {
    /// An unreadable or malformed file is a configuration error.
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        read_json(path).map_err(|e| match e {
            Error::Parse { .. } | Error::MissingFile(_) | Error::Io { .. } => {
                Error::Config(format!("config file: {e}"))
            }
            other => other,
        })
    }
}

fn preset_generator(preset: Preset, seed: u64) -> GeneratorConfig {
    match preset {
        Preset::Desk => GeneratorConfig::desk(),
        Preset::PaperShape => GeneratorConfig::paper_shape(),
    }
    .with_seed(seed)
}

fn preset_transformer(preset: Preset) -> TransformerConfig {
    match preset {
        Preset::Desk => TransformerConfig::desk(),
        Preset::PaperShape => TransformerConfig::full(),
    }
}

fn backbone_for(preset: Preset, kind: BackboneKind) -> BackboneConfig {
    match kind {
        BackboneKind::Transformer => BackboneConfig::Transformer(preset_transformer(preset)),
        BackboneKind::Mlp => BackboneConfig::mlp(),
    }
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let cfg = file
        .generator
        .unwrap_or_else(|| preset_generator(args.preset, args.seed));
    let cohort = generate_cohort(&cfg)?;
    save_cohort(&cohort, &args.out, args.format)?;
    Ok(args.out.clone())
}

fn load_or_generate(run: &RunArgs, file: &ConfigFile) -> Result<Cohort> {
    match &run.cohort {
        Some(dir) => load_cohort(dir),
        None => generate_cohort(
            &file
                .generator
                .clone()
                .unwrap_or_else(|| preset_generator(run.preset, run.seed)),
        ),
    }
}

fn base_config(run: &RunArgs, file: &ConfigFile) -> ExperimentConfig {
    if let Some(cfg) = &file.experiment {
        return cfg.clone();
    }
    let mut cfg = match run.preset {
        Preset::Desk => ExperimentConfig::desk(run.seed),
        Preset::PaperShape => ExperimentConfig::paper_shape(run.seed),
    };
    if let Some(k) = run.k {
        cfg.k = k;
    }
    cfg
}

fn run_dir(out: &Path, command: &str, result: &ExperimentResult) -> Result<PathBuf> {
    let id = short_hash(&[&result.metadata.config_hash, &result.metadata.cohort_fingerprint]);
    let dir = out.join(format!("{command}-{id}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let cohort = load_or_generate(&args.run, &file)?;
    let mut cfg = base_config(&args.run, &file);
    if file.experiment.is_none() {
        cfg = cfg.with_strategies(&parse_strategies(&args.strategies)?);
        if let Some(kind) = args.backbone {
            for s in &mut cfg.strategies {
                s.backbone = backbone_for(args.run.preset, kind);
            }
        }
    }
    let folds = stratified_kfold(&cohort, cfg.k, cfg.seed)?;
    let result = run_experiment(&cohort, &folds, &cfg, args.run.jobs)?;
    let dir = run_dir(&args.run.out, "experiment", &result)?;
    write_run_outputs(&dir, &result)?;
    Ok(dir)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let cohort = load_or_generate(&args.run, &file)?;
    let base = base_config(&args.run, &file);
    let ablation = match &file.ablation {
        Some(a) => a.clone(),
        None => AblationConfig {
            aggregators: args.aggregators.clone(),
            backbones: args
                .backbones
                .iter()
                .map(|&k| backbone_for(args.run.preset, k))
                .collect(),
            guided: !args.unguided,
            identity_conv_row: args.freeze_conv_identity,
            fusion_train: base
                .strategies
                .iter()
                .find(|s| s.strategy.needs_fusion())
                .map(|s| s.train.clone())
                .unwrap_or_default(),
        },
    };
    let folds = stratified_kfold(&cohort, base.k, base.seed)?;
    let result = run_ablation(&cohort, &folds, &base, &ablation, args.run.jobs)?;
    let dir = run_dir(&args.run.out, "ablate", &result)?;
    write_run_outputs(&dir, &result)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct EmpiricalBayes {
    scores: PathBuf,
    threshold: f64,
    feature_strategy: String,
    patients: usize,
    joint: JointDistribution3,
    chain: ChainReport,
    probe: ProbeReport,
}

pub fn cmd_bayes(args: &BayesArgs) -> Result<PathBuf> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::Config(format!(
            "threshold must lie in [0, 1], got {}",
            args.threshold
        )));
    }
    match &args.scores {
        None => {
            if !(args.alpha > 0.0 && args.alpha.is_finite()) {
                return Err(Error::Config(format!("alpha must be positive, got {}", args.alpha)));
            }
            let summary = counterexample_search(args.draws, args.alpha, args.seed)?;
            let id = short_hash(&[
                "search",
                &args.draws.to_string(),
                &args.alpha.to_string(),
                &args.seed.to_string(),
            ]);
            let dir = args.out.join(format!("bayes-{id}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_json(&dir.join("bayes.json"), &summary)?;
            Ok(dir)
        }
        Some(path) => {
            let report = empirical_bayes(path, args.threshold)?;
            let id = short_hash(&["scores", &path.display().to_string(), &args.threshold.to_string()]);
            let dir = args.out.join(format!("bayes-{id}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_json(&dir.join("bayes.json"), &report)?;
            Ok(dir)
        }
    }
}

fn empirical_bayes(path: &Path, threshold: f64) -> Result<EmpiricalBayes> {
    let scores = read_scores(path)?;
    let has = |s: Strategy| scores.iter().any(|r| r.strategy == s.name());
    let fea = [Strategy::GuidedFeature, Strategy::Feature]
        .into_iter()
        .find(|&s| has(s))
        .ok_or_else(|| Error::Config(format!("{} has no feature-fusion scores", path.display())))?;
    for s in [Strategy::PathoUni, Strategy::RadioUni] {
        if !has(s) {
            return Err(Error::Config(format!("{} has no {} scores", path.display(), s.name())));
        }
    }

    let mut by_patient: BTreeMap<(usize, PatientId), [Option<bool>; 3]> = BTreeMap::new();
    for r in &scores {
        let slot = if r.strategy == fea.name() {
            0
        } else if r.strategy == Strategy::PathoUni.name() {
            1
        } else if r.strategy == Strategy::RadioUni.name() {
            2
        } else {
            continue;
        };
        let correct = (r.score >= threshold) == r.label.is_positive();
        by_patient.entry((r.fold, r.patient_id.clone())).or_default()[slot] = Some(correct);
    }
    let triples: Vec<CorrectnessTriple> = by_patient
        .values()
        .filter_map(|t| match *t {
            [Some(fea), Some(path), Some(rad)] => Some(CorrectnessTriple { fea, path, rad }),
            _ => None,
        })
        .collect();
    let joint = empirical_joint_from_run(&triples)?;
    Ok(EmpiricalBayes {
        scores: path.to_path_buf(),
        threshold,
        feature_strategy: fea.name().to_string(),
        patients: triples.len(),
        joint,
        chain: chain_check(&joint),
        probe: fusion_benefit_probe(&joint),
    })
}
