//! Chain-rule relations between the correctness events of the feature-fusion
//! (`Fea`), pathology (`Path`) and radiology (`Rad`) predictors, evaluated on
//! explicit joint tables over `{0,1}^3`.
//!
//! A table entry is indexed by `fea << 2 | path << 1 | rad`, where 1 means
//! "the prediction was correct".

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;

pub const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution3 {
    table: [f64; 8],
}

pub fn index(fea: bool, path: bool, rad: bool) -> usize {
    (fea as usize) << 2 | (path as usize) << 1 | rad as usize
}

impl JointDistribution3 {
    pub fn new(table: [f64; 8]) -> Result<Self> {
        if let Some(v) = table.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Precondition(format!(
                "joint table entry {v} is not a non-negative real"
            )));
        }
        let sum: f64 = table.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Precondition(format!("joint table sums to {sum}, not 1")));
        }
        Ok(JointDistribution3 { table })
    }

    /// Table with iid Gamma(alpha) weights, normalized (a Dirichlet draw).
    pub fn dirichlet(rng: &mut Rng, alpha: f64) -> Result<Self> {
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("Dirichlet alpha {alpha}: {e}")))?;
        loop {
            let mut t = [0.0; 8];
            for v in &mut t {
                *v = gamma.sample(rng);
            }
            let s: f64 = t.iter().sum();
            if s > 0.0 {
                t.iter_mut().for_each(|v| *v /= s);
                // renormalize residual rounding into the largest cell
                let r = 1.0 - t.iter().sum::<f64>();
                let i = (0..8).max_by(|&a, &b| t[a].total_cmp(&t[b])).expect("eight cells");
                t[i] += r;
                return JointDistribution3::new(t);
            }
        }
    }

    /// All mass on one cell.
    pub fn point_mass(fea: bool, path: bool, rad: bool) -> Self {
        let mut table = [0.0; 8];
        table[index(fea, path, rad)] = 1.0;
        JointDistribution3 { table }
    }

    pub fn uniform() -> Self {
        JointDistribution3 { table: [0.125; 8] }
    }

    pub fn table(&self) -> &[f64; 8] {
        &self.table
    }

    pub fn get(&self, fea: bool, path: bool, rad: bool) -> f64 {
        self.table[index(fea, path, rad)]
    }

    /// Probability of the event fixing any subset of the three variables.
    pub fn prob(&self, fea: Option<bool>, path: Option<bool>, rad: Option<bool>) -> f64 {
        let ok = |want: Option<bool>, bit: bool| want.is_none_or(|w| w == bit);
        (0..8)
            .filter(|&i| ok(fea, i & 4 != 0) && ok(path, i & 2 != 0) && ok(rad, i & 1 != 0))
            .map(|i| self.table[i])
            .sum()
    }

    /// `P(fea, path | rad)` as a 2×2 table, or `None` when `P(rad)` is zero.
    pub fn conditional_on_rad(&self, rad: bool) -> Option<[[f64; 2]; 2]> {
        let mass = self.prob(None, None, Some(rad));
        (mass > 0.0).then(|| {
            let mut c = [[0.0; 2]; 2];
            for (f, row) in c.iter_mut().enumerate() {
                for (p, v) in row.iter_mut().enumerate() {
                    *v = self.get(f == 1, p == 1, rad) / mass;
                }
            }
            c
        })
    }

    /// `P(fea | path, rad)` as a pair over `fea`, or `None` when `P(path, rad)` is zero.
    pub fn conditional_on_path_rad(&self, path: bool, rad: bool) -> Option<[f64; 2]> {
        let pair = [self.get(false, path, rad), self.get(true, path, rad)];
        let mass = pair[0] + pair[1];
        (mass > 0.0).then(|| [pair[0] / mass, pair[1] / mass])
    }
}

/// Both sides of one chain-rule identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub event: String,
    pub joint: f64,
    pub factored: f64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    /// `P(Path, Rad) = P(Rad) P(Path | Rad)` for every value pair.
    pub pair_identity: Vec<IdentityCheck>,
    /// `P(Fea, Path, Rad) = P(Fea | Path, Rad) P(Path, Rad)` for every value triple.
    pub triple_identity: Vec<IdentityCheck>,
    /// Conditioning events with zero mass.
    pub undefined: Vec<String>,
    pub max_discrepancy: f64,
}

fn event_name(fea: Option<bool>, path: bool, rad: bool) -> String {
    let b = |v: bool| if v { 1 } else { 0 };
    match fea {
        Some(f) => format!("Fea={} Path={} Rad={}", b(f), b(path), b(rad)),
        None => format!("Path={} Rad={}", b(path), b(rad)),
    }
}

/// Evaluates both chain-rule factorizations. Conditionals come from the
/// normalized conditional tables, not from the joint cells directly.
pub fn chain_check(dist: &JointDistribution3) -> ChainReport {
    let mut pair_identity = Vec::new();
    let mut triple_identity = Vec::new();
    let mut undefined = Vec::new();
    for rad in [false, true] {
        let p_rad = dist.prob(None, None, Some(rad));
        match dist.conditional_on_rad(rad) {
            Some(c) => {
                for path in [false, true] {
                    let p_path_given_rad = c[0][path as usize] + c[1][path as usize];
                    let joint = dist.prob(None, Some(path), Some(rad));
                    let factored = p_rad * p_path_given_rad;
                    pair_identity.push(IdentityCheck {
                        event: event_name(None, path, rad),
                        joint,
                        factored,
                        discrepancy: (joint - factored).abs(),
                    });
                }
            }
            None => undefined.push(format!("P(Path | Rad={})", rad as u8)),
        }
        for path in [false, true] {
            let p_pair = dist.prob(None, Some(path), Some(rad));
            match dist.conditional_on_path_rad(path, rad) {
                Some(c) => {
                    for fea in [false, true] {
                        let joint = dist.get(fea, path, rad);
                        let factored = c[fea as usize] * p_pair;
                        triple_identity.push(IdentityCheck {
                            event: event_name(Some(fea), path, rad),
                            joint,
                            factored,
                            discrepancy: (joint - factored).abs(),
                        });
                    }
                }
                None => undefined.push(format!("P(Fea | Path={}, Rad={})", path as u8, rad as u8)),
            }
        }
    }
    let max_discrepancy = pair_identity
        .iter()
        .chain(&triple_identity)
        .map(|c| c.discrepancy)
        .fold(0.0, f64::max);
    ChainReport {
        pair_identity,
        triple_identity,
        undefined,
        max_discrepancy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFlags {
    /// `P(Path | Rad) > P(Path)`: radiology correctness raises pathology correctness.
    pub conditional_exceeds_marginal: Option<bool>,
    /// `P(Path, Rad) > P(Path)`.
    pub joint_exceeds_marginal: bool,
    /// The conditional rises while the joint falls below the marginal.
    pub pair_counterexample: Option<bool>,
    /// `P(Fea | Path, Rad) > P(Fea)`.
    pub fea_conditional_exceeds_marginal: Option<bool>,
    /// `P(Fea, Path, Rad) > P(Path, Rad)`.
    pub fea_joint_exceeds_pair: bool,
    /// `P(Fea) > max(P(Path), P(Rad))`: fusion is correct more often than either modality.
    pub fusion_beats_unimodal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub p_path: f64,
    pub p_rad: f64,
    pub p_fea: f64,
    pub p_path_given_rad: Option<f64>,
    pub p_path_rad: f64,
    pub p_fea_given_path_rad: Option<f64>,
    pub p_fea_path_rad: f64,
    pub flags: ProbeFlags,
}

/// Quantities and orderings around "all correct" events. Nothing here is
/// asserted; undefined conditionals are reported as `None`.
pub fn fusion_benefit_probe(dist: &JointDistribution3) -> ProbeReport {
    let p_path = dist.prob(None, Some(true), None);
    let p_rad = dist.prob(None, None, Some(true));
    let p_fea = dist.prob(Some(true), None, None);
    let p_path_rad = dist.prob(None, Some(true), Some(true));
    let p_fea_path_rad = dist.get(true, true, true);
    let p_path_given_rad = dist.conditional_on_rad(true).map(|c| c[0][1] + c[1][1]);
    let p_fea_given_path_rad = dist.conditional_on_path_rad(true, true).map(|c| c[1]);
    let conditional_exceeds_marginal = p_path_given_rad.map(|c| c > p_path);
    ProbeReport {
        p_path,
        p_rad,
        p_fea,
        p_path_given_rad,
        p_path_rad,
        p_fea_given_path_rad,
        p_fea_path_rad,
        flags: ProbeFlags {
            conditional_exceeds_marginal,
            joint_exceeds_marginal: p_path_rad > p_path,
            pair_counterexample: conditional_exceeds_marginal.map(|c| c && p_path_rad < p_path),
            fea_conditional_exceeds_marginal: p_fea_given_path_rad.map(|c| c > p_fea),
            fea_joint_exceeds_pair: p_fea_path_rad > p_path_rad,
            fusion_beats_unimodal: p_fea > p_path.max(p_rad),
        },
    }
}

/// Whether each of the three predictors was right for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessTriple {
    pub fea: bool,
    pub path: bool,
    pub rad: bool,
}

/// Empirical frequency table of correctness triples.
pub fn empirical_joint_from_run(triples: &[CorrectnessTriple]) -> Result<JointDistribution3> {
    if triples.is_empty() {
        return Err(Error::Precondition("no correctness triples".into()));
    }
    let mut counts = [0usize; 8];
    for t in triples {
        counts[index(t.fea, t.path, t.rad)] += 1;
    }
    let n = triples.len() as f64;
    JointDistribution3::new(counts.map(|c| c as f64 / n))
}

/// Summary of a randomized search for pair counterexamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_chain_discrepancy: f64,
    pub conditional_exceeds_marginal: usize,
    pub pair_counterexamples: usize,
    pub first_counterexample: Option<JointDistribution3>,
}

/// Draws Dirichlet tables and counts how often the conditional rises while
/// the joint stays below the marginal.
pub fn counterexample_search(draws: usize, alpha: f64, seed: u64) -> Result<SearchSummary> {
    let mut rng = crate::nn::rng_from_seed(seed);
    let mut summary = SearchSummary {
        draws,
        alpha,
        seed,
        max_chain_discrepancy: 0.0,
        conditional_exceeds_marginal: 0,
        pair_counterexamples: 0,
        first_counterexample: None,
    };
    for _ in 0..draws {
        // vary the concentration a little so both diffuse and peaked tables occur
        let a = alpha * (0.5 + rng.random::<f64>());
        let d = JointDistribution3::dirichlet(&mut rng, a)?;
        summary.max_chain_discrepancy = summary.max_chain_discrepancy.max(chain_check(&d).max_discrepancy);
        let probe = fusion_benefit_probe(&d);
        if probe.flags.conditional_exceeds_marginal == Some(true) {
            summary.conditional_exceeds_marginal += 1;
        }
        if probe.flags.pair_counterexample == Some(true) {
            summary.pair_counterexamples += 1;
            summary.first_counterexample.get_or_insert(d);
        }
    }
    Ok(summary)
}
