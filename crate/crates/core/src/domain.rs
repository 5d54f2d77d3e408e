//! Domain types shared by every stage of the pipeline.
//!
//! All types are immutable after construction; constructors enforce the
//! invariants (finite values, shape constraints, probabilities in `[0, 1]`).

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding width.
pub const DEFAULT_DIM: usize = 512;

/// Number of stacked slices in a 2.5D radiology block.
pub const RADIOLOGY_CHANNELS: usize = 6;

/// Binary tumor status. MSI is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "MSI")]
    Msi,
    #[serde(rename = "MSS")]
    Mss,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Msi
    }

    /// Class index at the evaluation boundary: MSI -> 1, MSS -> 0.
    pub fn class_index(self) -> usize {
        match self {
            Label::Msi => 1,
            Label::Mss => 0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MSI" => Some(Label::Msi),
            "MSS" => Some(Label::Mss),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Msi => "MSI",
            Label::Mss => "MSS",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub String);

impl PatientId {
    pub fn new(id: impl Into<String>) -> Self {
        PatientId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Predicted probability of the MSI class.
///
/// Out-of-range values are rejected, never clamped.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(p: f64) -> Result<Self> {
        if p.is_finite() && (0.0..=1.0).contains(&p) {
            Ok(Probability(p))
        } else {
            Err(Error::InvalidProbability(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// MSI component of a softmax over `[mss_logit, msi_logit]`.
    pub fn from_logits(logits: [f64; 2]) -> Result<Self> {
        if !(logits[0].is_finite() && logits[1].is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Probability::new(msi_softmax(logits))
    }

    /// Correctness event at the 0.5 threshold: MSI is predicted iff p > 0.5.
    pub fn is_correct_for(self, label: Label) -> bool {
        (self.0 > 0.5) == label.is_positive()
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        Probability::new(p)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// Two-class softmax, MSI component, computed without overflow.
pub fn msi_softmax(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e_mss = (logits[0] - m).exp();
    let e_msi = (logits[1] - m).exp();
    e_msi / (e_mss + e_msi)
}

/// Fixed-length real vector; the unit of exchange between modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("embedding must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[..])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn expect_dim(&self, dim: usize, context: &str) -> Result<()> {
        if self.len() != dim {
            return Err(Error::dim(context, dim, self.len()));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Vec<f64> {
        e.0
    }
}

/// Unordered bag of patch embeddings, stored as an `N x D` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct FeatureBag {
    patches: Array2<f64>,
}

impl FeatureBag {
    pub fn new(patches: Array2<f64>) -> Result<Self> {
        if patches.nrows() == 0 {
            return Err(Error::Precondition(
                "feature bag must contain at least one patch".into(),
            ));
        }
        if patches.ncols() == 0 {
            return Err(Error::Precondition("patch embeddings must be non-empty".into()));
        }
        if patches.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature bag".into()));
        }
        Ok(FeatureBag {
            patches: patches.as_standard_layout().into_owned(),
        })
    }

    pub fn from_embeddings(patches: &[Embedding]) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Precondition("feature bag must contain at least one patch".into()))?;
        let dim = first.len();
        let mut data = Vec::with_capacity(patches.len() * dim);
        for (i, e) in patches.iter().enumerate() {
            e.expect_dim(dim, &format!("patch {i} of feature bag"))?;
            data.extend_from_slice(e.as_slice());
        }
        let arr = Array2::from_shape_vec((patches.len(), dim), data).expect("shape checked above");
        FeatureBag::new(arr)
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }

    pub fn patches(&self) -> &Array2<f64> {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> ArrayView1<'_, f64> {
        self.patches.row(i)
    }
}

impl TryFrom<Array2<f64>> for FeatureBag {
    type Error = Error;

    fn try_from(a: Array2<f64>) -> Result<Self> {
        FeatureBag::new(a)
    }
}

impl From<FeatureBag> for Array2<f64> {
    fn from(b: FeatureBag) -> Array2<f64> {
        b.patches
    }
}

/// Six stacked CT slices (`6 x H x W`): a tumor-masked and a full slice from
/// each of the three anatomical directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array3<f64>", into = "Array3<f64>")]
pub struct RadiologyBlock {
    data: Array3<f64>,
}

impl RadiologyBlock {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != RADIOLOGY_CHANNELS {
            return Err(Error::dim("radiology block channels", RADIOLOGY_CHANNELS, c));
        }
        if h == 0 || w == 0 {
            return Err(Error::Precondition(
                "radiology block must have positive spatial size".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("radiology block".into()));
        }
        Ok(RadiologyBlock {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

impl TryFrom<Array3<f64>> for RadiologyBlock {
    type Error = Error;

    fn try_from(a: Array3<f64>) -> Result<Self> {
        RadiologyBlock::new(a)
    }
}

impl From<RadiologyBlock> for Array3<f64> {
    fn from(b: RadiologyBlock) -> Array3<f64> {
        b.data
    }
}

/// Radiology stream of one patient: either a raw block or a precomputed embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiologyInput {
    Block(RadiologyBlock),
    Embedding(Embedding),
}

impl RadiologyInput {
    pub fn kind(&self) -> RadiologyKind {
        match self {
            RadiologyInput::Block(b) => RadiologyKind::Block {
                height: b.height(),
                width: b.width(),
            },
            RadiologyInput::Embedding(_) => RadiologyKind::Embedding,
        }
    }
}

/// Shape descriptor for the radiology stream of a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadiologyKind {
    Embedding,
    Block { height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub bag: FeatureBag,
    pub radiology: RadiologyInput,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub msi: usize,
    pub mss: usize,
}

impl ClassCounts {
    pub fn of<'a>(labels: impl IntoIterator<Item = &'a Label>) -> Self {
        let mut c = ClassCounts { msi: 0, mss: 0 };
        for l in labels {
            match l {
                Label::Msi => c.msi += 1,
                Label::Mss => c.mss += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.msi + self.mss
    }
}

/// A set of patients sharing one embedding width `dim` (the run-level D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub dim: usize,
    pub records: Vec<PatientRecord>,
    pub class_counts: ClassCounts,
}

impl Cohort {
    pub fn new(dim: usize, records: Vec<PatientRecord>) -> Self {
        let class_counts = ClassCounts::of(records.iter().map(|r| &r.label));
        Cohort {
            dim,
            records,
            class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &PatientId) -> Option<&PatientRecord> {
        self.records.iter().find(|r| &r.patient_id == id)
    }

    pub fn radiology_kind(&self) -> Option<RadiologyKind> {
        self.records.first().map(|r| r.radiology.kind())
    }
}

/// Training and model-selection subset handed to a trainer.
#[derive(Debug, Clone)]
pub struct DataSplit<'a> {
    pub dim: usize,
    pub train: Vec<&'a PatientRecord>,
    pub validation: Vec<&'a PatientRecord>,
}

impl<'a> DataSplit<'a> {
    pub fn new(dim: usize, train: Vec<&'a PatientRecord>, validation: Vec<&'a PatientRecord>) -> Self {
        DataSplit { dim, train, validation }
    }

    /// Whole cohort as training data, no validation.
    pub fn all(cohort: &'a Cohort) -> Self {
        DataSplit::new(cohort.dim, cohort.records.iter().collect(), Vec::new())
    }

    /// Every patient the trainer may look at (training or model selection).
    pub fn seen_ids(&self) -> BTreeSet<PatientId> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .map(|r| r.patient_id.clone())
            .collect()
    }

    pub fn train_counts(&self) -> ClassCounts {
        ClassCounts::of(self.train.iter().map(|r| &r.label))
    }
}

/// Records which patients an artifact was fitted or selected on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact: String,
    pub patients: BTreeSet<PatientId>,
}

impl Provenance {
    pub fn new(artifact: impl Into<String>, patients: BTreeSet<PatientId>) -> Self {
        Provenance {
            artifact: artifact.into(),
            patients,
        }
    }

    /// Errors with [`Error::Leakage`] if any held-out patient was seen.
    pub fn check_disjoint<'a>(&self, held_out: impl IntoIterator<Item = &'a PatientId>) -> Result<()> {
        let leaked: Vec<String> = held_out
            .into_iter()
            .filter(|id| self.patients.contains(id))
            .map(|id| id.0.clone())
            .collect();
        if leaked.is_empty() {
            Ok(())
        } else {
            Err(Error::Leakage {
                artifact: self.artifact.clone(),
                patients: leaked,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn failed(&self, check: &str) -> bool {
        self.checks.iter().any(|c| c.check == check && !c.passed)
    }
}

/// Checks every cohort invariant and reports each one; never fails.
pub fn validate_cohort(cohort: &Cohort) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |check: &str, passed: bool, detail: String| {
        checks.push(CheckOutcome {
            check: check.to_string(),
            passed,
            detail,
        })
    };

    push(
        "non_empty",
        !cohort.records.is_empty(),
        if cohort.records.is_empty() {
            "no records".into()
        } else {
            format!("{} records", cohort.len())
        },
    );

    let mut seen = BTreeSet::new();
    let dups: BTreeSet<&str> = cohort
        .records
        .iter()
        .filter(|r| !seen.insert(&r.patient_id))
        .map(|r| r.patient_id.as_str())
        .collect();
    push(
        "unique_patient_ids",
        dups.is_empty(),
        if dups.is_empty() {
            String::new()
        } else {
            format!("duplicate id(s): {dups:?}")
        },
    );

    let actual = ClassCounts::of(cohort.records.iter().map(|r| &r.label));
    push(
        "class_counts",
        actual == cohort.class_counts,
        format!(
            "declared (MSI {}, MSS {}), counted (MSI {}, MSS {})",
            cohort.class_counts.msi, cohort.class_counts.mss, actual.msi, actual.mss
        ),
    );

    let bad_bags: Vec<&str> = cohort
        .records
        .iter()
        .filter(|r| r.bag.dim() != cohort.dim)
        .map(|r| r.patient_id.as_str())
        .collect();
    push(
        "bag_dim",
        bad_bags.is_empty(),
        if bad_bags.is_empty() {
            String::new()
        } else {
            format!("bags with width != {}: {bad_bags:?}", cohort.dim)
        },
    );

    let kind = cohort.radiology_kind();
    let bad_rad: Vec<&str> = cohort
        .records
        .iter()
        .filter(|r| match &r.radiology {
            RadiologyInput::Embedding(e) => e.len() != cohort.dim || kind != Some(RadiologyKind::Embedding),
            RadiologyInput::Block(_) => Some(r.radiology.kind()) != kind,
        })
        .map(|r| r.patient_id.as_str())
        .collect();
    push(
        "radiology_shape",
        bad_rad.is_empty(),
        if bad_rad.is_empty() {
            String::new()
        } else {
            format!("inconsistent radiology inputs: {bad_rad:?}")
        },
    );

    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn record(id: &str, label: Label) -> PatientRecord {
        PatientRecord {
            patient_id: PatientId::new(id),
            bag: FeatureBag::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap(),
            radiology: RadiologyInput::Embedding(Embedding::new(vec![0.5, -0.5]).unwrap()),
            label,
        }
    }

    #[test]
    fn probability_rejects_out_of_range() {
        assert!(Probability::new(0.0).is_ok());
        assert!(Probability::new(1.0).is_ok());
        assert!(Probability::new(1.0 + 1e-12).is_err());
        assert!(Probability::new(-1e-300).is_err());
        assert!(Probability::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<Probability>("1.5").is_err());
    }

    #[test]
    fn softmax_symmetric_and_saturating() {
        assert_eq!(Probability::from_logits([0.0, 0.0]).unwrap().value(), 0.5);
        let p = Probability::from_logits([-800.0, 800.0]).unwrap().value();
        assert!((p - 1.0).abs() < 1e-15);
        let q = Probability::from_logits([800.0, -800.0]).unwrap().value();
        assert!(q < 1e-300);
    }

    #[test]
    fn label_mapping() {
        assert_eq!(Label::Msi.class_index(), 1);
        assert_eq!(Label::Mss.class_index(), 0);
        assert_eq!(serde_json::to_string(&Label::Msi).unwrap(), "\"MSI\"");
    }

    #[test]
    fn empty_bag_and_bad_block_rejected() {
        assert!(FeatureBag::new(Array2::zeros((0, 3))).is_err());
        assert!(FeatureBag::from_embeddings(&[]).is_err());
        let err = RadiologyBlock::new(Array3::zeros((5, 4, 4))).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 6,
                found: 5,
                ..
            }
        ));
    }

    #[test]
    fn validate_detects_duplicates() {
        let c = Cohort::new(2, vec![record("a", Label::Msi), record("a", Label::Mss)]);
        let report = validate_cohort(&c);
        assert!(!report.passed());
        assert!(report.failed("unique_patient_ids"));
    }

    #[test]
    fn validate_empty_cohort() {
        let report = validate_cohort(&Cohort::new(2, vec![]));
        assert!(report.failed("non_empty"));
    }

    #[test]
    fn validate_full_size_counts() {
        let records: Vec<_> = (0..352)
            .map(|i| record(&format!("P{i:03}"), if i < 46 { Label::Msi } else { Label::Mss }))
            .collect();
        let c = Cohort::new(2, records);
        assert_eq!(c.class_counts, ClassCounts { msi: 46, mss: 306 });
        assert!(validate_cohort(&c).passed());
    }

    #[test]
    fn validate_inconsistent_counts_and_dims() {
        let mut c = Cohort::new(3, vec![record("a", Label::Msi)]);
        c.class_counts.mss = 4;
        let report = validate_cohort(&c);
        assert!(report.failed("class_counts"));
        assert!(report.failed("bag_dim"));
        assert!(report.failed("radiology_shape"));
    }
}
