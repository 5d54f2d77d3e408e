//! Cohort directories: a JSON manifest plus one matrix file per bag and per
//! radiology input.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/bags/<patient_id>.{csv,bin}        N x D
//! <dir>/radiology/<patient_id>.{csv,bin}   1 x D, or 6 x (H*W) for blocks
//! ```
//!
//! CSV files have no header; values use Rust's shortest round-trip float
//! formatting. Binary files are `b"M2FM"`, rows and columns as `u32` little
//! endian, then the values as `f64` little endian in row-major order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_cohort, Cohort, Embedding, FeatureBag, Label, PatientId, PatientRecord, RadiologyBlock, RadiologyInput,
    RadiologyKind, RADIOLOGY_CHANNELS,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"M2FM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    #[default]
    Csv,
    Bin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Bin => "bin",
        }
    }
}

impl fmt::Display for MatrixFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" => Ok(MatrixFormat::Bin),
            other => Err(Error::Config(format!(
                "unknown matrix format '{other}' (expected csv or bin)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: PatientId,
    pub label: Label,
    pub bag: String,
    pub radiology: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub format: MatrixFormat,
    pub dim: usize,
    pub radiology: RadiologyKind,
    pub patients: Vec<ManifestEntry>,
}

fn parse_error(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

pub fn write_matrix(path: &Path, m: &Array2<f64>, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => {
            let mut s = String::new();
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&line.join(","));
                s.push('\n');
            }
            s.into_bytes()
        }
        MatrixFormat::Bin => {
            let (r, c) = m.dim();
            let mut b = Vec::with_capacity(12 + 8 * r * c);
            b.extend_from_slice(MAGIC);
            b.extend_from_slice(&(r as u32).to_le_bytes());
            b.extend_from_slice(&(c as u32).to_le_bytes());
            for v in m.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path, format: MatrixFormat) -> Result<Array2<f64>> {
    match format {
        MatrixFormat::Csv => read_csv_matrix(path),
        MatrixFormat::Bin => read_bin_matrix(path),
    }
}

fn read_csv_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_error(path, "open", format!("{other:?}")),
        })?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, format!("line {line}"), e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(rows as u64 + 1);
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(parse_error(
                    path,
                    format!("line {line}"),
                    format!("expected {c} fields, found {}", rec.len()),
                ))
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_error(
                    path,
                    format!("line {line}, field {}", j + 1),
                    format!("'{field}' is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    path,
                    format!("line {line}, field {}", j + 1),
                    "non-finite value",
                ));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_error(path, "line 1", "empty matrix file"))?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("consistent row widths"))
}

fn read_bin_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(parse_error(path, "byte 0", "missing M2FM header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            "byte 12",
            format!(
                "{rows} x {cols} matrix needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[12..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(parse_error(path, format!("value {i}"), "non-finite value"));
        }
        values.push(v);
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}

fn radiology_matrix(input: &RadiologyInput) -> Array2<f64> {
    match input {
        RadiologyInput::Embedding(e) => Array2::from_shape_vec((1, e.len()), e.as_slice().to_vec()).expect("row"),
        RadiologyInput::Block(b) => {
            let (c, h, w) = b.data().dim();
            b.data().to_shape((c, h * w)).expect("standard layout").to_owned()
        }
    }
}

/// Writes the cohort into an existing directory.
pub fn save_cohort(cohort: &Cohort, dir: &Path, format: MatrixFormat) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let kind = cohort.radiology_kind().unwrap_or(RadiologyKind::Embedding);
    for sub in ["bags", "radiology"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut patients = Vec::with_capacity(cohort.len());
    for r in &cohort.records {
        if r.radiology.kind() != kind {
            return Err(Error::Config(format!(
                "patient {} has a differently shaped radiology input",
                r.patient_id
            )));
        }
        let bag = format!("bags/{}.{}", r.patient_id, format.extension());
        let radiology = format!("radiology/{}.{}", r.patient_id, format.extension());
        write_matrix(&dir.join(&bag), r.bag.patches(), format)?;
        write_matrix(&dir.join(&radiology), &radiology_matrix(&r.radiology), format)?;
        patients.push(ManifestEntry {
            patient_id: r.patient_id.clone(),
            label: r.label,
            bag,
            radiology,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        format,
        dim: cohort.dim,
        radiology: kind,
        patients,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        parse_error(
            &path,
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(parse_error(
            &path,
            "field 'version'",
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

/// Reads and validates a cohort directory.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let manifest = load_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let dim = manifest.dim;
    let mut records = Vec::with_capacity(manifest.patients.len());
    for (i, entry) in manifest.patients.iter().enumerate() {
        let resolve = |field: &str, rel: &str| -> Result<PathBuf> {
            let p = dir.join(rel);
            if p.is_file() {
                Ok(p)
            } else {
                Err(parse_error(
                    &manifest_path,
                    format!("patients[{i}] ({}), field '{field}'", entry.patient_id),
                    format!("referenced file {} does not exist", p.display()),
                ))
            }
        };
        let bag_path = resolve("bag", &entry.bag)?;
        let rad_path = resolve("radiology", &entry.radiology)?;

        let bag = read_matrix(&bag_path, manifest.format)?;
        if bag.ncols() != dim {
            return Err(Error::dim(format!("bag file {}", bag_path.display()), dim, bag.ncols()));
        }
        let bag = FeatureBag::new(bag)?;

        let rad = read_matrix(&rad_path, manifest.format)?;
        let radiology = match manifest.radiology {
            RadiologyKind::Embedding => {
                if rad.nrows() != 1 {
                    return Err(Error::dim(
                        format!("radiology rows in {}", rad_path.display()),
                        1,
                        rad.nrows(),
                    ));
                }
                if rad.ncols() != dim {
                    return Err(Error::dim(
                        format!("radiology file {}", rad_path.display()),
                        dim,
                        rad.ncols(),
                    ));
                }
                RadiologyInput::Embedding(Embedding::new(rad.row(0).to_vec())?)
            }
            RadiologyKind::Block { height, width } => {
                if rad.nrows() != RADIOLOGY_CHANNELS {
                    return Err(Error::dim(
                        format!("radiology channels in {}", rad_path.display()),
                        RADIOLOGY_CHANNELS,
                        rad.nrows(),
                    ));
                }
                if rad.ncols() != height * width {
                    return Err(Error::dim(
                        format!("radiology pixels in {}", rad_path.display()),
                        height * width,
                        rad.ncols(),
                    ));
                }
                let data = Array3::from_shape_vec((RADIOLOGY_CHANNELS, height, width), rad.into_raw_vec_and_offset().0)
                    .expect("size checked");
                RadiologyInput::Block(RadiologyBlock::new(data)?)
            }
        };
        records.push(PatientRecord {
            patient_id: entry.patient_id.clone(),
            bag,
            radiology,
            label: entry.label,
        });
    }
    let cohort = Cohort::new(dim, records);
    let report = validate_cohort(&cohort);
    if let Some(f) = report.failures().next() {
        return Err(parse_error(&manifest_path, f.check.clone(), f.detail.clone()));
    }
    Ok(cohort)
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| parse_error(path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[0.1, -2.5e-300, 3.0], [1.0 / 3.0, 7e200, -0.0]];
        for f in [MatrixFormat::Csv, MatrixFormat::Bin] {
            let p = dir.path().join(format!("m.{f}"));
            write_matrix(&p, &m, f).unwrap();
            let back = read_matrix(&p, f).unwrap();
            assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn csv_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3,x\n").unwrap();
        match read_matrix(&p, MatrixFormat::Csv) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2, field 2"),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_matrix(&p, MatrixFormat::Csv), Err(Error::Parse { .. })));
    }

    #[test]
    fn truncated_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, &array![[1.0, 2.0]], MatrixFormat::Bin).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_matrix(&p, MatrixFormat::Bin), Err(Error::Parse { .. })));
    }
}
