//! Synthetic paired cohorts from a latent-variable model.
//!
//! Each patient has a class sign `c = ±1` (MSI positive), per-modality class
//! latents `z_m = c + class_latent_sigma * xi_m`, and a shared nuisance
//! `u ~ N(0, 1)` that carries no class information:
//!
//! * pathology: a bag of patches; an `informative_fraction` of them carry
//!   `signal_pathology * (z_p + w * u) * a_p`, all carry `noise_sigma` white
//!   noise;
//! * radiology: `signal_radiology * (z_r + w * u) * a_r + u * b_r + noise`,
//!   either as a D-vector (`a_r ⟂ b_r` unit directions) or as a six-channel
//!   block built from two orthogonal smooth templates.
//!
//! `w` is `shared_latent_weight`. Radiology also exposes `u` on its own
//! channel `b_r`, so a model that sees both streams can cancel it from the
//! pathology signal.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    Cohort, Embedding, FeatureBag, Label, PatientId, PatientRecord, RadiologyBlock, RadiologyInput, RadiologyKind,
    RADIOLOGY_CHANNELS,
};
use crate::error::{Error, Result};
use crate::nn::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_msi: usize,
    pub n_mss: usize,
    /// Inclusive range of patches per bag.
    pub bag_size_range: (usize, usize),
    pub dim: usize,
    pub signal_pathology: f64,
    pub signal_radiology: f64,
    pub shared_latent_weight: f64,
    pub noise_sigma: f64,
    /// Fraction of patches that carry signal; at least one per bag.
    pub informative_fraction: f64,
    /// Spread of each modality's class latent around the class sign.
    pub class_latent_sigma: f64,
    pub radiology: RadiologyKind,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::paper_shape()
    }
}

impl GeneratorConfig {
    /// 46 MSI / 306 MSS patients, D = 512.
    pub fn paper_shape() -> Self {
        GeneratorConfig {
            n_msi: 46,
            n_mss: 306,
            bag_size_range: (16, 64),
            dim: 512,
            ..GeneratorConfig::desk()
        }
    }

    /// 60 patients at D = 32 with 32 x 32 radiology blocks, modalities
    /// complementary.
    pub fn desk() -> Self {
        GeneratorConfig {
            n_msi: 20,
            n_mss: 40,
            bag_size_range: (8, 24),
            dim: 32,
            signal_pathology: 2.0,
            // per pixel; a unit-RMS template over 6 x 32 x 32 pixels still
            // carries a strong matched-filter signal
            signal_radiology: 0.04,
            shared_latent_weight: 0.75,
            noise_sigma: 0.3,
            informative_fraction: 0.2,
            class_latent_sigma: 0.8,
            radiology: RadiologyKind::Block { height: 32, width: 32 },
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Same shape with both class signals removed.
    pub fn without_signal(mut self) -> Self {
        self.signal_pathology = 0.0;
        self.signal_radiology = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_msi == 0 || self.n_mss == 0 {
            return bad(format!(
                "need at least one patient per class (MSI {}, MSS {})",
                self.n_msi, self.n_mss
            ));
        }
        let (lo, hi) = self.bag_size_range;
        if lo == 0 || lo > hi {
            return bad(format!("invalid bag size range ({lo}, {hi})"));
        }
        if self.dim < 2 {
            return bad(format!("embedding width must be at least 2, got {}", self.dim));
        }
        for (name, v) in [
            ("signal_pathology", self.signal_pathology),
            ("signal_radiology", self.signal_radiology),
            ("class_latent_sigma", self.class_latent_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_latent_weight) {
            return bad(format!(
                "shared_latent_weight must lie in [0, 1], got {}",
                self.shared_latent_weight
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return bad(format!(
                "informative_fraction must lie in (0, 1], got {}",
                self.informative_fraction
            ));
        }
        if let RadiologyKind::Block { height, width } = self.radiology {
            if height < 2 || width < 2 {
                return bad(format!("radiology block must be at least 2x2, got {height}x{width}"));
            }
        }
        Ok(())
    }
}

/// Generating variables of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLatents {
    pub patient_id: PatientId,
    pub class_sign: f64,
    pub z_pathology: f64,
    pub z_radiology: f64,
    pub shared: f64,
    pub informative: Vec<usize>,
}

/// Fixed directions of one cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub pathology: Array1<f64>,
    pub radiology_class: Array1<f64>,
    pub radiology_shared: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCohort {
    pub cohort: Cohort,
    pub latents: Vec<PatientLatents>,
    pub directions: Directions,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn random_unit(rng: &mut Rng, dim: usize) -> Array1<f64> {
    unit(Array1::from_shape_fn(dim, |_| normal(rng)))
}

/// Unit vector orthogonal to `a` (itself unit).
fn orthogonal_unit(rng: &mut Rng, a: &Array1<f64>) -> Array1<f64> {
    loop {
        let v = random_unit(rng, a.len());
        let w = &v - &(a * v.dot(a));
        if w.dot(&w) > 1e-6 {
            return unit(w);
        }
    }
}

/// Class and shared templates of a `6 x h x w` block, each with unit RMS and
/// mutually orthogonal.
pub fn block_templates(height: usize, width: usize) -> (Array3<f64>, Array3<f64>) {
    let shape = (RADIOLOGY_CHANNELS, height, width);
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let s2 = 2.0 * (height.min(width) as f64 / 5.0).powi(2);
    let class = Array3::from_shape_fn(shape, |(c, y, x)| {
        let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        sign * (-r2 / s2).exp()
    });
    let shared = Array3::from_shape_fn(shape, |(c, y, x)| {
        let phase = c as f64 * std::f64::consts::FRAC_PI_3;
        (2.0 * std::f64::consts::PI * y as f64 / height as f64 + phase).cos()
            + (2.0 * std::f64::consts::PI * x as f64 / width as f64).sin()
    });
    let rms = |a: &Array3<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
    let class = &class / rms(&class);
    let proj = (&shared * &class).sum() / (&class * &class).sum();
    let shared = &shared - &(&class * proj);
    let shared = &shared / rms(&shared);
    (class, shared)
}

/// Deterministic cohort for the configuration.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<Cohort> {
    Ok(generate_cohort_detailed(cfg)?.cohort)
}

/// Cohort together with its generating latents and directions.
pub fn generate_cohort_detailed(cfg: &GeneratorConfig) -> Result<GeneratedCohort> {
    cfg.validate()?;
    let mut rng = nn::rng_from_seed(cfg.seed);
    let dim = cfg.dim;
    let directions = {
        let pathology = random_unit(&mut rng, dim);
        let radiology_class = random_unit(&mut rng, dim);
        let radiology_shared = orthogonal_unit(&mut rng, &radiology_class);
        Directions {
            pathology,
            radiology_class,
            radiology_shared,
        }
    };
    let templates = match cfg.radiology {
        RadiologyKind::Block { height, width } => Some(block_templates(height, width)),
        RadiologyKind::Embedding => None,
    };

    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Msi, cfg.n_msi)
        .chain(std::iter::repeat_n(Label::Mss, cfg.n_mss))
        .collect();
    labels.shuffle(&mut rng);

    let width = (labels.len().max(1) as f64).log10().floor() as usize + 1;
    let mut records = Vec::with_capacity(labels.len());
    let mut latents = Vec::with_capacity(labels.len());
    for (i, label) in labels.into_iter().enumerate() {
        let patient_id = PatientId::new(format!("P{:0w$}", i + 1, w = width.max(4)));
        let class_sign = if label.is_positive() { 1.0 } else { -1.0 };
        let z_pathology = class_sign + cfg.class_latent_sigma * normal(&mut rng);
        let z_radiology = class_sign + cfg.class_latent_sigma * normal(&mut rng);
        let shared = normal(&mut rng);

        let n = rng.random_range(cfg.bag_size_range.0..=cfg.bag_size_range.1);
        let n_informative = ((cfg.informative_fraction * n as f64).round() as usize).clamp(1, n);
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(&mut rng);
        let mut informative = slots[..n_informative].to_vec();
        informative.sort_unstable();
        let amplitude = cfg.signal_pathology * (z_pathology + cfg.shared_latent_weight * shared);
        let radiology_amplitude = cfg.signal_radiology * (z_radiology + cfg.shared_latent_weight * shared);
        let mut patches = Array2::from_shape_fn((n, dim), |_| cfg.noise_sigma * normal(&mut rng));
        for &j in &informative {
            patches.row_mut(j).scaled_add(amplitude, &directions.pathology);
        }

        let radiology = match &templates {
            None => {
                let mut r = Array1::from_shape_fn(dim, |_| cfg.noise_sigma * normal(&mut rng));
                r.scaled_add(radiology_amplitude, &directions.radiology_class);
                r.scaled_add(shared, &directions.radiology_shared);
                RadiologyInput::Embedding(Embedding::new(r.to_vec())?)
            }
            Some((class_t, shared_t)) => {
                let mut b = Array3::from_shape_fn(class_t.raw_dim(), |_| cfg.noise_sigma * normal(&mut rng));
                b.scaled_add(radiology_amplitude, class_t);
                b.scaled_add(shared, shared_t);
                RadiologyInput::Block(RadiologyBlock::new(b)?)
            }
        };

        latents.push(PatientLatents {
            patient_id: patient_id.clone(),
            class_sign,
            z_pathology,
            z_radiology,
            shared,
            informative,
        });
        records.push(PatientRecord {
            patient_id,
            bag: FeatureBag::new(patches)?,
            radiology,
            label,
        });
    }
    Ok(GeneratedCohort {
        cohort: Cohort::new(dim, records),
        latents,
        directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_follow_config() {
        let c = generate_cohort(&GeneratorConfig::desk().with_seed(3)).unwrap();
        assert_eq!((c.class_counts.msi, c.class_counts.mss), (20, 40));
        assert!(c.records.iter().all(|r| (8..=24).contains(&r.bag.len())));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = GeneratorConfig::desk();
        c.noise_sigma = 0.0;
        assert!(matches!(generate_cohort(&c), Err(Error::Config(_))));
        let mut c = GeneratorConfig::desk();
        c.bag_size_range = (5, 4);
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::desk();
        c.n_msi = 0;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::desk();
        c.shared_latent_weight = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn templates_are_orthonormal_in_rms() {
        let (a, b) = block_templates(12, 10);
        let n = a.len() as f64;
        assert!(((&a * &a).sum() / n - 1.0).abs() < 1e-12);
        assert!(((&b * &b).sum() / n - 1.0).abs() < 1e-12);
        assert!((&a * &b).sum().abs() < 1e-9);
    }

    #[test]
    fn shared_direction_is_orthogonal() {
        let cfg = GeneratorConfig::desk();
        let g = generate_cohort_detailed(&cfg).unwrap();
        assert!(g.directions.radiology_class.dot(&g.directions.radiology_shared).abs() < 1e-12);
        assert_eq!(g.latents.len(), 60);
        let r = &g.latents[0];
        let bag = &g.cohort.records[0].bag;
        assert_eq!(
            r.informative.len(),
            ((cfg.informative_fraction * bag.len() as f64).round() as usize).max(1)
        );
    }
}
