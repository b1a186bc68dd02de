//! Cohort data model, CSV ingestion and a synthetic cohort generator that
//! plants known linear biomarker/SBP relationships per gender, so that every
//! downstream experiment can be verified against ground truth.

use crate::biomarkers::{idx, BiomarkerVector, Gender, BIOMARKER_NAMES, N_BIOMARKERS};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const SBP_MIN: f64 = 60.0;
pub const SBP_MAX: f64 = 260.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbpCategory {
    Normotension,
    Prehypertension,
    Hypertension,
}

impl SbpCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            SbpCategory::Normotension => "normotension",
            SbpCategory::Prehypertension => "prehypertension",
            SbpCategory::Hypertension => "hypertension",
        }
    }
}

/// SBP < 120 is normotension, SBP > 140 hypertension; 120 and 140 themselves
/// fall in the prehypertension band.
pub fn categorize(sbp: f64) -> SbpCategory {
    if sbp < 120.0 {
        SbpCategory::Normotension
    } else if sbp > 140.0 {
        SbpCategory::Hypertension
    } else {
        SbpCategory::Prehypertension
    }
}

/// Maps a gender to the 0/1 regression indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DummyEncoding {
    pub male_value: u8,
}

impl Default for DummyEncoding {
    fn default() -> Self {
        DummyEncoding { male_value: 1 }
    }
}

impl DummyEncoding {
    pub fn value(&self, gender: Gender) -> f64 {
        match gender {
            Gender::Male => f64::from(self.male_value),
            Gender::Female => f64::from(1 - self.male_value),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub biomarkers: BiomarkerVector,
    pub sbp: f64,
    pub gender: Gender,
}

impl Subject {
    pub fn category(&self) -> SbpCategory {
        categorize(self.sbp)
    }
}

// ------------------------------------------------------------ synthetic gen

/// Parameters of the synthetic cohort. Each biomarker is
/// `baseline_g + slope_g * (sbp - reference_sbp) + N(0, noise_sd)`,
/// with gender-specific baselines and slopes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    /// Male fraction per SBP category (normo, pre, hyper).
    pub male_fraction_by_category: [f64; 3],
    /// Category weights (normotension, prehypertension, hypertension).
    pub category_weights: [f64; 3],
    /// Uniform SBP ranges per category, same order as the weights.
    pub sbp_ranges: [[f64; 2]; 3],
    pub reference_sbp: f64,
    pub baselines_female: [f64; N_BIOMARKERS],
    pub baselines_male: [f64; N_BIOMARKERS],
    pub slopes_female: [f64; N_BIOMARKERS],
    pub slopes_male: [f64; N_BIOMARKERS],
    pub noise_sd: [f64; N_BIOMARKERS],
    /// Extra prehypertension subjects whose biomarkers follow the
    /// `outlier_profile_sbp` profile but are labeled `outlier_label_sbp`.
    pub n_outliers: usize,
    pub outlier_profile_sbp: f64,
    pub outlier_label_sbp: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        // Baselines at the 120 mmHg reference, plausible resting physiology.
        let baselines_female = [
            78.0, 45.0, 60.0, 85.0, 450.0, 380.0, 180.0, 22.0, 80.0, 420.0, 350.0, 160.0, 24.0,
        ];
        // Slopes per mmHg. iLVEDV falls, LVPER/LVPAFR rise, iRVEDV is flat,
        // and the iLVEDV/LVPER effects are larger in males. The strongest
        // relative effects sit on LV diastolic function (LVPFR/LVPAFR/LVAC).
        let mut slopes_female = [0.0; N_BIOMARKERS];
        let mut slopes_male = [0.0; N_BIOMARKERS];
        slopes_female[idx::ILVEDV] = -0.10;
        slopes_male[idx::ILVEDV] = -0.22;
        slopes_female[idx::ILVSV] = -0.05;
        slopes_male[idx::ILVSV] = -0.07;
        slopes_female[idx::LVEF] = -0.03;
        slopes_male[idx::LVEF] = -0.04;
        slopes_female[idx::LVEDM] = 0.15;
        slopes_male[idx::LVEDM] = 0.22;
        slopes_female[idx::LVPER] = 0.9;
        slopes_male[idx::LVPER] = 2.1;
        slopes_female[idx::LVPFR] = -1.0;
        slopes_male[idx::LVPFR] = -1.2;
        slopes_female[idx::LVPAFR] = 0.55;
        slopes_male[idx::LVPAFR] = 0.70;
        slopes_female[idx::LVAC] = 0.06;
        slopes_male[idx::LVAC] = 0.07;
        slopes_female[idx::RVPFR] = -0.10;
        slopes_male[idx::RVPFR] = -0.12;
        slopes_female[idx::RVPAFR] = 0.05;
        slopes_male[idx::RVPAFR] = 0.06;
        let noise_sd = [
            2.3, 1.2, 0.7, 3.7, 22.0, 20.0, 9.0, 1.0, 4.0, 20.0, 3.0, 1.4, 1.0,
        ];
        // Male profiles sit where the mid-gender trend would place a subject
        // ~30 mmHg higher: the gender offset is a consistent blood-pressure-
        // equivalent shift along the trend rather than an arbitrary direction.
        let gender_shift_mmhg = 30.0;
        let mut baselines_male = baselines_female;
        for j in 0..N_BIOMARKERS {
            baselines_male[j] += gender_shift_mmhg * 0.5 * (slopes_female[j] + slopes_male[j]);
        }
        CohortSpec {
            n_subjects: 3600,
            male_fraction_by_category: [0.5, 0.5, 0.5],
            category_weights: [1321.0, 582.0, 1697.0],
            sbp_ranges: [[95.0, 120.0], [120.0, 140.0], [140.05, 200.0]],
            reference_sbp: 120.0,
            baselines_female,
            baselines_male,
            slopes_female,
            slopes_male,
            noise_sd,
            n_outliers: 0,
            outlier_profile_sbp: 150.0,
            outlier_label_sbp: 130.0,
            seed: 42,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 50 {
            return Err(Error::Validation(format!(
                "n_subjects {} below minimum 50",
                self.n_subjects
            )));
        }
        for f in &self.male_fraction_by_category {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::Validation(
                    "male_fraction_by_category outside [0, 1]".into(),
                ));
            }
        }
        if self.noise_sd.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation("noise_sd entries must be > 0".into()));
        }
        if self.category_weights.iter().any(|&w| w < 0.0)
            || self.category_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Validation("invalid category_weights".into()));
        }
        for r in &self.sbp_ranges {
            if !(SBP_MIN < r[0] && r[0] < r[1] && r[1] < SBP_MAX) {
                return Err(Error::Validation(format!("invalid sbp range {r:?}")));
            }
        }
        Ok(())
    }

    fn biomarker_profile(&self, gender: Gender, sbp: f64, rng: &mut Rng) -> BiomarkerVector {
        let (base, slope) = match gender {
            Gender::Female => (&self.baselines_female, &self.slopes_female),
            Gender::Male => (&self.baselines_male, &self.slopes_male),
        };
        let mut x = [0.0; N_BIOMARKERS];
        for j in 0..N_BIOMARKERS {
            x[j] = base[j] + slope[j] * (sbp - self.reference_sbp) + rng.gaussian(0.0, self.noise_sd[j]);
        }
        BiomarkerVector(x)
    }
}

/// Planted truth emitted alongside a generated cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub reference_sbp: f64,
    pub slopes_female: [f64; N_BIOMARKERS],
    pub slopes_male: [f64; N_BIOMARKERS],
    pub baselines_female: [f64; N_BIOMARKERS],
    pub baselines_male: [f64; N_BIOMARKERS],
    pub noise_sd: [f64; N_BIOMARKERS],
    pub outlier_ids: Vec<String>,
}

pub fn generate_synthetic(spec: &CohortSpec) -> Result<(Vec<Subject>, GroundTruth)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).derive("cohort");
    let total_weight: f64 = spec.category_weights.iter().sum();
    let mut subjects = Vec::with_capacity(spec.n_subjects + spec.n_outliers);
    for i in 0..spec.n_subjects {
        let u = rng.next_f64() * total_weight;
        let cat = if u < spec.category_weights[0] {
            0
        } else if u < spec.category_weights[0] + spec.category_weights[1] {
            1
        } else {
            2
        };
        let gender = if rng.bernoulli(spec.male_fraction_by_category[cat]) {
            Gender::Male
        } else {
            Gender::Female
        };
        let r = spec.sbp_ranges[cat];
        let sbp = rng.uniform(r[0], r[1]);
        let biomarkers = spec.biomarker_profile(gender, sbp, &mut rng);
        subjects.push(Subject {
            id: format!("subj-{i:05}"),
            biomarkers,
            sbp,
            gender,
        });
    }
    let mut outlier_ids = Vec::with_capacity(spec.n_outliers);
    for k in 0..spec.n_outliers {
        // Outliers are labeled prehypertensive; use that category's mix.
        let gender = if rng.bernoulli(spec.male_fraction_by_category[1]) {
            Gender::Male
        } else {
            Gender::Female
        };
        let biomarkers = spec.biomarker_profile(gender, spec.outlier_profile_sbp, &mut rng);
        let id = format!("outlier-{k:03}");
        outlier_ids.push(id.clone());
        subjects.push(Subject {
            id,
            biomarkers,
            sbp: spec.outlier_label_sbp,
            gender,
        });
    }
    let truth = GroundTruth {
        seed: spec.seed,
        reference_sbp: spec.reference_sbp,
        slopes_female: spec.slopes_female,
        slopes_male: spec.slopes_male,
        baselines_female: spec.baselines_female,
        baselines_male: spec.baselines_male,
        noise_sd: spec.noise_sd,
        outlier_ids,
    };
    Ok((subjects, truth))
}

// --------------------------------------------------------------------- csv

#[derive(Debug, Clone, Serialize)]
pub struct RowError {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct LoadReport {
    pub subjects: Vec<Subject>,
    pub rejected: Vec<RowError>,
}

pub fn cohort_header() -> Vec<String> {
    let mut h = vec!["id".to_string(), "gender".to_string(), "sbp_mmhg".to_string()];
    h.extend(BIOMARKER_NAMES.iter().map(|s| s.to_string()));
    h
}

/// Header-keyed cohort CSV reader; malformed rows are itemized, valid rows
/// kept. A missing column is a file-level error.
pub fn load_cohort(path: &Path) -> Result<LoadReport> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing column {name:?} in {path:?}")))
    };
    let id_col = col("id")?;
    let gender_col = col("gender")?;
    let sbp_col = col("sbp_mmhg")?;
    let mut marker_cols = [0usize; N_BIOMARKERS];
    for (j, name) in BIOMARKER_NAMES.iter().enumerate() {
        marker_cols[j] = col(name)?;
    }

    let mut subjects = Vec::new();
    let mut rejected = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RowError {
                    row,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&record, id_col, gender_col, sbp_col, &marker_cols) {
            Ok(s) => subjects.push(s),
            Err(e) => rejected.push(RowError {
                row,
                message: e.to_string(),
            }),
        }
    }
    Ok(LoadReport { subjects, rejected })
}

fn parse_row(
    record: &csv::StringRecord,
    id_col: usize,
    gender_col: usize,
    sbp_col: usize,
    marker_cols: &[usize; N_BIOMARKERS],
) -> Result<Subject> {
    let field = |c: usize| -> Result<&str> {
        record
            .get(c)
            .ok_or_else(|| Error::Validation("short record".into()))
    };
    let id = field(id_col)?.to_string();
    if id.is_empty() {
        return Err(Error::Validation("empty id".into()));
    }
    let gender = Gender::parse(field(gender_col)?)?;
    let sbp: f64 = field(sbp_col)?
        .parse()
        .map_err(|_| Error::Validation(format!("non-numeric sbp {:?}", field(sbp_col).unwrap())))?;
    if !(sbp > SBP_MIN && sbp < SBP_MAX) {
        return Err(Error::Validation(format!(
            "sbp {sbp} outside ({SBP_MIN}, {SBP_MAX})"
        )));
    }
    let mut x = [0.0f64; N_BIOMARKERS];
    for (j, &c) in marker_cols.iter().enumerate() {
        let raw = field(c)?;
        x[j] = raw.parse().map_err(|_| {
            Error::Validation(format!("non-numeric {} {:?}", BIOMARKER_NAMES[j], raw))
        })?;
        if !x[j].is_finite() {
            return Err(Error::Validation(format!(
                "non-finite {}",
                BIOMARKER_NAMES[j]
            )));
        }
    }
    Ok(Subject {
        id,
        biomarkers: BiomarkerVector(x),
        sbp,
        gender,
    })
}

/// Full-precision, byte-deterministic cohort writer.
pub fn save_cohort(path: &Path, subjects: &[Subject]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", cohort_header().join(","))?;
    for s in subjects {
        write!(out, "{},{},{}", s.id, s.gender.as_str(), s.sbp)?;
        for v in s.biomarkers.as_slice() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

// ------------------------------------------------------------------- tests
