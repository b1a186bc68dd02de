//! Latent-space analyses: decoding along the regression line to recover
//! biomarker tendencies per SBP level and gender, and decomposing which
//! biomarkers drive mispredicted normotensive subjects.

use crate::biomarkers::{Gender, BIOMARKER_NAMES, N_BIOMARKERS};
use crate::cohort::{SbpCategory, DummyEncoding, Subject};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::rvae::{DummyVariable, RVaeModel};
use crate::training::Standardization;
use serde::{Deserialize, Serialize};

/// SBP levels walked along the regression line.
pub const SBP_STEPS: [f64; 8] = [100.0, 110.0, 120.0, 130.0, 140.0, 150.0, 160.0, 170.0];

/// Perpendicular samples per level (drawn as symmetric +-t pairs so the
/// sample mean sits exactly on the line).
pub const PERP_SAMPLES: usize = 20;
pub const PERP_SIGMA: f64 = 1.0;

// --------------------------------------------------------------- traversal

/// Minimum-norm latent point whose regression prediction equals `target`
/// for dummy value `d`: the projection of the level set onto span(w).
pub fn latent_point_for_sbp(model: &RVaeModel, target: f64, d: DummyVariable) -> Result<Vec<f64>> {
    let w = &model.reg_w;
    let w_norm_sq: f64 = w.iter().map(|v| v * v).sum();
    if w_norm_sq < 1e-10 {
        return Err(Error::Validation(
            "regression weights are degenerate (near zero); traversal undefined".into(),
        ));
    }
    let offset = model.reg_b + d.value() * model.dummy_shift();
    let scale = (target - offset) / w_norm_sq;
    Ok(w.iter().map(|v| scale * v).collect())
}

/// Unit vector perpendicular to the 2-D regression direction.
fn perpendicular(w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != 2 {
        return Err(Error::Validation(
            "perpendicular sampling requires a 2-D latent space".into(),
        ));
    }
    let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
    if norm < 1e-10 {
        return Err(Error::Validation("degenerate regression direction".into()));
    }
    Ok(vec![-w[1] / norm, w[0] / norm])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraversalPoint {
    pub sbp: f64,
    pub gender: Gender,
    /// De-standardized decoded biomarker means over the perpendicular band.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TendencySlope {
    pub biomarker: String,
    pub gender: Gender,
    /// Least-squares slope of the decoded biomarker mean against SBP.
    pub slope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraversalReport {
    pub points: Vec<TraversalPoint>,
    pub slopes: Vec<TendencySlope>,
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Walks the regression line at each SBP level for both genders, decodes a
/// perpendicular band of latent points, and fits per-biomarker tendency
/// slopes against SBP.
pub fn traverse(
    model: &RVaeModel,
    stats: &Standardization,
    encoding: DummyEncoding,
    seed: u64,
) -> Result<TraversalReport> {
    let perp = perpendicular(&model.reg_w)?;
    let rng = Rng::new(seed).derive("traversal");
    let mut points = Vec::new();
    for gender in [Gender::Female, Gender::Male] {
        let d = DummyVariable::new(encoding.value(gender) as u8)?;
        for (li, &sbp) in SBP_STEPS.iter().enumerate() {
            let center = latent_point_for_sbp(model, sbp, d)?;
            let mut level_rng = rng.derive_index(li as u64 + 100 * d.value() as u64);
            let mut decoded: Vec<Vec<f64>> = Vec::with_capacity(PERP_SAMPLES);
            for _ in 0..PERP_SAMPLES / 2 {
                let t = level_rng.gaussian(0.0, PERP_SIGMA);
                for sign in [1.0, -1.0] {
                    let z: Vec<f64> = center
                        .iter()
                        .zip(&perp)
                        .map(|(c, p)| c + sign * t * p)
                        .collect();
                    let x_std = model.decode(&z)?;
                    decoded.push(stats.invert(&x_std));
                }
            }
            let n = decoded.len() as f64;
            let mut means = vec![0.0; N_BIOMARKERS];
            for row in &decoded {
                for (m, v) in means.iter_mut().zip(row) {
                    *m += v / n;
                }
            }
            let mut stds = vec![0.0; N_BIOMARKERS];
            for row in &decoded {
                for ((s, v), m) in stds.iter_mut().zip(row).zip(&means) {
                    *s += (v - m) * (v - m) / n;
                }
            }
            for s in stds.iter_mut() {
                *s = s.sqrt();
            }
            points.push(TraversalPoint {
                sbp,
                gender,
                means,
                stds,
            });
        }
    }
    let mut slopes = Vec::new();
    for gender in [Gender::Female, Gender::Male] {
        let group: Vec<&TraversalPoint> =
            points.iter().filter(|p| p.gender == gender).collect();
        let xs: Vec<f64> = group.iter().map(|p| p.sbp).collect();
        for (j, name) in BIOMARKER_NAMES.iter().enumerate() {
            let ys: Vec<f64> = group.iter().map(|p| p.means[j]).collect();
            slopes.push(TendencySlope {
                biomarker: (*name).to_string(),
                gender,
                slope: ols_slope(&xs, &ys),
            });
        }
    }
    Ok(TraversalReport { points, slopes })
}

impl TraversalReport {
    pub fn slope(&self, biomarker: &str, gender: Gender) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.biomarker == biomarker && s.gender == gender)
            .map(|s| s.slope)
    }

    /// Tidy CSV: one row per (sbp, gender, biomarker).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sbp,gender,biomarker,mean,std\n");
        for p in &self.points {
            for (j, name) in BIOMARKER_NAMES.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.sbp,
                    p.gender.as_str(),
                    name,
                    p.means[j],
                    p.stds[j]
                ));
            }
        }
        out
    }
}

// ----------------------------------------------------------- misprediction

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Misprediction {
    pub subject_id: String,
    pub true_sbp: f64,
    pub predicted_sbp: f64,
    pub predicted_category: SbpCategory,
    pub gender: Gender,
}

/// Disjoint lists of true-prehypertension subjects mispredicted into the
/// neighboring categories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MispredictedLists {
    pub predicted_normo: Vec<Misprediction>,
    pub predicted_hyper: Vec<Misprediction>,
}

/// Splits the true-prehypertension subjects by predicted category.
pub fn find_mispredicted(subjects: &[&Subject], predictions: &[f64]) -> Result<MispredictedLists> {
    if subjects.len() != predictions.len() {
        return Err(Error::Config("subjects/predictions length mismatch".into()));
    }
    let mut lists = MispredictedLists {
        predicted_normo: Vec::new(),
        predicted_hyper: Vec::new(),
    };
    let mut n_pre = 0usize;
    for (s, &pred) in subjects.iter().zip(predictions) {
        if s.category() != SbpCategory::Prehypertension {
            continue;
        }
        n_pre += 1;
        let cat = crate::cohort::categorize(pred);
        let m = Misprediction {
            subject_id: s.id.clone(),
            true_sbp: s.sbp,
            predicted_sbp: pred,
            predicted_category: cat,
            gender: s.gender,
        };
        match cat {
            SbpCategory::Normotension => lists.predicted_normo.push(m),
            SbpCategory::Hypertension => lists.predicted_hyper.push(m),
            SbpCategory::Prehypertension => {}
        }
    }
    if n_pre == 0 {
        return Err(Error::Validation(
            "no prehypertensive subjects in the evaluated set".into(),
        ));
    }
    Ok(lists)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiomarkerDelta {
    pub biomarker: String,
    /// 100 * (x_pred - x_true) / x_true; None when the decoded true value is
    /// too close to zero for the ratio to be meaningful.
    pub percent_difference: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MispredictionRecord {
    pub subject_id: String,
    pub true_sbp: f64,
    pub predicted_sbp: f64,
    pub predicted_category: SbpCategory,
    pub deltas: Vec<BiomarkerDelta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MispredictionReport {
    pub predicted_normo: Vec<MispredictionRecord>,
    pub predicted_hyper: Vec<MispredictionRecord>,
    /// Per-biomarker mean percent difference across each list.
    pub mean_normo: Vec<Option<f64>>,
    pub mean_hyper: Vec<Option<f64>>,
}

const NEAR_ZERO: f64 = 1e-9;

fn decode_at_sbp(
    model: &RVaeModel,
    stats: &Standardization,
    sbp: f64,
    d: DummyVariable,
) -> Result<Vec<f64>> {
    let z = latent_point_for_sbp(model, sbp, d)?;
    Ok(stats.invert(&model.decode(&z)?))
}

fn decompose_one(
    model: &RVaeModel,
    stats: &Standardization,
    encoding: DummyEncoding,
    m: &Misprediction,
) -> Result<MispredictionRecord> {
    let d = DummyVariable::new(encoding.value(m.gender) as u8)?;
    let x_true = decode_at_sbp(model, stats, m.true_sbp, d)?;
    let x_pred = decode_at_sbp(model, stats, m.predicted_sbp, d)?;
    let deltas = BIOMARKER_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let pct = if x_true[j].abs() < NEAR_ZERO {
                None
            } else {
                Some(100.0 * (x_pred[j] - x_true[j]) / x_true[j])
            };
            BiomarkerDelta {
                biomarker: (*name).to_string(),
                percent_difference: pct,
            }
        })
        .collect();
    Ok(MispredictionRecord {
        subject_id: m.subject_id.clone(),
        true_sbp: m.true_sbp,
        predicted_sbp: m.predicted_sbp,
        predicted_category: m.predicted_category,
        deltas,
    })
}

fn mean_deltas(records: &[MispredictionRecord]) -> Vec<Option<f64>> {
    (0..N_BIOMARKERS)
        .map(|j| {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| r.deltas[j].percent_difference)
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// Decodes each mispredicted subject at the regression-line latent points of
/// its true and predicted SBP and reports the per-biomarker percent
/// difference, plus list-level means.
pub fn misprediction_decomposition(
    model: &RVaeModel,
    stats: &Standardization,
    encoding: DummyEncoding,
    lists: &MispredictedLists,
) -> Result<MispredictionReport> {
    let predicted_normo = lists
        .predicted_normo
        .iter()
        .map(|m| decompose_one(model, stats, encoding, m))
        .collect::<Result<Vec<_>>>()?;
    let predicted_hyper = lists
        .predicted_hyper
        .iter()
        .map(|m| decompose_one(model, stats, encoding, m))
        .collect::<Result<Vec<_>>>()?;
    let mean_normo = mean_deltas(&predicted_normo);
    let mean_hyper = mean_deltas(&predicted_hyper);
    Ok(MispredictionReport {
        predicted_normo,
        predicted_hyper,
        mean_normo,
        mean_hyper,
    })
}

impl MispredictionReport {
    /// Tidy CSV: one row per (list, biomarker) with the list mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("list,biomarker,mean_percent_difference,n_subjects\n");
        for (list, means, n) in [
            ("predicted_normo", &self.mean_normo, self.predicted_normo.len()),
            ("predicted_hyper", &self.mean_hyper, self.predicted_hyper.len()),
        ] {
            for (name, mean) in BIOMARKER_NAMES.iter().zip(means) {
                let val = mean.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{list},{name},{val},{n}\n"));
            }
        }
        out
    }
}

// ------------------------------------------------------------------- tests
