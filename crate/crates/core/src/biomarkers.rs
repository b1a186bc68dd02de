//! Interpretable cardiac-function biomarkers computed from LV/RV volume
//! curves: volumes, rates, atrial contribution, BSA indexing and a
//! rule-based physiological screen for unrealistic curves.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const N_BIOMARKERS: usize = 13;

/// Fixed feature order used everywhere (CSV columns, model input).
pub const BIOMARKER_NAMES: [&str; N_BIOMARKERS] = [
    "iLVEDV", "iLVSV", "LVEF", "LVEDM", "LVPER", "LVPFR", "LVPAFR", "LVAC", "iRVEDV", "RVPER",
    "RVPFR", "RVPAFR", "RVAC",
];

/// Indices into [`BiomarkerVector`], in `BIOMARKER_NAMES` order.
pub mod idx {
    pub const ILVEDV: usize = 0;
    pub const ILVSV: usize = 1;
    pub const LVEF: usize = 2;
    pub const LVEDM: usize = 3;
    pub const LVPER: usize = 4;
    pub const LVPFR: usize = 5;
    pub const LVPAFR: usize = 6;
    pub const LVAC: usize = 7;
    pub const IRVEDV: usize = 8;
    pub const RVPER: usize = 9;
    pub const RVPFR: usize = 10;
    pub const RVPAFR: usize = 11;
    pub const RVAC: usize = 12;
}

/// The thirteen cardiac-function features fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerVector(pub [f64; N_BIOMARKERS]);

impl BiomarkerVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        BIOMARKER_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.0[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chamber {
    Lv,
    Rv,
}

/// Time-indexed blood-pool volume over one cardiac cycle.
#[derive(Debug, Clone)]
pub struct VolumeCurve {
    pub times_ms: Vec<f64>,
    pub volumes_ml: Vec<f64>,
    pub chamber: Chamber,
    /// LV end-diastolic myocardial mass in grams; carried through from the
    /// sidecar, never derived from the curve.
    pub lv_mass_g: Option<f64>,
}

impl VolumeCurve {
    pub fn new(
        times_ms: Vec<f64>,
        volumes_ml: Vec<f64>,
        chamber: Chamber,
        lv_mass_g: Option<f64>,
    ) -> Result<Self> {
        if times_ms.len() != volumes_ml.len() {
            return Err(Error::Validation(format!(
                "curve has {} times but {} volumes",
                times_ms.len(),
                volumes_ml.len()
            )));
        }
        if times_ms.len() < 2 {
            return Err(Error::Validation("curve needs at least 2 frames".into()));
        }
        if times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("times must be strictly increasing".into()));
        }
        if times_ms
            .iter()
            .chain(volumes_ml.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("non-finite curve sample".into()));
        }
        Ok(VolumeCurve {
            times_ms,
            volumes_ml,
            chamber,
            lv_mass_g,
        })
    }

    pub fn len(&self) -> usize {
        self.times_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ms.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn parse(s: &str) -> Result<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Gender::Female),
            "male" | "m" => Ok(Gender::Male),
            other => Err(Error::Validation(format!("unknown gender {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnthropometrics {
    pub weight_kg: f64,
    pub height_cm: f64,
    pub gender: Gender,
}

/// DuBois & DuBois body surface area in m^2.
pub fn bsa_dubois(anthro: &SubjectAnthropometrics) -> Result<f64> {
    if !(anthro.weight_kg > 20.0 && anthro.weight_kg < 300.0) {
        return Err(Error::Validation(format!(
            "weight {} kg outside (20, 300)",
            anthro.weight_kg
        )));
    }
    if !(anthro.height_cm > 100.0 && anthro.height_cm < 250.0) {
        return Err(Error::Validation(format!(
            "height {} cm outside (100, 250)",
            anthro.height_cm
        )));
    }
    Ok(0.007184 * anthro.weight_kg.powf(0.425) * anthro.height_cm.powf(0.725))
}

// ---------------------------------------------------------------------- qc

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QcThresholds {
    pub ef_min: f64,
    pub ef_max: f64,
    /// |first - last| as a fraction of EDV beyond which the cycle is open.
    pub closure_frac: f64,
    /// Frame-to-frame jump as a fraction of EDV.
    pub jump_frac: f64,
    pub min_frames: usize,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            ef_min: 15.0,
            ef_max: 90.0,
            closure_frac: 0.15,
            jump_frac: 0.25,
            min_frames: 10,
        }
    }
}

/// Outcome of the rule-based curve screen. `passed` iff `reasons` is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QcVerdict {
    pub passed: bool,
    pub reasons: Vec<String>,
}

fn screen_one(curve: &VolumeCurve, th: &QcThresholds, prefix: &str, reasons: &mut Vec<String>) {
    if curve.len() < th.min_frames {
        reasons.push(format!("{prefix}_too_few_frames"));
    }
    if curve.volumes_ml.iter().any(|&v| v <= 0.0) {
        reasons.push(format!("{prefix}_nonpositive_volume"));
        return; // EDV-relative rules are meaningless without positive volumes
    }
    let edv = curve.volumes_ml.iter().cloned().fold(f64::MIN, f64::max);
    let esv = curve.volumes_ml.iter().cloned().fold(f64::MAX, f64::min);
    let ef = 100.0 * (edv - esv) / edv;
    if ef <= th.ef_min || ef >= th.ef_max {
        reasons.push(format!("{prefix}_ef_out_of_range"));
    }
    let first = curve.volumes_ml[0];
    let last = *curve.volumes_ml.last().unwrap();
    if (first - last).abs() > th.closure_frac * edv {
        reasons.push(format!("{prefix}_cycle_not_closed"));
    }
    if curve
        .volumes_ml
        .windows(2)
        .any(|w| (w[1] - w[0]).abs() > th.jump_frac * edv)
    {
        reasons.push(format!("{prefix}_volume_jump"));
    }
}

/// Deterministic physiological screen replacing a learned curve classifier.
pub fn qc_screen(lv: &VolumeCurve, rv: &VolumeCurve) -> QcVerdict {
    qc_screen_with(lv, rv, &QcThresholds::default())
}

pub fn qc_screen_with(lv: &VolumeCurve, rv: &VolumeCurve, th: &QcThresholds) -> QcVerdict {
    let mut reasons = Vec::new();
    screen_one(lv, th, "lv", &mut reasons);
    screen_one(rv, th, "rv", &mut reasons);
    QcVerdict {
        passed: reasons.is_empty(),
        reasons,
    }
}

// -------------------------------------------------------------- extraction

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Fraction of diastole treated as early filling; the remainder is the
    /// atrial-contraction window.
    pub early_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            early_fraction: 0.6,
        }
    }
}

/// Per-curve quantities before indexing.
#[derive(Debug, Clone, Copy)]
pub struct CurveFeatures {
    pub edv: f64,
    pub esv: f64,
    pub sv: f64,
    pub ef: f64,
    pub per: f64,
    pub pfr: f64,
    pub pafr: f64,
    pub ac: f64,
}

/// Central finite-difference derivative treating the curve as cyclic.
fn cyclic_derivative(times: &[f64], volumes: &[f64]) -> (Vec<f64>, f64) {
    let n = times.len();
    let span = times[n - 1] - times[0];
    let period = span + span / (n as f64 - 1.0); // wrap gap = mean spacing
    let mut deriv = vec![0.0; n];
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        let mut dt = times[next] - times[prev];
        if next < i {
            dt += period;
        }
        if prev > i {
            dt += period;
        }
        deriv[i] = (volumes[next] - volumes[prev]) / dt * 1000.0; // mL/ms -> mL/s
    }
    (deriv, period)
}

/// Offset in ms from frame `from` to frame `to` walking forward cyclically.
fn forward_offset(times: &[f64], period: f64, from: usize, to: usize) -> f64 {
    let d = times[to] - times[from];
    if d >= 0.0 {
        d
    } else {
        d + period
    }
}

pub fn curve_features(curve: &VolumeCurve, cfg: &WindowConfig) -> Result<CurveFeatures> {
    if !(cfg.early_fraction > 0.0 && cfg.early_fraction < 1.0) {
        return Err(Error::Config(format!(
            "early_fraction {} outside (0, 1)",
            cfg.early_fraction
        )));
    }
    let n = curve.len();
    let v = &curve.volumes_ml;
    let t = &curve.times_ms;
    let edv_idx = (0..n).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let esv_idx = (0..n).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let edv = v[edv_idx];
    let esv = v[esv_idx];
    let sv = edv - esv;
    if sv <= 0.0 {
        return Err(Error::Validation("flat volume curve (EDV == ESV)".into()));
    }
    let ef = 100.0 * sv / edv;
    let (deriv, period) = cyclic_derivative(t, v);

    // Systole: EDV frame forward to ESV frame.
    let mut per = 0.0f64;
    let mut i = edv_idx;
    loop {
        i = (i + 1) % n;
        per = per.max(-deriv[i]);
        if i == esv_idx {
            break;
        }
    }

    // Diastole: ESV frame forward to EDV frame, split early / atrial.
    let diastole_ms = forward_offset(t, period, esv_idx, edv_idx);
    let early_end = cfg.early_fraction * diastole_ms;
    let mut pfr = f64::NEG_INFINITY;
    let mut pafr = f64::NEG_INFINITY;
    // Volume at the early/atrial boundary, linearly interpolated between the
    // straddling frames so the split does not depend on frame alignment.
    let mut atrial_start_volume = None;
    let mut prev = esv_idx;
    let mut prev_offset = 0.0;
    let mut j = esv_idx;
    loop {
        j = (j + 1) % n;
        let offset = forward_offset(t, period, esv_idx, j);
        if offset <= early_end {
            pfr = pfr.max(deriv[j]);
        } else {
            if atrial_start_volume.is_none() {
                let frac = (early_end - prev_offset) / (offset - prev_offset);
                atrial_start_volume = Some(v[prev] + frac * (v[j] - v[prev]));
            }
            pafr = pafr.max(deriv[j]);
        }
        if j == edv_idx {
            break;
        }
        prev = j;
        prev_offset = offset;
    }
    if !pfr.is_finite() || !pafr.is_finite() {
        return Err(Error::Validation(
            "too few diastolic frames to resolve filling windows".into(),
        ));
    }
    let ac = 100.0 * (edv - atrial_start_volume.unwrap()) / sv;
    Ok(CurveFeatures {
        edv,
        esv,
        sv,
        ef,
        per,
        pfr,
        pafr,
        ac,
    })
}

pub fn extract_biomarkers(
    lv: &VolumeCurve,
    rv: &VolumeCurve,
    anthro: &SubjectAnthropometrics,
) -> Result<BiomarkerVector> {
    extract_biomarkers_with(
        lv,
        rv,
        anthro,
        &WindowConfig::default(),
        &QcThresholds::default(),
    )
}

pub fn extract_biomarkers_with(
    lv: &VolumeCurve,
    rv: &VolumeCurve,
    anthro: &SubjectAnthropometrics,
    wcfg: &WindowConfig,
    qc: &QcThresholds,
) -> Result<BiomarkerVector> {
    let verdict = qc_screen_with(lv, rv, qc);
    if !verdict.passed {
        return Err(Error::QcRejected(verdict));
    }
    let mass = lv
        .lv_mass_g
        .ok_or_else(|| Error::Validation("LV mass missing".into()))?;
    let bsa = bsa_dubois(anthro)?;
    let l = curve_features(lv, wcfg)?;
    let r = curve_features(rv, wcfg)?;
    let mut out = [0.0; N_BIOMARKERS];
    out[idx::ILVEDV] = l.edv / bsa;
    out[idx::ILVSV] = l.sv / bsa;
    out[idx::LVEF] = l.ef;
    out[idx::LVEDM] = mass;
    out[idx::LVPER] = l.per;
    out[idx::LVPFR] = l.pfr;
    out[idx::LVPAFR] = l.pafr;
    out[idx::LVAC] = l.ac;
    out[idx::IRVEDV] = r.edv / bsa;
    out[idx::RVPER] = r.per;
    out[idx::RVPFR] = r.pfr;
    out[idx::RVPAFR] = r.pafr;
    out[idx::RVAC] = r.ac;
    Ok(BiomarkerVector(out))
}

// ------------------------------------------------------------------- tests


#[cfg(test)]
mod tests {
    use super::testutil::cosine_curve;
    use super::*;

    const TAU: f64 = std::f64::consts::TAU;

    fn anthro() -> SubjectAnthropometrics {
        SubjectAnthropometrics {
            weight_kg: 70.0,
            height_cm: 170.0,
            gender: Gender::Female,
        }
    }

    #[test]
    fn bsa_dubois_reference_value() {
        let bsa = bsa_dubois(&anthro()).unwrap();
        assert!((bsa - 1.810).abs() < 0.005, "bsa {bsa}");
    }

    #[test]
    fn bsa_monotone_in_weight() {
        let heavy = bsa_dubois(&SubjectAnthropometrics {
            weight_kg: 100.0,
            height_cm: 101.0,
            gender: Gender::Male,
        })
        .unwrap();
        let light = bsa_dubois(&SubjectAnthropometrics {
            weight_kg: 50.0,
            height_cm: 101.0,
            gender: Gender::Male,
        })
        .unwrap();
        assert!(heavy > light);
    }

    #[test]
    fn bsa_out_of_range_rejected() {
        let a = SubjectAnthropometrics {
            weight_kg: 10.0,
            height_cm: 170.0,
            gender: Gender::Female,
        };
        assert!(matches!(bsa_dubois(&a), Err(Error::Validation(_))));
    }

    /// Closed forms for V(t) = Vm + A*cos(2*pi*t/T):
    /// EDV = Vm+A, ESV = Vm-A, PER = PFR = A*2*pi/T (in mL/s with T in ms).
    #[test]
    fn cosine_curve_matches_closed_forms() {
        let (vm, a, t_ms) = (120.0, 50.0, 900.0);
        let curve = cosine_curve(vm, a, t_ms, 200, Chamber::Lv, Some(90.0));
        let f = curve_features(&curve, &WindowConfig::default()).unwrap();
        let peak_rate = a * TAU / t_ms * 1000.0;
        let ef = 100.0 * 2.0 * a / (vm + a);
        assert!((f.edv - (vm + a)).abs() / (vm + a) < 0.02);
        assert!((f.esv - (vm - a)).abs() / (vm - a) < 0.02);
        assert!((f.sv - 2.0 * a).abs() / (2.0 * a) < 0.02);
        assert!((f.ef - ef).abs() / ef < 0.02);
        assert!((f.per - peak_rate).abs() / peak_rate < 0.02, "per {}", f.per);
        assert!((f.pfr - peak_rate).abs() / peak_rate < 0.02, "pfr {}", f.pfr);
        // Atrial window starts at 60% of diastole: derivative there is
        // A*omega*|sin(2*pi*0.8)|, and AC = (1 - cos(2*pi*0.8))/2 of SV.
        let pafr_expected = peak_rate * (TAU * 0.8).sin().abs();
        let ac_expected = 100.0 * (1.0 - (TAU * 0.8).cos()) / 2.0;
        assert!(
            (f.pafr - pafr_expected).abs() / pafr_expected < 0.03,
            "pafr {} vs {}",
            f.pafr,
            pafr_expected
        );
        assert!(
            (f.ac - ac_expected).abs() / ac_expected < 0.05,
            "ac {} vs {}",
            f.ac,
            ac_expected
        );
    }

    #[test]
    fn scaling_homogeneity() {
        let lv = cosine_curve(120.0, 50.0, 900.0, 50, Chamber::Lv, Some(90.0));
        let mut lv2 = lv.clone();
        for v in lv2.volumes_ml.iter_mut() {
            *v *= 2.0;
        }
        let f1 = curve_features(&lv, &WindowConfig::default()).unwrap();
        let f2 = curve_features(&lv2, &WindowConfig::default()).unwrap();
        for (a, b) in [
            (f1.edv, f2.edv),
            (f1.esv, f2.esv),
            (f1.sv, f2.sv),
            (f1.per, f2.per),
            (f1.pfr, f2.pfr),
            (f1.pafr, f2.pafr),
        ] {
            assert!((2.0 * a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
        assert!((f1.ef - f2.ef).abs() < 1e-9);
        assert!((f1.ac - f2.ac).abs() < 1e-9);
    }

    #[test]
    fn resampling_consistency() {
        let coarse = cosine_curve(120.0, 50.0, 900.0, 50, Chamber::Lv, Some(90.0));
        let fine = cosine_curve(120.0, 50.0, 900.0, 100, Chamber::Lv, Some(90.0));
        let fc = curve_features(&coarse, &WindowConfig::default()).unwrap();
        let ff = curve_features(&fine, &WindowConfig::default()).unwrap();
        for (a, b) in [
            (fc.edv, ff.edv),
            (fc.esv, ff.esv),
            (fc.sv, ff.sv),
            (fc.ef, ff.ef),
            (fc.per, ff.per),
            (fc.pfr, ff.pfr),
            (fc.pafr, ff.pafr),
            (fc.ac, ff.ac),
        ] {
            assert!((a - b).abs() / b.abs() < 0.03, "{a} vs {b}");
        }
    }

    #[test]
    fn indexing_is_exact_division() {
        let lv = cosine_curve(130.0, 50.0, 900.0, 50, Chamber::Lv, Some(90.0));
        let rv = cosine_curve(130.0, 45.0, 900.0, 50, Chamber::Rv, None);
        let b = extract_biomarkers(&lv, &rv, &anthro()).unwrap();
        let bsa = bsa_dubois(&anthro()).unwrap();
        let f = curve_features(&lv, &WindowConfig::default()).unwrap();
        assert_eq!(b.0[idx::ILVEDV], f.edv / bsa);
        assert_eq!(b.0[idx::ILVSV], f.sv / bsa);
        assert_eq!(b.0[idx::LVEDM], 90.0);
    }

    #[test]
    fn qc_passes_physiological_curve() {
        let lv = cosine_curve(120.0, 50.0, 900.0, 50, Chamber::Lv, Some(90.0));
        let rv = cosine_curve(130.0, 45.0, 900.0, 50, Chamber::Rv, None);
        let verdict = qc_screen(&lv, &rv);
        assert!(verdict.passed, "{:?}", verdict.reasons);
        assert!(verdict.reasons.is_empty());
    }

    #[test]
    fn qc_fails_on_zeroed_frame() {
        let mut lv = cosine_curve(120.0, 50.0, 900.0, 50, Chamber::Lv, Some(90.0));
        lv.volumes_ml[25] = 1e-6; // near-zero dropout frame
        let rv = cosine_curve(130.0, 45.0, 900.0, 50, Chamber::Rv, None);
        let verdict = qc_screen(&lv, &rv);
        assert!(!verdict.passed);
        assert!(verdict.reasons.iter().any(|r| r == "lv_volume_jump"));
    }

    #[test]
    fn qc_fails_constant_curve_on_ef() {
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 18.0).collect();
        let flat = VolumeCurve::new(times, vec![100.0; 50], Chamber::Lv, Some(90.0)).unwrap();
        let rv = cosine_curve(130.0, 45.0, 900.0, 50, Chamber::Rv, None);
        let verdict = qc_screen(&flat, &rv);
        assert!(verdict.reasons.iter().any(|r| r == "lv_ef_out_of_range"));
    }

    #[test]
    fn extract_rejects_qc_failure() {
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 18.0).collect();
        let flat = VolumeCurve::new(times, vec![100.0; 50], Chamber::Lv, Some(90.0)).unwrap();
        let rv = cosine_curve(130.0, 45.0, 900.0, 50, Chamber::Rv, None);
        match extract_biomarkers(&flat, &rv, &anthro()) {
            Err(Error::QcRejected(v)) => assert!(!v.passed),
            other => panic!("expected QC rejection, got {other:?}"),
        }
    }

    #[test]
    fn extract_requires_mass() {
        let lv = cosine_curve(120.0, 50.0, 900.0, 50, Chamber::Lv, None);
        let rv = cosine_curve(130.0, 45.0, 900.0, 50, Chamber::Rv, None);
        assert!(matches!(
            extract_biomarkers(&lv, &rv, &anthro()),
            Err(Error::Validation(_))
        ));
    }
}
