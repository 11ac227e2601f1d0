//! Shape features of the tumor sub-regions, clinical encoding and the
//! linear survival regressor.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Image features per subject: `[V1, S1, V2, S2, V3, S3]`.
pub const NUM_IMAGE_FEATURES: usize = 6;
/// Image features + age + two resection indicators.
pub const NUM_FEATURES: usize = 9;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "volume_1", "surface_1", "volume_2", "surface_2", "volume_3", "surface_3", "age", "resection_gtr",
    "resection_str",
];

fn check_class(cls: u8) {
    assert!((1..=3).contains(&cls), "foreground class must be 1, 2 or 3, got {cls}");
}

/// Voxel count of class `cls`.
pub fn roi_volume(labels: &LabelMap, cls: u8) -> f64 {
    check_class(cls);
    labels.data.iter().filter(|&&c| c == cls).count() as f64
}

/// Sum over ROI voxels of the indicator's gradient magnitude, using central
/// differences `(s[i+1] - s[i-1]) / 2` with edge-replicated neighbours.
///
/// An isolated voxel sees zero on both sides along every axis and therefore
/// contributes nothing; thin structures are underestimated accordingly.
pub fn roi_surface_area(labels: &LabelMap, cls: u8) -> f64 {
    check_class(cls);
    let data = &labels.data;
    let [d, h, w] = labels.shape();
    let ind = |z: usize, y: usize, x: usize| (data[[z, y, x]] == cls) as u8 as f64;
    let mut total = 0.0;
    for z in 0..d {
        let (zm, zp) = (z.saturating_sub(1), (z + 1).min(d - 1));
        for y in 0..h {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                if data[[z, y, x]] != cls {
                    continue;
                }
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let gz = (ind(zp, y, x) - ind(zm, y, x)) / 2.0;
                let gy = (ind(z, yp, x) - ind(z, ym, x)) / 2.0;
                let gx = (ind(z, y, xp) - ind(z, y, xm)) / 2.0;
                total += (gz * gz + gy * gy + gx * gx).sqrt();
            }
        }
    }
    total
}

pub fn extract_features(labels: &LabelMap) -> [f64; NUM_IMAGE_FEATURES] {
    let mut out = [0.0; NUM_IMAGE_FEATURES];
    for cls in 1..=3u8 {
        let i = 2 * (cls as usize - 1);
        out[i] = roi_volume(labels, cls);
        out[i + 1] = roi_surface_area(labels, cls);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resection {
    #[serde(rename = "GTR")]
    Gtr,
    #[serde(rename = "STR")]
    Str,
    #[serde(rename = "NA")]
    Na,
}

impl Resection {
    pub fn encode(self) -> [f64; 2] {
        match self {
            Resection::Gtr => [1.0, 0.0],
            Resection::Str => [0.0, 1.0],
            Resection::Na => [0.0, 0.0],
        }
    }
}

impl FromStr for Resection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GTR" => Ok(Resection::Gtr),
            "STR" => Ok(Resection::Str),
            "NA" | "" => Ok(Resection::Na),
            _ => Err(Error::UnknownResection(s.to_string())),
        }
    }
}

impl fmt::Display for Resection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resection::Gtr => "GTR",
            Resection::Str => "STR",
            Resection::Na => "NA",
        })
    }
}

/// `[age, r1, r2]` with GTR → (1, 0), STR → (0, 1), NA → (0, 0).
pub fn encode_clinical(age: f64, status: &str) -> Result<[f64; 3]> {
    if !(age > 0.0 && age.is_finite()) {
        return Err(Error::Parse(format!("age must be positive, got {age}")));
    }
    let [r1, r2] = status.parse::<Resection>()?.encode();
    Ok([age, r1, r2])
}

/// Features and (optionally) the survival target of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiomicRecord {
    pub subject_id: String,
    pub image_features: [f64; NUM_IMAGE_FEATURES],
    pub age: f64,
    pub resection: Resection,
    pub survival_days: Option<f64>,
}

impl RadiomicRecord {
    pub fn feature_vector(&self) -> [f64; NUM_FEATURES] {
        let mut x = [0.0; NUM_FEATURES];
        x[..NUM_IMAGE_FEATURES].copy_from_slice(&self.image_features);
        x[6] = self.age;
        let [r1, r2] = self.resection.encode();
        x[7] = r1;
        x[8] = r2;
        x
    }
}

/// Linear model on z-scored features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalModel {
    pub feature_means: [f64; NUM_FEATURES],
    pub feature_stds: [f64; NUM_FEATURES],
    pub coefficients: [f64; NUM_FEATURES],
    pub intercept: f64,
    /// Coefficient of determination on the training data.
    pub training_r2: f64,
}

impl SurvivalModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::util::read_json(path.as_ref())
    }
}

fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    if ss_tot == 0.0 {
        // A constant target is either fitted exactly or not at all.
        return if ss_res <= f64::EPSILON * mean.abs().max(1.0) { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Ordinary least squares on z-scored features plus an intercept.
///
/// Solved through a singular value decomposition, so a rank-deficient design
/// falls back to the minimum-norm (pseudo-inverse) solution.
pub fn fit_survival(records: &[RadiomicRecord]) -> Result<SurvivalModel> {
    let n = records.len();
    if n < NUM_FEATURES + 1 {
        return Err(Error::TooFewRecords {
            needed: NUM_FEATURES + 1,
            got: n,
        });
    }
    let targets: Vec<f64> = records
        .iter()
        .map(|r| {
            r.survival_days
                .ok_or_else(|| Error::Parse(format!("subject {} has no survival target", r.subject_id)))
        })
        .collect::<Result<_>>()?;
    let raw: Vec<[f64; NUM_FEATURES]> = records.iter().map(RadiomicRecord::feature_vector).collect();

    let mut means = [0.0; NUM_FEATURES];
    let mut stds = [0.0; NUM_FEATURES];
    let mut constant = [false; NUM_FEATURES];
    for j in 0..NUM_FEATURES {
        let mean = raw.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n as f64;
        means[j] = mean;
        if var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
            log::warn!("feature {} is constant over the training set; its coefficient is fixed to 0", FEATURE_NAMES[j]);
            stds[j] = 1.0;
            constant[j] = true;
        } else {
            stds[j] = var.sqrt();
        }
    }

    let design = DMatrix::from_fn(n, NUM_FEATURES + 1, |i, j| {
        if j == 0 {
            1.0
        } else if constant[j - 1] {
            0.0
        } else {
            (raw[i][j - 1] - means[j - 1]) / stds[j - 1]
        }
    });
    let y = DVector::from_vec(targets.clone());
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (n.max(NUM_FEATURES + 1) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let informative = 1 + constant.iter().filter(|c| !**c).count();
    if rank < informative {
        log::warn!("survival design is rank deficient ({rank} < {informative}); using the pseudo-inverse solution");
    }
    let beta = svd
        .solve(&y, tol)
        .map_err(|e| Error::Parse(format!("least squares failed: {e}")))?;

    let mut coefficients = [0.0; NUM_FEATURES];
    for j in 0..NUM_FEATURES {
        coefficients[j] = if constant[j] { 0.0 } else { beta[j + 1] };
    }
    let mut model = SurvivalModel {
        feature_means: means,
        feature_stds: stds,
        coefficients,
        intercept: beta[0],
        training_r2: 0.0,
    };
    let fitted: Vec<f64> = records.iter().map(|r| predict_survival(&model, r)).collect();
    model.training_r2 = r_squared(&fitted, &targets);
    Ok(model)
}

/// `intercept + Σ coef_j · (x_j - mean_j) / std_j`; unclamped.
pub fn predict_survival(model: &SurvivalModel, record: &RadiomicRecord) -> f64 {
    let x = record.feature_vector();
    model.intercept
        + (0..NUM_FEATURES)
            .map(|j| model.coefficients[j] * (x[j] - model.feature_means[j]) / model.feature_stds[j])
            .sum::<f64>()
}

/// Survival-class boundaries in days: short `< short_below`, long
/// `> long_above`, mid otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBuckets {
    pub short_below: f64,
    pub long_above: f64,
}

impl Default for SurvivalBuckets {
    fn default() -> Self {
        Self {
            short_below: 300.0,
            long_above: 450.0,
        }
    }
}

impl SurvivalBuckets {
    pub fn class_of(&self, days: f64) -> u8 {
        if days < self.short_below {
            0
        } else if days > self.long_above {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMetrics {
    pub accuracy: f64,
    pub mse: f64,
    pub median_se: f64,
    pub std_se: f64,
    pub spearman: f64,
    pub r2: f64,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub(crate) fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    cov / (va.sqrt() * vb.sqrt())
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// MSE, median / standard deviation (population) of squared errors,
/// Spearman rank correlation, R² and 3-class bucket accuracy.
pub fn survival_metrics(pred: &[f64], truth: &[f64], buckets: SurvivalBuckets) -> Result<SurvivalMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            got: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let se: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).collect();
    let mse = se.iter().sum::<f64>() / n;
    let std_se = (se.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / n).sqrt();
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| buckets.class_of(**p) == buckets.class_of(**t))
        .count();
    Ok(SurvivalMetrics {
        accuracy: hits as f64 / n,
        mse,
        median_se: median(&se),
        std_se,
        spearman: pearson(&ranks(pred), &ranks(truth)),
        r2: r_squared(pred, truth),
    })
}

/// One row of the clinical table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRow {
    pub subject_id: String,
    pub age: f64,
    pub resection_status: String,
    #[serde(default)]
    pub survival_days: Option<f64>,
}

pub fn read_clinical(path: impl AsRef<Path>) -> Result<BTreeMap<String, ClinicalRow>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ClinicalRow = row?;
        row.resection_status.parse::<Resection>()?;
        out.insert(row.subject_id.clone(), row);
    }
    Ok(out)
}

pub fn write_clinical(path: impl AsRef<Path>, rows: &[ClinicalRow]) -> Result<()> {
    let path = path.as_ref();
    crate::util::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub subject_id: String,
    pub volume_1: f64,
    pub surface_1: f64,
    pub volume_2: f64,
    pub surface_2: f64,
    pub volume_3: f64,
    pub surface_3: f64,
}

impl FeatureRow {
    pub fn new(subject_id: impl Into<String>, f: [f64; NUM_IMAGE_FEATURES]) -> Self {
        Self {
            subject_id: subject_id.into(),
            volume_1: f[0],
            surface_1: f[1],
            volume_2: f[2],
            surface_2: f[3],
            volume_3: f[4],
            surface_3: f[5],
        }
    }

    pub fn features(&self) -> [f64; NUM_IMAGE_FEATURES] {
        [
            self.volume_1,
            self.surface_1,
            self.volume_2,
            self.surface_2,
            self.volume_3,
            self.surface_3,
        ]
    }
}

pub fn write_features(path: impl AsRef<Path>, rows: &[FeatureRow]) -> Result<()> {
    let path = path.as_ref();
    crate::util::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Joins image features with clinical rows by subject id.
pub fn join_records(features: &[FeatureRow], clinical: &BTreeMap<String, ClinicalRow>) -> Result<Vec<RadiomicRecord>> {
    features
        .iter()
        .map(|f| {
            let c = clinical
                .get(&f.subject_id)
                .ok_or_else(|| Error::Parse(format!("no clinical data for subject {}", f.subject_id)))?;
            Ok(RadiomicRecord {
                subject_id: f.subject_id.clone(),
                image_features: f.features(),
                age: c.age,
                resection: c.resection_status.parse()?,
                survival_days: c.survival_days,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub predicted_days: f64,
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let path = path.as_ref();
    crate::util::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
