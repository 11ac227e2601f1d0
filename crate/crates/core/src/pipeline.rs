//! Stage orchestration over an on-disk dataset.
//!
//! Input layout under `data_root`:
//!
//! ```text
//! <id>/<id>_t1.nii.gz  <id>_t1ce.nii.gz  <id>_t2.nii.gz  <id>_flair.nii.gz  [<id>_seg.nii.gz]
//! clinical.csv         (optional: subject_id, age, resection_status, survival_days)
//! ```
//!
//! Every stage reads the artifacts of earlier stages from `output_root` and
//! writes its own next to them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{argmax_labels, average_probability_files};
use crate::error::{Error, Result};
use crate::inference::predict_volume;
use crate::metrics::{evaluate_region, summarize, Region, Summary};
use crate::preprocess::{fuse_contrasts, minmax_normalize, run_external_stage, PreprocessConfig};
use crate::radiomics::{
    extract_features, fit_survival, join_records, predict_survival, read_clinical, read_features,
    survival_metrics, write_features, write_predictions, ClinicalRow, FeatureRow, PredictionRow,
    SurvivalBuckets, SurvivalMetrics, SurvivalModel,
};
use crate::sampler::{estimate_channel_stats, ChannelStats, SamplingSubject, DEFAULT_STAT_DRAWS};
use crate::unet::{train, Checkpoint, ModelConfig, TrainSchedule, UNet3d};
use crate::util::{read_json, write_json};
use crate::volume::{
    load_label_map, load_multimodal, load_scalar_volume, save_label_map,
    save_multimodal, save_probability_map, Contrast, MultiModalVolume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Preprocess,
    SampleStats,
    Train,
    Predict,
    Ensemble,
    Features,
    SurvivalFit,
    SurvivalPredict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Preprocess,
        Stage::SampleStats,
        Stage::Train,
        Stage::Predict,
        Stage::Ensemble,
        Stage::Features,
        Stage::SurvivalFit,
        Stage::SurvivalPredict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::SampleStats => "sample-stats",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Ensemble => "ensemble",
            Stage::Features => "features",
            Stage::SurvivalFit => "survival-fit",
            Stage::SurvivalPredict => "survival-predict",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown stage `{s}`")))
    }
}

/// Parses a comma-separated stage list; stages must appear in pipeline order
/// without repeats. `all` selects every stage.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    if list.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let stages: Vec<Stage> = list.split(',').map(str::parse).collect::<Result<_>>()?;
    if stages.is_empty() {
        return Err(Error::Empty("stage list".into()));
    }
    for pair in stages.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::InvalidConfig(format!(
                "stage `{}` must come before `{}`",
                pair[1], pair[0]
            )));
        }
    }
    Ok(stages)
}

/// Seeds of the stochastic stages. Model `i` uses `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub sample_stats: u64,
    pub init: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            split: 7,
            sample_stats: 11,
            init: 13,
            train: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    /// Fraction of labeled subjects withheld from training for evaluation.
    #[serde(default)]
    pub holdout_fraction: f64,
    #[serde(default = "default_stat_draws")]
    pub stat_draws: usize,
    #[serde(default = "default_true")]
    pub flip_tta: bool,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub buckets: SurvivalBuckets,
    #[serde(rename = "model")]
    pub models: Vec<ModelConfig>,
}

fn default_stat_draws() -> usize {
    DEFAULT_STAT_DRAWS
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    /// The full six-model configuration.
    pub fn new(data_root: impl Into<PathBuf>, output_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            output_root: output_root.into(),
            holdout_fraction: 0.0,
            stat_draws: DEFAULT_STAT_DRAWS,
            flip_tta: true,
            seeds: Seeds::default(),
            preprocess: PreprocessConfig::passthrough(),
            schedule: TrainSchedule::default(),
            buckets: SurvivalBuckets::default(),
            models: ModelConfig::ensemble_configs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("at least one [[model]] is required".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidConfig(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if self.stat_draws == 0 {
            return Err(Error::InvalidConfig("stat_draws must be positive".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        self.preprocess.validate()?;
        self.schedule.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_root.clone(),
        }
    }
}

/// Artifact paths under `output_root`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn split(&self) -> PathBuf {
        self.root.join("preprocessed/split.json")
    }
    pub fn corrected(&self, id: &str, c: Contrast) -> PathBuf {
        self.root.join(format!("preprocessed/corrected/{id}_{c}.nii.gz"))
    }
    pub fn fused(&self, id: &str) -> PathBuf {
        self.root.join(format!("preprocessed/{id}.nii.gz"))
    }
    pub fn truth(&self, id: &str) -> PathBuf {
        self.root.join(format!("preprocessed/{id}_seg.nii.gz"))
    }
    pub fn clinical(&self) -> PathBuf {
        self.root.join("preprocessed/clinical.csv")
    }
    pub fn model_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("models/model_{i}"))
    }
    pub fn stats(&self, i: usize) -> PathBuf {
        self.model_dir(i).join("stats.json")
    }
    pub fn checkpoint(&self, i: usize) -> PathBuf {
        self.model_dir(i).join("checkpoint.bin")
    }
    pub fn train_report(&self, i: usize) -> PathBuf {
        self.model_dir(i).join("train_report.json")
    }
    pub fn model_prediction(&self, i: usize, id: &str) -> PathBuf {
        self.root.join(format!("predictions/model_{i}/{id}_prob.nii.gz"))
    }
    pub fn ensemble_prob(&self, id: &str) -> PathBuf {
        self.root.join(format!("ensemble/{id}_prob.nii.gz"))
    }
    pub fn ensemble_seg(&self, id: &str) -> PathBuf {
        self.root.join(format!("ensemble/{id}_seg.nii.gz"))
    }
    pub fn train_features(&self) -> PathBuf {
        self.root.join("features/train.csv")
    }
    pub fn predicted_features(&self) -> PathBuf {
        self.root.join("features/predicted.csv")
    }
    pub fn survival_model(&self) -> PathBuf {
        self.root.join("survival/model.json")
    }
    pub fn survival_predictions(&self) -> PathBuf {
        self.root.join("survival/predictions.csv")
    }
    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluation")
    }
    pub fn evaluation_summary(&self) -> PathBuf {
        self.evaluation_dir().join("summary.json")
    }
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.to_string(),
        })
    }
}

/// Subjects found under `data_root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub dir: PathBuf,
    pub has_labels: bool,
}

pub fn discover_subjects(data_root: &Path) -> Result<Vec<SubjectEntry>> {
    let entries = fs::read_dir(data_root).map_err(|e| Error::io(data_root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(data_root, e))?;
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        let has_contrasts = Contrast::ALL
            .iter()
            .all(|c| dir.join(format!("{id}_{c}.nii.gz")).is_file());
        if !has_contrasts {
            log::warn!("skipping {}: missing contrast files", dir.display());
            continue;
        }
        let has_labels = dir.join(format!("{id}_seg.nii.gz")).is_file();
        out.push(SubjectEntry { id, dir, has_labels });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if out.is_empty() {
        return Err(Error::Empty(format!("no subjects under {}", data_root.display())));
    }
    Ok(out)
}

/// Partition of subject ids used by the later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Labeled subjects used for statistics, training and the survival fit.
    pub train: Vec<String>,
    /// Subjects segmented by the ensemble.
    pub test: Vec<String>,
    /// Subjects with ground-truth labels.
    pub labeled: Vec<String>,
}

/// Withholds `round(fraction * labeled)` labeled subjects; unlabeled subjects
/// are always test subjects. When nothing is withheld every subject is
/// segmented.
pub fn make_split(subjects: &[SubjectEntry], fraction: f64, seed: u64) -> Split {
    let mut labeled: Vec<String> = subjects.iter().filter(|s| s.has_labels).map(|s| s.id.clone()).collect();
    let unlabeled: Vec<String> = subjects.iter().filter(|s| !s.has_labels).map(|s| s.id.clone()).collect();
    let mut shuffled = labeled.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = (fraction * labeled.len() as f64).round() as usize;
    let mut held: Vec<String> = shuffled[..n_hold].to_vec();
    let mut train: Vec<String> = shuffled[n_hold..].to_vec();
    train.sort();
    held.extend(unlabeled);
    held.sort();
    let test = if held.is_empty() {
        subjects.iter().map(|s| s.id.clone()).collect()
    } else {
        held
    };
    labeled.sort();
    Split { train, test, labeled }
}

fn load_split(layout: &Layout) -> Result<Split> {
    let path = layout.split();
    require(&path, Stage::Preprocess)?;
    read_json(&path)
}

fn model_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

pub fn run_preprocess(config: &PipelineConfig) -> Result<()> {
    let layout = config.layout();
    let subjects = discover_subjects(&config.data_root)?;
    for s in &subjects {
        let mut normalized = Vec::with_capacity(4);
        for c in Contrast::ALL {
            let raw = s.dir.join(format!("{}_{c}.nii.gz", s.id));
            let corrected = layout.corrected(&s.id, c);
            run_external_stage(&config.preprocess, &raw, &corrected)?;
            normalized.push(minmax_normalize(&load_scalar_volume(&corrected, c)?)?);
        }
        let fused = fuse_contrasts(&normalized[0], &normalized[1], &normalized[2], &normalized[3])?;
        save_multimodal(&fused, layout.fused(&s.id))?;
        if s.has_labels {
            let labels = load_label_map(s.dir.join(format!("{}_seg.nii.gz", s.id)))?;
            if labels.shape() != fused.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: labels {:?} vs image {:?}",
                    s.id,
                    labels.shape(),
                    fused.shape()
                )));
            }
            save_label_map(&labels, layout.truth(&s.id))?;
        }
        log::info!("preprocessed {}", s.id);
    }
    let clinical = config.data_root.join("clinical.csv");
    if clinical.is_file() {
        let rows: Vec<ClinicalRow> = read_clinical(&clinical)?.into_values().collect();
        crate::radiomics::write_clinical(layout.clinical(), &rows)?;
    }
    let split = make_split(&subjects, config.holdout_fraction, config.seeds.split);
    log::info!("split: {} train, {} test", split.train.len(), split.test.len());
    write_json(&layout.split(), &split)
}

/// Reads a network input: either a fused 4-channel NIfTI, or a raw subject
/// directory whose contrasts are normalized and fused on the fly.
pub fn load_subject_volume(path: &Path) -> Result<MultiModalVolume> {
    if !path.is_dir() {
        return load_multimodal(path);
    }
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Parse(format!("cannot infer subject id from {}", path.display())))?;
    let n: Vec<_> = Contrast::ALL
        .iter()
        .map(|&c| minmax_normalize(&load_scalar_volume(path.join(format!("{id}_{c}.nii.gz")), c)?))
        .collect::<Result<_>>()?;
    fuse_contrasts(&n[0], &n[1], &n[2], &n[3])
}

fn sampling_subjects(layout: &Layout, ids: &[String], patch_size: usize) -> Result<Vec<SamplingSubject>> {
    ids.iter()
        .map(|id| {
            let fused = layout.fused(id);
            require(&fused, Stage::Preprocess)?;
            let volume = load_multimodal(&fused)?;
            let labels = load_label_map(layout.truth(id))?;
            SamplingSubject::new(id.clone(), volume, labels, patch_size)
        })
        .collect()
}

fn model_indices(config: &PipelineConfig, only: Option<usize>) -> Result<Vec<usize>> {
    match only {
        Some(i) if i >= config.models.len() => Err(Error::InvalidConfig(format!(
            "model index {i} out of range (config has {})",
            config.models.len()
        ))),
        Some(i) => Ok(vec![i]),
        None => Ok((0..config.models.len()).collect()),
    }
}

pub fn run_sample_stats(config: &PipelineConfig, only: Option<usize>) -> Result<()> {
    let layout = config.layout();
    let split = load_split(&layout)?;
    if split.train.is_empty() {
        return Err(Error::Empty("no labeled training subjects".into()));
    }
    for i in model_indices(config, only)? {
        let subjects = sampling_subjects(&layout, &split.train, config.models[i].patch_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed(config.seeds.sample_stats, i));
        let stats = estimate_channel_stats(&subjects, config.stat_draws, &mut rng)?;
        log::info!("model {i}: mean {:?} std {:?}", stats.mean, stats.std);
        stats.save(layout.stats(i))?;
    }
    Ok(())
}

pub fn run_train(config: &PipelineConfig, only: Option<usize>) -> Result<()> {
    let layout = config.layout();
    let split = load_split(&layout)?;
    for i in model_indices(config, only)? {
        let stats_path = layout.stats(i);
        require(&stats_path, Stage::SampleStats)?;
        let stats = ChannelStats::load(&stats_path)?;
        let model_config = &config.models[i];
        let subjects = sampling_subjects(&layout, &split.train, model_config.patch_size)?;
        let mut model = UNet3d::build(model_config, model_seed(config.seeds.init, i))?;
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed(config.seeds.train, i));
        log::info!(
            "training model {i} (M={}, N={}, f={}, {} parameters)",
            model_config.num_blocks,
            model_config.patch_size,
            model_config.base_features,
            model.num_parameters()
        );
        let report = train(&mut model, &subjects, &stats, &config.schedule, &mut rng)?;
        Checkpoint { model, stats }.save(layout.checkpoint(i))?;
        write_json(&layout.train_report(i), &report)?;
    }
    Ok(())
}

pub fn run_predict(config: &PipelineConfig, only: Option<usize>) -> Result<()> {
    let layout = config.layout();
    let split = load_split(&layout)?;
    for i in model_indices(config, only)? {
        let ckpt_path = layout.checkpoint(i);
        require(&ckpt_path, Stage::Train)?;
        let ckpt = Checkpoint::load(&ckpt_path)?;
        for id in &split.test {
            let volume = load_multimodal(layout.fused(id))?;
            let probs = predict_volume(&ckpt.model, &volume, &ckpt.stats, config.flip_tta)?;
            save_probability_map(&probs, layout.model_prediction(i, id))?;
            log::info!("model {i}: predicted {id}");
        }
    }
    Ok(())
}

pub fn run_ensemble(config: &PipelineConfig) -> Result<()> {
    let layout = config.layout();
    let split = load_split(&layout)?;
    for id in &split.test {
        let paths: Vec<PathBuf> = (0..config.models.len())
            .map(|i| layout.model_prediction(i, id))
            .collect();
        for p in &paths {
            require(p, Stage::Predict)?;
        }
        let mean = average_probability_files(&paths)?;
        save_probability_map(&mean, layout.ensemble_prob(id))?;
        save_label_map(&argmax_labels(&mean), layout.ensemble_seg(id))?;
    }
    Ok(())
}

fn feature_rows(ids: &[String], path_of: impl Fn(&str) -> PathBuf, stage: Stage) -> Result<Vec<FeatureRow>> {
    ids.iter()
        .map(|id| {
            let path = path_of(id);
            require(&path, stage)?;
            Ok(FeatureRow::new(id.clone(), extract_features(&load_label_map(&path)?)))
        })
        .collect()
}

/// Training features come from ground truth, test features from the
/// ensemble segmentation.
pub fn run_features(config: &PipelineConfig) -> Result<()> {
    let layout = config.layout();
    let split = load_split(&layout)?;
    let train_rows = feature_rows(&split.train, |id| layout.truth(id), Stage::Preprocess)?;
    write_features(layout.train_features(), &train_rows)?;
    let test_rows = feature_rows(&split.test, |id| layout.ensemble_seg(id), Stage::Ensemble)?;
    write_features(layout.predicted_features(), &test_rows)
}

fn load_clinical(layout: &Layout) -> Result<BTreeMap<String, ClinicalRow>> {
    let path = layout.clinical();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            stage: "preprocess (with clinical.csv in data_root)".into(),
        });
    }
    read_clinical(path)
}

fn with_clinical(features: Vec<FeatureRow>, clinical: &BTreeMap<String, ClinicalRow>) -> Vec<FeatureRow> {
    features
        .into_iter()
        .filter(|f| clinical.contains_key(&f.subject_id))
        .collect()
}

pub fn run_survival_fit(config: &PipelineConfig) -> Result<()> {
    let layout = config.layout();
    let path = layout.train_features();
    require(&path, Stage::Features)?;
    let clinical = load_clinical(&layout)?;
    let records = join_records(&with_clinical(read_features(&path)?, &clinical), &clinical)?;
    let records: Vec<_> = records.into_iter().filter(|r| r.survival_days.is_some()).collect();
    let model = fit_survival(&records)?;
    log::info!("survival fit on {} subjects, R² {:.4}", records.len(), model.training_r2);
    model.save(layout.survival_model())
}

pub fn run_survival_predict(config: &PipelineConfig) -> Result<()> {
    let layout = config.layout();
    let model_path = layout.survival_model();
    require(&model_path, Stage::SurvivalFit)?;
    let features = layout.predicted_features();
    require(&features, Stage::Features)?;
    let model = SurvivalModel::load(&model_path)?;
    let clinical = load_clinical(&layout)?;
    let records = join_records(&with_clinical(read_features(&features)?, &clinical), &clinical)?;
    let rows: Vec<PredictionRow> = records
        .iter()
        .map(|r| PredictionRow {
            subject_id: r.subject_id.clone(),
            predicted_days: predict_survival(&model, r),
        })
        .collect();
    write_predictions(layout.survival_predictions(), &rows)
}

/// Per-subject, per-region scores as written to `segmentation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject_id: String,
    pub region: Region,
    pub dice: f64,
    pub hd95: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub dice: Summary,
    pub hd95: Summary,
    pub sensitivity: Summary,
    pub specificity: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub subjects: usize,
    pub regions: BTreeMap<Region, RegionSummary>,
    pub survival: Option<SurvivalMetrics>,
}

/// Scores `(subject_id, prediction, truth)` label files.
pub fn score_subjects(pairs: &[(String, PathBuf, PathBuf)]) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (id, pred_path, truth_path) in pairs {
        let pred = load_label_map(pred_path)?;
        let truth = load_label_map(truth_path)?;
        for region in Region::ALL {
            let s = evaluate_region(&pred, &truth, region)?;
            rows.push(ScoreRow {
                subject_id: id.clone(),
                region,
                dice: s.dice,
                hd95: s.hd95,
                sensitivity: s.sensitivity,
                specificity: s.specificity,
            });
        }
    }
    Ok(rows)
}

pub fn summarize_scores(rows: &[ScoreRow]) -> BTreeMap<Region, RegionSummary> {
    let mut regions = BTreeMap::new();
    for region in Region::ALL {
        let rs: Vec<&ScoreRow> = rows.iter().filter(|r| r.region == region).collect();
        let pick = |f: fn(&ScoreRow) -> Option<f64>| summarize(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        regions.insert(
            region,
            RegionSummary {
                dice: pick(|r| Some(r.dice)),
                hd95: pick(|r| r.hd95),
                sensitivity: pick(|r| r.sensitivity),
                specificity: pick(|r| r.specificity),
            },
        );
    }
    regions
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    crate::util::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SummaryRow {
    region: Region,
    metric: &'static str,
    mean: Option<f64>,
    median: Option<f64>,
    count: usize,
    missing: usize,
}

/// Writes `segmentation.csv` (per subject) and `summary.csv` (cohort mean
/// and median per metric and region) into `dir`.
pub fn write_scores(dir: &Path, rows: &[ScoreRow], regions: &BTreeMap<Region, RegionSummary>) -> Result<()> {
    write_csv(&dir.join("segmentation.csv"), rows)?;
    let mut table = Vec::new();
    for (&region, s) in regions {
        for (metric, m) in [
            ("dice", &s.dice),
            ("hd95", &s.hd95),
            ("sensitivity", &s.sensitivity),
            ("specificity", &s.specificity),
        ] {
            table.push(SummaryRow {
                region,
                metric,
                mean: m.mean,
                median: m.median,
                count: m.count,
                missing: m.missing,
            });
        }
    }
    write_csv(&dir.join("summary.csv"), &table)
}

/// Pairs `<id>_seg.nii.gz` files in `pred_dir` with ground truth in
/// `truth_dir`, found either flat or as `<id>/<id>_seg.nii.gz`.
pub fn pair_label_files(pred_dir: &Path, truth_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))? {
        let path = entry.map_err(|e| Error::io(pred_dir, e))?.path();
        let Some(id) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix("_seg.nii.gz"))
            .map(str::to_string)
        else {
            continue;
        };
        let nested = truth_dir.join(&id).join(format!("{id}_seg.nii.gz"));
        let flat = truth_dir.join(format!("{id}_seg.nii.gz"));
        let truth = if nested.is_file() {
            nested
        } else if flat.is_file() {
            flat
        } else {
            log::warn!("no ground truth for {id}");
            continue;
        };
        pairs.push((id, path, truth));
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(Error::Empty(format!(
            "no prediction/truth pairs between {} and {}",
            pred_dir.display(),
            truth_dir.display()
        )));
    }
    Ok(pairs)
}

/// Scores the ensemble segmentation of every labeled test subject, and the
/// survival predictions of test subjects with a known outcome.
pub fn run_evaluate(config: &PipelineConfig) -> Result<EvaluationSummary> {
    let layout = config.layout();
    let split = load_split(&layout)?;
    let mut pairs = Vec::new();
    for id in split.test.iter().filter(|id| split.labeled.contains(id)) {
        let seg = layout.ensemble_seg(id);
        require(&seg, Stage::Ensemble)?;
        pairs.push((id.clone(), seg, layout.truth(id)));
    }
    let rows = score_subjects(&pairs)?;
    let regions = summarize_scores(&rows);
    write_scores(&layout.evaluation_dir(), &rows, &regions)?;
    let summary = EvaluationSummary {
        subjects: pairs.len(),
        regions,
        survival: survival_evaluation(config, &layout)?,
    };
    write_json(&layout.evaluation_summary(), &summary)?;
    Ok(summary)
}

fn survival_evaluation(config: &PipelineConfig, layout: &Layout) -> Result<Option<SurvivalMetrics>> {
    let pred_path = layout.survival_predictions();
    if !pred_path.exists() || !layout.clinical().exists() {
        return Ok(None);
    }
    let clinical = read_clinical(layout.clinical())?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for row in crate::radiomics::read_predictions(&pred_path)? {
        if let Some(days) = clinical.get(&row.subject_id).and_then(|c| c.survival_days) {
            pred.push(row.predicted_days);
            truth.push(days);
        }
    }
    if truth.len() < 2 {
        return Ok(None);
    }
    survival_metrics(&pred, &truth, config.buckets).map(Some)
}

/// Formats the Dice part of an evaluation summary as a small table.
pub fn dice_table(summary: &EvaluationSummary) -> String {
    let mut out = format!("{:<4} {:>8} {:>8} {:>8}\n", "", "mean", "median", "hd95");
    for (region, s) in &summary.regions {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:<4} {:>8} {:>8} {:>8}\n",
            region.to_string(),
            f(s.dice.mean),
            f(s.dice.median),
            f(s.hd95.mean)
        ));
    }
    out
}

/// Runs `stages` in order.
pub fn run_pipeline(config: &PipelineConfig, stages: &[Stage]) -> Result<()> {
    config.validate()?;
    for &stage in stages {
        log::info!("stage {stage}");
        match stage {
            Stage::Preprocess => run_preprocess(config)?,
            Stage::SampleStats => run_sample_stats(config, None)?,
            Stage::Train => run_train(config, None)?,
            Stage::Predict => run_predict(config, None)?,
            Stage::Ensemble => run_ensemble(config)?,
            Stage::Features => run_features(config)?,
            Stage::SurvivalFit => run_survival_fit(config)?,
            Stage::SurvivalPredict => run_survival_predict(config)?,
            Stage::Evaluate => {
                run_evaluate(config)?;
            }
        }
    }
    Ok(())
}
