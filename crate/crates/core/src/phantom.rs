//! Synthetic brain-tumor phantoms.
//!
//! Each subject is an ellipsoidal "brain" in low-intensity air containing a
//! nested tumor: a necrotic core (class 1) inside an enhancing rim
//! (class 3) inside edema (class 2). Every class has its own intensity
//! profile across the four contrasts, plus Gaussian noise. Clinical
//! variables are random and the survival target is an exact linear function
//! of the extracted shape features and clinical encoding.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::preprocess::{fuse_contrasts, minmax_normalize};
use crate::radiomics::{extract_features, write_clinical, ClinicalRow, RadiomicRecord, Resection, NUM_FEATURES};
use crate::volume::{save_label_map, save_scalar_volume, Contrast, LabelMap, MultiModalVolume, ScalarVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Noise standard deviation relative to the unit tissue scale.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [48, 48, 48],
            noise: 0.03,
        }
    }
}

/// Mean intensity per tissue (air, necrosis, edema, enhancing, brain) and
/// contrast `[T1, T1Gd, T2, FLAIR]`.
const AIR: [f64; 4] = [0.02, 0.02, 0.02, 0.02];
const BRAIN: [f64; 4] = [0.55, 0.50, 0.40, 0.35];
const NECROSIS: [f64; 4] = [0.30, 0.35, 0.90, 0.50];
const EDEMA: [f64; 4] = [0.45, 0.50, 0.80, 0.85];
const ENHANCING: [f64; 4] = [0.50, 0.95, 0.60, 0.60];
/// Raw scanner-like scale per contrast.
const RAW_SCALE: [f64; 4] = [800.0, 1200.0, 1500.0, 600.0];

/// Generating weights of the survival rule over
/// `[V1, S1, V2, S2, V3, S3, age, gtr, str]`, applied to features divided by
/// [`feature_scale`].
pub const SURVIVAL_WEIGHTS: [f64; NUM_FEATURES] = [-60.0, -25.0, -40.0, 15.0, -50.0, -20.0, -3.0, 90.0, 35.0];
pub const SURVIVAL_BASE: f64 = 700.0;

/// Normalizers that keep the survival rule in a plausible range for any
/// phantom shape.
pub fn feature_scale(shape: [usize; 3]) -> [f64; NUM_FEATURES] {
    let v = shape.iter().product::<usize>() as f64 / 100.0;
    let s = v.powf(2.0 / 3.0);
    [v, s, v, s, v, s, 1.0, 1.0, 1.0]
}

pub fn survival_rule(record: &RadiomicRecord, shape: [usize; 3]) -> f64 {
    let x = record.feature_vector();
    let scale = feature_scale(shape);
    let mut y = SURVIVAL_BASE;
    for j in 0..NUM_FEATURES {
        let xj = if j == 6 { x[j] - 55.0 } else { x[j] };
        y += SURVIVAL_WEIGHTS[j] * xj / scale[j];
    }
    y
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub id: String,
    /// Raw (unnormalized) contrasts in `[T1, T1Gd, T2, FLAIR]` order.
    pub contrasts: [ScalarVolume; 4],
    pub labels: LabelMap,
    pub age: f64,
    pub resection: Resection,
    pub survival_days: f64,
}

impl Phantom {
    /// Min–max normalized and fused input.
    pub fn fused(&self) -> Result<MultiModalVolume> {
        let n: Vec<ScalarVolume> = self.contrasts.iter().map(minmax_normalize).collect::<Result<_>>()?;
        fuse_contrasts(&n[0], &n[1], &n[2], &n[3])
    }

    pub fn clinical_row(&self) -> ClinicalRow {
        ClinicalRow {
            subject_id: self.id.clone(),
            age: self.age,
            resection_status: self.resection.to_string(),
            survival_days: Some(self.survival_days),
        }
    }
}

pub fn subject_id(index: usize) -> String {
    format!("Phantom_{index:03}")
}

fn generate_one(spec: &PhantomSpec, index: usize, rng: &mut ChaCha8Rng) -> Phantom {
    let [d, h, w] = spec.shape;
    let dims = [d as f64, h as f64, w as f64];
    let min_dim = dims.iter().cloned().fold(f64::INFINITY, f64::min);

    let brain_center: [f64; 3] = dims.map(|n| (n - 1.0) / 2.0);
    let brain_radii: [f64; 3] = dims.map(|n| n * rng.random_range(0.40..0.45));

    let r_nec = (min_dim * rng.random_range(0.04..0.07)).max(1.2);
    let r_enh = r_nec + (min_dim * rng.random_range(0.04..0.07)).max(1.2);
    let r_ede = r_enh + (min_dim * rng.random_range(0.06..0.12)).max(1.5);
    let aniso: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
    let margin = r_ede * 1.2 + 1.0;
    let tumor_center: [f64; 3] = std::array::from_fn(|a| {
        let lo = margin.max(dims[a] * 0.3);
        let hi = (dims[a] - 1.0 - margin).min(dims[a] * 0.7).max(lo);
        // Integer centers guarantee a core voxel at distance zero.
        rng.random_range(lo..=hi).round()
    });

    let noise = Normal::new(0.0, spec.noise).expect("valid noise");
    let mut labels = Array3::<u8>::zeros((d, h, w));
    let mut channels: [Array3<f32>; 4] = std::array::from_fn(|_| Array3::zeros((d, h, w)));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let brain: f64 = (0..3).map(|a| ((p[a] - brain_center[a]) / brain_radii[a]).powi(2)).sum();
                let tumor: f64 = (0..3)
                    .map(|a| ((p[a] - tumor_center[a]) / aniso[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let (class, profile) = if tumor <= r_nec {
                    (1u8, NECROSIS)
                } else if tumor <= r_enh {
                    (3, ENHANCING)
                } else if tumor <= r_ede {
                    (2, EDEMA)
                } else if brain <= 1.0 {
                    (0, BRAIN)
                } else {
                    (0, AIR)
                };
                labels[[z, y, x]] = class;
                for c in 0..4 {
                    let v = (profile[c] + noise.sample(rng)).max(0.0) * RAW_SCALE[c];
                    channels[c][[z, y, x]] = v as f32;
                }
            }
        }
    }
    let labels = LabelMap::new(labels).expect("classes in range");
    let [c0, c1, c2, c3] = channels;
    let contrasts = [
        ScalarVolume::new(c0, Contrast::T1).expect("finite"),
        ScalarVolume::new(c1, Contrast::T1Gd).expect("finite"),
        ScalarVolume::new(c2, Contrast::T2).expect("finite"),
        ScalarVolume::new(c3, Contrast::Flair).expect("finite"),
    ];

    let age = (rng.random_range(30.0..80.0f64) * 10.0).round() / 10.0;
    let resection = [Resection::Gtr, Resection::Str, Resection::Na][rng.random_range(0..3)];
    let id = subject_id(index);
    let mut record = RadiomicRecord {
        subject_id: id.clone(),
        image_features: extract_features(&labels),
        age,
        resection,
        survival_days: None,
    };
    let survival_days = survival_rule(&record, spec.shape);
    record.survival_days = Some(survival_days);
    Phantom {
        id,
        contrasts,
        labels,
        age,
        resection,
        survival_days,
    }
}

/// Generates `n` phantoms; subject `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &PhantomSpec, n: usize, seed: u64) -> Vec<Phantom> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            generate_one(spec, i, &mut rng)
        })
        .collect()
}

/// Writes phantoms in the BraTS directory layout plus `clinical.csv`.
pub fn write_dataset(phantoms: &[Phantom], out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    for p in phantoms {
        let dir = out_dir.join(&p.id);
        for v in &p.contrasts {
            save_scalar_volume(v, dir.join(format!("{}_{}.nii.gz", p.id, v.contrast)))?;
        }
        save_label_map(&p.labels, dir.join(format!("{}_seg.nii.gz", p.id)))?;
    }
    let rows: Vec<ClinicalRow> = phantoms.iter().map(Phantom::clinical_row).collect();
    write_clinical(out_dir.join("clinical.csv"), &rows)
}

/// Generates and writes a dataset in one call.
pub fn generate_phantoms(spec: &PhantomSpec, n: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(crate::Error::Empty("phantom count must be at least 1".into()));
    }
    let phantoms = generate(spec, n, seed);
    write_dataset(&phantoms, out_dir)?;
    Ok(phantoms)
}
