//! Volumetric containers and NIfTI persistence.
//!
//! Arrays are indexed `(D, H, W)` (slice, row, column), the order produced by
//! most medical-imaging array readers (e.g. a BraTS subject is
//! `155 × 240 × 240`). NIfTI stores `(x, y, z)` in Fortran order, so the
//! spatial axes are reversed on the way in and out. The last array axis `W`
//! is the left-right axis used by flip augmentation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayD, Axis, Ix3, Ix4};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes (background + 3 tumor sub-regions).
pub const NUM_CLASSES: usize = 4;
/// Number of input contrasts.
pub const NUM_CHANNELS: usize = 4;

/// Tolerance on per-voxel probability sums.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T1,
    T1Gd,
    T2,
    Flair,
}

impl Contrast {
    /// Channel order of a fused multi-modal volume.
    pub const ALL: [Contrast; 4] = [Contrast::T1, Contrast::T1Gd, Contrast::T2, Contrast::Flair];

    /// File-name suffix in the BraTS directory layout.
    pub fn file_suffix(self) -> &'static str {
        match self {
            Contrast::T1 => "t1",
            Contrast::T1Gd => "t1ce",
            Contrast::T2 => "t2",
            Contrast::Flair => "flair",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_suffix())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Contrast::T1),
            "t1gd" | "t1ce" => Ok(Contrast::T1Gd),
            "t2" => Ok(Contrast::T2),
            "flair" => Ok(Contrast::Flair),
            other => Err(Error::Parse(format!("unknown contrast `{other}`"))),
        }
    }
}

/// A single-contrast 3D intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub data: Array3<f32>,
    pub contrast: Contrast,
}

impl ScalarVolume {
    pub fn new(data: Array3<f32>, contrast: Contrast) -> Result<Self> {
        let count = data.iter().filter(|v| !v.is_finite()).count();
        if count > 0 {
            return Err(Error::NonFinite {
                path: "<memory>".into(),
                count,
            });
        }
        if data.is_empty() {
            return Err(Error::Empty("volume has a zero-length axis".into()));
        }
        Ok(Self { data, contrast })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(self.data.dim())
    }
}

/// Four co-registered contrasts fused along the last axis, `(D, H, W, 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub data: Array4<f32>,
}

impl MultiModalVolume {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.dim().3 != NUM_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {NUM_CHANNELS} channels, found {}",
                data.dim().3
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: "<memory>".into(),
                count: data.iter().filter(|v| !v.is_finite()).count(),
            });
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w, _) = self.data.dim();
        [d, h, w]
    }
}

/// Per-voxel class indices in `0..4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub data: Array3<u8>,
}

impl LabelMap {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::InvalidClass(bad as i64));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(self.data.dim())
    }
}

/// Per-voxel class probabilities, `(D, H, W, 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub data: Array4<f32>,
}

impl ProbabilityMap {
    /// Wraps `data` after checking that every voxel holds a distribution.
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let pm = Self { data };
        pm.validate()?;
        Ok(pm)
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w, _) = self.data.dim();
        [d, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w, k) = self.data.dim();
        if k != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "expected {NUM_CLASSES} classes, found {k}"
            )));
        }
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0f64;
                    for c in 0..k {
                        let p = self.data[[z, y, x, c]];
                        if !p.is_finite() || p < 0.0 {
                            return Err(Error::ProbabilityNotNormalized {
                                index: [z, y, x],
                                sum: p as f64,
                            });
                        }
                        sum += p as f64;
                    }
                    if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                        return Err(Error::ProbabilityNotNormalized {
                            index: [z, y, x],
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn dims3((d, h, w): (usize, usize, usize)) -> [usize; 3] {
    [d, h, w]
}

/// On-disk (BraTS) label code for an internal class index.
pub fn decode_class(class: u8) -> u8 {
    match class {
        3 => 4,
        c => c,
    }
}

/// Maps on-disk codes `{0, 1, 2, 4}` to classes `{0, 1, 2, 3}`.
pub fn encode_labels(raw: &Array3<i64>) -> Result<LabelMap> {
    let mut bad: Vec<i64> = raw
        .iter()
        .copied()
        .filter(|c| !matches!(c, 0 | 1 | 2 | 4))
        .collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        return Err(Error::InvalidLabelCodes(bad));
    }
    Ok(LabelMap {
        data: raw.mapv(|c| if c == 4 { 3 } else { c as u8 }),
    })
}

pub fn decode_labels(labels: &LabelMap) -> Array3<i64> {
    labels.data.mapv(|c| decode_class(c) as i64)
}

fn read_nifti(path: &Path) -> Result<ArrayD<f64>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Nifti {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    obj.into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::Nifti {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn read_nifti_3d(path: &Path) -> Result<Array3<f64>> {
    let raw = read_nifti(path)?;
    // Trailing singleton dimensions are tolerated.
    let ndim = raw.shape().iter().rposition(|&s| s != 1).map_or(1, |p| p + 1);
    if ndim > 3 {
        return Err(Error::Dimensionality {
            expected: 3,
            found: ndim,
        });
    }
    let xyz = if raw.ndim() == 3 {
        raw.into_dimensionality::<Ix3>()
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?
    } else {
        let mut shape = raw.shape().to_vec();
        shape.resize(3, 1);
        raw.to_shape((shape[0], shape[1], shape[2]))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?
            .into_owned()
    };
    Ok(xyz.reversed_axes().as_standard_layout().into_owned())
}

fn check_finite<T: Copy + Into<f64>>(path: &Path, it: impl Iterator<Item = T>) -> Result<()> {
    let count = it.filter(|v| !(*v).into().is_finite()).count();
    if count > 0 {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            count,
        });
    }
    Ok(())
}

pub fn load_scalar_volume(path: impl AsRef<Path>, contrast: Contrast) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let data = read_nifti_3d(path)?;
    check_finite(path, data.iter().copied())?;
    let data = data.mapv(|v| v as f32);
    check_finite(path, data.iter().copied())?;
    Ok(ScalarVolume { data, contrast })
}

pub fn save_scalar_volume(volume: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(path.as_ref(), &volume.data.view().reversed_axes())
}

/// Loads a label map stored with on-disk codes.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let data = read_nifti_3d(path)?;
    check_finite(path, data.iter().copied())?;
    if let Some(v) = data.iter().find(|v| v.fract() != 0.0) {
        return Err(Error::Parse(format!(
            "{}: non-integer label value {v}",
            path.display()
        )));
    }
    encode_labels(&data.mapv(|v| v as i64))
}

/// Writes a label map with on-disk codes as `uint8`.
pub fn save_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let raw = labels.data.mapv(decode_class);
    write_nifti(path.as_ref(), &raw.view().reversed_axes())
}

pub fn load_multimodal(path: impl AsRef<Path>) -> Result<MultiModalVolume> {
    let path = path.as_ref();
    let data = load_4d(path)?;
    check_finite(path, data.iter().copied())?;
    MultiModalVolume::new(data)
}

pub fn save_multimodal(volume: &MultiModalVolume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(path.as_ref(), &volume.data.view().permuted_axes([2, 1, 0, 3]))
}

/// Writes a probability map as a channel-last 4D `float32` volume.
pub fn save_probability_map(pm: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    pm.validate()?;
    write_nifti(path.as_ref(), &pm.data.view().permuted_axes([2, 1, 0, 3]))
}

pub fn load_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let data = load_4d(path)?;
    check_finite(path, data.iter().copied())?;
    ProbabilityMap::new(data)
}

fn load_4d(path: &Path) -> Result<Array4<f32>> {
    let raw = read_nifti(path)?;
    if raw.ndim() != 4 {
        return Err(Error::Dimensionality {
            expected: 4,
            found: raw.ndim(),
        });
    }
    let xyzc = raw
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(xyzc
        .permuted_axes([2, 1, 0, 3])
        .as_standard_layout()
        .mapv(|v| v as f32))
}

fn write_nifti<A, D>(path: &Path, data: &ndarray::ArrayView<'_, A, D>) -> Result<()>
where
    A: nifti::DataElement + bytemuck::Pod,
    D: ndarray::Dimension + ndarray::RemoveAxis,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    WriterOptions::new(path)
        .write_nifti(data)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => Error::io(path, io),
            other => Error::Nifti {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Splits a volume's channel axis out as individual `(D, H, W)` arrays.
pub fn channels(volume: &MultiModalVolume) -> Vec<Array3<f32>> {
    volume
        .data
        .axis_iter(Axis(3))
        .map(|c| c.to_owned())
        .collect()
}
