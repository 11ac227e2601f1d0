//! Segmentation metrics over the composite tumor regions.

use std::fmt;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::percentile_sorted;
use crate::volume::LabelMap;

/// Composite evaluation regions over internal class indices:
/// WT = {1, 2, 3}, TC = {1, 3}, ET = {3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ET")]
    Et,
    #[serde(rename = "WT")]
    Wt,
    #[serde(rename = "TC")]
    Tc,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Wt, Region::Tc];

    pub fn contains(self, class: u8) -> bool {
        match self {
            Region::Wt => matches!(class, 1..=3),
            Region::Tc => matches!(class, 1 | 3),
            Region::Et => class == 3,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Et => "ET",
            Region::Wt => "WT",
            Region::Tc => "TC",
        })
    }
}

pub type Mask = Array3<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub et: Mask,
    pub wt: Mask,
    pub tc: Mask,
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &Mask {
        match r {
            Region::Et => &self.et,
            Region::Wt => &self.wt,
            Region::Tc => &self.tc,
        }
    }
}

pub fn region_mask(labels: &LabelMap, region: Region) -> Mask {
    labels.data.mapv(|c| region.contains(c))
}

pub fn region_masks(labels: &LabelMap) -> RegionMasks {
    RegionMasks {
        et: region_mask(labels, Region::Et),
        wt: region_mask(labels, Region::Wt),
        tc: region_mask(labels, Region::Tc),
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    Zip::from(a).and(b).for_each(|&x, &y| {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    });
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one 6-neighbour outside the mask; neighbours
/// beyond the volume edge count as outside.
pub fn surface_voxels(mask: &Mask) -> Mask {
    let (d, h, w) = mask.dim();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0 && y >= 0 && x >= 0 && (z as usize) < d && (y as usize) < h && (x as usize) < w && mask[[z as usize, y as usize, x as usize]]
    };
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return false;
        }
        let (z, y, x) = (z as isize, y as isize, x as isize);
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|&(dz, dy, dx)| !inside(z + dz, y + dy, x + dx))
    })
}

/// 1D squared distance transform (lower envelope of parabolas) in place.
fn dt_line(f: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    zb.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p * p) as f64;
                    let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
                    if s <= zb[zb.len() - 1] {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(s);
                        break;
                    }
                }
            }
        }
    }
    out.clear();
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
    } else {
        let mut k = 0;
        for q in 0..n {
            while k + 1 < v.len() && zb[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dq = q as f64 - p as f64;
            out.push(dq * dq + f[p]);
        }
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `features` (infinite when there is none).
pub fn squared_distance_transform(features: &Mask) -> Array3<f64> {
    let mut dist = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let (mut v, mut zb, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    for axis in 0..3 {
        for mut lane in dist.lanes_mut(Axis(axis)) {
            line.clear();
            line.extend(lane.iter().copied());
            dt_line(&mut line, &mut v, &mut zb, &mut out);
            for (d, s) in lane.iter_mut().zip(&line) {
                *d = *s;
            }
        }
    }
    dist
}

fn directed_distances(from: &Mask, to_dt: &Array3<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Zip::from(from)
        .and(to_dt)
        .fold(Vec::new(), |mut acc, &f, &d| {
            if f {
                acc.push(d.sqrt());
            }
            acc
        });
    out.sort_by(f64::total_cmp);
    out
}

/// Symmetric 95th-percentile surface distance in voxel units.
pub fn hausdorff95(a: &Mask, b: &Mask) -> Result<f64> {
    same_shape(a, b)?;
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::EmptyMask);
    }
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    let ab = directed_distances(&sa, &squared_distance_transform(&sb));
    let ba = directed_distances(&sb, &squared_distance_transform(&sa));
    Ok(percentile_sorted(&ab, 95.0).max(percentile_sorted(&ba, 95.0)))
}

/// `(TP / (TP + FN), TN / (TN + FP))`; `None` where a denominator is zero.
pub fn sensitivity_specificity(pred: &Mask, truth: &Mask) -> Result<(Option<f64>, Option<f64>)> {
    same_shape(pred, truth)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    Zip::from(pred).and(truth).for_each(|&p, &t| match (p, t) {
        (true, true) => tp += 1,
        (true, false) => fp += 1,
        (false, false) => tn += 1,
        (false, true) => fneg += 1,
    });
    let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
    Ok((ratio(tp, tp + fneg), ratio(tn, tn + fp)))
}

/// All metrics of one region for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub dice: f64,
    pub hd95: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn evaluate_region(pred: &LabelMap, truth: &LabelMap, region: Region) -> Result<RegionScores> {
    let (p, t) = (region_mask(pred, region), region_mask(truth, region));
    let hd95 = match hausdorff95(&p, &t) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    let (sensitivity, specificity) = sensitivity_specificity(&p, &t)?;
    Ok(RegionScores {
        dice: dice(&p, &t)?,
        hd95,
        sensitivity,
        specificity,
    })
}

/// Mean and median of the defined values, with the count of absent ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub count: usize,
    pub missing: usize,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let missing = values.len() - defined.len();
    if defined.is_empty() {
        return Summary {
            mean: None,
            median: None,
            count: 0,
            missing,
        };
    }
    Summary {
        mean: Some(defined.iter().sum::<f64>() / defined.len() as f64),
        median: Some(crate::radiomics::median(&defined)),
        count: defined.len(),
        missing,
    }
}
