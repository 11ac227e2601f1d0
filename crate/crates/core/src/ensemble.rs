//! Probability averaging across ensemble members and label selection.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::volume::{load_probability_map, LabelMap, ProbabilityMap, NUM_CLASSES};

/// Voxelwise mean over models.
///
/// Each voxel's values are summed in sorted order, so the result does not
/// depend on the order of `maps`.
pub fn average_probabilities(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("no probability maps to average".into()))?;
    let dim = first.data.dim();
    if let Some(m) = maps.iter().find(|m| m.data.dim() != dim) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", m.data.dim(), dim)));
    }
    let k = maps.len() as f64;
    let mut buf = vec![0.0f32; maps.len()];
    let out = Array4::from_shape_fn(dim, |idx| {
        for (b, m) in buf.iter_mut().zip(maps) {
            *b = m.data[idx];
        }
        buf.sort_by(f32::total_cmp);
        (buf.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
    });
    ProbabilityMap::new(out)
}

/// Streams probability files from disk, accumulating one at a time.
///
/// Paths are visited in sorted order so any permutation of the same file
/// list yields identical output.
pub fn average_probability_files<P: AsRef<Path>>(paths: &[P]) -> Result<ProbabilityMap> {
    let mut sorted: Vec<PathBuf> = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
    sorted.sort();
    let mut iter = sorted.iter();
    let first = iter.next().ok_or_else(|| Error::Empty("no probability files".into()))?;
    let first = load_probability_map(first)?;
    let dim = first.data.dim();
    let mut acc = first.data.mapv(|v| v as f64);
    for path in iter {
        let pm = load_probability_map(path)?;
        if pm.data.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                path.display(),
                pm.data.dim(),
                dim
            )));
        }
        Zip::from(&mut acc).and(&pm.data).for_each(|a, &p| *a += p as f64);
    }
    let k = sorted.len() as f64;
    ProbabilityMap::new(acc.mapv(|v| (v / k) as f32))
}

/// Class of maximal probability per voxel; ties go to the lowest index.
pub fn argmax_labels(pm: &ProbabilityMap) -> LabelMap {
    let data: Array3<u8> = pm.data.map_axis(Axis(3), |lane| {
        let mut best = 0usize;
        for c in 1..NUM_CLASSES {
            if lane[c] > lane[best] {
                best = c;
            }
        }
        best as u8
    });
    LabelMap { data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::save_probability_map;

    fn pm(rows: &[[f32; 4]]) -> ProbabilityMap {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        ProbabilityMap::new(Array4::from_shape_vec((1, 1, rows.len(), 4), flat).unwrap()).unwrap()
    }

    #[test]
    fn single_map_is_identity() {
        let a = pm(&[[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]]);
        assert_eq!(average_probabilities(&[a.clone()]).unwrap(), a);
    }

    #[test]
    fn averages_voxelwise() {
        let a = pm(&[[1.0, 0.0, 0.0, 0.0]]);
        let b = pm(&[[0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(average_probabilities(&[a, b]).unwrap(), pm(&[[0.5, 0.5, 0.0, 0.0]]));
    }

    #[test]
    fn empty_and_mismatched_inputs_fail() {
        assert!(average_probabilities(&[]).is_err());
        let a = pm(&[[1.0, 0.0, 0.0, 0.0]]);
        let b = pm(&[[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        assert!(matches!(average_probabilities(&[a, b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn argmax_with_ties() {
        let labels = argmax_labels(&pm(&[
            [0.25; 4],
            [0.1, 0.2, 0.4, 0.3],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.5, 0.5, 0.0],
        ]));
        assert_eq!(labels.data.as_slice().unwrap(), &[0, 2, 3, 1]);
    }

    #[test]
    fn file_average_is_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let maps = [
            pm(&[[0.1, 0.2, 0.3, 0.4], [0.3, 0.3, 0.2, 0.2]]),
            pm(&[[0.7, 0.1, 0.1, 0.1], [0.05, 0.05, 0.8, 0.1]]),
            pm(&[[0.2, 0.2, 0.2, 0.4], [0.0, 0.0, 0.0, 1.0]]),
        ];
        let paths: Vec<_> = maps
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let p = dir.path().join(format!("m{i}.nii.gz"));
                save_probability_map(m, &p).unwrap();
                p
            })
            .collect();
        let fwd = average_probability_files(&paths).unwrap();
        let rev: Vec<_> = paths.iter().rev().cloned().collect();
        assert_eq!(fwd, average_probability_files(&rev).unwrap());
        let mem = average_probabilities(&maps).unwrap();
        for (a, b) in fwd.data.iter().zip(mem.data.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
