//! Non-uniform patch extraction for training.
//!
//! Every valid patch center gets a weight: 6 if the center voxel is tumor,
//! 1 if its max-over-channels intensity is strictly below the 1st percentile
//! of the volume's max image, 3 otherwise. Centers are drawn with
//! probability `w / Σw`.

use std::path::Path;

use ndarray::{s, Array3, Array4, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, MultiModalVolume, NUM_CHANNELS};

pub const FOREGROUND_WEIGHT: u8 = 6;
pub const DEFAULT_WEIGHT: u8 = 3;
pub const LOW_INTENSITY_WEIGHT: u8 = 1;
/// Percentile of the max image below which a center counts as low intensity.
pub const LOW_INTENSITY_PERCENTILE: f64 = 1.0;
/// Number of patches drawn when estimating channel statistics.
pub const DEFAULT_STAT_DRAWS: usize = 400;

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Center weights over the valid center grid of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights {
    /// Weight of each valid center; index `[i, j, k]` is the center
    /// `offset + [i, j, k]` in volume coordinates.
    pub weights: Array3<u8>,
    pub patch_size: usize,
    /// First valid center per axis (`floor(N / 2)`).
    pub offset: usize,
    cumulative: Vec<u64>,
}

impl SamplingWeights {
    pub fn from_weights(weights: Array3<u8>, patch_size: usize) -> Result<Self> {
        if let Some(&w) = weights.iter().find(|&&w| {
            !matches!(w, LOW_INTENSITY_WEIGHT | DEFAULT_WEIGHT | FOREGROUND_WEIGHT)
        }) {
            return Err(Error::Parse(format!("invalid sampling weight {w}")));
        }
        let mut acc = 0u64;
        let cumulative = weights
            .iter()
            .map(|&w| {
                acc += w as u64;
                acc
            })
            .collect();
        Ok(Self {
            weights,
            patch_size,
            offset: patch_size / 2,
            cumulative,
        })
    }

    /// Inclusive per-axis bounds of valid patch centers.
    pub fn valid_range(&self) -> [(usize, usize); 3] {
        let (a, b, c) = self.weights.dim();
        [a, b, c].map(|n| (self.offset, self.offset + n - 1))
    }

    pub fn total(&self) -> u64 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    /// `p = w / Σw` over the valid center grid.
    pub fn probabilities(&self) -> Array3<f64> {
        let total = self.total() as f64;
        self.weights.mapv(|w| w as f64 / total)
    }

    /// Draws a center in volume coordinates.
    pub fn draw_center<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[usize; 3]> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("sampling weights sum to zero".into()));
        }
        let r = rng.random_range(0..total);
        let flat = self.cumulative.partition_point(|&c| c <= r);
        let (_, b, c) = self.weights.dim();
        let (i, rem) = (flat / (b * c), flat % (b * c));
        Ok([
            i + self.offset,
            rem / c + self.offset,
            rem % c + self.offset,
        ])
    }
}

/// Per-voxel maximum over channels.
pub fn max_image(volume: &MultiModalVolume) -> Array3<f32> {
    volume
        .data
        .map_axis(Axis(3), |lane| lane.fold(f32::NEG_INFINITY, |m, &v| m.max(v)))
}

pub fn compute_sampling_weights(
    volume: &MultiModalVolume,
    labels: &LabelMap,
    patch_size: usize,
) -> Result<SamplingWeights> {
    let shape = volume.shape();
    if labels.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs volume {:?}",
            labels.shape(),
            shape
        )));
    }
    if patch_size == 0 || shape.iter().any(|&d| patch_size > d) {
        return Err(Error::PatchTooLarge {
            patch: patch_size,
            shape,
        });
    }
    let max_img = max_image(volume);
    let flat: Vec<f64> = max_img.iter().map(|&v| v as f64).collect();
    let threshold = percentile(&flat, LOW_INTENSITY_PERCENTILE);

    let off = patch_size / 2;
    let grid = shape.map(|d| d - patch_size + 1);
    let window = s![off..off + grid[0], off..off + grid[1], off..off + grid[2]];
    let mut weights = Array3::<u8>::from_elem(grid, DEFAULT_WEIGHT);
    Zip::from(&mut weights)
        .and(max_img.slice(window))
        .and(labels.data.slice(window))
        .for_each(|w, &m, &l| {
            *w = if l != 0 {
                FOREGROUND_WEIGHT
            } else if (m as f64) < threshold {
                LOW_INTENSITY_WEIGHT
            } else {
                DEFAULT_WEIGHT
            };
        });
    SamplingWeights::from_weights(weights, patch_size)
}

/// An extracted training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `(N, N, N, 4)` image block.
    pub image: Array4<f32>,
    /// `(N, N, N)` class indices aligned with `image`.
    pub labels: Array3<u8>,
    /// Patch center in volume coordinates.
    pub center: [usize; 3],
    pub flipped: bool,
}

/// Cuts the `N³` block whose origin is `center - floor(N / 2)`.
pub fn extract_patch(
    volume: &MultiModalVolume,
    labels: &LabelMap,
    center: [usize; 3],
    patch_size: usize,
) -> Result<PatchSample> {
    let shape = volume.shape();
    let half = patch_size / 2;
    let mut origin = [0usize; 3];
    for a in 0..3 {
        if center[a] < half || center[a] - half + patch_size > shape[a] {
            return Err(Error::PatchTooLarge {
                patch: patch_size,
                shape,
            });
        }
        origin[a] = center[a] - half;
    }
    let [z, y, x] = origin;
    let n = patch_size;
    Ok(PatchSample {
        image: volume
            .data
            .slice(s![z..z + n, y..y + n, x..x + n, ..])
            .to_owned(),
        labels: labels.data.slice(s![z..z + n, y..y + n, x..x + n]).to_owned(),
        center,
        flipped: false,
    })
}

pub fn sample_patch<R: Rng + ?Sized>(
    rng: &mut R,
    weights: &SamplingWeights,
    volume: &MultiModalVolume,
    labels: &LabelMap,
) -> Result<PatchSample> {
    let center = weights.draw_center(rng)?;
    let patch = extract_patch(volume, labels, center, weights.patch_size)?;
    Ok(if rng.random_bool(0.5) {
        lr_flip(patch)
    } else {
        patch
    })
}

/// Mirrors a patch along the left-right (last spatial) axis.
pub fn lr_flip(mut p: PatchSample) -> PatchSample {
    p.image.invert_axis(Axis(2));
    p.labels.invert_axis(Axis(2));
    p.image = p.image.as_standard_layout().into_owned();
    p.labels = p.labels.as_standard_layout().into_owned();
    p.flipped = !p.flipped;
    p
}

/// Per-channel mean and standard deviation of training patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; NUM_CHANNELS],
            std: [1.0; NUM_CHANNELS],
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::util::read_json(path.as_ref())
    }
}

/// A training subject with its precomputed center weights.
#[derive(Debug, Clone)]
pub struct SamplingSubject {
    pub id: String,
    pub volume: MultiModalVolume,
    pub labels: LabelMap,
    pub weights: SamplingWeights,
}

impl SamplingSubject {
    pub fn new(
        id: impl Into<String>,
        volume: MultiModalVolume,
        labels: LabelMap,
        patch_size: usize,
    ) -> Result<Self> {
        let weights = compute_sampling_weights(&volume, &labels, patch_size)?;
        Ok(Self {
            id: id.into(),
            volume,
            labels,
            weights,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchSample> {
        sample_patch(rng, &self.weights, &self.volume, &self.labels)
    }
}

/// Estimates channel statistics from `draws` patches, each taken from a
/// uniformly chosen subject.
pub fn estimate_channel_stats<R: Rng + ?Sized>(
    subjects: &[SamplingSubject],
    draws: usize,
    rng: &mut R,
) -> Result<ChannelStats> {
    if subjects.is_empty() {
        return Err(Error::Empty("no subjects for channel statistics".into()));
    }
    if draws == 0 {
        return Err(Error::Empty("zero draws for channel statistics".into()));
    }
    let mut sum = [0.0f64; NUM_CHANNELS];
    let mut sum_sq = [0.0f64; NUM_CHANNELS];
    let mut count = 0usize;
    for _ in 0..draws {
        let subject = &subjects[rng.random_range(0..subjects.len())];
        let patch = subject.sample(rng)?;
        for voxel in patch.image.lanes(Axis(3)) {
            for (c, &v) in voxel.iter().enumerate() {
                sum[c] += v as f64;
                sum_sq[c] += (v as f64) * (v as f64);
            }
        }
        count += patch.labels.len();
    }
    let n = count as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; NUM_CHANNELS];
    for c in 0..NUM_CHANNELS {
        let var = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt();
        if std[c] <= 1e-12 * mean[c].abs().max(1.0) {
            return Err(Error::ZeroStd(c));
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Applies `(x - mean_c) / std_c` per channel; labels are untouched.
pub fn standardize(p: &PatchSample, stats: &ChannelStats) -> PatchSample {
    let mut out = p.clone();
    standardize_image(&mut out.image, stats);
    out
}

pub(crate) fn standardize_image(image: &mut Array4<f32>, stats: &ChannelStats) {
    for mut voxel in image.lanes_mut(Axis(3)) {
        for (c, v) in voxel.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[c]) / stats.std[c]) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_volume(shape: [usize; 3], value: f32) -> MultiModalVolume {
        MultiModalVolume::new(Array4::from_elem((shape[0], shape[1], shape[2], 4), value))
            .unwrap()
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v: Vec<f64> = (0..=100).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 1.0), 1.0);
        assert_eq!(percentile(&[0.0, 10.0], 25.0), 2.5);
    }

    #[test]
    fn weight_classes() {
        let shape = [10, 10, 10];
        let mut vol = flat_volume(shape, 0.5);
        // A single very dark voxel sits below the 1st percentile.
        vol.data
            .slice_mut(s![2, 2, 2, ..])
            .fill(0.0);
        vol.data.slice_mut(s![0, 0, 0, ..]).fill(0.0);
        let mut labels = LabelMap::zeros(shape);
        labels.data[[5, 5, 5]] = 2;
        let w = compute_sampling_weights(&vol, &labels, 3).unwrap();
        assert_eq!(w.offset, 1);
        assert_eq!(w.weights.dim(), (8, 8, 8));
        assert_eq!(w.weights[[4, 4, 4]], FOREGROUND_WEIGHT);
        assert_eq!(w.weights[[1, 1, 1]], LOW_INTENSITY_WEIGHT);
        assert_eq!(w.weights[[3, 3, 3]], DEFAULT_WEIGHT);
    }

    #[test]
    fn foreground_overrides_low_intensity() {
        let shape = [6, 6, 6];
        let mut vol = flat_volume(shape, 0.5);
        vol.data.slice_mut(s![3, 3, 3, ..]).fill(0.0);
        let mut labels = LabelMap::zeros(shape);
        labels.data[[3, 3, 3]] = 1;
        let w = compute_sampling_weights(&vol, &labels, 2).unwrap();
        assert_eq!(w.weights[[2, 2, 2]], FOREGROUND_WEIGHT);
    }

    #[test]
    fn tied_minimum_selects_no_low_intensity_centers() {
        // Half the voxels share the minimum: nothing is strictly below p1.
        let shape = [4, 4, 4];
        let mut vol = flat_volume(shape, 0.8);
        vol.data.slice_mut(s![..2, .., .., ..]).fill(0.0);
        let w = compute_sampling_weights(&vol, &LabelMap::zeros(shape), 1).unwrap();
        assert!(w.weights.iter().all(|&x| x == DEFAULT_WEIGHT));
    }

    #[test]
    fn patch_larger_than_volume_is_rejected() {
        let shape = [8, 8, 4];
        let err = compute_sampling_weights(&flat_volume(shape, 0.1), &LabelMap::zeros(shape), 5);
        assert!(matches!(err, Err(Error::PatchTooLarge { .. })));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let w = Array3::from_shape_fn((3, 4, 5), |(a, b, c)| [1, 3, 6][(a + b + c) % 3]);
        let sw = SamplingWeights::from_weights(w, 4).unwrap();
        let total: f64 = sw.probabilities().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_valid_center_is_always_chosen() {
        let shape = [4, 4, 4];
        let vol = flat_volume(shape, 0.3);
        let labels = LabelMap::zeros(shape);
        let w = compute_sampling_weights(&vol, &labels, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_patch(&mut rng, &w, &vol, &labels).unwrap().center, [2, 2, 2]);
        }
    }

    #[test]
    fn even_patch_anchors_at_floor_half() {
        let shape = [6, 6, 6];
        let vol = MultiModalVolume::new(Array4::from_shape_fn((6, 6, 6, 4), |(z, y, x, _)| {
            (z * 36 + y * 6 + x) as f32 / 216.0
        }))
        .unwrap();
        let p = extract_patch(&vol, &LabelMap::zeros(shape), [2, 3, 4], 4).unwrap();
        assert_eq!(p.image[[0, 0, 0, 0]], vol.data[[0, 1, 2, 0]]);
        assert!(extract_patch(&vol, &LabelMap::zeros(shape), [2, 3, 5], 4).is_err());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let shape = [12, 12, 12];
        let vol = MultiModalVolume::new(Array4::from_shape_fn((12, 12, 12, 4), |(z, y, x, c)| {
            ((z * 7 + y * 3 + x + c) % 11) as f32 / 10.0
        }))
        .unwrap();
        let mut labels = LabelMap::zeros(shape);
        labels.data.slice_mut(s![4..7, 4..7, 4..7]).fill(3);
        let w = compute_sampling_weights(&vol, &labels, 5).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_patch(&mut rng, &w, &vol, &labels).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    fn labelled_patch() -> PatchSample {
        let mut labels = Array3::zeros((3, 3, 3));
        labels[[1, 1, 0]] = 2;
        PatchSample {
            image: Array4::from_shape_fn((3, 3, 3, 4), |(z, y, x, c)| (z + 2 * y + 5 * x + c) as f32),
            labels,
            center: [1, 1, 1],
            flipped: false,
        }
    }

    #[test]
    fn flip_moves_left_edge_to_right_edge() {
        let f = lr_flip(labelled_patch());
        assert_eq!(f.labels[[1, 1, 2]], 2);
        assert_eq!(f.labels[[1, 1, 0]], 0);
        assert!(f.flipped);
    }

    #[test]
    fn flip_is_an_involution() {
        let p = labelled_patch();
        assert_eq!(lr_flip(lr_flip(p.clone())), p);
    }

    #[test]
    fn symmetric_patch_only_toggles_flag() {
        let mut p = labelled_patch();
        p.image = Array4::from_shape_fn((3, 3, 3, 4), |(z, y, x, _)| (z + y + x.abs_diff(1)) as f32);
        p.labels.fill(1);
        let f = lr_flip(p.clone());
        assert_eq!(f.image, p.image);
        assert_eq!(f.labels, p.labels);
        assert_ne!(f.flipped, p.flipped);
    }

    #[test]
    fn constant_volumes_have_zero_std() {
        let shape = [4, 4, 4];
        let s = SamplingSubject::new("a", flat_volume(shape, 0.5), LabelMap::zeros(shape), 2)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            estimate_channel_stats(&[s], 10, &mut rng),
            Err(Error::ZeroStd(0))
        ));
    }

    #[test]
    fn full_volume_patch_stats_match_volume() {
        let cube = MultiModalVolume::new(Array4::from_shape_fn((4, 4, 4, 4), |(z, y, x, c)| {
            ((z * 13 + y * 7 + x * 3) % 10) as f32 / 10.0 + c as f32
        }))
        .unwrap();
        let subject = SamplingSubject::new("a", cube.clone(), LabelMap::zeros([4, 4, 4]), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = estimate_channel_stats(&[subject], 1, &mut rng).unwrap();
        for c in 0..4 {
            let ch = cube.data.index_axis(Axis(3), c).mapv(|v| v as f64);
            assert!((stats.mean[c] - ch.mean().unwrap()).abs() < 1e-9);
            assert!((stats.std[c] - ch.std(0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_formula() {
        let mut p = labelled_patch();
        p.image = Array4::from_shape_fn((3, 3, 3, 4), |(_, _, x, _)| (x % 2) as f32);
        let stats = ChannelStats {
            mean: [0.5; 4],
            std: [0.5; 4],
        };
        let out = standardize(&p, &stats);
        assert!(out.image.iter().all(|&v| v == -1.0 || v == 1.0));
        assert_eq!(out.labels, p.labels);
        assert_eq!(standardize(&p, &ChannelStats::identity()), p);

        p.image.fill(0.5);
        assert!(standardize(&p, &stats).image.iter().all(|&v| v == 0.0));
    }
}
