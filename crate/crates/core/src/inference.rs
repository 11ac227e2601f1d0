//! Full-volume prediction with half-overlapping sliding windows and
//! left-right flip averaging.

use ndarray::{s, Array3, Array4};

use crate::error::{Error, Result};
use crate::sampler::{standardize_image, ChannelStats};
use crate::unet::{softmax, Tensor, UNet3d};
use crate::volume::{MultiModalVolume, ProbabilityMap, NUM_CHANNELS, NUM_CLASSES};

/// Anything that maps a standardized `(4, N, N, N)` window to per-voxel
/// class probabilities of the same spatial shape.
pub trait WindowPredictor {
    fn window_size(&self) -> usize;
    fn predict_window(&self, window: &Tensor) -> Result<Tensor>;
}

impl WindowPredictor for UNet3d {
    fn window_size(&self) -> usize {
        self.config.patch_size
    }

    fn predict_window(&self, window: &Tensor) -> Result<Tensor> {
        let probs = softmax(&self.forward(window));
        if probs.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(probs)
    }
}

/// Window origins along each axis for a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidingPlan {
    pub volume_shape: [usize; 3],
    pub window: usize,
    pub stride: usize,
    pub axis_origins: [Vec<usize>; 3],
}

impl SlidingPlan {
    /// All window origins in `z`-major order.
    pub fn window_origins(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for &z in &self.axis_origins[0] {
            for &y in &self.axis_origins[1] {
                for &x in &self.axis_origins[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + window >= dim {
            out.push(dim - window);
            break;
        }
        out.push(o);
        o += stride;
    }
    out
}

/// Origins at multiples of `N / 2`, with the last window on each axis
/// clamped flush to the far boundary.
pub fn plan_windows(volume_shape: [usize; 3], window: usize) -> Result<SlidingPlan> {
    if window == 0 || volume_shape.iter().any(|&d| window > d) {
        return Err(Error::PatchTooLarge {
            patch: window,
            shape: volume_shape,
        });
    }
    let stride = (window / 2).max(1);
    Ok(SlidingPlan {
        volume_shape,
        window,
        stride,
        axis_origins: volume_shape.map(|d| axis_origins(d, window, stride)),
    })
}

/// Number of predictions each voxel receives.
pub fn coverage_count(plan: &SlidingPlan, flip_tta: bool) -> Array3<u32> {
    let per_window = if flip_tta { 2 } else { 1 };
    let mut count = Array3::<u32>::zeros(plan.volume_shape);
    let n = plan.window;
    for [z, y, x] in plan.window_origins() {
        count
            .slice_mut(s![z..z + n, y..y + n, x..x + n])
            .mapv_inplace(|c| c + per_window);
    }
    count
}

/// Channel-first window of a `(D, H, W, C)` volume.
pub(crate) fn window_tensor(volume: &Array4<f32>, origin: [usize; 3], n: usize) -> Tensor {
    let [z0, y0, x0] = origin;
    let c = volume.dim().3;
    let v = n * n * n;
    let mut data = vec![0.0; c * v];
    let mut i = 0;
    for z in z0..z0 + n {
        for y in y0..y0 + n {
            for x in x0..x0 + n {
                for ch in 0..c {
                    data[ch * v + i] = volume[[z, y, x, ch]] as f64;
                }
                i += 1;
            }
        }
    }
    Tensor::from_vec(c, [n, n, n], data)
}

fn check_output(out: &Tensor, n: usize) -> Result<()> {
    if out.channels != NUM_CLASSES || out.dims != [n, n, n] {
        return Err(Error::ShapeMismatch(format!(
            "predictor returned {}×{:?}, expected {NUM_CLASSES}×{:?}",
            out.channels,
            out.dims,
            [n; 3]
        )));
    }
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    Ok(())
}

/// Averages class probabilities over every covering window (and, with
/// `flip_tta`, over the mirrored input with its output mirrored back).
pub fn predict_volume<P: WindowPredictor + ?Sized>(
    model: &P,
    volume: &MultiModalVolume,
    stats: &ChannelStats,
    flip_tta: bool,
) -> Result<ProbabilityMap> {
    let n = model.window_size();
    let shape = volume.shape();
    let plan = plan_windows(shape, n)?;
    let mut input = volume.data.clone();
    standardize_image(&mut input, stats);

    let vol_voxels: usize = shape.iter().product();
    let [_, h, w] = shape;
    let mut sums = vec![0.0f64; NUM_CLASSES * vol_voxels];
    let mut counts = vec![0u32; vol_voxels];
    let mut accumulate = |origin: [usize; 3], probs: &Tensor| {
        let wv = n * n * n;
        let mut i = 0;
        for z in origin[0]..origin[0] + n {
            for y in origin[1]..origin[1] + n {
                for x in origin[2]..origin[2] + n {
                    let dst = (z * h + y) * w + x;
                    for c in 0..NUM_CLASSES {
                        sums[c * vol_voxels + dst] += probs.data[c * wv + i];
                    }
                    counts[dst] += 1;
                    i += 1;
                }
            }
        }
    };
    for origin in plan.window_origins() {
        let window = window_tensor(&input, origin, n);
        let probs = model.predict_window(&window)?;
        check_output(&probs, n)?;
        accumulate(origin, &probs);
        if flip_tta {
            let probs = model.predict_window(&window.flip_lr())?;
            check_output(&probs, n)?;
            accumulate(origin, &probs.flip_lr());
        }
    }

    let mut out = Array4::<f32>::zeros((shape[0], shape[1], shape[2], NUM_CLASSES));
    for ((z, y, x, c), p) in out.indexed_iter_mut() {
        let i = (z * h + y) * w + x;
        *p = (sums[c * vol_voxels + i] / counts[i] as f64) as f32;
    }
    debug_assert_eq!(NUM_CHANNELS, volume.data.dim().3);
    ProbabilityMap::new(out)
}

/// Mirrors a `(D, H, W, C)` array along the left-right axis.
pub fn mirror_lr(data: &Array4<f32>) -> Array4<f32> {
    data.slice(s![.., .., ..;-1, ..]).to_owned()
}
