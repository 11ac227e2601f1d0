//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written directly from the defining formulas with plain
//! loops, without calling into the library code it is compared against.

#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::Rng;
use tumorseg::unet::Tensor;

pub const CLASSES: usize = 4;

/// Surface sum of the indicator of `cls`: gradient magnitude from central
/// differences on an edge-replicated padded copy, summed over ROI voxels.
pub fn surface_oracle(labels: &Array3<u8>, cls: u8) -> f64 {
    let (d, h, w) = labels.dim();
    let padded = Array3::from_shape_fn((d + 2, h + 2, w + 2), |(z, y, x)| {
        let z = z.clamp(1, d) - 1;
        let y = y.clamp(1, h) - 1;
        let x = x.clamp(1, w) - 1;
        if labels[[z, y, x]] == cls {
            1.0f64
        } else {
            0.0
        }
    });
    let mut total = 0.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if labels[[z, y, x]] != cls {
                    continue;
                }
                let (pz, py, px) = (z + 1, y + 1, x + 1);
                let gz = (padded[[pz + 1, py, px]] - padded[[pz - 1, py, px]]) / 2.0;
                let gy = (padded[[pz, py + 1, px]] - padded[[pz, py - 1, px]]) / 2.0;
                let gx = (padded[[pz, py, px + 1]] - padded[[pz, py, px - 1]]) / 2.0;
                total += (gz * gz + gy * gy + gx * gx).sqrt();
            }
        }
    }
    total
}

pub fn volume_oracle(labels: &Array3<u8>, cls: u8) -> f64 {
    let mut n = 0u64;
    for &v in labels.iter() {
        if v == cls {
            n += 1;
        }
    }
    n as f64
}

pub fn dice_oracle(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x {
            sa += 1.0;
        }
        if y {
            sb += 1.0;
        }
        if x && y {
            inter += 1.0;
        }
    }
    if sa + sb == 0.0 {
        1.0
    } else {
        2.0 * inter / (sa + sb)
    }
}

/// Coordinates of mask voxels that have a 6-neighbour outside the mask or
/// outside the array.
pub fn surface_points(m: &Array3<bool>) -> Vec<[i64; 3]> {
    let (d, h, w) = m.dim();
    let get = |z: i64, y: i64, x: i64| {
        if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
            false
        } else {
            m[[z as usize, y as usize, x as usize]]
        }
    };
    let mut out = Vec::new();
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !get(z, y, x) {
                    continue;
                }
                let interior = get(z - 1, y, x)
                    && get(z + 1, y, x)
                    && get(z, y - 1, x)
                    && get(z, y + 1, x)
                    && get(z, y, x - 1)
                    && get(z, y, x + 1);
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Linear-interpolation percentile (numpy's default).
pub fn percentile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn directed(from: &[[i64; 3]], to: &[[i64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d2: i64 = (0..3).map(|k| (p[k] - q[k]).pow(2)).sum();
                    (d2 as f64).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// All-pairs symmetric 95th-percentile surface distance.
pub fn hd95_oracle(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let (sa, sb) = (surface_points(a), surface_points(b));
    let ab = percentile_oracle(&directed(&sa, &sb), 95.0);
    let ba = percentile_oracle(&directed(&sb, &sa), 95.0);
    ab.max(ba)
}

/// A random mask made of a few boxes plus scattered voxels.
pub fn random_mask<R: Rng>(rng: &mut R, shape: [usize; 3], density: f64) -> Array3<bool> {
    let mut m = Array3::from_elem(shape, false);
    for _ in 0..rng.random_range(1..4) {
        let lo: Vec<usize> = shape.iter().map(|&s| rng.random_range(0..s)).collect();
        let hi: Vec<usize> = (0..3).map(|k| rng.random_range(lo[k]..shape[k]) + 1).collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[[z, y, x]] = true;
                }
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(density) {
            *v = !*v;
        }
    }
    m
}

pub fn random_shape<R: Rng>(rng: &mut R, max: usize) -> [usize; 3] {
    [
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        rng.random_range(1..=max),
    ]
}

/// Window origins along one axis: multiples of the stride that fit, plus a
/// final window flush with the end.
pub fn axis_origins(dim: usize, window: usize) -> Vec<usize> {
    let stride = window / 2;
    let mut out = Vec::new();
    let mut o = 0;
    while o + window <= dim {
        out.push(o);
        o += stride;
    }
    if *out.last().unwrap() + window < dim {
        out.push(dim - window);
    }
    out
}

/// Brute-force sliding-window average: every (origin, flip) pair is
/// enumerated and its probabilities are added voxel by voxel.
pub fn sliding_window_oracle(
    input: &Array4<f64>,
    window: usize,
    flip_tta: bool,
    model: &dyn Fn(&Array4<f64>) -> Array4<f64>,
) -> Array4<f64> {
    let (d, h, w, _) = input.dim();
    let mut sum = Array4::<f64>::zeros((d, h, w, CLASSES));
    let mut count = Array3::<f64>::zeros((d, h, w));
    let flips: &[bool] = if flip_tta { &[false, true] } else { &[false] };
    for &oz in &axis_origins(d, window) {
        for &oy in &axis_origins(h, window) {
            for &ox in &axis_origins(w, window) {
                for &flip in flips {
                    let patch = Array4::from_shape_fn((window, window, window, input.dim().3), |(z, y, x, c)| {
                        let xs = if flip { window - 1 - x } else { x };
                        input[[oz + z, oy + y, ox + xs, c]]
                    });
                    let out = model(&patch);
                    for z in 0..window {
                        for y in 0..window {
                            for x in 0..window {
                                let xs = if flip { window - 1 - x } else { x };
                                for c in 0..CLASSES {
                                    sum[[oz + z, oy + y, ox + xs, c]] += out[[z, y, x, c]];
                                }
                                count[[oz + z, oy + y, ox + xs]] += 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    for ((z, y, x, _), v) in sum.indexed_iter_mut() {
        *v /= count[[z, y, x]];
    }
    sum
}

/// Converts a `(D, H, W, C)` array to the network tensor layout and back.
pub fn to_tensor(a: &Array4<f64>) -> Tensor {
    let (d, h, w, c) = a.dim();
    let mut data = Vec::with_capacity(a.len());
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(a[[z, y, x, ch]]);
                }
            }
        }
    }
    Tensor::from_vec(c, [d, h, w], data)
}

pub fn from_tensor(t: &Tensor) -> Array4<f64> {
    let [d, h, w] = t.dims;
    Array4::from_shape_fn((d, h, w, t.channels), |(z, y, x, c)| t.data[((c * d + z) * h + y) * w + x])
}

/// Solves `(XᵀX) β = Xᵀy` by Gaussian elimination with partial pivoting.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * t;
        }
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=p {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

/// Per-voxel probabilities that depend on the voxel's own values and on the
/// mean of channel 0 over the whole window, so every window position and
/// flip produces different numbers.
pub fn position_stub_probs(patch: &Array4<f64>) -> Array4<f64> {
    let (n0, n1, n2, _) = patch.dim();
    let window_mean = patch.index_axis(ndarray::Axis(3), 0).mean().unwrap();
    let mut out = Array4::zeros((n0, n1, n2, CLASSES));
    for z in 0..n0 {
        for y in 0..n1 {
            for x in 0..n2 {
                let v0 = patch[[z, y, x, 0]];
                let v1 = patch[[z, y, x, 1]];
                let raw: Vec<f64> = (0..CLASSES)
                    .map(|c| {
                        let c = c as f64;
                        2.0 + c + (v0 * (c + 1.0)).sin() + 0.5 * (v1 + window_mean * c + 0.1 * x as f64).cos()
                    })
                    .collect();
                let total: f64 = raw.iter().sum();
                for c in 0..CLASSES {
                    out[[z, y, x, c]] = raw[c] / total;
                }
            }
        }
    }
    out
}

pub struct FnPredictor<F: Fn(&Array4<f64>) -> Array4<f64>> {
    pub window: usize,
    pub f: F,
}

impl<F: Fn(&Array4<f64>) -> Array4<f64>> tumorseg::inference::WindowPredictor for FnPredictor<F> {
    fn window_size(&self) -> usize {
        self.window
    }

    fn predict_window(&self, window: &Tensor) -> tumorseg::Result<Tensor> {
        Ok(to_tensor(&(self.f)(&from_tensor(window))))
    }
}

/// A `(D, H, W, 4)` volume of distinct smooth values in `[0, 1]`.
pub fn textured_volume<R: Rng>(rng: &mut R, shape: [usize; 3]) -> Array4<f32> {
    Array4::from_shape_fn((shape[0], shape[1], shape[2], 4), |_| rng.random::<f32>())
}

/// Standardization as `predict_volume` applies it, in f32 storage.
pub fn standardized(volume: &Array4<f32>, mean: [f64; 4], std: [f64; 4]) -> Array4<f64> {
    Array4::from_shape_fn(volume.dim(), |(z, y, x, c)| {
        ((volume[[z, y, x, c]] as f64 - mean[c]) / std[c]) as f32 as f64
    })
}

/// Sampler fixture: a `(5, 5, 104)` volume with patch size 5 has exactly 100
/// valid centers along the line `(2, 2, 2..=101)`. Ten are foreground, twenty
/// are dark (the only voxels below the 1st percentile of 2600) and seventy
/// are ordinary.
pub fn sampler_fixture() -> (tumorseg::volume::MultiModalVolume, tumorseg::volume::LabelMap, usize) {
    use tumorseg::volume::{LabelMap, MultiModalVolume};
    let mut image = Array4::<f32>::from_elem((5, 5, 104, 4), 0.5);
    let mut labels = Array3::<u8>::zeros((5, 5, 104));
    for k in 0..100 {
        let x = 2 + k;
        if k < 10 {
            labels[[2, 2, x]] = 1 + (k % 3) as u8;
        } else if k < 30 {
            for c in 0..4 {
                image[[2, 2, x, c]] = 0.0;
            }
        }
    }
    (
        MultiModalVolume::new(image).unwrap(),
        LabelMap::new(labels).unwrap(),
        5,
    )
}

/// Expected weight class of fixture center `k` (0-based along the line).
pub fn fixture_weight(k: usize) -> f64 {
    if k < 10 {
        6.0
    } else if k < 30 {
        1.0
    } else {
        3.0
    }
}

/// Per-voxel count of covering (window, flip) predictions, by enumeration.
pub fn coverage_oracle(shape: [usize; 3], window: usize, flip_tta: bool) -> Array3<u32> {
    let mut count = Array3::<u32>::zeros(shape);
    let per = if flip_tta { 2 } else { 1 };
    for &oz in &axis_origins(shape[0], window) {
        for &oy in &axis_origins(shape[1], window) {
            for &ox in &axis_origins(shape[2], window) {
                for z in oz..oz + window {
                    for y in oy..oy + window {
                        for x in ox..ox + window {
                            count[[z, y, x]] += per;
                        }
                    }
                }
            }
        }
    }
    count
}
