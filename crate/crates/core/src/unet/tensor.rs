/// Dense feature map laid out `[channel][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Self {
            channels,
            dims,
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.dims, other.dims);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.channels + other.channels, self.dims, data)
    }

    /// Splits off the first `channels` channels.
    pub fn split(self, channels: usize) -> (Tensor, Tensor) {
        let v = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(channels * v);
        (
            Tensor::from_vec(channels, self.dims, data),
            Tensor::from_vec(self.channels - channels, self.dims, rest),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Mirrors along the last spatial axis.
    pub fn flip_lr(&self) -> Tensor {
        let w = self.dims[2];
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_exact_mut(w).zip(self.data.chunks_exact(w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }
}

/// `c = a·b + beta * c` on row-major slices with explicit strides.
///
/// `a` is `m × k` with strides `(rsa, csa)`, `b` is `k × n` with `(rsb, csb)`
/// and `c` is a contiguous row-major `m × n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    gemm_strided(m, k, n, a, sa, b, sb, beta, c, n);
}

/// Like [`gemm`], but row `i` of `c` starts at `c[i * rsc]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(rsc >= n && c.len() >= (m - 1) * rsc + n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds of all three operands are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
