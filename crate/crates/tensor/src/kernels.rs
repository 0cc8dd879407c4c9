//! Slice-level kernels shared by forward and backward passes.

use crate::real::Real;

pub(crate) const NO_SOURCE: u32 = u32::MAX;

/// Permutes a row-major array. `out.shape[i] == shape[perm[i]]`.
pub(crate) fn permute<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    // Copy one innermost output row at a time; the odometer runs over the
    // outer output axes only.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer = rank - 1;
    let mut counter = vec![0usize; outer];
    let mut offset = 0usize;
    for _ in 0..data.len() / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&data[offset..offset + inner]);
        } else {
            out.extend((0..inner).map(|j| data[offset + j * inner_stride]));
        }
        for axis in (0..outer).rev() {
            counter[axis] += 1;
            offset += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Row-wise softmax over contiguous rows of length `len`, max-subtracted.
pub(crate) fn softmax_rows<T: Real>(data: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, dst) in data.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Geometry of a "same"-padded 2-D convolution on an `h x w` plane.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// `map[kidx * out_hw + p]` is the input pixel read by kernel tap `kidx`
    /// at output pixel `p`, or `NO_SOURCE` for zero padding.
    pub map: Vec<u32>,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, replicate: bool) -> Self {
        let pad = (k / 2) as isize;
        let out_h = (h - 1) / stride + 1;
        let out_w = (w - 1) / stride + 1;
        let out_hw = out_h * out_w;
        let mut map = vec![NO_SOURCE; k * k * out_hw];
        for ky in 0..k {
            for kx in 0..k {
                let kidx = ky * k + kx;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut iy = (oy * stride) as isize + ky as isize - pad;
                        let mut ix = (ox * stride) as isize + kx as isize - pad;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        if !inside {
                            if !replicate {
                                continue;
                            }
                            iy = iy.clamp(0, h as isize - 1);
                            ix = ix.clamp(0, w as isize - 1);
                        }
                        map[kidx * out_hw + oy * out_w + ox] =
                            (iy as usize * w + ix as usize) as u32;
                    }
                }
            }
        }
        Self {
            h,
            w,
            k,
            out_h,
            out_w,
            map,
        }
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Fills `cols` (`channels*k*k x out_hw`) from `channels` input planes.
    pub fn im2col<T: Real>(&self, planes: &[T], channels: usize, cols: &mut [T]) {
        let hw = self.h * self.w;
        let out_hw = self.out_hw();
        let kk = self.k * self.k;
        for c in 0..channels {
            let plane = &planes[c * hw..(c + 1) * hw];
            for kidx in 0..kk {
                let row = &mut cols[(c * kk + kidx) * out_hw..(c * kk + kidx + 1) * out_hw];
                let taps = &self.map[kidx * out_hw..(kidx + 1) * out_hw];
                for (dst, &src) in row.iter_mut().zip(taps) {
                    *dst = if src == NO_SOURCE {
                        T::zero()
                    } else {
                        plane[src as usize]
                    };
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds `cols` back into planes.
    pub fn col2im<T: Real>(&self, cols: &[T], channels: usize, planes: &mut [T]) {
        let hw = self.h * self.w;
        let out_hw = self.out_hw();
        let kk = self.k * self.k;
        for c in 0..channels {
            let plane = &mut planes[c * hw..(c + 1) * hw];
            for kidx in 0..kk {
                let row = &cols[(c * kk + kidx) * out_hw..(c * kk + kidx + 1) * out_hw];
                let taps = &self.map[kidx * out_hw..(kidx + 1) * out_hw];
                for (&v, &src) in row.iter().zip(taps) {
                    if src != NO_SOURCE {
                        plane[src as usize] += v;
                    }
                }
            }
        }
    }
}
