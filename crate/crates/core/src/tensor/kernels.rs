//! Untracked numeric kernels over contiguous row-major buffers.

use rayon::prelude::*;

use super::element::Element;
use super::parallel;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
///
/// Every output row is accumulated over `k` in ascending order, so splitting
/// rows across threads does not change any bit of the result.
pub(crate) fn gemm<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let row = |(i, out_row): (usize, &mut [E])| {
        out_row.iter_mut().for_each(|o| *o = E::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if parallel::worth_it(m * k * n) {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn transpose2d<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<E: Element>(data: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Odometer over the output index; the innermost axis is walked as a run.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    loop {
        let base: usize = idx
            .iter()
            .zip(&src_strides)
            .map(|(&i, &s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Left-pads `small` with unit extents to the rank of `big`.
pub(crate) fn aligned_shape(small: &[usize], rank: usize) -> Vec<usize> {
    let mut s = vec![1; rank - small.len()];
    s.extend_from_slice(small);
    s
}

/// Broadcast-copies `data` (shape `from`) to shape `to`.
pub(crate) fn expand<E: Element>(data: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    let from = aligned_shape(from, to.len());
    let from_strides = strides(&from);
    let to_strides = strides(to);
    let total = numel(to);
    (0..total)
        .map(|flat| {
            let mut src = 0;
            for ax in 0..to.len() {
                let i = (flat / to_strides[ax]) % to[ax];
                if from[ax] != 1 {
                    src += i * from_strides[ax];
                }
            }
            data[src]
        })
        .collect()
}

/// Sums `data` (shape `big`) down to the broadcast-compatible shape `small`.
pub(crate) fn reduce_to<E: Element>(data: &[E], big: &[usize], small: &[usize]) -> Vec<E> {
    let aligned = aligned_shape(small, big.len());
    let small_strides = strides(&aligned);
    let big_strides = strides(big);
    let mut out = vec![E::zero(); numel(small)];
    for (flat, &v) in data.iter().enumerate() {
        let mut dst = 0;
        for ax in 0..big.len() {
            let i = (flat / big_strides[ax]) % big[ax];
            if aligned[ax] != 1 {
                dst += i * small_strides[ax];
            }
        }
        out[dst] += v;
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<E: Element>(data: &[E], outer: usize, len: usize, inner: usize) -> Vec<E> {
    let mut out = vec![E::zero(); data.len()];
    let kernel = |o: usize, out_block: &mut [E]| {
        let block = &data[o * len * inner..(o + 1) * len * inner];
        for i in 0..inner {
            let mut max = E::neg_infinity();
            for j in 0..len {
                max = max.max(block[j * inner + i]);
            }
            let mut sum = E::zero();
            for j in 0..len {
                let e = (block[j * inner + i] - max).exp();
                out_block[j * inner + i] = e;
                sum += e;
            }
            for j in 0..len {
                out_block[j * inner + i] = out_block[j * inner + i] / sum;
            }
        }
    };
    let block = len * inner;
    if block == 0 {
        return out;
    }
    if parallel::worth_it(data.len() * 4) {
        out.par_chunks_mut(block)
            .enumerate()
            .for_each(|(o, b)| kernel(o, b));
    } else {
        out.chunks_mut(block)
            .enumerate()
            .for_each(|(o, b)| kernel(o, b));
    }
    debug_assert_eq!(out.len(), outer * block);
    out
}

/// Unfolds `x[c×h×w]` into columns `[c·k·k × oh·ow]` for a `k×k` kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut cols = vec![E::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut x = vec![E::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}
