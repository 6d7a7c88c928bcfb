use super::kernels::{self, numel};
use super::{counter, shape_str, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<E: Element>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {} and {} differ",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "{op}: axis {axis} out of range for shape {}",
            shape_str(shape)
        )));
    }
    Ok(())
}

fn when<E>(needed: bool, f: impl FnOnce() -> Vec<E>) -> Option<Vec<E>> {
    needed.then(f)
}

impl<E: Element> Tensor<E> {
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(E) -> E,
        // derivative from (input, output)
        df: impl Fn(E, E) -> E + Send + Sync + 'static,
    ) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, name, vec![self.clone()], move |g| {
            let dx = g
                .iter()
                .zip(x.data())
                .zip(&y)
                .map(|((&g, &xv), &yv)| g * df(xv, yv))
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "add",
            vec![self.clone(), other.clone()],
            move |g| vec![when(ra, || g.to_vec()), when(rb, || g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "sub",
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    when(ra, || g.to_vec()),
                    when(rb, || g.iter().map(|&v| -v).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "mul",
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    when(a.requires_grad(), || {
                        g.iter().zip(b.data()).map(|(&g, &bv)| g * bv).collect()
                    }),
                    when(b.requires_grad(), || {
                        g.iter().zip(a.data()).map(|(&g, &av)| g * av).collect()
                    }),
                ]
            },
        ))
    }

    pub fn scale(&self, factor: E) -> Tensor<E> {
        self.unary("scale", |v| v * factor, move |_, _| factor)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-E::one())
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            "sigmoid",
            |v| E::one() / (E::one() + (-v).exp()),
            |_, y| y * (E::one() - y),
        )
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(
            "relu",
            |v| v.max(E::zero()),
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    /// GELU in its exact form `x·Φ(x)`, with `Φ` the standard normal CDF.
    pub fn gelu(&self) -> Tensor<E> {
        let half = E::from_f64_lossy(0.5);
        let inv_sqrt2 = E::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = E::from_f64_lossy(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        self.unary(
            "gelu",
            move |x| half * x * (E::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (E::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<E> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![total], "sum", vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<E>> {
        check_axis(if mean { "mean" } else { "sum" }, self.shape(), axis)?;
        let (outer, len, inner) = kernels::axis_split(self.shape(), axis);
        let factor = if mean {
            E::one() / E::from_usize(len).expect("extent fits element")
        } else {
            E::one()
        };
        let x = self.data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * factor);
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            shape,
            out,
            if mean { "mean" } else { "sum_axis" },
            vec![self.clone()],
            move |g| {
                let mut dx = vec![E::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = gv * factor;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "reshape: cannot view {} as {}",
                shape_str(self.shape()),
                shape_str(shape)
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != rank || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::dim(format!(
                "permute: {perm:?} is not a permutation of the axes of {}",
                shape_str(self.shape())
            )));
        }
        let out = kernels::permute(self.data(), self.shape(), perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let inv = kernels::inverse_permutation(perm);
        let back_shape = out_shape.clone();
        Ok(Tensor::from_op(out_shape, out, "permute", vec![self.clone()], move |g| {
            vec![Some(kernels::permute(g, &back_shape, &inv))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<E>> {
        check_axis("transpose", self.shape(), a.max(b))?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        check_axis("narrow", self.shape(), axis)?;
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::dim(format!(
                "narrow: range {start}..{} outside axis {axis} of {}",
                start + len,
                shape_str(self.shape())
            )));
        }
        let (outer, _, inner) = kernels::axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, out, "narrow", vec![self.clone()], move |g| {
            let mut dx = vec![E::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                dx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Broadcasts to `shape`, aligning trailing axes; unit axes repeat.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let ok = self.rank() <= shape.len()
            && kernels::aligned_shape(self.shape(), shape.len())
                .iter()
                .zip(shape)
                .all(|(&s, &t)| s == t || s == 1);
        if !ok || shape.contains(&0) {
            return Err(Error::dim(format!(
                "expand: cannot broadcast {} to {}",
                shape_str(self.shape()),
                shape_str(shape)
            )));
        }
        let out = kernels::expand(self.data(), self.shape(), shape);
        let small = self.shape().to_vec();
        let big = shape.to_vec();
        Ok(Tensor::from_op(shape.to_vec(), out, "expand", vec![self.clone()], move |g| {
            vec![Some(kernels::reduce_to(g, &big, &small))]
        }))
    }

    /// Batched matrix product `[..×m×k] · [..×k×n] → [..×m×n]`.
    ///
    /// Leading batch axes broadcast; either operand may be a plain matrix.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let mismatch = || {
            Error::dim(format!(
                "matmul: cannot contract {} with {}",
                shape_str(self.shape()),
                shape_str(other.shape())
            ))
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ar, br) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (k2, n) = (other.shape()[br - 2], other.shape()[br - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &self.shape()[..ar - 2];
        let b_batch = &other.shape()[..br - 2];
        let rank = a_batch.len().max(b_batch.len());
        let a_al = kernels::aligned_shape(a_batch, rank);
        let b_al = kernels::aligned_shape(b_batch, rank);
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in a_al.iter().zip(&b_al) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(mismatch());
            }
        }
        let nb = numel(&batch);
        let bstr = kernels::strides(&batch);
        let a_str = kernels::strides(&a_al);
        let b_str = kernels::strides(&b_al);
        // Flat batch index → (a batch index, b batch index).
        let offsets: Vec<(usize, usize)> = (0..nb)
            .map(|flat| {
                let (mut ia, mut ib) = (0, 0);
                for ax in 0..rank {
                    let i = (flat / bstr[ax]) % batch[ax];
                    if a_al[ax] != 1 {
                        ia += i * a_str[ax];
                    }
                    if b_al[ax] != 1 {
                        ib += i * b_str[ax];
                    }
                }
                (ia, ib)
            })
            .collect();

        let mut out = vec![E::zero(); nb * m * n];
        let (ad, bd) = (self.data(), other.data());
        for (bi, &(ia, ib)) in offsets.iter().enumerate() {
            kernels::gemm(
                &ad[ia * m * k..(ia + 1) * m * k],
                &bd[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        counter::record((nb * m * k * n) as u64);

        let mut shape = batch.clone();
        shape.extend([m, n]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, "matmul", vec![self.clone(), other.clone()], move |g| {
            let (ad, bd) = (a.data(), b.data());
            let mut tmp = vec![E::zero(); m.max(k) * n.max(k)];
            let ga = when(a.requires_grad(), || {
                let mut ga = vec![E::zero(); ad.len()];
                for (bi, &(ia, ib)) in offsets.iter().enumerate() {
                    let bt = kernels::transpose2d(&bd[ib * k * n..(ib + 1) * k * n], k, n);
                    let t = &mut tmp[..m * k];
                    kernels::gemm(&g[bi * m * n..(bi + 1) * m * n], &bt, t, m, n, k);
                    for (acc, &v) in ga[ia * m * k..(ia + 1) * m * k].iter_mut().zip(t.iter()) {
                        *acc += v;
                    }
                }
                ga
            });
            let gb = when(b.requires_grad(), || {
                let mut gb = vec![E::zero(); bd.len()];
                for (bi, &(ia, ib)) in offsets.iter().enumerate() {
                    let at = kernels::transpose2d(&ad[ia * m * k..(ia + 1) * m * k], m, k);
                    let t = &mut tmp[..k * n];
                    kernels::gemm(&at, &g[bi * m * n..(bi + 1) * m * n], t, k, m, n);
                    for (acc, &v) in gb[ib * k * n..(ib + 1) * k * n].iter_mut().zip(t.iter()) {
                        *acc += v;
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        check_axis("softmax", self.shape(), axis)?;
        if !self.all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let (outer, len, inner) = kernels::axis_split(self.shape(), axis);
        let out = kernels::softmax(self.data(), outer, len, inner);
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, "softmax", vec![self.clone()], move |g| {
            let mut dx = vec![E::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: E = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<E: Element>(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat: no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(Error::dim(format!(
                "concat: {} incompatible with {} along axis {axis}",
                shape_str(p.shape()),
                shape_str(first.shape())
            )));
        }
    }
    let (outer, _, inner) = kernels::axis_split(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(&lens) {
            out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let needs: Vec<bool> = parts.iter().map(Tensor::requires_grad).collect();
    Ok(Tensor::from_op(shape, out, "concat", parts.to_vec(), move |g| {
        let mut grads: Vec<Option<Vec<E>>> = needs
            .iter()
            .zip(&lens)
            .map(|(&need, &len)| need.then(|| Vec::with_capacity(outer * len * inner)))
            .collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (gp, &len) in grads.iter_mut().zip(&lens) {
                if let Some(gp) = gp {
                    gp.extend_from_slice(&g[off..off + len * inner]);
                }
                off += len * inner;
            }
        }
        grads
    }))
}

/// Normalizes over the last axis, then applies `gamma`/`beta` per channel.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm: rank-0 input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "layer_norm: input {} needs gamma/beta of [{c}], got {} and {}",
            shape_str(x.shape()),
            shape_str(gamma.shape()),
            shape_str(beta.shape())
        )));
    }
    let rows = x.numel() / c;
    let cf = E::from_usize(c).expect("extent fits element");
    let mut xhat = vec![E::zero(); x.numel()];
    let mut inv_std = vec![E::zero(); rows];
    let mut out = vec![E::zero(); x.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<E>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / cf;
        let is = E::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gd[j] + bd[j];
        }
    }
    let g_t = gamma.clone();
    let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        "layer_norm",
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let gd = g_t.data();
            let dx = when(rx, || {
                let mut dx = vec![E::zero(); rows * c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let dh: Vec<E> = gr.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<E>() / cf;
                    let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<E>() / cf;
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                dx
            });
            let dgamma = when(rg, || {
                let mut d = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        d[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                d
            });
            let dbeta = when(rb, || {
                let mut d = vec![E::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        d[j] += g[r * c + j];
                    }
                }
                d
            });
            vec![dx, dgamma, dbeta]
        },
    ))
}

/// 2-D convolution of one `[C_in×H×W]` image with `[C_out×C_in×k×k]` filters.
///
/// Computed as im2col followed by a matrix product. Counts
/// `C_out·C_in·k²·H'·W'` mul-adds.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
        return Err(Error::dim(format!(
            "conv2d: input {} incompatible with filters {} (stride {stride})",
            shape_str(xs),
            shape_str(ws)
        )));
    }
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::dim(format!(
            "conv2d: {k}×{k} kernel exceeds padded input {}×{} (padding {padding})",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv2d: bias {} for {cout} output channels",
                shape_str(b.shape())
            )));
        }
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let ckk = cin * k * k;
    let cols = kernels::im2col(x.data(), cin, h, w, k, stride, padding, oh, ow);
    let mut out = vec![E::zero(); cout * oh * ow];
    kernels::gemm(weight.data(), &cols, &mut out, cout, ckk, oh * ow);
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    counter::record((cout * ckk * oh * ow) as u64);

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (xt, wt) = (x.clone(), weight.clone());
    let rb = bias.map(Tensor::requires_grad).unwrap_or(false);
    Ok(Tensor::from_op(vec![cout, oh, ow], out, "conv2d", parents, move |g| {
        let dx = when(xt.requires_grad(), || {
            let w_t = kernels::transpose2d(wt.data(), cout, ckk);
            let mut dcols = vec![E::zero(); ckk * oh * ow];
            kernels::gemm(&w_t, g, &mut dcols, ckk, cout, oh * ow);
            kernels::col2im(&dcols, cin, h, w, k, stride, padding, oh, ow)
        });
        let dw = when(wt.requires_grad(), || {
            let cols_t = kernels::transpose2d(&cols, ckk, oh * ow);
            let mut dw = vec![E::zero(); cout * ckk];
            kernels::gemm(g, &cols_t, &mut dw, cout, oh * ow, ckk);
            dw
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(when(rb, || {
                g.chunks(oh * ow).map(|c| c.iter().copied().sum()).collect()
            }));
        }
        grads
    }))
}
