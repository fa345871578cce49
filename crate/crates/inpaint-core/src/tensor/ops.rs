//! Raw compute kernels on plain tensors. The autodiff tape records these;
//! they are also usable directly for untraced evaluation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::contract(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output extent of a convolution over an input extent.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if span > padded {
            return Err(Error::shape(format!(
                "kernel span {span} exceeds padded input {padded} (spec {self:?})"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output extent of the transposed convolution (adjoint), no output padding.
    pub fn tconv_out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let grown = (input - 1) * self.stride + span;
        if grown < 2 * self.padding + 1 {
            return Err(Error::shape(format!(
                "transposed conv output collapses: input {input}, spec {self:?}"
            )));
        }
        Ok(grown - 2 * self.padding)
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("{what} must be rank 4, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Valid output-index range [lo, hi] such that `o*stride + k_off - padding`
/// stays inside [0, input). Returns None when empty.
fn valid_range(
    out_extent: usize,
    input: usize,
    stride: usize,
    k_off: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    if input + padding < k_off + 1 {
        return None;
    }
    let hi = ((input - 1 + padding - k_off) / stride).min(out_extent - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// 2-D cross-correlation with zero padding: `x[N,C,H,W] * w[F,C,kh,kw] -> [N,F,H',W']`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, cx, h, wi) = dims4(x, "conv2d input")?;
    let (f, cw, kh, kw) = dims4(w, "conv2d weight")?;
    if cx != cw {
        return Err(Error::shape(format!(
            "conv2d channels: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::shape(format!(
            "conv2d weight {:?} disagrees with spec {spec:?}",
            w.shape()
        )));
    }
    let oh = spec.out_extent(h, kh)?;
    let ow = spec.out_extent(wi, kw)?;
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::shape(format!(
                "conv2d bias {:?}, expected [{f}]",
                b.shape()
            )));
        }
    }
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); n * f * oh * ow];
    for nn in 0..n {
        for ff in 0..f {
            let obase = (nn * f + ff) * oh * ow;
            if let Some(b) = bias {
                let bv = b.data()[ff];
                for v in out[obase..obase + oh * ow].iter_mut() {
                    *v = bv;
                }
            }
            for cc in 0..cx {
                let xbase = (nn * cx + cc) * h * wi;
                for i in 0..kh {
                    let Some((rlo, rhi)) = valid_range(oh, h, s, i * d, p) else {
                        continue;
                    };
                    for j in 0..kw {
                        let wv = wd[((ff * cx + cc) * kh + i) * kw + j];
                        if wv == T::zero() {
                            continue;
                        }
                        let Some((clo, chi)) = valid_range(ow, wi, s, j * d, p) else {
                            continue;
                        };
                        for r in rlo..=rhi {
                            let ih = r * s + i * d - p;
                            let xrow = &xd[xbase + ih * wi..xbase + (ih + 1) * wi];
                            let orow = &mut out[obase + r * ow..obase + (r + 1) * ow];
                            if s == 1 {
                                let xoff = clo + j * d - p;
                                let len = chi + 1 - clo;
                                for (o, xv) in orow[clo..clo + len]
                                    .iter_mut()
                                    .zip(&xrow[xoff..xoff + len])
                                {
                                    *o = *o + wv * *xv;
                                }
                            } else {
                                for c in clo..=chi {
                                    orow[c] = orow[c] + wv * xrow[c * s + j * d - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, &[n, f, oh, ow])
}

/// Adjoint of [`conv2d`] w.r.t. its input: scatters `dy[N,F,H',W']` back to
/// `[N,C,H,W]` through `w[F,C,kh,kw]`. Also the forward pass of the
/// transposed convolution.
pub fn conv2d_grad_x<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, f, oh, ow) = dims4(dy, "conv2d grad output")?;
    let (fw, c, kh, kw) = dims4(w, "conv2d weight")?;
    if f != fw {
        return Err(Error::shape(format!(
            "grad channels {:?} vs weight {:?}",
            dy.shape(),
            w.shape()
        )));
    }
    let (h, wi) = input_hw;
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    let dyd = dy.data();
    let wd = w.data();
    let mut dx = vec![T::zero(); n * c * h * wi];
    for nn in 0..n {
        for ff in 0..f {
            let ybase = (nn * f + ff) * oh * ow;
            for cc in 0..c {
                let xbase = (nn * c + cc) * h * wi;
                for i in 0..kh {
                    let Some((rlo, rhi)) = valid_range(oh, h, s, i * d, p) else {
                        continue;
                    };
                    for j in 0..kw {
                        let wv = wd[((ff * c + cc) * kh + i) * kw + j];
                        if wv == T::zero() {
                            continue;
                        }
                        let Some((clo, chi)) = valid_range(ow, wi, s, j * d, p) else {
                            continue;
                        };
                        for r in rlo..=rhi {
                            let ih = r * s + i * d - p;
                            let yrow = &dyd[ybase + r * ow..ybase + (r + 1) * ow];
                            let xrow = &mut dx[xbase + ih * wi..xbase + (ih + 1) * wi];
                            if s == 1 {
                                let xoff = clo + j * d - p;
                                let len = chi + 1 - clo;
                                for (xv, yv) in xrow[xoff..xoff + len]
                                    .iter_mut()
                                    .zip(&yrow[clo..clo + len])
                                {
                                    *xv = *xv + wv * *yv;
                                }
                            } else {
                                for cidx in clo..=chi {
                                    let iw = cidx * s + j * d - p;
                                    xrow[iw] = xrow[iw] + wv * yrow[cidx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(dx, &[n, c, h, wi])
}

/// Adjoint of [`conv2d`] w.r.t. its weight.
pub fn conv2d_grad_w<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c, h, wi) = dims4(x, "conv2d input")?;
    let (n2, f, oh, ow) = dims4(dy, "conv2d grad output")?;
    if n != n2 {
        return Err(Error::shape("conv2d grad_w batch mismatch"));
    }
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    let xd = x.data();
    let dyd = dy.data();
    let mut dw = vec![T::zero(); f * c * kh * kw];
    for ff in 0..f {
        for cc in 0..c {
            for i in 0..kh {
                let Some((rlo, rhi)) = valid_range(oh, h, s, i * d, p) else {
                    continue;
                };
                for j in 0..kw {
                    let Some((clo, chi)) = valid_range(ow, wi, s, j * d, p) else {
                        continue;
                    };
                    let mut acc = T::zero();
                    for nn in 0..n {
                        let xbase = (nn * c + cc) * h * wi;
                        let ybase = (nn * f + ff) * oh * ow;
                        for r in rlo..=rhi {
                            let ih = r * s + i * d - p;
                            let xrow = &xd[xbase + ih * wi..xbase + (ih + 1) * wi];
                            let yrow = &dyd[ybase + r * ow..ybase + (r + 1) * ow];
                            if s == 1 {
                                let xoff = clo + j * d - p;
                                let len = chi + 1 - clo;
                                for (xv, yv) in
                                    xrow[xoff..xoff + len].iter().zip(&yrow[clo..clo + len])
                                {
                                    acc = acc + *xv * *yv;
                                }
                            } else {
                                for cidx in clo..=chi {
                                    acc = acc + xrow[cidx * s + j * d - p] * yrow[cidx];
                                }
                            }
                        }
                    }
                    dw[((ff * c + cc) * kh + i) * kw + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(dw, &[f, c, kh, kw])
}

/// Per-output-channel reduction of a conv gradient: `dy[N,F,H,W] -> [F]`.
pub fn sum_batch_spatial<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, h, w) = dims4(dy, "bias grad")?;
    let d = dy.data();
    let mut out = vec![T::zero(); f];
    for nn in 0..n {
        for ff in 0..f {
            let base = (nn * f + ff) * h * w;
            let mut acc = T::zero();
            for v in &d[base..base + h * w] {
                acc = acc + *v;
            }
            out[ff] = out[ff] + acc;
        }
    }
    Tensor::from_vec(out, &[f])
}

/// Transposed convolution: `x[N,F,H,W] ⊛ᵀ w[F,C,kh,kw] -> [N,C,H',W']` with
/// `H' = (H-1)·stride - 2·padding + dilation·(kh-1) + 1`. Exact adjoint of
/// [`conv2d`] with the same weight tensor.
pub fn tconv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (_, f, h, wi) = dims4(x, "tconv2d input")?;
    let (fw, c, kh, kw) = dims4(w, "tconv2d weight")?;
    if f != fw {
        return Err(Error::shape(format!(
            "tconv2d channels: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let oh = spec.tconv_out_extent(h, kh)?;
    let ow = spec.tconv_out_extent(wi, kw)?;
    let mut out = conv2d_grad_x(x, w, spec, (oh, ow))?;
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "tconv2d bias {:?}, expected [{c}]",
                b.shape()
            )));
        }
        let od = out.data_mut();
        let n = x.shape()[0];
        for nn in 0..n {
            for cc in 0..c {
                let bv = b.data()[cc];
                let base = (nn * c + cc) * oh * ow;
                for v in od[base..base + oh * ow].iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

/// Matrix product `a[m,k] · b[k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(format!("matmul {sa:?} · {sb:?}")));
    }
    let a3 = a.reshape(&[1, sa[0], sa[1]])?;
    let b3 = b.reshape(&[1, sb[0], sb[1]])?;
    bmm(&a3, &b3)?.reshape(&[sa[0], sb[1]])
}

/// Batched matrix product `a[B,m,k] · b[B,k,n] -> [B,m,n]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(Error::shape(format!("bmm {sa:?} · {sb:?}")));
    }
    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); bs * m * n];
    for bb in 0..bs {
        let abase = bb * m * k;
        let bbase = bb * k * n;
        let obase = bb * m * n;
        for i in 0..m {
            let orow = &mut out[obase + i * n..obase + (i + 1) * n];
            for t in 0..k {
                let av = ad[abase + i * k + t];
                if av == T::zero() {
                    continue;
                }
                let brow = &bd[bbase + t * n..bbase + (t + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * *bv;
                }
            }
        }
    }
    Tensor::from_vec(out, &[bs, m, n])
}

/// `a[B,m,k] · bᵀ where b[B,n,k] -> [B,m,n]` (rows dotted with rows).
pub fn bmm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::shape(format!("bmm_nt {sa:?} · {sb:?}")));
    }
    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); bs * m * n];
    for bb in 0..bs {
        for i in 0..m {
            let arow = &ad[(bb * m + i) * k..(bb * m + i + 1) * k];
            let orow = &mut out[(bb * m + i) * n..(bb * m + i + 1) * n];
            for j in 0..n {
                let brow = &bd[(bb * n + j) * k..(bb * n + j + 1) * k];
                let mut acc = T::zero();
                for (av, bv) in arow.iter().zip(brow) {
                    acc = acc + *av * *bv;
                }
                orow[j] = acc;
            }
        }
    }
    Tensor::from_vec(out, &[bs, m, n])
}

/// `aᵀ · b where a[B,k,m], b[B,k,n] -> [B,m,n]`.
pub fn bmm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
        return Err(Error::shape(format!("bmm_tn {sa:?} · {sb:?}")));
    }
    let (bs, k, m, n) = (sa[0], sa[1], sa[2], sb[2]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); bs * m * n];
    for bb in 0..bs {
        for t in 0..k {
            let arow = &ad[(bb * k + t) * m..(bb * k + t + 1) * m];
            let brow = &bd[(bb * k + t) * n..(bb * k + t + 1) * n];
            for i in 0..m {
                let av = arow[i];
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out[(bb * m + i) * n..(bb * m + i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * *bv;
                }
            }
        }
    }
    Tensor::from_vec(out, &[bs, m, n])
}

/// Materializing axis permutation.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    if perm.len() != r {
        return Err(Error::contract(format!(
            "permute {perm:?} on rank {r} tensor"
        )));
    }
    let mut seen = [false; crate::tensor::MAX_RANK];
    for &p in perm {
        if p >= r || seen[p] {
            return Err(Error::contract(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    // Pad to rank 5 at the front so one code path covers every rank.
    let pad = crate::tensor::MAX_RANK - r;
    let mut shape5 = [1usize; 5];
    shape5[pad..].copy_from_slice(x.shape());
    let mut perm5 = [0usize; 5];
    for (i, v) in perm5.iter_mut().enumerate().take(pad) {
        *v = i;
    }
    for i in 0..r {
        perm5[pad + i] = perm[i] + pad;
    }
    let mut in_strides = [1usize; 5];
    for i in (0..4).rev() {
        in_strides[i] = in_strides[i + 1] * shape5[i + 1];
    }
    let out_shape5: [usize; 5] = std::array::from_fn(|i| shape5[perm5[i]]);
    let src_stride: [usize; 5] = std::array::from_fn(|i| in_strides[perm5[i]]);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for a in 0..out_shape5[0] {
        for b in 0..out_shape5[1] {
            for c in 0..out_shape5[2] {
                let base =
                    a * src_stride[0] + b * src_stride[1] + c * src_stride[2];
                for d in 0..out_shape5[3] {
                    let base2 = base + d * src_stride[3];
                    for e in 0..out_shape5[4] {
                        out.push(xd[base2 + e * src_stride[4]]);
                    }
                }
            }
        }
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    Tensor::from_vec(out, &out_shape)
}

/// Inverse of a permutation.
pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenate along an axis.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::contract("concat of no tensors"))?;
    let r = first.rank();
    if axis >= r {
        return Err(Error::contract(format!("concat axis {axis} on rank {r}")));
    }
    let mut total_axis = 0;
    for x in xs {
        if x.rank() != r {
            return Err(Error::shape("concat rank mismatch"));
        }
        for (i, (&a, &b)) in x.shape().iter().zip(first.shape()).enumerate() {
            if i != axis && a != b {
                return Err(Error::shape(format!(
                    "concat shapes {:?} vs {:?} on axis {axis}",
                    x.shape(),
                    first.shape()
                )));
            }
        }
        total_axis += x.shape()[axis];
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total_axis;
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for x in xs {
            let ax = x.shape()[axis];
            let chunk = ax * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_vec(out, &out_shape)
}

/// Contiguous slice along an axis.
pub fn slice_axis<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let r = x.rank();
    if axis >= r || start + len > x.shape()[axis] || len == 0 {
        return Err(Error::contract(format!(
            "slice [{start}, {start}+{len}) on axis {axis} of {:?}",
            x.shape()
        )));
    }
    let (outer, ax, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ax + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    Tensor::from_vec(out, &out_shape)
}

/// Nearest-neighbor resample over the last two axes: `src = floor(dst * in/out)`.
pub fn resize_nearest<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 || oh == 0 || ow == 0 {
        return Err(Error::shape(format!(
            "resize_nearest to {oh}x{ow} on {:?}",
            x.shape()
        )));
    }
    let h = x.shape()[r - 2];
    let w = x.shape()[r - 1];
    if h == oh && w == ow {
        return Ok(x.clone());
    }
    let planes: usize = x.shape()[..r - 2].iter().product();
    let rows: Vec<usize> = (0..oh).map(|i| (i * h / oh).min(h - 1)).collect();
    let cols: Vec<usize> = (0..ow).map(|j| (j * w / ow).min(w - 1)).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for &sr in &rows {
            let row = &xd[base + sr * w..base + (sr + 1) * w];
            for &sc in &cols {
                out.push(row[sc]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_vec(out, &shape)
}

/// Adjoint of [`resize_nearest`]: scatter-adds gradient back to the source grid.
pub fn resize_nearest_adjoint<T: Scalar>(
    dy: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let r = dy.rank();
    let oh = dy.shape()[r - 2];
    let ow = dy.shape()[r - 1];
    let planes: usize = dy.shape()[..r - 2].iter().product();
    let rows: Vec<usize> = (0..oh).map(|i| (i * h / oh).min(h - 1)).collect();
    let cols: Vec<usize> = (0..ow).map(|j| (j * w / ow).min(w - 1)).collect();
    let dyd = dy.data();
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let obase = p * h * w;
        for (i, &sr) in rows.iter().enumerate() {
            let yrow = &dyd[p * oh * ow + i * ow..p * oh * ow + (i + 1) * ow];
            for (j, &sc) in cols.iter().enumerate() {
                out[obase + sr * w + sc] = out[obase + sr * w + sc] + yrow[j];
            }
        }
    }
    let mut shape = dy.shape().to_vec();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::from_vec(out, &shape)
}

/// Bilinear resample over the last two axes (half-pixel centers). The
/// same-size case is an exact copy.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 || oh == 0 || ow == 0 {
        return Err(Error::shape(format!(
            "resize_bilinear to {oh}x{ow} on {:?}",
            x.shape()
        )));
    }
    let h = x.shape()[r - 2];
    let w = x.shape()[r - 1];
    if h == oh && w == ow {
        return Ok(x.clone());
    }
    let planes: usize = x.shape()[..r - 2].iter().product();
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let src = src.max(0.0).min((n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<(usize, usize, f64)> = (0..oh).map(|i| coord(i, h, oh)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..ow).map(|j| coord(j, w, ow)).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let v00 = xd[base + r0 * w + c0].as_f64();
                let v01 = xd[base + r0 * w + c1].as_f64();
                let v10 = xd[base + r1 * w + c0].as_f64();
                let v11 = xd[base + r1 * w + c1].as_f64();
                let top = v00 + (v01 - v00) * fc;
                let bot = v10 + (v11 - v10) * fc;
                out.push(T::from_f64(top + (bot - top) * fr));
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_vec(out, &shape)
}

/// Softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let m = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
        let mut sum = T::zero();
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out[r * n..(r + 1) * n].iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::from_vec(out, x.shape()).expect("same shape")
}

/// Backward of softmax over the last axis given its output `y`.
pub fn softmax_last_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let rows = y.numel() / n;
    let yd = y.data();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); y.numel()];
    for r in 0..rows {
        let yr = &yd[r * n..(r + 1) * n];
        let dyr = &dyd[r * n..(r + 1) * n];
        let mut dot = T::zero();
        for (a, b) in yr.iter().zip(dyr) {
            dot = dot + *a * *b;
        }
        for ((o, &yv), &gv) in dx[r * n..(r + 1) * n].iter_mut().zip(yr).zip(dyr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::from_vec(dx, y.shape()).expect("same shape")
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    Tensor::scalar(acc)
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = sum_all(x);
    Tensor::scalar(s.data()[0] / T::from_usize(x.numel()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matmul_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: &ConvSpec,
    ) -> Tensor<f64> {
        let (n, c, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = spec.out_extent(h, kh).unwrap();
        let ow = spec.out_extent(wi, kw).unwrap();
        let mut out = vec![0.0f64; n * f * oh * ow];
        for nn in 0..n {
            for ff in 0..f {
                for r in 0..oh {
                    for cidx in 0..ow {
                        let mut acc = bias.map(|b| b.data()[ff]).unwrap_or(0.0);
                        for cc in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (r * spec.stride + i * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let iw = (cidx * spec.stride + j * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wi
                                    {
                                        acc += x.at(&[nn, cc, ih as usize, iw as usize])
                                            * w.at(&[ff, cc, i, j]);
                                    }
                                }
                            }
                        }
                        out[((nn * f + ff) * oh + r) * ow + cidx] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(out, &[n, f, oh, ow]).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let eye = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0f32, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c.data(), b.data());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Tensor<f32> = Tensor::zeros(&[3, 4]);
        let r: Tensor<f32> = Tensor::randn(&mut rng, &[4, 2], 1.0);
        let c = matmul(&z, &r).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), &[3, 2]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Tensor<f32> = Tensor::randn(&mut rng, &[5, 6], 1.0);
        let b: Tensor<f32> = Tensor::randn(&mut rng, &[6, 3], 1.0);
        let c = matmul(&a, &b).unwrap();
        let o = matmul_oracle(&a, &b);
        for (x, y) in c.data().iter().zip(&o) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a: Tensor<f32> = Tensor::zeros(&[2, 3]);
        let b: Tensor<f32> = Tensor::zeros(&[4, 2]);
        let e = matmul(&a, &b).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[1, 1, 5, 5], 1.0);
        let w = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_impulse_reproduces_kernel() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let w = Tensor::from_vec((1..=9).map(|v| v as f64).collect(), &[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, &ConvSpec::new(3, 1, 1)).unwrap();
        // Cross-correlation with a delta reproduces the kernel window,
        // flipped (the correlation convention).
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.at(&[0, 0, 1 + i, 1 + j]), w.at(&[0, 0, 2 - i, 2 - j]));
            }
        }
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[1, 2, 8, 8], 1.0);
        let w: Tensor<f64> = Tensor::randn(&mut rng, &[4, 2, 3, 3], 1.0);
        let b: Tensor<f64> = Tensor::randn(&mut rng, &[4], 1.0);
        for spec in [
            ConvSpec::new(3, 2, 1),
            ConvSpec::new(3, 1, 1),
            ConvSpec::new(3, 1, 2).with_dilation(2),
            ConvSpec::new(3, 2, 0),
        ] {
            let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
            let o = conv_oracle(&x, &w, Some(&b), &spec);
            assert_eq!(y.shape(), o.shape());
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((a - b).abs() <= 1e-5, "spec {spec:?}");
            }
        }
    }

    #[test]
    fn conv_kernel_too_large_errors() {
        let x: Tensor<f32> = Tensor::zeros(&[1, 1, 2, 2]);
        let w: Tensor<f32> = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, &ConvSpec::new(5, 1, 0)).is_err());
    }

    #[test]
    fn tconv_identity_and_shape_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[1, 1, 6, 6], 1.0);
        let w = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = tconv2d(&x, &w, None, &ConvSpec::new(1, 1, 0)).unwrap();
        assert_eq!(y.data(), x.data());

        let w2: Tensor<f64> = Tensor::randn(&mut rng, &[3, 2, 4, 4], 1.0);
        let x2: Tensor<f64> = Tensor::randn(&mut rng, &[1, 2, 32, 32], 1.0);
        let spec = ConvSpec::new(4, 2, 1);
        let down = conv2d(&x2, &w2.reshape(&[3, 2, 4, 4]).unwrap(), None, &spec);
        // weight for conv is [F=3, C=2]; reuse as tconv [F=3 -> C=2]
        let down = down.unwrap();
        assert_eq!(down.shape(), &[1, 3, 16, 16]);
        let up = tconv2d(&down, &w2, None, &spec).unwrap();
        assert_eq!(up.shape(), &[1, 2, 32, 32]);
    }

    #[test]
    fn tconv_matches_zero_interleave_oracle() {
        // Transposed conv with stride s == zero-interleave by s then conv
        // with the flipped kernel at padding (span-1-p).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[1, 2, 5, 5], 1.0);
        let w: Tensor<f64> = Tensor::randn(&mut rng, &[2, 3, 3, 3], 1.0);
        let spec = ConvSpec::new(3, 2, 1);
        let y = tconv2d(&x, &w, None, &spec).unwrap();

        let (h, wi, s) = (5usize, 5usize, 2usize);
        let gh = (h - 1) * s + 1;
        let gw = (wi - 1) * s + 1;
        let mut grown = Tensor::<f64>::zeros(&[1, 2, gh, gw]);
        for c in 0..2 {
            for r in 0..h {
                for cc in 0..wi {
                    let v = x.at(&[0, c, r, cc]);
                    grown.data_mut()[(c * gh + r * s) * gw + cc * s] = v;
                }
            }
        }
        // flip kernel spatially and swap in/out channel roles
        let mut wf = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        for f in 0..2 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let v = w.at(&[f, c, i, j]);
                        wf.data_mut()[((c * 2 + f) * 3 + (2 - i)) * 3 + (2 - j)] = v;
                    }
                }
            }
        }
        let oracle = conv2d(&grown, &wf, None, &ConvSpec::new(3, 1, 1)).unwrap();
        assert_eq!(y.shape(), oracle.shape());
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn conv_tconv_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in [
            ConvSpec::new(3, 1, 1),
            ConvSpec::new(4, 2, 1),
            ConvSpec::new(3, 2, 1).with_dilation(2),
        ] {
            let x: Tensor<f64> = Tensor::randn(&mut rng, &[2, 3, 12, 12], 1.0);
            let w: Tensor<f64> = Tensor::randn(&mut rng, &[4, 3, spec.kernel_h, spec.kernel_w], 1.0);
            let y = conv2d(&x, &w, None, &spec).unwrap();
            let probe: Tensor<f64> = Tensor::randn(&mut rng, y.shape(), 1.0);
            let back = conv2d_grad_x(&probe, &w, &spec, (12, 12)).unwrap();
            let lhs: f64 = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-4,
                "adjoint identity failed for {spec:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::full(&[2, 5], 3.0f64);
        let y = softmax_last(&x);
        for &v in y.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[2, 3, 4, 5], 1.0);
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &perm).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        let back = permute(&y, &inverse_perm(&perm)).unwrap();
        assert_eq!(back.data(), x.data());
        // spot check one element
        assert_eq!(y.at(&[1, 0, 2, 2]), x.at(&[0, 2, 1, 2]));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f64> = Tensor::randn(&mut rng, &[2, 3, 4], 1.0);
        let b: Tensor<f64> = Tensor::randn(&mut rng, &[2, 2, 4], 1.0);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5, 4]);
        let a2 = slice_axis(&c, 1, 0, 3).unwrap();
        let b2 = slice_axis(&c, 1, 3, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn nearest_resize_block_replication() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = resize_nearest(&x, 4, 4).unwrap();
        let expect = [
            1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
        // idempotent at identical size: bitwise equal
        let same = resize_nearest(&x, 2, 2).unwrap();
        assert!(same.bitwise_eq(&x));
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[3, 7, 9], 1.0);
        let y = resize_bilinear(&x, 7, 9).unwrap();
        assert!(y.bitwise_eq(&x));
    }
}
