//! 2-D discrete Fourier transforms over the last two axes.
//!
//! Power-of-two extents take the iterative radix-2 path; everything else
//! falls back to a naive O(N^2) DFT so the module stays dependency-free.
//! Forward is unnormalized, the inverse carries the 1/(H*W) factor.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn is_pow2(n: usize) -> bool {
    n.is_power_of_two()
}

/// In-place 1-D FFT of (re, im). `inverse` conjugates the twiddles and does
/// NOT apply any 1/N scaling.
fn fft1d<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    if n == 1 {
        return;
    }
    if is_pow2(n) {
        fft1d_radix2(re, im, inverse);
    } else {
        dft1d_naive(re, im, inverse);
    }
}

fn fft1d_radix2<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (T::from_f64(ang.cos()), T::from_f64(ang.sin()));
        let half = len / 2;
        let mut base = 0;
        while base < n {
            let mut cr = T::one();
            let mut ci = T::zero();
            for k in 0..half {
                let (ur, ui) = (re[base + k], im[base + k]);
                let (vr0, vi0) = (re[base + k + half], im[base + k + half]);
                let vr = vr0 * cr - vi0 * ci;
                let vi = vr0 * ci + vi0 * cr;
                re[base + k] = ur + vr;
                im[base + k] = ui + vi;
                re[base + k + half] = ur - vr;
                im[base + k + half] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            base += len;
        }
        len <<= 1;
    }
}

fn dft1d_naive<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![T::zero(); n];
    let mut out_im = vec![T::zero(); n];
    for k in 0..n {
        let mut sr = T::zero();
        let mut si = T::zero();
        for t in 0..n {
            let ang = sign * 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            let (c, s) = (T::from_f64(ang.cos()), T::from_f64(ang.sin()));
            sr = sr + re[t] * c - im[t] * s;
            si = si + re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// 2-D transform over the last two axes of equally-shaped (re, im) buffers.
fn fft2_buffers<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let planes = re.len() / (h * w);
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    for p in 0..planes {
        let off = p * h * w;
        for r in 0..h {
            let s = off + r * w;
            fft1d(&mut re[s..s + w], &mut im[s..s + w], inverse);
        }
        for c in 0..w {
            for r in 0..h {
                col_re[r] = re[off + r * w + c];
                col_im[r] = im[off + r * w + c];
            }
            fft1d(&mut col_re, &mut col_im, inverse);
            for r in 0..h {
                re[off + r * w + c] = col_re[r];
                im[off + r * w + c] = col_im[r];
            }
        }
    }
}

fn last_two(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "fft2 needs rank >= 2, got {shape:?}"
        )));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Unnormalized forward 2-D DFT of a real tensor over its last two axes.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = last_two(x.shape())?;
    let mut re = x.data().to_vec();
    let mut im = vec![T::zero(); re.len()];
    fft2_buffers(&mut re, &mut im, h, w, false);
    Ok((
        Tensor::from_vec(re, x.shape())?,
        Tensor::from_vec(im, x.shape())?,
    ))
}

/// Inverse 2-D DFT with 1/(H*W) scaling. Returns complex (re, im).
pub fn ifft2<T: Scalar>(re: &Tensor<T>, im: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if re.shape() != im.shape() {
        return Err(Error::shape(format!(
            "ifft2 re {:?} vs im {:?}",
            re.shape(),
            im.shape()
        )));
    }
    let (h, w) = last_two(re.shape())?;
    let mut or = re.data().to_vec();
    let mut oi = im.data().to_vec();
    fft2_buffers(&mut or, &mut oi, h, w, true);
    let scale = T::from_f64(1.0 / (h * w) as f64);
    for v in or.iter_mut() {
        *v = *v * scale;
    }
    for v in oi.iter_mut() {
        *v = *v * scale;
    }
    Ok((
        Tensor::from_vec(or, re.shape())?,
        Tensor::from_vec(oi, re.shape())?,
    ))
}

/// Forward transform with real/imag planes stacked along a channel axis:
/// `[.., C, H, W] -> [.., 2C, H, W]` (re channels first, then im).
pub fn fft2_stacked<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape(format!(
            "fft2_stacked needs rank >= 3, got {:?}",
            x.shape()
        )));
    }
    let (re, im) = fft2(x)?;
    let sh = x.shape();
    let caxis = sh.len() - 3;
    let c = sh[caxis];
    let hw = sh[sh.len() - 2] * sh[sh.len() - 1];
    let batch: usize = sh[..caxis].iter().product();
    let mut out_shape = sh.to_vec();
    out_shape[caxis] = 2 * c;
    let mut out = vec![T::zero(); batch * 2 * c * hw];
    let rd = re.data();
    let id = im.data();
    for b in 0..batch {
        let src = b * c * hw;
        let dst = b * 2 * c * hw;
        out[dst..dst + c * hw].copy_from_slice(&rd[src..src + c * hw]);
        out[dst + c * hw..dst + 2 * c * hw].copy_from_slice(&id[src..src + c * hw]);
    }
    Tensor::from_vec(out, &out_shape)
}

/// Inverse of [`fft2_stacked`] keeping only the real part:
/// `[.., 2C, H, W] -> [.., C, H, W]`.
pub fn ifft2_stacked_real<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape(format!(
            "ifft2_stacked_real needs rank >= 3, got {:?}",
            x.shape()
        )));
    }
    let sh = x.shape();
    let caxis = sh.len() - 3;
    if sh[caxis] % 2 != 0 {
        return Err(Error::shape(format!(
            "stacked spectrum needs even channel count, got {:?}",
            sh
        )));
    }
    let c = sh[caxis] / 2;
    let h = sh[sh.len() - 2];
    let w = sh[sh.len() - 1];
    let hw = h * w;
    let batch: usize = sh[..caxis].iter().product();
    let mut re = vec![T::zero(); batch * c * hw];
    let mut im = vec![T::zero(); batch * c * hw];
    let xd = x.data();
    for b in 0..batch {
        let src = b * 2 * c * hw;
        let dst = b * c * hw;
        re[dst..dst + c * hw].copy_from_slice(&xd[src..src + c * hw]);
        im[dst..dst + c * hw].copy_from_slice(&xd[src + c * hw..src + 2 * c * hw]);
    }
    fft2_buffers(&mut re, &mut im, h, w, true);
    let scale = T::from_f64(1.0 / hw as f64);
    for v in re.iter_mut() {
        *v = *v * scale;
    }
    let mut out_shape = sh.to_vec();
    out_shape[caxis] = c;
    Tensor::from_vec(re, &out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for ku in 0..h {
            for kv in 0..w {
                let mut sr = 0.0;
                let mut si = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((ku * u) as f64 / h as f64 + (kv * v) as f64 / w as f64);
                        sr += x[u * w + v] * ang.cos();
                        si += x[u * w + v] * ang.sin();
                    }
                }
                re[ku * w + kv] = sr;
                im[ku * w + kv] = si;
            }
        }
        (re, im)
    }

    #[test]
    fn dc_bin_of_constant_input() {
        let c = 3.25f64;
        let x = Tensor::full(&[4, 8], c);
        let (re, im) = fft2(&x).unwrap();
        assert!((re.data()[0] - c * 32.0).abs() < 1e-9);
        for i in 1..32 {
            assert!(re.data()[i].abs() < 1e-9);
        }
        assert!(im.max_abs() < 1e-9);
    }

    #[test]
    fn matches_naive_dft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[8, 8], 1.0);
        let (re, im) = fft2(&x).unwrap();
        let (ore, oim) = naive_dft2(x.data(), 8, 8);
        for i in 0..64 {
            assert!((re.data()[i] - ore[i]).abs() < 1e-6);
            assert!((im.data()[i] - oim[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for shape in [&[4usize, 8][..], &[2, 6, 10][..], &[16, 16][..]] {
            let x: Tensor<f64> = Tensor::randn(&mut rng, shape, 1.0);
            let (re, im) = fft2(&x).unwrap();
            let (back, resid) = ifft2(&re, &im).unwrap();
            for i in 0..x.numel() {
                assert!((back.data()[i] - x.data()[i]).abs() < 1e-10);
            }
            assert!(resid.max_abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f32> = Tensor::randn(&mut rng, &[32, 32], 1.0);
        let (re, im) = fft2(&x).unwrap();
        let (back, _) = ifft2(&re, &im).unwrap();
        for i in 0..x.numel() {
            assert!((back.data()[i] - x.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn parseval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[8, 8], 1.0);
        let (re, im) = fft2(&x).unwrap();
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = re
            .data()
            .iter()
            .zip(im.data())
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            / 64.0;
        assert!((spatial - spectral).abs() / spatial.abs() < 1e-4);
    }

    #[test]
    fn stacked_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = Tensor::randn(&mut rng, &[2, 3, 4, 4], 1.0);
        let spec = fft2_stacked(&x).unwrap();
        assert_eq!(spec.shape(), &[2, 6, 4, 4]);
        let back = ifft2_stacked_real(&spec).unwrap();
        for i in 0..x.numel() {
            assert!((back.data()[i] - x.data()[i]).abs() < 1e-10);
        }
    }
}
