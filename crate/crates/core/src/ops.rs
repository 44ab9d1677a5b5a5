//! Low-level image operations on `[H, W, C]` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Border handling for [`conv2d`].
///
/// `Zero` and `Replicate` are "same" paddings: a `k×k` kernel (odd `k`) is
/// centred on each output sample and the output has `ceil(H/stride)` rows.
/// `Valid` only evaluates fully-covered positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
    Valid,
}

fn conv_out_dim(n: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (n - k) / stride + 1,
        _ => n.div_ceil(stride),
    }
}

/// 2-D cross-correlation (no kernel flip).
///
/// `kernel` has shape `[kh, kw, Cin, Cout]` and
/// `out[oy, ox, o] = Σ in[oy·s + ky − kh/2, ox·s + kx − kw/2, i] · kernel[ky, kx, i, o]`
/// (without the centring offset for `Valid`).
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc()?;
    let (kh, kw, kcin, cout) = match kernel.shape() {
        &[a, b, c, d] => (a, b, c, d),
        other => return Err(Error::shape("conv2d", "kernel [kh,kw,Cin,Cout]", format!("{:?}", other))),
    };
    if kcin != cin {
        return Err(Error::shape("conv2d", format!("kernel Cin = {}", cin), kcin.to_string()));
    }
    if stride == 0 {
        return Err(Error::InvalidParam("conv2d stride must be >= 1".into()));
    }
    if padding != Padding::Valid && (kh % 2 == 0 || kw % 2 == 0) {
        return Err(Error::InvalidParam(format!("same padding needs odd kernel, got {}x{}", kh, kw)));
    }
    if padding == Padding::Valid && (kh > h || kw > w) {
        return Err(Error::shape("conv2d", format!("image at least {}x{}", kh, kw), format!("{}x{}", h, w)));
    }
    input.ensure_finite("conv2d input")?;
    kernel.ensure_finite("conv2d kernel")?;

    let (ho, wo) = (conv_out_dim(h, kh, stride, padding), conv_out_dim(w, kw, stride, padding));
    let (rh, rw) = match padding {
        Padding::Valid => (0, 0),
        _ => (kh as isize / 2, kw as isize / 2),
    };
    let src = input.data();
    let ker = kernel.data();
    let mut out = Tensor::zeros(&[ho, wo, cout]);
    let dst = out.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let acc = &mut dst[(oy * wo + ox) * cout..][..cout];
            for ky in 0..kh {
                let mut iy = (oy * stride) as isize + ky as isize - rh;
                if iy < 0 || iy >= h as isize {
                    match padding {
                        Padding::Replicate => iy = iy.clamp(0, h as isize - 1),
                        _ => continue,
                    }
                }
                for kx in 0..kw {
                    let mut ix = (ox * stride) as isize + kx as isize - rw;
                    if ix < 0 || ix >= w as isize {
                        match padding {
                            Padding::Replicate => ix = ix.clamp(0, w as isize - 1),
                            _ => continue,
                        }
                    }
                    let px = &src[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (i, &v) in px.iter().enumerate() {
                        let krow = &ker[kbase + i * cout..][..cout];
                        for (a, &k) in acc.iter_mut().zip(krow) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a zero-padded "same" [`conv2d`] with respect to its input and
/// kernel. The kernel gradient is accumulated into `grad_kernel`.
pub(crate) fn conv2d_zero_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    grad_kernel: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc()?;
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let (ho, wo, gc) = grad_out.hwc()?;
    if gc != cout || ho != h.div_ceil(stride) || wo != w.div_ceil(stride) {
        return Err(Error::shape(
            "conv2d backward",
            format!("[{}, {}, {}]", h.div_ceil(stride), w.div_ceil(stride), cout),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (rh, rw) = (kh as isize / 2, kw as isize / 2);
    let src = input.data();
    let ker = kernel.data();
    let g = grad_out.data();
    let dk = grad_kernel.data_mut();
    let mut grad_in = Tensor::zeros(&[h, w, cin]);
    let dx = grad_in.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &g[(oy * wo + ox) * cout..][..cout];
            for ky in 0..kh {
                let iy = (oy * stride) as isize + ky as isize - rh;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride) as isize + kx as isize - rw;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pbase = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for i in 0..cin {
                        let v = src[pbase + i];
                        let krow = &ker[kbase + i * cout..][..cout];
                        let dkrow = &mut dk[kbase + i * cout..][..cout];
                        let mut s = T::zero();
                        for ((d, &k), &gg) in dkrow.iter_mut().zip(krow).zip(go) {
                            s += gg * k;
                            *d += v * gg;
                        }
                        dx[pbase + i] += s;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Backward bilinear warp: `out(p) = input(p + flow(p))`.
///
/// `flow[..., 0]` is the horizontal (column) displacement and `flow[..., 1]`
/// the vertical (row) displacement, both in pixels. Sample positions are
/// clamped to the image so out-of-range samples take the border value.
pub fn warp_bilinear<T: Real>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    if flow.shape() != [h, w, 2] {
        return Err(Error::shape("warp_bilinear", format!("flow [{}, {}, 2]", h, w), format!("{:?}", flow.shape())));
    }
    flow.ensure_finite("warp_bilinear flow")?;
    let src = input.data();
    let fl = flow.data();
    let (xmax, ymax) = (T::of((w - 1) as f64), T::of((h - 1) as f64));
    let one = T::one();
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = (T::of(x as f64) + fl[2 * p]).max(T::zero()).min(xmax);
            let sy = (T::of(y as f64) + fl[2 * p + 1]).max(T::zero()).min(ymax);
            let (x0f, y0f) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0f, sy - y0f);
            let (x0, y0) = (x0f.to_usize().unwrap_or(0), y0f.to_usize().unwrap_or(0));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                dst[p * c + ch] = src[(y0 * w + x0) * c + ch] * w00
                    + src[(y0 * w + x1) * c + ch] * w01
                    + src[(y1 * w + x0) * c + ch] * w10
                    + src[(y1 * w + x1) * c + ch] * w11;
            }
        }
    }
    Ok(out)
}

/// 2×2 average pooling with stride 2.
pub fn downsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample2x", "even H and W", format!("{}x{}", h, w)));
    }
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(&[h / 2, w / 2, c]);
    let dst = out.data_mut();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                let s = input.at(2 * y, 2 * x, ch)
                    + input.at(2 * y, 2 * x + 1, ch)
                    + input.at(2 * y + 1, 2 * x, ch)
                    + input.at(2 * y + 1, 2 * x + 1, ch);
                dst[(y * (w / 2) + x) * c + ch] = s * quarter;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    let (ho, wo) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let dst = out.data_mut();
    for y in 0..ho {
        for x in 0..wo {
            let s = ((y / 2) * w + x / 2) * c;
            dst[(y * wo + x) * c..][..c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub(crate) fn upsample2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (ho, wo, c) = grad_out.hwc()?;
    let (h, w) = (ho / 2, wo / 2);
    let g = grad_out.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for y in 0..ho {
        for x in 0..wo {
            let d = ((y / 2) * w + x / 2) * c;
            for ch in 0..c {
                dst[d + ch] += g[(y * wo + x) * c + ch];
            }
        }
    }
    Ok(out)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParam(format!("gaussian sigma must be finite and >= 0, got {}", sigma)));
    }
    Ok(())
}

/// Normalized 1-D Gaussian of length `2·radius + 1`; a delta when `sigma == 0`.
pub fn gaussian_kernel_1d<T: Real>(sigma: f64, radius: usize) -> Result<Vec<T>> {
    check_sigma(sigma)?;
    let n = 2 * radius + 1;
    if sigma == 0.0 {
        let mut k = vec![T::zero(); n];
        k[radius] = T::one();
        return Ok(k);
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| T::of(v / total)).collect())
}

/// Normalized 2-D Gaussian kernel of shape `[2r+1, 2r+1]`; a delta when `sigma == 0`.
pub fn gaussian_kernel<T: Real>(sigma: f64, radius: usize) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let n = 2 * radius + 1;
    if sigma == 0.0 {
        let mut k = Tensor::zeros(&[n, n]);
        k.data_mut()[radius * n + radius] = T::one();
        return Ok(k);
    }
    let mut raw = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - radius as f64, x as f64 - radius as f64);
            raw.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = raw.iter().sum();
    Tensor::from_vec(&[n, n], raw.into_iter().map(|v| T::of(v / total)).collect())
}

/// Radius that covers ±3σ.
pub fn gaussian_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Expands a `[k, k]` kernel into a per-channel `[k, k, C, C]` conv kernel.
pub fn depthwise_kernel<T: Real>(kernel: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (kh, kw) = match kernel.shape() {
        &[a, b] => (a, b),
        other => return Err(Error::shape("depthwise_kernel", "[kh, kw]", format!("{:?}", other))),
    };
    let mut out = Tensor::zeros(&[kh, kw, channels, channels]);
    let dst = out.data_mut();
    for t in 0..kh * kw {
        for c in 0..channels {
            dst[(t * channels + c) * channels + c] = kernel.data()[t];
        }
    }
    Ok(out)
}

/// Separable Gaussian blur with clamp-to-edge borders.
///
/// Equal (up to rounding) to `conv2d(img, depthwise_kernel(gaussian_kernel(σ, r)), 1, Replicate)`
/// with `r = ceil(3σ)`.
pub fn gaussian_blur<T: Real>(input: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    let r = gaussian_radius(sigma);
    if sigma == 0.0 {
        check_sigma(sigma)?;
        return Ok(input.clone());
    }
    let k = gaussian_kernel_1d::<T>(sigma, r)?;
    let src = input.data();
    let ri = r as isize;

    let mut tmp = vec![T::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            let d = (y * w + x) * c;
            for (t, &kv) in k.iter().enumerate() {
                let ix = (x as isize + t as isize - ri).clamp(0, w as isize - 1) as usize;
                let s = (y * w + ix) * c;
                for ch in 0..c {
                    tmp[d + ch] += src[s + ch] * kv;
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let iy = (y as isize + t as isize - ri).clamp(0, h as isize - 1) as usize;
            let srow = &tmp[iy * w * c..][..w * c];
            let drow = &mut dst[y * w * c..][..w * c];
            for (d, &s) in drow.iter_mut().zip(srow) {
                *d += s * kv;
            }
        }
    }
    Ok(out)
}

/// Mirror index for reflect padding (edge sample not repeated), valid for any offset.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads bottom/right so the spatial dims become `(ht, wt)`.
pub fn pad_reflect<T: Real>(input: &Tensor<T>, ht: usize, wt: usize) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    if ht < h || wt < w {
        return Err(Error::shape("pad_reflect", format!("target >= {}x{}", h, w), format!("{}x{}", ht, wt)));
    }
    let src = input.data();
    let mut out = Tensor::zeros(&[ht, wt, c]);
    let dst = out.data_mut();
    for y in 0..ht {
        let sy = reflect_index(y as isize, h);
        for x in 0..wt {
            let sx = reflect_index(x as isize, w);
            dst[(y * wt + x) * c..][..c].copy_from_slice(&src[(sy * w + sx) * c..][..c]);
        }
    }
    Ok(out)
}

/// Adjoint of [`pad_reflect`]: folds gradients of padded samples back onto their sources.
pub(crate) fn pad_reflect_backward<T: Real>(grad: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (ht, wt, c) = grad.hwc()?;
    let g = grad.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for y in 0..ht {
        let sy = reflect_index(y as isize, h);
        for x in 0..wt {
            let sx = reflect_index(x as isize, w);
            for ch in 0..c {
                dst[(sy * w + sx) * c + ch] += g[(y * wt + x) * c + ch];
            }
        }
    }
    Ok(out)
}

/// Top-left `h × w` window.
pub fn crop<T: Real>(input: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (hi, wi, c) = input.hwc()?;
    if h > hi || w > wi {
        return Err(Error::shape("crop", format!("at most {}x{}", hi, wi), format!("{}x{}", h, w)));
    }
    let src = input.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for y in 0..h {
        dst[y * w * c..][..w * c].copy_from_slice(&src[y * wi * c..][..w * c]);
    }
    Ok(out)
}

/// Adjoint of [`crop`]: embeds into zeros.
pub(crate) fn crop_backward<T: Real>(grad: &Tensor<T>, ht: usize, wt: usize) -> Result<Tensor<T>> {
    let (h, w, c) = grad.hwc()?;
    let mut out = Tensor::zeros(&[ht, wt, c]);
    let dst = out.data_mut();
    for y in 0..h {
        dst[y * wt * c..][..w * c].copy_from_slice(&grad.data()[y * w * c..][..w * c]);
    }
    Ok(out)
}
