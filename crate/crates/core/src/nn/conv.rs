use crate::error::{Error, Result};
use crate::nn::{init_fan_in, join, Layer, Module, Param};
use crate::ops::{conv2d, conv2d_zero_backward, upsample2x, upsample2x_backward, Padding};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// 1×1 convolution: a per-pixel linear map `[H,W,Cin] → [H,W,Cout]`.
#[derive(Clone, Debug)]
pub struct Pointwise<T = f32> {
    /// `[Cin, Cout]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Pointwise<T> {
    pub fn new(cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Self {
        Pointwise {
            weight: Param::new(init_fan_in(rng, &[cin, cout], cin)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
        }
    }

    pub fn zeros(cin: usize, cout: usize, bias: bool) -> Self {
        Pointwise {
            weight: Param::new(Tensor::zeros(&[cin, cout])),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
        }
    }

    /// Square identity map.
    pub fn identity(c: usize) -> Self {
        let mut p = Self::zeros(c, c, true);
        for i in 0..c {
            p.weight.value.data_mut()[i * c + i] = T::one();
        }
        p
    }

    pub fn cin(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<T: Real> Module<T> for Pointwise<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl<T: Real> Layer<T> for Pointwise<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w, cin) = x.hwc()?;
        if cin != self.cin() {
            return Err(Error::shape("pointwise", format!("{} input channels", self.cin()), cin.to_string()));
        }
        let cout = self.cout();
        let wt = self.weight.value.data();
        let mut y = Tensor::zeros(&[h, w, cout]);
        for (xp, yp) in x.data().chunks_exact(cin).zip(y.data_mut().chunks_exact_mut(cout)) {
            if let Some(b) = &self.bias {
                yp.copy_from_slice(b.value.data());
            }
            for (i, &v) in xp.iter().enumerate() {
                for (o, &wv) in yp.iter_mut().zip(&wt[i * cout..(i + 1) * cout]) {
                    *o += v * wv;
                }
            }
        }
        Ok((y, x.clone()))
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, cin) = x.hwc()?;
        let cout = self.cout();
        if g.shape() != [h, w, cout] {
            return Err(Error::shape("pointwise backward", format!("[{}, {}, {}]", h, w, cout), format!("{:?}", g.shape())));
        }
        let wt = self.weight.value.data();
        let dw = self.weight.grad.data_mut();
        let mut dx = Tensor::zeros(&[h, w, cin]);
        for ((xp, gp), dxp) in x
            .data()
            .chunks_exact(cin)
            .zip(g.data().chunks_exact(cout))
            .zip(dx.data_mut().chunks_exact_mut(cin))
        {
            for i in 0..cin {
                let xi = xp[i];
                let wrow = &wt[i * cout..(i + 1) * cout];
                let dwrow = &mut dw[i * cout..(i + 1) * cout];
                let mut s = T::zero();
                for ((d, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(gp) {
                    *d += xi * gv;
                    s += gv * wv;
                }
                dxp[i] = s;
            }
        }
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for gp in g.data().chunks_exact(cout) {
                for (d, &gv) in db.iter_mut().zip(gp) {
                    *d += gv;
                }
            }
        }
        Ok(dx)
    }
}

/// Per-channel 3×3 convolution with zero padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3<T = f32> {
    /// `[3, 3, C]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> DepthwiseConv3x3<T> {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        DepthwiseConv3x3 {
            weight: Param::new(init_fan_in(rng, &[3, 3, c], 9)),
            bias: Param::new(Tensor::zeros(&[c])),
        }
    }

    /// Centre tap 1, all others 0.
    pub fn delta(c: usize) -> Self {
        let mut wt = Tensor::zeros(&[3, 3, c]);
        wt.data_mut()[4 * c..5 * c].iter_mut().for_each(|v| *v = T::one());
        DepthwiseConv3x3 {
            weight: Param::new(wt),
            bias: Param::new(Tensor::zeros(&[c])),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape()[2]
    }
}

impl<T: Real> Module<T> for DepthwiseConv3x3<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for DepthwiseConv3x3<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w, c) = x.hwc()?;
        if c != self.channels() {
            return Err(Error::shape("depthwise_conv3x3", format!("{} channels", self.channels()), c.to_string()));
        }
        let src = x.data();
        let wt = self.weight.value.data();
        let mut y = Tensor::zeros(&[h, w, c]);
        let dst = y.data_mut();
        for yy in 0..h {
            for xx in 0..w {
                let out = &mut dst[(yy * w + xx) * c..][..c];
                out.copy_from_slice(self.bias.value.data());
                for ky in 0..3 {
                    let iy = yy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &src[(iy as usize * w + ix as usize) * c..][..c];
                        let k = &wt[(ky * 3 + kx) * c..][..c];
                        for ((o, &v), &kv) in out.iter_mut().zip(px).zip(k) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
        Ok((y, x.clone()))
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = x.hwc()?;
        x.same_shape(g, "depthwise_conv3x3 backward")?;
        let src = x.data();
        let gd = g.data();
        let wt = self.weight.value.data();
        let dw = self.weight.grad.data_mut();
        let mut dx = Tensor::zeros(&[h, w, c]);
        let dxd = dx.data_mut();
        for yy in 0..h {
            for xx in 0..w {
                let go = &gd[(yy * w + xx) * c..][..c];
                for ky in 0..3 {
                    let iy = yy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let p = (iy as usize * w + ix as usize) * c;
                        let t = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dw[t + ch] += src[p + ch] * go[ch];
                            dxd[p + ch] += wt[t + ch] * go[ch];
                        }
                    }
                }
            }
        }
        let db = self.bias.grad.data_mut();
        for gp in gd.chunks_exact(c) {
            for (d, &gv) in db.iter_mut().zip(gp) {
                *d += gv;
            }
        }
        Ok(dx)
    }
}

/// Full `k×k` convolution with zero "same" padding and optional stride.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    /// `[k, k, Cin, Cout]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        Conv2d {
            weight: Param::new(init_fan_in(rng, &[k, k, cin, cout], k * k * cin)),
            bias: Param::new(Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn zeros(k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Conv2d {
            weight: Param::new(Tensor::zeros(&[k, k, cin, cout])),
            bias: Param::new(Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape()[3]
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut y = conv2d(x, &self.weight.value, self.stride, Padding::Zero)?;
        let c = self.cout();
        let b = self.bias.value.data();
        for yp in y.data_mut().chunks_exact_mut(c) {
            for (o, &bv) in yp.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok((y, x.clone()))
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let dx = conv2d_zero_backward(x, &self.weight.value, self.stride, g, &mut self.weight.grad)?;
        let c = self.cout();
        let db = self.bias.grad.data_mut();
        for gp in g.data().chunks_exact(c) {
            for (d, &gv) in db.iter_mut().zip(gp) {
                *d += gv;
            }
        }
        Ok(dx)
    }
}

/// Stride-2 3×3 convolution doubling the channel count: `[H,W,C] → [H/2,W/2,2C]`.
#[derive(Clone, Debug)]
pub struct DownsampleLearned<T = f32> {
    pub conv: Conv2d<T>,
}

impl<T: Real> DownsampleLearned<T> {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        DownsampleLearned {
            conv: Conv2d::new(3, c, 2 * c, 2, rng),
        }
    }
}

impl<T: Real> Module<T> for DownsampleLearned<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

impl<T: Real> Layer<T> for DownsampleLearned<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w, _) = x.hwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("downsample_learned", "even H and W", format!("{}x{}", h, w)));
        }
        self.conv.forward(x)
    }

    fn backward(&mut self, cache: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.backward(cache, g)
    }
}

/// Nearest ×2 upsampling then a 3×3 convolution halving the channel count.
#[derive(Clone, Debug)]
pub struct UpsampleLearned<T = f32> {
    pub conv: Conv2d<T>,
}

impl<T: Real> UpsampleLearned<T> {
    /// `c_in` must be even.
    pub fn new(c_in: usize, rng: &mut Rng) -> Self {
        UpsampleLearned {
            conv: Conv2d::new(3, c_in, c_in / 2, 1, rng),
        }
    }
}

impl<T: Real> Module<T> for UpsampleLearned<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

impl<T: Real> Layer<T> for UpsampleLearned<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.conv.forward(&upsample2x(x)?)
    }

    fn backward(&mut self, cache: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        upsample2x_backward(&self.conv.backward(cache, g)?)
    }
}
