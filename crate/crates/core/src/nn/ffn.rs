use crate::error::Result;
use crate::nn::{gelu, gelu_grad, join, DepthwiseConv3x3, Layer, Module, Param, Pointwise};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Elementwise tanh-approximated GELU.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gelu;

impl<T: Real> Module<T> for Gelu {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Layer<T> for Gelu {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((x.map(gelu), x.clone()))
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        x.zip_map(g, |a, b| gelu_grad(a) * b)
    }
}

/// Locally enhanced feed-forward network:
/// `x → expand (1×1) → depthwise 3×3 → GELU → project (1×1) → + x`.
#[derive(Clone, Debug)]
pub struct Loffn<T = f32> {
    pub expand: Pointwise<T>,
    pub dw: DepthwiseConv3x3<T>,
    pub project: Pointwise<T>,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct LoffnCache<T> {
    x: Tensor<T>,
    e: Tensor<T>,
    dwc: Tensor<T>,
    a: Tensor<T>,
}

/// `⌈expansion·c⌉`.
pub fn hidden_width(c: usize, expansion: f64) -> usize {
    ((expansion * c as f64).ceil() as usize).max(1)
}

impl<T: Real> Loffn<T> {
    pub fn new(c: usize, expansion: f64, rng: &mut Rng) -> Self {
        let hidden = hidden_width(c, expansion);
        Loffn {
            expand: Pointwise::new(c, hidden, true, rng),
            dw: DepthwiseConv3x3::new(hidden, rng),
            project: Pointwise::new(hidden, c, true, rng),
            residual: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.expand.cout()
    }
}

impl<T: Real> Module<T> for Loffn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

impl<T: Real> Layer<T> for Loffn<T> {
    type Cache = LoffnCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LoffnCache<T>)> {
        let (e, _) = self.expand.forward(x)?;
        let (dwc, _) = self.dw.forward(&e)?;
        let a = dwc.map(gelu);
        let (mut y, _) = self.project.forward(&a)?;
        if self.residual {
            y.add_assign(x)?;
        }
        Ok((y, LoffnCache { x: x.clone(), e, dwc, a }))
    }

    fn backward(&mut self, cache: &LoffnCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let da = self.project.backward(&cache.a, g)?;
        let ddw = cache.dwc.zip_map(&da, |v, gv| gelu_grad(v) * gv)?;
        let de = self.dw.backward(&cache.e, &ddw)?;
        let mut dx = self.expand.backward(&cache.x, &de)?;
        if self.residual {
            dx.add_assign(g)?;
        }
        Ok(dx)
    }
}
