use crate::error::Result;
use crate::nn::{join, Layer, Module, Param};
use crate::tensor::{Real, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Layer normalization over the channel axis, independently at each pixel.
#[derive(Clone, Debug)]
pub struct LayerNormChannel<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNormChannel<T> {
    pub fn new(c: usize) -> Self {
        LayerNormChannel {
            gamma: Param::new(Tensor::full(&[c], T::one())),
            beta: Param::new(Tensor::zeros(&[c])),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Real> Module<T> for LayerNormChannel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl<T: Real> Layer<T> for LayerNormChannel<T> {
    type Cache = LayerNormCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let (h, w, c) = x.hwc()?;
        if c != self.channels() {
            return Err(crate::Error::shape("layernorm_channel", format!("{} channels", self.channels()), c.to_string()));
        }
        let n = T::of(c as f64);
        let eps = T::of(LAYERNORM_EPS);
        let mut xhat = Tensor::zeros(&[h, w, c]);
        let mut y = Tensor::zeros(&[h, w, c]);
        let mut inv_std = Vec::with_capacity(h * w);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for ((xp, hp), yp) in x
            .data()
            .chunks_exact(c)
            .zip(xhat.data_mut().chunks_exact_mut(c))
            .zip(y.data_mut().chunks_exact_mut(c))
        {
            let mean = xp.iter().copied().sum::<T>() / n;
            let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for i in 0..c {
                hp[i] = (xp[i] - mean) * is;
                yp[i] = hp[i] * g[i] + b[i];
            }
            inv_std.push(is);
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    fn backward(&mut self, cache: &LayerNormCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        cache.xhat.same_shape(grad, "layernorm_channel backward")?;
        let (h, w, c) = grad.hwc()?;
        let n = T::of(c as f64);
        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(&[h, w, c]);
        let mut dxhat = vec![T::zero(); c];
        let dgamma = self.gamma.grad.data_mut();
        for (((gp, hp), dxp), &is) in grad
            .data()
            .chunks_exact(c)
            .zip(cache.xhat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
            .zip(&cache.inv_std)
        {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..c {
                dgamma[i] += gp[i] * hp[i];
                dxhat[i] = gp[i] * g[i];
                m1 += dxhat[i];
                m2 += dxhat[i] * hp[i];
            }
            m1 /= n;
            m2 /= n;
            for i in 0..c {
                dxp[i] = is * (dxhat[i] - m1 - hp[i] * m2);
            }
        }
        let dbeta = self.beta.grad.data_mut();
        for gp in grad.data().chunks_exact(c) {
            for (d, &v) in dbeta.iter_mut().zip(gp) {
                *d += v;
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer_with;
    use crate::nn::perturb;
    use crate::rng::Rng;

    #[test]
    fn normalizes_each_pixel() {
        let x: Tensor<f64> = Rng::new(7).normal_tensor(&[4, 3, 6], 3.0);
        let y = LayerNormChannel::new(6).apply(&x).unwrap();
        for p in y.data().chunks_exact(6) {
            let m: f64 = p.iter().sum::<f64>() / 6.0;
            let v: f64 = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shift_invariant() {
        let x: Tensor<f64> = Rng::new(8).normal_tensor(&[3, 3, 5], 1.0);
        let ln = LayerNormChannel::new(5);
        let a = ln.apply(&x).unwrap();
        let b = ln.apply(&x.map(|v| v + 4.25)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn gradcheck_three_seeds() {
        for seed in 0..3 {
            let mut ln = LayerNormChannel::<f64>::new(4);
            perturb(&mut ln, &mut Rng::new(100 + seed), 0.3);
            let r = check_layer_with(ln, &[3, 4, 4], seed).unwrap();
            assert!(r.passed(1e-4), "{}", r);
        }
    }
}
