use crate::error::{Error, Result};
use crate::nn::{join, Layer, Module, Param, Pointwise};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Multi-head channel attention.
///
/// Attention is computed between channels rather than pixels, so each head
/// builds a `d×d` map (`d = C/heads`) whose cost is linear in the pixel count.
/// For head channels `j, i` over `N` pixels:
///
/// ```text
/// A[j][i] = softmax_i( Σ_n q[n,j]·k[n,i] / (α·N) )
/// out[n,j] = Σ_i A[j][i]·v[n,i]
/// y = proj(out) + x
/// ```
#[derive(Clone, Debug)]
pub struct Mhca<T = f32> {
    pub q: Pointwise<T>,
    pub k: Pointwise<T>,
    pub v: Pointwise<T>,
    pub proj: Pointwise<T>,
    /// One temperature per head, relative to the pixel count.
    pub alpha: Param<T>,
    pub heads: usize,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct MhcaCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Per head, `d×d` row-major logits before the α·N division.
    raw: Vec<Vec<T>>,
    attn: Vec<Vec<T>>,
    proj_in: Tensor<T>,
}

impl<T: Real> Mhca<T> {
    pub fn new(c: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(c, heads)?;
        Ok(Mhca {
            q: Pointwise::new(c, c, false, rng),
            k: Pointwise::new(c, c, false, rng),
            v: Pointwise::new(c, c, false, rng),
            proj: Pointwise::new(c, c, true, rng),
            alpha: Param::new(Tensor::full(&[heads], T::one())),
            heads,
            residual: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.cout()
    }

    /// Per-head attention maps, each `d×d` row-major with rows summing to 1.
    pub fn attention_weights(&self, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        Ok(self.forward(x)?.1.attn)
    }
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidParam(format!("{} channels not divisible into {} heads", c, heads)));
    }
    Ok(())
}

impl<T: Real> Module<T> for Mhca<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(&join(prefix, "alpha"), &self.alpha);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "alpha"), &mut self.alpha);
    }
}

impl<T: Real> Layer<T> for Mhca<T> {
    type Cache = MhcaCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MhcaCache<T>)> {
        let (h, w, c) = x.hwc()?;
        check_heads(c, self.heads)?;
        let (q, _) = self.q.forward(x)?;
        let (k, _) = self.k.forward(x)?;
        let (v, _) = self.v.forward(x)?;
        let d = c / self.heads;
        let n = T::from_usize(h * w).expect("pixel count");
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut raw = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        let mut out = Tensor::zeros(&[h, w, c]);
        for hd in 0..self.heads {
            let off = hd * d;
            let mut r = vec![T::zero(); d * d];
            for (qp, kp) in qd.chunks_exact(c).zip(kd.chunks_exact(c)) {
                let (qh, kh) = (&qp[off..off + d], &kp[off..off + d]);
                for j in 0..d {
                    let qj = qh[j];
                    for (acc, &ki) in r[j * d..(j + 1) * d].iter_mut().zip(kh) {
                        *acc += qj * ki;
                    }
                }
            }
            let alpha = self.alpha.value.data()[hd] * n;
            let mut a = vec![T::zero(); d * d];
            for j in 0..d {
                let row = &r[j * d..(j + 1) * d];
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / alpha));
                let mut s = T::zero();
                for (o, &v) in a[j * d..(j + 1) * d].iter_mut().zip(row) {
                    *o = (v / alpha - m).exp();
                    s += *o;
                }
                a[j * d..(j + 1) * d].iter_mut().for_each(|o| *o /= s);
            }
            for (vp, op) in vd.chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
                let vh = &vp[off..off + d];
                for j in 0..d {
                    op[off + j] = a[j * d..(j + 1) * d].iter().zip(vh).map(|(&aw, &vv)| aw * vv).sum();
                }
            }
            raw.push(r);
            attn.push(a);
        }
        let (mut y, _) = self.proj.forward(&out)?;
        if self.residual {
            y.add_assign(x)?;
        }
        y.ensure_finite("mhca output")?;
        Ok((
            y,
            MhcaCache {
                x: x.clone(),
                q,
                k,
                v,
                raw,
                attn,
                proj_in: out,
            },
        ))
    }

    fn backward(&mut self, cache: &MhcaCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = cache.x.hwc()?;
        let d = c / self.heads;
        let n = T::from_usize(h * w).expect("pixel count");
        let gout = self.proj.backward(&cache.proj_in, g)?;
        let mut dq = Tensor::zeros(&[h, w, c]);
        let mut dk = Tensor::zeros(&[h, w, c]);
        let mut dv = Tensor::zeros(&[h, w, c]);
        let (qd, kd, vd, gd) = (cache.q.data(), cache.k.data(), cache.v.data(), gout.data());
        for hd in 0..self.heads {
            let off = hd * d;
            let a = &cache.attn[hd];
            let r = &cache.raw[hd];
            let alpha = self.alpha.value.data()[hd];
            let scale = alpha * n;
            let mut da = vec![T::zero(); d * d];
            for ((gp, vp), dvp) in gd
                .chunks_exact(c)
                .zip(vd.chunks_exact(c))
                .zip(dv.data_mut().chunks_exact_mut(c))
            {
                let (gh, vh) = (&gp[off..off + d], &vp[off..off + d]);
                for j in 0..d {
                    let gj = gh[j];
                    let arow = &a[j * d..(j + 1) * d];
                    for i in 0..d {
                        da[j * d + i] += gj * vh[i];
                        dvp[off + i] += gj * arow[i];
                    }
                }
            }
            // Softmax backward, then through the 1/(α·N) scaling.
            let mut dl = vec![T::zero(); d * d];
            let mut dalpha = T::zero();
            for j in 0..d {
                let row = j * d..(j + 1) * d;
                let dot: T = a[row.clone()].iter().zip(&da[row.clone()]).map(|(&x, &y)| x * y).sum();
                for i in row {
                    let dlogit = a[i] * (da[i] - dot);
                    dalpha -= dlogit * r[i] / (scale * alpha);
                    dl[i] = dlogit / scale;
                }
            }
            self.alpha.grad.data_mut()[hd] += dalpha;
            for (((qp, kp), dqp), dkp) in qd
                .chunks_exact(c)
                .zip(kd.chunks_exact(c))
                .zip(dq.data_mut().chunks_exact_mut(c))
                .zip(dk.data_mut().chunks_exact_mut(c))
            {
                let (qh, kh) = (&qp[off..off + d], &kp[off..off + d]);
                for j in 0..d {
                    let drow = &dl[j * d..(j + 1) * d];
                    let mut s = T::zero();
                    for i in 0..d {
                        s += drow[i] * kh[i];
                        dkp[off + i] += drow[i] * qh[j];
                    }
                    dqp[off + j] += s;
                }
            }
        }
        let mut dx = self.q.backward(&cache.x, &dq)?;
        dx.add_assign(&self.k.backward(&cache.x, &dk)?)?;
        dx.add_assign(&self.v.backward(&cache.x, &dv)?)?;
        if self.residual {
            dx.add_assign(g)?;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer_with;
    use crate::nn::perturb;

    #[test]
    fn rows_sum_to_one() {
        let mut rng = Rng::new(11);
        let m = Mhca::<f64>::new(8, 2, &mut rng).unwrap();
        let x = rng.normal_tensor(&[6, 5, 8], 2.0);
        for a in m.attention_weights(&x).unwrap() {
            for row in a.chunks_exact(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_qk_gives_uniform_mixing() {
        let mut rng = Rng::new(12);
        let mut m = Mhca::<f64>::new(4, 2, &mut rng).unwrap();
        m.q.weight.value.fill(0.0);
        m.k.weight.value.fill(0.0);
        let x = rng.normal_tensor(&[3, 3, 4], 1.0);
        for a in m.attention_weights(&x).unwrap() {
            assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
        // Expected output: proj of each head's channel mean of v, plus x.
        let v = m.v.apply(&x).unwrap();
        let mixed = Tensor::from_fn(&[3, 3, 4], |idx| {
            let (p, ch) = (idx / 4, idx % 4);
            let base = p * 4 + (ch / 2) * 2;
            0.5 * (v.data()[base] + v.data()[base + 1])
        });
        let want = m.proj.apply(&mixed).unwrap().add(&x).unwrap();
        assert!(m.apply(&x).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_projection_is_identity() {
        let mut rng = Rng::new(13);
        let mut m = Mhca::<f32>::new(4, 1, &mut rng).unwrap();
        m.proj = Pointwise::zeros(4, 4, true);
        let x = rng.normal_tensor(&[4, 4, 4], 1.0);
        assert_eq!(m.apply(&x).unwrap(), x);
    }

    #[test]
    fn head_divisibility() {
        assert!(Mhca::<f32>::new(6, 4, &mut Rng::new(0)).is_err());
        let m = Mhca::<f32>::new(8, 4, &mut Rng::new(0)).unwrap();
        assert!(m.apply(&Tensor::zeros(&[2, 2, 6])).is_err());
    }

    #[test]
    fn gradcheck_three_seeds() {
        for seed in 0..3 {
            let mut rng = Rng::new(200 + seed);
            let mut m = Mhca::<f64>::new(4, 2, &mut rng).unwrap();
            perturb(&mut m, &mut rng, 0.2);
            let r = check_layer_with(m, &[4, 4, 4], seed).unwrap();
            assert!(r.passed(1e-4), "{}", r);
        }
    }
}
