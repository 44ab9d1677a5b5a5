//! Procedural clean images and the small synthetic training set used by the
//! acceptance suite, the CLI `init` command and the benches.

use crate::error::Result;
use crate::rng::{derive_seed, Rng};
use crate::sim::{d_over_r0_to_params, degrade_with_seed, TurbulenceParams};
use crate::tensor::Tensor;
use crate::train::Sample;

/// Dark strokes on a light, gently shaded background: a stand-in for a
/// printed text chart.
pub fn text_chart(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    let bg = rng.uniform_range(0.7, 0.9);
    let gx = rng.uniform_range(-0.1, 0.1);
    let gy = rng.uniform_range(-0.1, 0.1);
    let tint = [rng.uniform_range(0.9, 1.0), rng.uniform_range(0.9, 1.0), rng.uniform_range(0.9, 1.0)];
    let mut img = Tensor::from_fn(&[h, w, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
        ((bg + gx * x + gy * y) * tint[c]) as f32
    });
    let strokes = 4 + rng.below(5);
    for _ in 0..strokes {
        let ink = rng.uniform_range(0.05, 0.3) as f32;
        let horizontal = rng.uniform() < 0.5;
        let (len, thick) = (2 + rng.below(w.max(4) / 2), 1 + rng.below(2));
        let (sh, sw) = if horizontal { (thick, len) } else { (len, thick) };
        let y0 = rng.below(h.saturating_sub(sh).max(1));
        let x0 = rng.below(w.saturating_sub(sw).max(1));
        for y in y0..(y0 + sh).min(h) {
            for x in x0..(x0 + sw).min(w) {
                for c in 0..3 {
                    img.data_mut()[(y * w + x) * 3 + c] = ink;
                }
            }
        }
    }
    img
}

/// Turbulence strength of the toy training set.
pub const TOY_D_OVER_R0: f64 = 2.0;

pub fn toy_params() -> Result<TurbulenceParams> {
    let base = TurbulenceParams {
        corr_length_px: 4.0,
        noise_sigma: 0.005,
        ..Default::default()
    };
    d_over_r0_to_params(TOY_D_OVER_R0, &base)
}

/// `n` (clean, degraded) pairs of `size×size` charts. Pair `i` uses chart seed
/// and degradation seed derived from `(seed, i)`.
pub fn toy_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let params = toy_params()?;
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let clean = text_chart(size, size, s);
            let degraded = degrade_with_seed(&clean, &TurbulenceParams { seed: s, ..params.clone() }, s)?;
            Ok(Sample {
                scene_id: format!("toy_{:03}", i),
                clean: Some(clean),
                degraded,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn charts_are_deterministic_and_in_range() {
        let a = text_chart(32, 32, 5);
        assert_eq!(a, text_chart(32, 32, 5));
        assert_ne!(a, text_chart(32, 32, 6));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn toy_pairs_are_degraded() {
        let pairs = toy_pairs(4, 32, 0).unwrap();
        for p in &pairs {
            let db = psnr(p.clean.as_ref().unwrap(), &p.degraded, 1.0).unwrap();
            assert!(db.is_finite() && db < 40.0, "{}", db);
        }
    }
}
