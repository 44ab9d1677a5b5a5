//! Tilt-then-blur turbulence forward model.
//!
//! A clean image is displaced by a spatially correlated tilt field, blurred
//! by a Gaussian whose width varies smoothly across the frame, and corrupted
//! with additive Gaussian noise:
//!
//! ```text
//! degraded = clip(blur_σ(x)(warp_tilt(clean)) + noise, 0, 1)
//! ```
//!
//! Every call to [`sample_degradation`] draws a fresh realization, so two
//! frames with identical parameters still see different distortions.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::image::{list_pngs, load_image, save_image, BitDepth};
use crate::io::manifest::{ManifestEntry, SceneManifest};
use crate::ops::{gaussian_blur, warp_bilinear};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Real, Tensor};

/// Tilt RMS per unit D/r0, in pixels.
pub const TILT_PX_PER_D_OVER_R0: f64 = 0.8;
/// Maximum blur σ per unit D/r0, in pixels.
pub const BLUR_PX_PER_D_OVER_R0: f64 = 0.5;

fn default_bins() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceParams {
    /// Aperture diameter over Fried parameter. Recorded for provenance; the
    /// magnitudes below are what the model uses.
    pub d_over_r0: f64,
    pub corr_length_px: f64,
    pub tilt_rms_px: f64,
    pub sigma_blur_min: f64,
    pub sigma_blur_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of σ levels the spatially varying blur is interpolated between.
    #[serde(default = "default_bins")]
    pub blur_bins: usize,
}

impl Default for TurbulenceParams {
    fn default() -> Self {
        TurbulenceParams {
            d_over_r0: 1.0,
            corr_length_px: 4.0,
            tilt_rms_px: 0.0,
            sigma_blur_min: 0.0,
            sigma_blur_max: 0.0,
            noise_sigma: 0.0,
            seed: 0,
            blur_bins: default_bins(),
        }
    }
}

impl TurbulenceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        let all = [
            self.d_over_r0,
            self.corr_length_px,
            self.tilt_rms_px,
            self.sigma_blur_min,
            self.sigma_blur_max,
            self.noise_sigma,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite turbulence parameter in {:?}", self));
        }
        if self.d_over_r0 <= 0.0 {
            return bad(format!("d_over_r0 must be > 0, got {}", self.d_over_r0));
        }
        if self.corr_length_px <= 0.0 {
            return bad(format!("corr_length_px must be > 0, got {}", self.corr_length_px));
        }
        if self.tilt_rms_px < 0.0 || self.sigma_blur_min < 0.0 || self.noise_sigma < 0.0 {
            return bad("tilt, blur and noise magnitudes must be >= 0".into());
        }
        if self.sigma_blur_min > self.sigma_blur_max {
            return bad(format!(
                "sigma_blur_min {} exceeds sigma_blur_max {}",
                self.sigma_blur_min, self.sigma_blur_max
            ));
        }
        if self.blur_bins < 2 {
            return bad(format!("blur_bins must be >= 2, got {}", self.blur_bins));
        }
        Ok(())
    }
}

/// Linear map from turbulence strength to tilt and blur magnitudes.
///
/// `tilt_rms_px = 0.8·d`, `sigma_blur_max = 0.5·d`; every other field is
/// copied from `base` (with `sigma_blur_min` capped at the new maximum).
pub fn d_over_r0_to_params(d_over_r0: f64, base: &TurbulenceParams) -> Result<TurbulenceParams> {
    if !(d_over_r0 > 0.0) || !d_over_r0.is_finite() {
        return Err(Error::InvalidParam(format!("d_over_r0 must be finite and > 0, got {}", d_over_r0)));
    }
    let sigma_max = BLUR_PX_PER_D_OVER_R0 * d_over_r0;
    Ok(TurbulenceParams {
        d_over_r0,
        tilt_rms_px: TILT_PX_PER_D_OVER_R0 * d_over_r0,
        sigma_blur_max: sigma_max,
        sigma_blur_min: base.sigma_blur_min.min(sigma_max),
        ..base.clone()
    })
}

/// One realization of the geometric and blur distortions.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationField<T = f32> {
    /// `[H, W, 2]` backward displacement in pixels (x, y).
    pub tilt: Tensor<T>,
    /// `[H, W, 1]` local blur σ in pixels.
    pub sigma_map: Tensor<T>,
    pub noise_sigma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub blur_bins: usize,
}

/// White noise smoothed by a Gaussian of std `corr_length_px`.
fn correlated_field(rng: &mut Rng, h: usize, w: usize, corr: f64, uniform: bool) -> Result<Tensor<f64>> {
    let raw: Tensor<f64> = if uniform {
        rng.uniform_tensor(&[h, w, 1], 0.0, 1.0)
    } else {
        rng.normal_tensor(&[h, w, 1], 1.0)
    };
    gaussian_blur(&raw, corr)
}

/// Draws a tilt field and a σ map.
///
/// The tilt components are smoothed Gaussian noise, centred to zero mean and
/// rescaled so the RMS displacement magnitude equals `tilt_rms_px` exactly.
/// The σ map is smoothed uniform noise min-max normalized to `[0, 1]` and
/// mapped onto `[sigma_blur_min, sigma_blur_max]`. The same random draws are
/// consumed regardless of the magnitudes, so a seed fixes the spatial pattern.
pub fn sample_degradation<T: Real>(params: &TurbulenceParams, h: usize, w: usize, rng: &mut Rng) -> Result<DegradationField<T>> {
    params.validate()?;
    if h < 8 || w < 8 {
        return Err(Error::InvalidParam(format!("degradation field needs at least 8x8, got {}x{}", h, w)));
    }
    let corr = params.corr_length_px;
    let mut tx = correlated_field(rng, h, w, corr, false)?.into_vec();
    let mut ty = correlated_field(rng, h, w, corr, false)?.into_vec();
    for comp in [&mut tx, &mut ty] {
        let mean = comp.iter().sum::<f64>() / comp.len() as f64;
        comp.iter_mut().for_each(|v| *v -= mean);
    }
    let ms = tx.iter().zip(&ty).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
    let scale = if params.tilt_rms_px > 0.0 && ms > 0.0 {
        params.tilt_rms_px / ms.sqrt()
    } else {
        0.0
    };
    let tilt = Tensor::from_fn(&[h, w, 2], |i| {
        let v = if i % 2 == 0 { tx[i / 2] } else { ty[i / 2] };
        T::of(v * scale)
    });

    let u = correlated_field(rng, h, w, corr, true)?;
    let (lo, hi) = u.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (smin, smax) = (params.sigma_blur_min, params.sigma_blur_max);
    let sigma_map = Tensor::from_fn(&[h, w, 1], |i| {
        let t = if hi > lo { (u.data()[i] - lo) / (hi - lo) } else { 0.5 };
        T::of((smin + (smax - smin) * t).clamp(smin, smax))
    });

    Ok(DegradationField {
        tilt,
        sigma_map,
        noise_sigma: params.noise_sigma,
        sigma_min: smin,
        sigma_max: smax,
        blur_bins: params.blur_bins,
    })
}

/// Spatially varying Gaussian blur.
///
/// The image is blurred once per σ level (`blur_bins` levels evenly spanning
/// `[sigma_min, sigma_max]`) and each pixel linearly interpolates between the
/// two levels bracketing its own σ.
pub fn varying_blur<T: Real>(img: &Tensor<T>, field: &DegradationField<T>) -> Result<Tensor<T>> {
    let (smin, smax) = (field.sigma_min, field.sigma_max);
    if smax == 0.0 {
        return Ok(img.clone());
    }
    if smax == smin {
        return gaussian_blur(img, smin);
    }
    let bins = field.blur_bins.max(2);
    let levels: Vec<Tensor<T>> = (0..bins)
        .map(|k| gaussian_blur(img, smin + (smax - smin) * k as f64 / (bins - 1) as f64))
        .collect::<Result<_>>()?;
    let (h, w, c) = img.hwc()?;
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for p in 0..h * w {
        let s = field.sigma_map.data()[p].f64();
        let t = ((s - smin) / (smax - smin)).clamp(0.0, 1.0) * (bins - 1) as f64;
        let k0 = (t.floor() as usize).min(bins - 2);
        let f = T::of(t - k0 as f64);
        let (a, b) = (levels[k0].data(), levels[k0 + 1].data());
        for ch in 0..c {
            let i = p * c + ch;
            dst[i] = a[i] + f * (b[i] - a[i]);
        }
    }
    Ok(out)
}

/// Warp by the tilt, blur by the σ map, add noise, clip to `[0, 1]`.
pub fn apply_degradation<T: Real>(img: &Tensor<T>, field: &DegradationField<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    let (h, w, _) = img.hwc()?;
    if field.tilt.shape() != [h, w, 2] || field.sigma_map.shape() != [h, w, 1] {
        return Err(Error::shape(
            "apply_degradation",
            format!("field for {}x{}", h, w),
            format!("tilt {:?}, sigma {:?}", field.tilt.shape(), field.sigma_map.shape()),
        ));
    }
    let warped = warp_bilinear(img, &field.tilt)?;
    let mut out = varying_blur(&warped, field)?;
    if field.noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += T::of(field.noise_sigma * rng.normal());
        }
    }
    let (zero, one) = (T::zero(), T::one());
    for v in out.data_mut() {
        *v = v.max(zero).min(one);
    }
    Ok(out)
}

/// Degrades `clean` with a fresh field drawn from `Rng::new(seed)`.
pub fn degrade_with_seed<T: Real>(clean: &Tensor<T>, params: &TurbulenceParams, seed: u64) -> Result<Tensor<T>> {
    let (h, w, _) = clean.hwc()?;
    let mut rng = Rng::new(seed);
    let field = sample_degradation(params, h, w, &mut rng)?;
    apply_degradation(clean, &field, &mut rng)
}

/// Writes `count` (clean, degraded) pairs plus `manifest.json` into `out_dir`.
///
/// Pair `i` degrades source image `i mod n` (sources sorted by name) with
/// sub-seed `derive_seed(master_seed, i)`. Clean sources are copied verbatim
/// into `out_dir/clean/`, degraded frames go to `out_dir/degraded/`.
pub fn synthesize_dataset(
    clean_dir: &Path,
    out_dir: &Path,
    params: &TurbulenceParams,
    count: usize,
    master_seed: u64,
) -> Result<SceneManifest> {
    params.validate()?;
    let sources = list_pngs(clean_dir)?;
    if sources.is_empty() {
        return Err(Error::InvalidParam(format!("no PNG images in {}", clean_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = SceneManifest::new(out_dir);
    if count > 0 {
        for d in ["clean", "degraded"] {
            let p = out_dir.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let used = sources.len().min(count);
        for src in &sources[..used] {
            let dst = out_dir.join("clean").join(src.file_name().unwrap_or_default());
            std::fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        let entries: Vec<ManifestEntry> = (0..count)
            .into_par_iter()
            .map(|i| {
                let src = &sources[i % sources.len()];
                let seed = derive_seed(master_seed, i as u64);
                let pair_params = TurbulenceParams { seed, ..params.clone() };
                let clean = load_image(src)?;
                let degraded = degrade_with_seed(&clean, &pair_params, seed)?;
                let scene_id = format!("pair_{:05}", i);
                let degraded_rel = format!("degraded/{}.png", scene_id);
                save_image(&degraded, out_dir.join(&degraded_rel), BitDepth::Eight)?;
                let name = src.file_name().unwrap_or_default().to_string_lossy().into_owned();
                Ok(ManifestEntry {
                    scene_id,
                    clean_path: Some(format!("clean/{}", name)),
                    degraded_path: degraded_rel,
                    seed: Some(seed),
                    params: Some(pair_params),
                })
            })
            .collect::<Result<_>>()?;
        manifest.entries = entries;
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Recomputes an entry's degraded frame from its clean image, seed and params.
pub fn replay_entry(manifest: &SceneManifest, entry: &ManifestEntry) -> Result<Tensor<f32>> {
    let missing = |what: &str| Error::Schema(format!("entry {:?} has no {}", entry.scene_id, what));
    let clean_rel = entry.clean_path.as_deref().ok_or_else(|| missing("clean_path"))?;
    let seed = entry.seed.ok_or_else(|| missing("seed"))?;
    let params = entry.params.as_ref().ok_or_else(|| missing("params"))?;
    let clean = load_image(manifest.resolve(clean_rel))?;
    degrade_with_seed(&clean, params, seed)
}

/// `out_dir/manifest.json`.
pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, depthwise_kernel, gaussian_kernel, gaussian_radius, Padding};

    fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (rng.uniform_range(0.05, 0.2), rng.uniform_range(0.05, 0.2), rng.uniform());
        Tensor::from_fn(&[h, w, 3], |i| {
            let (y, x, ch) = ((i / 3) / w, (i / 3) % w, i % 3);
            0.5 + 0.35 * ((a * x as f64 + c * ch as f64).sin() * (b * y as f64).cos())
        })
    }

    fn params(tilt: f64, smin: f64, smax: f64, noise: f64) -> TurbulenceParams {
        TurbulenceParams {
            tilt_rms_px: tilt,
            sigma_blur_min: smin,
            sigma_blur_max: smax,
            noise_sigma: noise,
            ..Default::default()
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = smooth_image(32, 24, 1);
        let mut rng = Rng::new(5);
        let field = sample_degradation::<f64>(&params(0.0, 0.0, 0.0, 0.0), 32, 24, &mut rng).unwrap();
        assert!(field.tilt.data().iter().all(|&v| v == 0.0));
        let out = apply_degradation(&img, &field, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = params(1.5, 0.2, 1.2, 0.0);
        let a = sample_degradation::<f32>(&p, 16, 16, &mut Rng::new(9)).unwrap();
        let b = sample_degradation::<f32>(&p, 16, 16, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tilt_rms_is_exact_and_centred() {
        let p = params(2.0, 0.0, 0.0, 0.0);
        let f = sample_degradation::<f64>(&p, 128, 128, &mut Rng::new(3)).unwrap();
        let ms: f64 = f.tilt.data().iter().map(|v| v * v).sum::<f64>() / (128.0 * 128.0);
        assert!((ms.sqrt() - 2.0).abs() < 1e-9);
        let bound = 3.0 * 2.0 / 128.0;
        for comp in 0..2 {
            let mean = f.tilt.data().iter().skip(comp).step_by(2).sum::<f64>() / (128.0 * 128.0);
            assert!(mean.abs() < bound);
        }
    }

    /// Normalized autocorrelation of the horizontal tilt at a horizontal lag.
    fn tilt_autocorr(t: &Tensor<f64>, lag: usize) -> f64 {
        let (h, w, _) = t.hwc().unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let a = t.at(y, x, 0);
                den += a * a;
                if x + lag < w {
                    num += a * t.at(y, x + lag, 0);
                }
            }
        }
        num / den
    }

    #[test]
    fn tilt_correlation_decays_with_lag() {
        for corr in [2.0, 4.0, 8.0] {
            let p = TurbulenceParams {
                corr_length_px: corr,
                ..params(1.0, 0.0, 0.0, 0.0)
            };
            let f = sample_degradation::<f64>(&p, 128, 128, &mut Rng::new(21)).unwrap();
            let near = tilt_autocorr(&f.tilt, corr as usize);
            let far = tilt_autocorr(&f.tilt, 4 * corr as usize);
            assert!(near > far, "corr {}: {} <= {}", corr, near, far);
        }
    }

    #[test]
    fn sigma_map_within_range() {
        let p = params(0.0, 0.4, 1.7, 0.0);
        let f = sample_degradation::<f32>(&p, 40, 40, &mut Rng::new(4)).unwrap();
        assert!(f.sigma_map.data().iter().all(|&s| (0.4..=1.7).contains(&s)));
    }

    #[test]
    fn uniform_sigma_equals_global_blur() {
        let img = smooth_image(24, 24, 2);
        let s = 1.3;
        let f = sample_degradation::<f64>(&params(0.0, s, s, 0.0), 24, 24, &mut Rng::new(1)).unwrap();
        let out = apply_degradation(&img, &f, &mut Rng::new(1)).unwrap();
        let k = depthwise_kernel(&gaussian_kernel(s, gaussian_radius(s)).unwrap(), 3).unwrap();
        let direct = conv2d(&img, &k, 1, Padding::Replicate).unwrap();
        assert!(out.max_abs_diff(&direct).unwrap() < 1e-6);
    }

    #[test]
    fn blur_conserves_mean() {
        let img = smooth_image(128, 128, 6);
        let f = sample_degradation::<f64>(&params(0.0, 0.5, 2.0, 0.0), 128, 128, &mut Rng::new(2)).unwrap();
        let out = apply_degradation(&img, &f, &mut Rng::new(2)).unwrap();
        assert!((out.mean() - img.mean()).abs() < 1e-3);
    }

    #[test]
    fn noise_std_matches() {
        let img = Tensor::<f64>::full(&[128, 128, 1], 0.5);
        let f = sample_degradation::<f64>(&params(0.0, 0.0, 0.0, 0.1), 128, 128, &mut Rng::new(2)).unwrap();
        let out = apply_degradation(&img, &f, &mut Rng::new(8)).unwrap();
        let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {}", std);
    }

    #[test]
    fn d_over_r0_mapping() {
        let p = d_over_r0_to_params(3.0, &TurbulenceParams::default()).unwrap();
        assert!((p.tilt_rms_px - 2.4).abs() < 1e-12);
        assert!((p.sigma_blur_max - 1.5).abs() < 1e-12);
        let small = d_over_r0_to_params(1e-9, &TurbulenceParams::default()).unwrap();
        assert!(small.tilt_rms_px < 1e-8 && small.sigma_blur_max < 1e-8);
        let (a, b) = (
            d_over_r0_to_params(1.0, &p).unwrap(),
            d_over_r0_to_params(1.5, &p).unwrap(),
        );
        assert!(a.tilt_rms_px < b.tilt_rms_px);
        assert!(d_over_r0_to_params(0.0, &p).is_err());
        assert!(d_over_r0_to_params(-1.0, &p).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(params(0.0, 2.0, 1.0, 0.0).validate().is_err());
        assert!(params(-1.0, 0.0, 0.0, 0.0).validate().is_err());
        let p = params(1.0, 0.0, 0.0, 0.0);
        assert!(sample_degradation::<f32>(&p, 4, 16, &mut Rng::new(0)).is_err());
    }
}
