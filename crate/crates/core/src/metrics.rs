//! Image quality and text-recognition metrics.
//!
//! PSNR and SSIM compare a restored frame against ground truth. AWDR and
//! AD-LCS score OCR output on restored text scenes:
//!
//! * AWDR averages, over scenes, the fraction of ground-truth words detected.
//! * AD-LCS sums the longest-common-subsequence length of every matched
//!   (detected, true) word pair and divides by the number of scenes only, so
//!   its scale grows with the number of words per scene.
//!
//! Which detection corresponds to which ground-truth word is an input
//! (`word_matches`), produced upstream or by the optional [`greedy_match`].

use std::collections::HashSet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are identical.
pub fn psnr<T: Real>(reference: &Tensor<T>, test: &Tensor<T>, peak: f64) -> Result<f64> {
    reference.same_shape(test, "psnr")?;
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn ssim_window() -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single-channel `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = k.iter().enumerate().map(|(t, kv)| kv * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[(y + t) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity at unit dynamic range.
///
/// Uses an 11×11 Gaussian window (σ = 1.5) evaluated at every fully covered
/// position, `C1 = 0.01²`, `C2 = 0.03²`, averaged over channels.
pub fn ssim<T: Real>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64> {
    reference.same_shape(test, "ssim")?;
    let (h, w, c) = reference.hwc()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("at least {0}x{0}", SSIM_WINDOW), format!("{}x{}", h, w)));
    }
    let k = ssim_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = reference.data().iter().skip(ch).step_by(c).map(|v| v.f64()).collect();
        let y: Vec<f64> = test.data().iter().skip(ch).step_by(c).map(|v| v.f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// Length of the longest common subsequence (not substring), by characters.
pub fn lcs_length(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    lcs_chars(&a, &b)
}

/// [`lcs_length`] with optional Unicode lowercase folding.
pub fn lcs_length_with(a: &str, b: &str, ignore_case: bool) -> usize {
    if ignore_case {
        lcs_length(&a.to_lowercase(), &b.to_lowercase())
    } else {
        lcs_length(a, b)
    }
}

fn lcs_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// OCR output for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrSceneResult {
    pub scene_id: String,
    /// Ground-truth words.
    pub gt_words: Vec<String>,
    /// Recognized strings.
    pub detections: Vec<String>,
    /// `(gt_index, detection_index)` pairs; each ground-truth word matched at most once.
    #[serde(default)]
    pub word_matches: Vec<(usize, usize)>,
}

impl OcrSceneResult {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &(g, d) in &self.word_matches {
            if g >= self.gt_words.len() {
                return Err(Error::Schema(format!(
                    "scene {:?}: gt index {} out of range ({} words)",
                    self.scene_id,
                    g,
                    self.gt_words.len()
                )));
            }
            if d >= self.detections.len() {
                return Err(Error::Schema(format!(
                    "scene {:?}: detection index {} out of range ({} detections)",
                    self.scene_id,
                    d,
                    self.detections.len()
                )));
            }
            if !seen.insert(g) {
                return Err(Error::Schema(format!("scene {:?}: gt index {} matched twice", self.scene_id, g)));
            }
        }
        Ok(())
    }
}

fn sorted_scenes(scenes: &[OcrSceneResult]) -> Result<Vec<&OcrSceneResult>> {
    if scenes.is_empty() {
        return Err(Error::InvalidParam("no OCR scenes to score".into()));
    }
    for s in scenes {
        s.validate()?;
    }
    let mut v: Vec<&OcrSceneResult> = scenes.iter().collect();
    v.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(v)
}

/// Average word detection ratio.
pub fn awdr(scenes: &[OcrSceneResult]) -> Result<f64> {
    let sorted = sorted_scenes(scenes)?;
    let mut total = 0.0;
    for s in &sorted {
        if s.gt_words.is_empty() {
            return Err(Error::InvalidParam(format!("scene {:?} has no ground-truth words", s.scene_id)));
        }
        total += s.word_matches.len() as f64 / s.gt_words.len() as f64;
    }
    Ok(total / sorted.len() as f64)
}

/// Summed LCS over matched words, divided by the number of scenes.
pub fn ad_lcs(scenes: &[OcrSceneResult], ignore_case: bool) -> Result<f64> {
    let sorted = sorted_scenes(scenes)?;
    let total: usize = sorted
        .iter()
        .map(|s| {
            s.word_matches
                .iter()
                .map(|&(g, d)| lcs_length_with(&s.detections[d], &s.gt_words[g], ignore_case))
                .sum::<usize>()
        })
        .sum();
    Ok(total as f64 / sorted.len() as f64)
}

/// Convenience matcher: repeatedly pairs the unused (gt, detection) with the
/// highest LCS, ties broken by lower gt index then lower detection index.
/// Pairs with zero common characters are never matched.
pub fn greedy_match(gt_words: &[String], detections: &[String], ignore_case: bool) -> Vec<(usize, usize)> {
    let mut scores: Vec<(usize, usize, usize)> = Vec::new();
    for (g, gw) in gt_words.iter().enumerate() {
        for (d, dw) in detections.iter().enumerate() {
            let s = lcs_length_with(dw, gw, ignore_case);
            if s > 0 {
                scores.push((s, g, d));
            }
        }
    }
    scores.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut gt_used, mut det_used) = (vec![false; gt_words.len()], vec![false; detections.len()]);
    let mut out = Vec::new();
    for (_, g, d) in scores {
        if !gt_used[g] && !det_used[d] {
            gt_used[g] = true;
            det_used[d] = true;
            out.push((g, d));
        }
    }
    out.sort_unstable();
    out
}

pub(crate) fn ser_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

pub(crate) fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Option::<Db>::deserialize(d)? {
        None => Ok(None),
        Some(Db::Num(v)) => Ok(Some(v)),
        Some(Db::Str(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
        Some(Db::Str(s)) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {:?}", s))),
    }
}

/// Mean PSNR and mean SSIM over `(reference, test)` pairs. A single identical
/// pair makes the mean PSNR infinite.
pub fn mean_image_metrics<T: Real>(pairs: &[(&Tensor<T>, &Tensor<T>)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidParam("no image pairs to evaluate".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (r, t) in pairs {
        p += psnr(r, t, 1.0)?;
        s += ssim(r, t)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// Aggregate evaluation result. Image metrics are present when ground truth
/// exists, text metrics when OCR results were supplied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean PSNR in dB; identical pairs serialize as the string `"inf"`.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db", default)]
    pub psnr_db: Option<f64>,
    #[serde(default)]
    pub ssim: Option<f64>,
    #[serde(default)]
    pub awdr: Option<f64>,
    #[serde(default)]
    pub ad_lcs: Option<f64>,
    /// Number of image pairs behind `psnr_db` / `ssim`.
    pub n_pairs: usize,
    /// Number of OCR scenes behind `awdr` / `ad_lcs`.
    pub n_scenes: usize,
}

/// Formats a dB value, rendering the identical-image sentinel as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{:.4}", v)
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        writeln!(f, "{:<8} {:>12}", "metric", "value")?;
        writeln!(f, "{:<8} {:>12}", "PSNR", self.psnr_db.map_or("-".to_string(), format_db))?;
        writeln!(f, "{:<8} {:>12}", "SSIM", opt(self.ssim))?;
        writeln!(f, "{:<8} {:>12}", "AWDR", opt(self.awdr))?;
        writeln!(f, "{:<8} {:>12}", "AD-LCS", opt(self.ad_lcs))?;
        write!(f, "pairs={} scenes={}", self.n_pairs, self.n_scenes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn scene(id: &str, gt: &[&str], det: &[&str], m: &[(usize, usize)]) -> OcrSceneResult {
        OcrSceneResult {
            scene_id: id.into(),
            gt_words: gt.iter().map(|s| s.to_string()).collect(),
            detections: det.iter().map(|s| s.to_string()).collect(),
            word_matches: m.to_vec(),
        }
    }

    /// Exponential oracle: longest subsequence of `a` (by enumeration) that is
    /// also a subsequence of `b`.
    fn lcs_brute(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let is_subseq = |s: &[char]| {
            let mut it = b.iter();
            s.iter().all(|c| it.any(|x| x == c))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<char> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn psnr_examples() {
        let x = Tensor::<f64>::full(&[4, 4, 1], 1.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let y = Tensor::full(&[4, 4, 1], 0.5);
        assert!((psnr(&x, &y, 1.0).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((psnr(&x, &y, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        assert!(psnr(&x, &Tensor::full(&[4, 5, 1], 0.5), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let clean: Tensor<f64> = Rng::new(1).uniform_tensor(&[64, 64, 1], 0.2, 0.8);
        let mut last = f64::INFINITY;
        for std in [0.01, 0.05, 0.1] {
            let noise: Tensor<f64> = Rng::new(2).normal_tensor(&[64, 64, 1], std);
            let p = psnr(&clean, &clean.add(&noise).unwrap(), 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let x: Tensor<f64> = Rng::new(3).uniform_tensor(&[16, 16, 3], 0.0, 1.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
        let (a, b) = (0.3, 0.7);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&Tensor::<f64>::full(&[12, 12, 1], a), &Tensor::full(&[12, 12, 1], b)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros(&[10, 20, 1]), &Tensor::zeros(&[10, 20, 1])).is_err());
    }

    #[test]
    fn ssim_uncorrelated_noise_near_zero() {
        let a: Tensor<f64> = Rng::new(4).uniform_tensor(&[128, 128, 1], 0.0, 1.0);
        let b: Tensor<f64> = Rng::new(5).uniform_tensor(&[128, 128, 1], 0.0, 1.0);
        assert!(ssim(&a, &b).unwrap().abs() < 0.1);
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length("", "abc"), 0);
        assert_eq!(lcs_length("turbulence", "turbulence"), 10);
        assert_eq!(lcs_length("ABCBDAB", "BDCABA"), 4);
        assert_eq!(lcs_brute("ABCBDAB", "BDCABA"), 4);
        assert_eq!(lcs_length("Cat", "cAT"), 0);
        assert_eq!(lcs_length_with("Cat", "cAT", true), 3);
    }

    #[test]
    fn awdr_examples() {
        let all = vec![scene("a", &["X", "Y"], &["X", "Y"], &[(0, 0), (1, 1)])];
        assert_eq!(awdr(&all).unwrap(), 1.0);
        let two = vec![
            scene("a", &["A", "B", "C", "D"], &["A", "B", "C"], &[(0, 0), (1, 1), (2, 2)]),
            scene("b", &["E", "F"], &["E"], &[(0, 0)]),
        ];
        assert!((awdr(&two).unwrap() - 0.625).abs() < 1e-15);
        let none = vec![scene("a", &["A"], &[], &[]), scene("b", &["B", "C"], &[], &[])];
        assert_eq!(awdr(&none).unwrap(), 0.0);
        assert!(awdr(&[scene("a", &[], &[], &[])]).is_err());
    }

    #[test]
    fn ad_lcs_examples() {
        let one = vec![scene("s", &["CAT", "DOG"], &["CAT", "DG"], &[(0, 0), (1, 1)])];
        assert_eq!(ad_lcs(&one, false).unwrap(), 5.0);
        let none = vec![scene("s", &["CAT"], &["ZZZ"], &[])];
        assert_eq!(ad_lcs(&none, false).unwrap(), 0.0);
        let perfect = vec![scene(
            "s",
            &["abc", "abcde", "abcdefg"],
            &["abc", "abcde", "abcdefg"],
            &[(0, 0), (1, 1), (2, 2)],
        )];
        assert_eq!(ad_lcs(&perfect, false).unwrap(), 15.0);
        let dangling = vec![scene("s", &["CAT"], &["CAT"], &[(0, 3)])];
        assert!(matches!(ad_lcs(&dangling, false), Err(Error::Schema(_))));
    }

    #[test]
    fn greedy_matcher() {
        let gt: Vec<String> = ["CAT", "DOG", "BIRD"].iter().map(|s| s.to_string()).collect();
        let det: Vec<String> = ["BRD", "CAT", "QQ"].iter().map(|s| s.to_string()).collect();
        assert_eq!(greedy_match(&gt, &det, false), vec![(0, 1), (2, 0)]);
    }

    #[test]
    fn report_json_round_trip() {
        let r = MetricsReport {
            psnr_db: Some(f64::INFINITY),
            ssim: Some(1.0),
            awdr: None,
            ad_lcs: Some(5.0),
            n_pairs: 2,
            n_scenes: 1,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<MetricsReport>(&s).unwrap(), r);
        assert!(r.to_string().contains("inf"));
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in "[abc]{0,8}", b in "[abc]{0,8}") {
            prop_assert_eq!(lcs_length(&a, &b), lcs_brute(&a, &b));
        }

        #[test]
        fn lcs_symmetric_bounded_and_extends(a in "[a-d]{0,12}", b in "[a-d]{0,12}", c in proptest::char::range('a', 'z')) {
            let l = lcs_length(&a, &b);
            prop_assert_eq!(l, lcs_length(&b, &a));
            prop_assert!(l <= a.chars().count().min(b.chars().count()));
            prop_assert_eq!(lcs_length(&format!("{}{}", a, c), &format!("{}{}", b, c)), l + 1);
        }

        #[test]
        fn ssim_bounded_and_one_only_when_equal(seed in 0u64..1000, delta in 1e-3f64..0.5) {
            let mut rng = Rng::new(seed);
            let a: Tensor<f64> = rng.uniform_tensor(&[12, 13, 2], 0.0, 1.0);
            let b: Tensor<f64> = rng.uniform_tensor(&[12, 13, 2], 0.0, 1.0);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let mut c = a.clone();
            let i = rng.below(c.len());
            c.data_mut()[i] += delta;
            prop_assert!(ssim(&a, &c).unwrap() < 1.0);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn awdr_order_invariant_and_ad_lcs_duplication(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let words = ["ALPHA", "BETA", "GAMMA", "DELTA", "EPS"];
            let scenes: Vec<OcrSceneResult> = (0..4).map(|i| {
                let k = 1 + rng.below(5);
                let gt: Vec<String> = (0..k).map(|_| words[rng.below(5)].to_string()).collect();
                let det: Vec<String> = gt.iter().map(|w| w.chars().filter(|_| rng.uniform() > 0.3).collect()).collect();
                let matches = (0..k).filter(|_| rng.uniform() > 0.4).map(|g| (g, g)).collect();
                OcrSceneResult { scene_id: format!("s{}", i), gt_words: gt, detections: det, word_matches: matches }
            }).collect();
            let mut rev = scenes.clone();
            rev.reverse();
            prop_assert_eq!(awdr(&scenes).unwrap(), awdr(&rev).unwrap());
            let mut dup = scenes.clone();
            dup.extend(scenes.iter().map(|s| OcrSceneResult { scene_id: format!("{}_dup", s.scene_id), ..s.clone() }));
            prop_assert!((ad_lcs(&dup, false).unwrap() - ad_lcs(&scenes, false).unwrap()).abs() < 1e-12);
        }
    }
}
