//! The restoration network: a U-shaped channel-attention backbone, a
//! reconstruction head, and a learned degradation head that maps a clean
//! image back to its degraded counterpart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::block::BlockCache;
use crate::nn::gradcheck::{gradcheck, GradcheckReport, Objective};
use crate::nn::{perturb, BlockKind, Conv2d, DownsampleLearned, Layer, Module, Param, Stage, UpsampleLearned};
use crate::ops::{crop, crop_backward, pad_reflect, pad_reflect_backward};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Spatial dims are padded to a multiple of this before the backbone.
pub const SIZE_MULTIPLE: usize = 16;
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_depths: Vec<usize>,
    pub base_channels: usize,
    pub heads_per_stage: Vec<usize>,
    pub recon_depth: usize,
    pub degrade_depth: usize,
    pub ffn_expansion: f64,
    pub global_residual: bool,
    pub backbone_kind: BlockKind,
    pub use_degradation_head: bool,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            stage_depths: vec![1, 1, 1, 2],
            base_channels: 8,
            heads_per_stage: vec![1, 2, 4, 8],
            recon_depth: 1,
            degrade_depth: 1,
            ffn_expansion: 2.0,
            global_residual: true,
            backbone_kind: BlockKind::Transformer,
            use_degradation_head: true,
            image_channels: 3,
        }
    }

    /// Smallest configuration exercising every component.
    pub fn micro() -> Self {
        ModelConfig {
            stage_depths: vec![1, 1, 1, 1],
            base_channels: 4,
            heads_per_stage: vec![1, 2, 4, 8],
            ..ModelConfig::toy()
        }
    }

    /// Full-size layout (depths 4, 6, 6, 8 with four-layer heads).
    pub fn full() -> Self {
        ModelConfig {
            stage_depths: vec![4, 6, 6, 8],
            base_channels: 32,
            heads_per_stage: vec![1, 2, 4, 8],
            recon_depth: 4,
            degrade_depth: 4,
            ffn_expansion: 2.66,
            ..ModelConfig::toy()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.stage_depths.len() != LEVELS || self.heads_per_stage.len() != LEVELS {
            return bad(format!("stage_depths and heads_per_stage need {} entries", LEVELS));
        }
        if self.stage_depths.contains(&0) {
            return bad("every stage depth must be at least 1".into());
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return bad("base_channels and image_channels must be positive".into());
        }
        for (level, &h) in self.heads_per_stage.iter().enumerate() {
            if h == 0 || self.channels(level) % h != 0 {
                return bad(format!(
                    "stage {} has {} channels, not divisible by {} heads",
                    level,
                    self.channels(level),
                    h
                ));
            }
        }
        if !(self.ffn_expansion > 0.0 && self.ffn_expansion.is_finite()) {
            return bad(format!("ffn_expansion must be positive, got {}", self.ffn_expansion));
        }
        Ok(())
    }
}

/// Maps a clean image to its degraded counterpart:
/// `x + out(body(in_proj(x)))`.
#[derive(Clone, Debug)]
pub struct DegradationHead<T = f32> {
    pub in_proj: Conv2d<T>,
    pub body: Stage<T>,
    pub out: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    x: Tensor<T>,
    body: Vec<BlockCache<T>>,
    map: Tensor<T>,
}

impl<T: Real> DegradationHead<T> {
    fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(DegradationHead {
            in_proj: Conv2d::new(3, cfg.image_channels, c, 1, rng),
            body: Stage::new(cfg.backbone_kind, cfg.degrade_depth, c, cfg.heads_per_stage[0], cfg.ffn_expansion, rng)?,
            out: Conv2d::zeros(3, c, cfg.image_channels, 1),
        })
    }

    /// Returns the degraded image and the feature map feeding the output
    /// projection (the turbulence map).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let (f, _) = self.in_proj.forward(x)?;
        let (map, body) = self.body.forward(&f)?;
        map.ensure_finite("degradation head")?;
        let (mut y, _) = self.out.forward(&map)?;
        y.add_assign(x)?;
        Ok((
            y,
            HeadCache {
                x: x.clone(),
                body,
                map,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let dmap = self.out.backward(&cache.map, g)?;
        let df = self.body.backward(&cache.body, &dmap)?;
        let mut dx = self.in_proj.backward(&cache.x, &df)?;
        dx.add_assign(g)?;
        Ok(dx)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }
}

impl<T: Real> Module<T> for DegradationHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.in_proj.visit(&format!("{}.in_proj", prefix), f);
        self.body.visit(&format!("{}.body", prefix), f);
        self.out.visit(&format!("{}.out", prefix), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.in_proj.visit_mut(&format!("{}.in_proj", prefix), f);
        self.body.visit_mut(&format!("{}.body", prefix), f);
        self.out.visit_mut(&format!("{}.out", prefix), f);
    }
}

#[derive(Clone, Debug)]
pub struct TurbNet<T = f32> {
    pub config: ModelConfig,
    pub input_proj: Conv2d<T>,
    pub encoders: Vec<Stage<T>>,
    /// `downs[i]` maps level `i` to level `i + 1`.
    pub downs: Vec<DownsampleLearned<T>>,
    /// `ups[i]` maps level `i + 1` to level `i`.
    pub ups: Vec<UpsampleLearned<T>>,
    pub decoders: Vec<Stage<T>>,
    pub recon: Stage<T>,
    pub recon_out: Conv2d<T>,
    pub degrade: Option<DegradationHead<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T = f32> {
    pub restored: Tensor<T>,
    /// Equal to `restored` when the degradation head is disabled.
    pub redegraded: Tensor<T>,
    /// Pre-projection activation of the degradation head, `[H, W, C]`.
    pub turbulence_map: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    h: usize,
    w: usize,
    xp: Tensor<T>,
    enc: Vec<Vec<BlockCache<T>>>,
    down: Vec<Tensor<T>>,
    up: Vec<Tensor<T>>,
    dec: Vec<Vec<BlockCache<T>>>,
    recon: Vec<BlockCache<T>>,
    recon_feat: Tensor<T>,
    head: Option<HeadCache<T>>,
}

fn padded(n: usize) -> usize {
    n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE
}

impl<T: Real> TurbNet<T> {
    /// Builds a model. Each component draws from its own stream forked off
    /// `rng`, so toggling the degradation head leaves the backbone unchanged.
    pub fn new(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let kind = cfg.backbone_kind;
        let mut r = rng.fork(0);
        let input_proj = Conv2d::new(3, cfg.image_channels, cfg.base_channels, 1, &mut r);
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for level in 0..LEVELS {
            let c = cfg.channels(level);
            let heads = cfg.heads_per_stage[level];
            let depth = cfg.stage_depths[level];
            encoders.push(Stage::new(kind, depth, c, heads, cfg.ffn_expansion, &mut rng.fork(10 + level as u64))?);
            decoders.push(Stage::new(kind, depth, c, heads, cfg.ffn_expansion, &mut rng.fork(20 + level as u64))?);
        }
        let mut rd = rng.fork(1);
        let downs = (0..LEVELS - 1).map(|l| DownsampleLearned::new(cfg.channels(l), &mut rd)).collect();
        let mut ru = rng.fork(2);
        let ups = (0..LEVELS - 1).map(|l| UpsampleLearned::new(cfg.channels(l + 1), &mut ru)).collect();
        let c = cfg.base_channels;
        let recon = Stage::new(kind, cfg.recon_depth, c, cfg.heads_per_stage[0], cfg.ffn_expansion, &mut rng.fork(3))?;
        let recon_out = Conv2d::zeros(3, c, cfg.image_channels, 1);
        let degrade = if cfg.use_degradation_head {
            Some(DegradationHead::new(cfg, &mut rng.fork(4))?)
        } else {
            None
        };
        Ok(TurbNet {
            config: cfg.clone(),
            input_proj,
            encoders,
            downs,
            ups,
            decoders,
            recon,
            recon_out,
            degrade,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(ModelOutput<T>, ForwardCache<T>)> {
        let (h, w, c) = x.hwc()?;
        if c != self.config.image_channels {
            return Err(Error::shape(
                "model input",
                format!("{} channels", self.config.image_channels),
                c.to_string(),
            ));
        }
        x.ensure_finite("model input")?;
        let xp = pad_reflect(x, padded(h), padded(w))?;
        let (f0, _) = self.input_proj.forward(&xp)?;

        let mut enc = Vec::with_capacity(LEVELS);
        let mut enc_out = Vec::with_capacity(LEVELS);
        let mut down = Vec::with_capacity(LEVELS - 1);
        let mut cur = f0;
        for level in 0..LEVELS {
            if level > 0 {
                let (d, down_cache) = self.downs[level - 1].forward(&cur)?;
                down.push(down_cache);
                cur = d;
            }
            let (e, cache) = self.encoders[level].forward(&cur)?;
            e.ensure_finite(&format!("encoder stage {}", level))?;
            enc.push(cache);
            enc_out.push(e.clone());
            cur = e;
        }

        let mut dec: Vec<Vec<BlockCache<T>>> = Vec::with_capacity(LEVELS);
        let mut up = Vec::with_capacity(LEVELS - 1);
        for level in (0..LEVELS).rev() {
            if level < LEVELS - 1 {
                let (mut u, up_cache) = self.ups[level].forward(&cur)?;
                u.add_assign(&enc_out[level])?;
                up.push(up_cache);
                cur = u;
            }
            let (d, cache) = self.decoders[level].forward(&cur)?;
            d.ensure_finite(&format!("decoder stage {}", level))?;
            dec.push(cache);
            cur = d;
        }
        dec.reverse();
        up.reverse();

        let (recon_feat, recon) = self.recon.forward(&cur)?;
        recon_feat.ensure_finite("reconstruction head")?;
        let (mut restored_p, _) = self.recon_out.forward(&recon_feat)?;
        if self.config.global_residual {
            restored_p.add_assign(&xp)?;
        }
        let restored = crop(&restored_p, h, w)?;

        let (redegraded, head, map) = match &self.degrade {
            Some(head) => {
                let (y, cache) = head.forward(&restored)?;
                let map = cache.map.clone();
                (y, Some(cache), Some(map))
            }
            None => (restored.clone(), None, None),
        };
        Ok((
            ModelOutput {
                restored,
                redegraded,
                turbulence_map: map,
            },
            ForwardCache {
                h,
                w,
                xp,
                enc,
                down,
                up,
                dec,
                recon,
                recon_feat,
                head,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<ModelOutput<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates gradients with respect to the two outputs. Returns the
    /// gradient with respect to the model input.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<T>,
        d_restored: &Tensor<T>,
        d_redegraded: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut d_rest = d_restored.clone();
        if let Some(g) = d_redegraded {
            match (&mut self.degrade, &cache.head) {
                (Some(head), Some(hc)) => d_rest.add_assign(&head.backward(hc, g)?)?,
                (None, None) => d_rest.add_assign(g)?,
                _ => return Err(Error::InvalidParam("forward cache does not match model".into())),
            }
        }
        let (hp, wp, _) = cache.xp.hwc()?;
        let d_out = crop_backward(&d_rest, hp, wp)?;
        let d_feat = self.recon_out.backward(&cache.recon_feat, &d_out)?;
        let mut g = self.recon.backward(&cache.recon, &d_feat)?;

        let mut skip: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        for level in 0..LEVELS {
            g = self.decoders[level].backward(&cache.dec[level], &g)?;
            if level < LEVELS - 1 {
                skip[level] = Some(g.clone());
                g = self.ups[level].backward(&cache.up[level], &g)?;
            }
        }
        for level in (0..LEVELS).rev() {
            if let Some(s) = &skip[level] {
                g.add_assign(s)?;
            }
            g = self.encoders[level].backward(&cache.enc[level], &g)?;
            if level > 0 {
                g = self.downs[level - 1].backward(&cache.down[level - 1], &g)?;
            }
        }
        let mut dxp = self.input_proj.backward(&cache.xp, &g)?;
        if self.config.global_residual {
            dxp.add_assign(&d_out)?;
        }
        pad_reflect_backward(&dxp, cache.h, cache.w)
    }
}

impl<T: Real> Module<T> for TurbNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let p = |s: String| if prefix.is_empty() { s } else { format!("{}.{}", prefix, s) };
        self.input_proj.visit(&p("input_proj".into()), f);
        for (i, s) in self.encoders.iter().enumerate() {
            s.visit(&p(format!("enc.{}", i)), f);
        }
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&p(format!("down.{}", i)), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&p(format!("up.{}", i)), f);
        }
        for (i, s) in self.decoders.iter().enumerate() {
            s.visit(&p(format!("dec.{}", i)), f);
        }
        self.recon.visit(&p("recon".into()), f);
        self.recon_out.visit(&p("recon_out".into()), f);
        if let Some(h) = &self.degrade {
            h.visit(&p("degrade".into()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let p = |s: String| if prefix.is_empty() { s } else { format!("{}.{}", prefix, s) };
        self.input_proj.visit_mut(&p("input_proj".into()), f);
        for (i, s) in self.encoders.iter_mut().enumerate() {
            s.visit_mut(&p(format!("enc.{}", i)), f);
        }
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&p(format!("down.{}", i)), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&p(format!("up.{}", i)), f);
        }
        for (i, s) in self.decoders.iter_mut().enumerate() {
            s.visit_mut(&p(format!("dec.{}", i)), f);
        }
        self.recon.visit_mut(&p("recon".into()), f);
        self.recon_out.visit_mut(&p("recon_out".into()), f);
        if let Some(h) = &mut self.degrade {
            h.visit_mut(&p("degrade".into()), f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_loss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_loss: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_loss) {
            return Err(Error::InvalidParam(format!("alpha_loss must be in [0, 1], got {}", self.alpha_loss)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Supervised reconstruction term; absent when no clean reference was used.
    pub l0: Option<f64>,
    /// Self-supervised re-degradation term.
    pub l1: f64,
}

/// Gradients of the total loss with respect to its three tensor arguments.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub restored: Tensor<T>,
    /// `None` when the re-degradation term carries zero weight.
    pub redegraded: Option<Tensor<T>>,
    /// Gradient through the `degraded` target of the re-degradation term.
    pub degraded_target: Option<Tensor<T>>,
}

/// Mean absolute difference, accumulated with Neumaier compensation so the
/// result is accurate to a few ulps regardless of the element count.
pub fn mean_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.same_shape(b, "mean L1")?;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let v = (x.f64() - y.f64()).abs();
        let t = sum + v;
        comp += if sum.abs() >= v { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok((sum + comp) / a.len() as f64)
}

/// `w · sign(a − b) / N`, with `sign(0) = 0`.
fn mean_l1_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let k = T::of(w / a.len() as f64);
    a.zip_map(b, |x, y| {
        if x > y {
            k
        } else if x < y {
            -k
        } else {
            T::zero()
        }
    })
}

/// `total = α·l0 + (1−α)·l1` when `clean` is given; `total = l1` otherwise.
pub fn loss<T: Real>(
    out: &ModelOutput<T>,
    clean: Option<&Tensor<T>>,
    degraded: &Tensor<T>,
    w: LossWeights,
) -> Result<LossTerms> {
    Ok(loss_and_grads(out, clean, degraded, w, false)?.0)
}

pub fn loss_and_grads<T: Real>(
    out: &ModelOutput<T>,
    clean: Option<&Tensor<T>>,
    degraded: &Tensor<T>,
    w: LossWeights,
    with_grads: bool,
) -> Result<(LossTerms, Option<LossGrads<T>>)> {
    w.validate()?;
    let l1 = mean_l1(&out.redegraded, degraded)?;
    let (total, l0, w0, w1) = match clean {
        Some(c) => {
            let l0 = mean_l1(&out.restored, c)?;
            let a = w.alpha_loss;
            (a * l0 + (1.0 - a) * l1, Some(l0), a, 1.0 - a)
        }
        None => (l1, None, 0.0, 1.0),
    };
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let terms = LossTerms { total, l0, l1 };
    if !with_grads {
        return Ok((terms, None));
    }
    let restored = match clean {
        Some(c) if w0 != 0.0 => mean_l1_grad(&out.restored, c, w0)?,
        _ => Tensor::zeros(out.restored.shape()),
    };
    let (redegraded, degraded_target) = if w1 != 0.0 {
        let g = mean_l1_grad(&out.redegraded, degraded, w1)?;
        let t = g.map(|v| -v);
        (Some(g), Some(t))
    } else {
        (None, None)
    };
    Ok((
        terms,
        Some(LossGrads {
            restored,
            redegraded,
            degraded_target,
        }),
    ))
}

/// PSNR between the learned degradation applied to `clean` and the observed
/// `degraded` frame. The operator output is clamped to `[0, 1]` as it would
/// be when written to disk.
pub fn validate_turbulence_map<T: Real>(model: &TurbNet<T>, clean: &Tensor<T>, degraded: &Tensor<T>) -> Result<f64> {
    let head = model
        .degrade
        .as_ref()
        .ok_or_else(|| Error::InvalidParam("model has no degradation head".into()))?;
    let t = head.apply(clean)?.clamp(T::zero(), T::one());
    psnr(degraded, &t, 1.0)
}

/// Per-pixel L2 norm over channels, min-max scaled to `[0, 1]`, as `[H, W, 1]`.
pub fn turbulence_map_image<T: Real>(map: &Tensor<T>) -> Result<Tensor<f32>> {
    let (h, w, c) = map.hwc()?;
    let norms: Vec<f64> = map
        .data()
        .chunks_exact(c)
        .map(|p| p.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
        .collect();
    let (lo, hi) = norms.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    Tensor::from_vec(
        &[h, w, 1],
        norms
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
            .collect(),
    )
}

/// Total loss of a model as a function of its input, for gradient checks.
/// Both loss targets are held fixed.
pub struct ModelObjective {
    pub model: TurbNet<f64>,
    pub clean: Tensor<f64>,
    pub target: Tensor<f64>,
    pub weights: LossWeights,
}

impl Module<f64> for ModelObjective {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        self.model.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.model.visit_mut(prefix, f)
    }
}

impl Objective for ModelObjective {
    fn value(&self, x: &Tensor<f64>) -> Result<f64> {
        let out = self.model.infer(x)?;
        Ok(loss(&out, Some(&self.clean), &self.target, self.weights)?.total)
    }

    fn gradient(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (out, cache) = self.model.forward(x)?;
        let (_, grads) = loss_and_grads(&out, Some(&self.clean), &self.target, self.weights, true)?;
        let g = grads.expect("gradients requested");
        self.model.backward(&cache, &g.restored, g.redegraded.as_ref())
    }
}

/// Offsets every element of `t` by a random amount in `±[0.1, 0.5]`.
fn away_from(t: &Tensor<f64>, rng: &mut Rng) -> Tensor<f64> {
    let mut out = t.clone();
    for v in out.data_mut() {
        let m = rng.uniform_range(0.1, 0.5);
        *v += if rng.uniform() < 0.5 { -m } else { m };
    }
    out
}

/// End-to-end gradient check of a randomly initialized and perturbed model on
/// a `size × size` input.
///
/// The L1 loss terms are not differentiable where an output equals its
/// target, so the targets are placed at least 0.1 away from the outputs at
/// the probe point; no finite-difference step can then cross a kink.
pub fn check_model(config: &ModelConfig, size: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut model = TurbNet::<f64>::new(config, &rng.fork(1))?;
    // Zero-initialized output layers would block every backbone gradient.
    let c = config.base_channels;
    let ch = config.image_channels;
    model.recon_out = Conv2d::new(3, c, ch, 1, &mut rng);
    if let Some(head) = &mut model.degrade {
        head.out = Conv2d::new(3, c, ch, 1, &mut rng);
    }
    perturb(&mut model, &mut rng, 0.05);
    let x = rng.uniform_tensor(&[size, size, ch], 0.0, 1.0);
    let out = model.infer(&x)?;
    let clean = away_from(&out.restored, &mut rng);
    let target = away_from(&out.redegraded, &mut rng);
    let mut obj = ModelObjective {
        model,
        clean,
        target,
        weights: LossWeights { alpha_loss: 0.7 },
    };
    gradcheck(&mut obj, &x, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ffn::hidden_width;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        Rng::new(seed).uniform_tensor(&[h, w, 3], 0.0, 1.0)
    }

    #[test]
    fn identity_at_init() {
        let m = TurbNet::<f32>::new(&ModelConfig::toy(), &Rng::new(0)).unwrap();
        let x = image(32, 32, 1);
        let out = m.infer(&x).unwrap();
        assert_eq!(out.restored, x);
        assert_eq!(out.redegraded, x);
        assert_eq!(psnr(&x, &out.restored, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn pad_and_crop_preserve_shape() {
        let mut m = TurbNet::<f32>::new(&ModelConfig::micro(), &Rng::new(0)).unwrap();
        perturb(&mut m, &mut Rng::new(1), 0.05);
        let x = image(30, 34, 2);
        let (out, cache) = m.forward(&x).unwrap();
        assert_eq!(cache.xp.shape(), &[32, 48, 3]);
        assert_eq!(out.restored.shape(), &[30, 34, 3]);
        assert_eq!(out.redegraded.shape(), &[30, 34, 3]);
        assert_eq!(out.turbulence_map.unwrap().shape(), &[30, 34, 4]);
        assert_ne!(out.restored, x);
    }

    #[test]
    fn conv_backbone_swaps_blocks() {
        let cfg = ModelConfig {
            backbone_kind: BlockKind::Conv,
            ..ModelConfig::micro()
        };
        let m = TurbNet::<f32>::new(&cfg, &Rng::new(0)).unwrap();
        let names = m.param_names();
        assert!(names.contains(&"enc.2.0.conv1.weight".to_string()));
        assert!(!names.iter().any(|n| n.contains("attn")));
        let mut shapes = Vec::new();
        m.visit("", &mut |n, p| {
            if n.starts_with("enc.2.0.conv") && n.ends_with("weight") {
                shapes.push(p.value.shape().to_vec());
            }
        });
        assert_eq!(shapes, [[3, 3, 16, 16], [3, 3, 16, 16]]);
        assert_eq!(m.infer(&image(16, 16, 0)).unwrap().restored.shape(), &[16, 16, 3]);
    }

    /// Closed-form parameter count for a transformer-backbone config.
    fn expected_params(cfg: &ModelConfig) -> usize {
        let conv3 = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let layer = |c: usize, heads: usize| {
            let hdn = hidden_width(c, cfg.ffn_expansion);
            let ln = 2 * c;
            let attn = 4 * c * c + c + heads;
            let ffn = (c * hdn + hdn) + (9 * hdn + hdn) + (hdn * c + c);
            2 * ln + attn + ffn
        };
        let (c, ch) = (cfg.base_channels, cfg.image_channels);
        let mut n = conv3(ch, c);
        for l in 0..LEVELS {
            n += 2 * cfg.stage_depths[l] * layer(cfg.channels(l), cfg.heads_per_stage[l]);
        }
        for l in 0..LEVELS - 1 {
            n += conv3(cfg.channels(l), cfg.channels(l + 1));
            n += conv3(cfg.channels(l + 1), cfg.channels(l));
        }
        n += cfg.recon_depth * layer(c, cfg.heads_per_stage[0]) + conv3(c, ch);
        if cfg.use_degradation_head {
            n += conv3(ch, c) + cfg.degrade_depth * layer(c, cfg.heads_per_stage[0]) + conv3(c, ch);
        }
        n
    }

    #[test]
    fn parameter_count_snapshot() {
        let toy = TurbNet::<f32>::new(&ModelConfig::toy(), &Rng::new(0)).unwrap();
        assert_eq!(toy.param_count(), expected_params(&ModelConfig::toy()));
        assert_eq!(toy.param_count(), 213_838);
        let micro = TurbNet::<f32>::new(&ModelConfig::micro(), &Rng::new(9)).unwrap();
        assert_eq!(micro.param_count(), expected_params(&ModelConfig::micro()));
        let again = TurbNet::<f32>::new(&ModelConfig::toy(), &Rng::new(0)).unwrap();
        assert_eq!(toy.param_names(), again.param_names());
    }

    #[test]
    fn head_does_not_change_backbone_init() {
        let with = TurbNet::<f32>::new(&ModelConfig::toy(), &Rng::new(4)).unwrap();
        let cfg = ModelConfig {
            use_degradation_head: false,
            ..ModelConfig::toy()
        };
        let without = TurbNet::<f32>::new(&cfg, &Rng::new(4)).unwrap();
        let mut a = Vec::new();
        with.visit("", &mut |n, p| {
            if !n.starts_with("degrade") {
                a.push(p.value.clone())
            }
        });
        let mut b = Vec::new();
        without.visit("", &mut |_, p| b.push(p.value.clone()));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::toy();
        c.stage_depths = vec![1, 1, 1];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.heads_per_stage = vec![3, 2, 4, 8];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.stage_depths[2] = 0;
        assert!(TurbNet::<f32>::new(&c, &Rng::new(0)).is_err());
        let m = TurbNet::<f32>::new(&ModelConfig::toy(), &Rng::new(0)).unwrap();
        assert!(m.infer(&Tensor::zeros(&[16, 16, 1])).is_err());
    }

    #[test]
    fn loss_examples() {
        let clean = Tensor::<f64>::zeros(&[4, 4, 3]);
        let degraded = Rng::new(1).uniform_tensor(&[4, 4, 3], 0.0, 1.0);
        let out = ModelOutput {
            restored: Tensor::full(&[4, 4, 3], 0.5),
            redegraded: degraded.clone(),
            turbulence_map: None,
        };
        let t = loss(&out, Some(&clean), &degraded, LossWeights { alpha_loss: 0.9 }).unwrap();
        assert!((t.total - 0.45).abs() < 1e-15);
        let perfect = ModelOutput {
            restored: clean.clone(),
            ..out.clone()
        };
        assert_eq!(loss(&perfect, Some(&clean), &degraded, LossWeights::default()).unwrap().total, 0.0);
        let other = ModelOutput {
            redegraded: clean.clone(),
            ..out.clone()
        };
        let t1 = loss(&other, Some(&clean), &degraded, LossWeights { alpha_loss: 1.0 }).unwrap();
        assert_eq!(t1.total, t1.l0.unwrap());
        let unsup = loss(&other, None, &degraded, LossWeights::default()).unwrap();
        assert_eq!(unsup.l0, None);
        assert_eq!(unsup.total, unsup.l1);
        assert!(loss(&other, Some(&clean), &degraded, LossWeights { alpha_loss: 1.5 }).is_err());
    }

    #[test]
    fn loss_decreases_in_alpha_when_l0_below_l1() {
        let clean = Tensor::<f64>::zeros(&[2, 2, 1]);
        let out = ModelOutput {
            restored: Tensor::full(&[2, 2, 1], 0.1),
            redegraded: Tensor::full(&[2, 2, 1], 0.9),
            turbulence_map: None,
        };
        let degraded = Tensor::zeros(&[2, 2, 1]);
        let totals: Vec<f64> = (0..=10)
            .map(|i| loss(&out, Some(&clean), &degraded, LossWeights { alpha_loss: i as f64 / 10.0 }).unwrap().total)
            .collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn turbulence_map_at_init_is_trivial_baseline() {
        let m = TurbNet::<f32>::new(&ModelConfig::toy(), &Rng::new(0)).unwrap();
        let clean = image(16, 16, 3);
        let degraded = image(16, 16, 4);
        let v = validate_turbulence_map(&m, &clean, &degraded).unwrap();
        assert_eq!(v, psnr(&degraded, &clean, 1.0).unwrap());
        assert_eq!(validate_turbulence_map(&m, &degraded, &degraded).unwrap(), f64::INFINITY);
        let no_head = TurbNet::<f32>::new(
            &ModelConfig {
                use_degradation_head: false,
                ..ModelConfig::toy()
            },
            &Rng::new(0),
        )
        .unwrap();
        assert!(validate_turbulence_map(&no_head, &clean, &degraded).is_err());
    }

    #[test]
    fn map_image_is_normalized() {
        let map: Tensor<f32> = Rng::new(2).normal_tensor(&[5, 6, 4], 1.0);
        let img = turbulence_map_image(&map).unwrap();
        assert_eq!(img.shape(), &[5, 6, 1]);
        assert_eq!(img.data().iter().cloned().fold(f32::MAX, f32::min), 0.0);
        assert_eq!(img.data().iter().cloned().fold(f32::MIN, f32::max), 1.0);
    }

    #[test]
    fn micro_model_gradcheck() {
        let r = check_model(&ModelConfig::micro(), 16, 0).unwrap();
        assert!(r.passed(1e-3), "{}", r);
        let cfg = ModelConfig {
            backbone_kind: BlockKind::Conv,
            global_residual: false,
            ..ModelConfig::micro()
        };
        let r = check_model(&cfg, 16, 1).unwrap();
        assert!(r.passed(1e-3), "{}", r);
    }
}
