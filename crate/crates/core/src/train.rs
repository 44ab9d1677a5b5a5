//! Adam with a per-step cosine schedule, supervised training on synthetic
//! pairs, and mixed synthetic/real fine-tuning.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::save_checkpoint;
use crate::io::{load_image, SceneManifest};
use crate::metrics::{de_db, mean_image_metrics, ser_db};
use crate::model::{loss_and_grads, LossWeights, TurbNet};
use crate::nn::Module;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const MIX_SALT: u64 = 0x6d69_785f_7265_616c;
const AUGMENT_SALT: u64 = 0x6175_676d_656e_7400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub alpha_loss: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Probability that a batch slot is filled from the real (unlabeled) set
    /// during fine-tuning.
    pub mix_ratio_real: f64,
    /// Random horizontal flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            lr_min: 1e-6,
            epochs: 50,
            batch_size: 4,
            alpha_loss: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mix_ratio_real: 0.5,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init && self.lr_init.is_finite()) {
            return bad(format!("need 0 <= lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{} must be in (0, 1), got {}", name, b));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio_real) {
            return bad(format!("mix_ratio_real must be in [0, 1], got {}", self.mix_ratio_real));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_loss: self.alpha_loss,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.epochs * self.steps_per_epoch(n)
    }
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidParam(format!("step {} outside [0, {}]", step, total_steps)));
    }
    let t = step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step<M: Module<f32> + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut bad = None;
        model.visit("", &mut |name, p| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {}", name)));
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, p| {
            let m = ms.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * g;
                let vn = b2 * *vi as f64 + (1.0 - b2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
            p.zero_grad();
        });
        Ok(())
    }
}

/// One training item. `clean` is absent for unlabeled real frames.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene_id: String,
    pub clean: Option<Tensor<f32>>,
    pub degraded: Tensor<f32>,
}

/// Loads every entry of a manifest. With `require_clean`, entries lacking a
/// clean image are an error.
pub fn load_samples(manifest: &SceneManifest, require_clean: bool) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let degraded = load_image(manifest.resolve(&e.degraded_path))?;
            let clean = match &e.clean_path {
                Some(p) => {
                    let c = load_image(manifest.resolve(p))?;
                    c.same_shape(&degraded, "clean/degraded pair")?;
                    Some(c)
                }
                None if require_clean => {
                    return Err(Error::Schema(format!("scene {} has no clean_path", e.scene_id)));
                }
                None => None,
            };
            Ok(Sample {
                scene_id: e.scene_id.clone(),
                clean,
                degraded,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total_loss: f64,
    /// Mean supervised term over the synthetic items of the batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<f64>,
    pub l1: f64,
    pub n_real: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db", default)]
    pub eval_psnr: Option<f64>,
    #[serde(default)]
    pub eval_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            write_record(&mut w, r).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?,
            );
        }
        Ok(TrainLog { records })
    }
}

fn write_record(w: &mut impl Write, r: &LogRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    writeln!(w)
}

/// Model plus optimizer state; `step` counts optimizer updates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: TurbNet<f32>,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: TurbNet<f32>, cfg: &TrainConfig) -> Self {
        TrainState {
            model,
            adam: Adam::new(cfg),
            step: 0,
        }
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{:04}.ckpt", epoch)
}

/// Side outputs of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for the JSON-lines log and per-epoch checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Held-out pairs evaluated at the end of every epoch.
    pub eval: &'a [Sample],
    /// Stop once the optimizer step count reaches this value.
    pub stop_after: Option<u64>,
    /// Called for every record as it is produced.
    pub on_record: Option<Box<dyn FnMut(&LogRecord) + 'a>>,
}

/// Supervised training on labeled pairs.
pub fn train(state: &mut TrainState, data: &[Sample], cfg: &TrainConfig, opts: TrainOptions<'_>) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidParam("training set is empty".into()));
    }
    run(state, data, &[], cfg, opts)
}

/// Fine-tuning on synthetic pairs mixed with unlabeled real frames. Each batch
/// slot independently takes a random real frame with probability
/// `mix_ratio_real` (self-supervised loss only) and otherwise the synthetic
/// pair scheduled for that slot (full loss).
pub fn fine_tune_mixed(
    state: &mut TrainState,
    synthetic: &[Sample],
    real: &[Sample],
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainLog> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::InvalidParam("fine-tuning needs non-empty synthetic and real sets".into()));
    }
    run(state, synthetic, real, cfg, opts)
}

fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = t.hwc().expect("image tensor");
    Tensor::from_fn(&[h, w, c], |i| {
        let (p, ch) = (i / c, i % c);
        let (y, x) = (p / w, p % w);
        t.data()[(y * w + (w - 1 - x)) * c + ch]
    })
}

fn evaluate(model: &TurbNet<f32>, eval: &[Sample]) -> Result<(Option<f64>, Option<f64>)> {
    let labeled: Vec<&Sample> = eval.iter().filter(|s| s.clean.is_some()).collect();
    if labeled.is_empty() {
        return Ok((None, None));
    }
    let restored = labeled
        .iter()
        .map(|s| Ok(model.infer(&s.degraded)?.restored.clamp(0.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = labeled.iter().zip(&restored).map(|(s, r)| (s.clean.as_ref().unwrap(), r)).collect();
    let (p, s) = mean_image_metrics(&pairs)?;
    Ok((Some(p), Some(s)))
}

fn run(
    state: &mut TrainState,
    synthetic: &[Sample],
    real: &[Sample],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if let Some(s) = synthetic.iter().find(|s| s.clean.is_none()) {
        return Err(Error::Schema(format!("synthetic scene {} has no clean image", s.scene_id)));
    }
    let n = synthetic.len();
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    let weights = cfg.loss_weights();
    let end = opts.stop_after.map_or(total, |s| s.min(total));

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(state.step > 0)
                .truncate(state.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut log = TrainLog::default();
    let mut emit = |r: LogRecord, opts: &mut TrainOptions<'_>| -> Result<()> {
        if let Some((path, w)) = &mut log_file {
            write_record(w, &r).and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(cb) = &mut opts.on_record {
            cb(&r);
        }
        log.records.push(r);
        Ok(())
    };

    while state.step < end {
        let step = state.step;
        let epoch = step / spe;
        let k = (step % spe) as usize;
        let perm = Rng::new(derive_seed(cfg.seed, epoch)).permutation(n);
        let slots = &perm[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(n)];
        let mut mix = Rng::new(derive_seed(cfg.seed ^ MIX_SALT, step));
        let mut aug = Rng::new(derive_seed(cfg.seed ^ AUGMENT_SALT, step));
        let b = slots.len();
        let inv_b = 1.0 / b as f32;

        let (mut sum_total, mut sum_l0, mut sum_l1) = (0.0, 0.0, 0.0);
        let mut n_sup = 0usize;
        let mut n_real = 0usize;
        for &slot in slots {
            let sample = if !real.is_empty() && cfg.mix_ratio_real > 0.0 && mix.uniform() < cfg.mix_ratio_real {
                n_real += 1;
                &real[mix.below(real.len())]
            } else {
                &synthetic[slot]
            };
            let flip = cfg.augment && aug.uniform() < 0.5;
            let (degraded, clean) = if flip {
                (flip_h(&sample.degraded), sample.clean.as_ref().map(flip_h))
            } else {
                (sample.degraded.clone(), sample.clean.clone())
            };
            let supervised = sample.clean.is_some() && std::ptr::eq(sample, &synthetic[slot]);
            let clean_ref = if supervised { clean.as_ref() } else { None };

            let (out, cache) = state.model.forward(&degraded)?;
            let (terms, grads) = loss_and_grads(&out, clean_ref, &degraded, weights, true)?;
            let g = grads.expect("gradients requested");
            let d_rest = g.restored.scale(inv_b);
            let d_redeg = g.redegraded.map(|t| t.scale(inv_b));
            state.model.backward(&cache, &d_rest, d_redeg.as_ref())?;

            sum_total += terms.total;
            sum_l1 += terms.l1;
            if let Some(l0) = terms.l0 {
                sum_l0 += l0;
                n_sup += 1;
            }
        }
        let lr = cosine_lr(step, total, cfg)?;
        state.adam.step(&mut state.model, lr)?;
        state.step += 1;

        let total_loss = sum_total / b as f64;
        if !total_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", step)));
        }
        emit(
            LogRecord::Step(StepRecord {
                step,
                epoch,
                lr,
                total_loss,
                l0: (n_sup > 0).then(|| sum_l0 / n_sup as f64),
                l1: sum_l1 / b as f64,
                n_real,
            }),
            &mut opts,
        )?;

        if state.step % spe == 0 {
            let (eval_psnr, eval_ssim) = evaluate(&state.model, opts.eval)?;
            emit(
                LogRecord::Epoch(EpochRecord {
                    epoch,
                    step: state.step,
                    eval_psnr,
                    eval_ssim,
                }),
                &mut opts,
            )?;
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(
                    dir.join(epoch_checkpoint_name(epoch)),
                    &state.model,
                    Some(cfg),
                    state.step,
                    Some(&state.adam),
                )?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), &state.model, Some(cfg), state.step, Some(&state.adam))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::Param;

    #[test]
    fn cosine_schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, 100, &cfg).unwrap(), 1e-4);
        assert!((cosine_lr(100, 100, &cfg).unwrap() - 1e-6).abs() < 1e-12);
        assert!((cosine_lr(50, 100, &cfg).unwrap() - 5.05e-5).abs() < 1e-12);
        assert!(cosine_lr(101, 100, &cfg).is_err());
        assert!(cosine_lr(0, 0, &cfg).is_err());
    }

    struct Scalar(Param<f32>);

    impl Module<f32> for Scalar {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Scalar(Param::new(Tensor::full(&[1], 0.5)));
        p.0.grad.fill(1.0);
        let mut adam = Adam::new(&TrainConfig::default());
        adam.step(&mut p, 1e-3).unwrap();
        let moved = 0.5 - p.0.value.data()[0] as f64;
        assert!((moved - 1e-3).abs() < 1e-7, "{}", moved);
        assert_eq!(p.0.grad.data()[0], 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Scalar(Param::new(Tensor::full(&[3], 0.25)));
        let mut adam = Adam::new(&TrainConfig::default());
        adam.step(&mut p, 1e-2).unwrap();
        assert_eq!(p.0.value, Tensor::full(&[3], 0.25));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = Scalar(Param::new(Tensor::full(&[1], 0.0)));
        p.0.grad.fill(f32::NAN);
        let err = Adam::new(&TrainConfig::default()).step(&mut p, 1e-3).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr_min: 1.0, ..Default::default() },
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { mix_ratio_real: 1.5, ..Default::default() },
            TrainConfig { alpha_loss: -0.1, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{:?}", c);
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| {
                let clean: Tensor<f32> = rng.uniform_tensor(&[16, 16, 3], 0.2, 0.8);
                let degraded = clean.map(|v| v * 0.9 + 0.05);
                Sample {
                    scene_id: format!("s{}", i),
                    clean: Some(clean),
                    degraded,
                }
            })
            .collect()
    }

    fn micro() -> TurbNet<f32> {
        TurbNet::new(&ModelConfig::micro(), &Rng::new(0)).unwrap()
    }

    #[test]
    fn one_epoch_of_four_is_one_step() {
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let mut st = TrainState::new(micro(), &cfg);
        let log = train(&mut st, &samples(4, 1), &cfg, TrainOptions::default()).unwrap();
        assert_eq!(log.steps().count(), 1);
        assert_eq!(log.epochs().count(), 1);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn log_round_trips_and_omits_missing_l0() {
        let cfg = TrainConfig { epochs: 1, batch_size: 2, mix_ratio_real: 1.0, ..Default::default() };
        let mut real = samples(2, 3);
        real.iter_mut().for_each(|s| s.clean = None);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let mut st = TrainState::new(micro(), &cfg);
        let log = fine_tune_mixed(&mut st, &samples(2, 2), &real, &cfg, opts).unwrap();
        assert!(log.steps().all(|s| s.l0.is_none() && s.n_real == 2));
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert!(!text.contains("l0"));
        assert_eq!(TrainLog::read_jsonl(dir.path().join(LOG_FILE)).unwrap(), log);
        assert!(dir.path().join(epoch_checkpoint_name(0)).exists());
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    }

    #[test]
    fn zero_mix_matches_plain_training() {
        let cfg = TrainConfig { epochs: 2, batch_size: 2, lr_init: 1e-3, mix_ratio_real: 0.0, ..Default::default() };
        let data = samples(3, 4);
        let mut real = samples(2, 5);
        real.iter_mut().for_each(|s| s.clean = None);
        let mut a = TrainState::new(micro(), &cfg);
        let la = train(&mut a, &data, &cfg, TrainOptions::default()).unwrap();
        let mut b = TrainState::new(micro(), &cfg);
        let lb = fine_tune_mixed(&mut b, &data, &real, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.adam, b.adam);
    }

    #[test]
    fn empty_sets_rejected() {
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let mut st = TrainState::new(micro(), &cfg);
        assert!(train(&mut st, &[], &cfg, TrainOptions::default()).is_err());
        assert!(fine_tune_mixed(&mut st, &samples(1, 0), &[], &cfg, TrainOptions::default()).is_err());
        let mut unlabeled = samples(1, 0);
        unlabeled[0].clean = None;
        assert!(train(&mut st, &unlabeled, &cfg, TrainOptions::default()).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let t: Tensor<f32> = Rng::new(0).uniform_tensor(&[3, 5, 2], 0.0, 1.0);
        assert_ne!(flip_h(&t), t);
        assert_eq!(flip_h(&flip_h(&t)), t);
    }
}
