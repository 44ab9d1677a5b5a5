//! Finite-difference verification of hand-written backward passes.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{
    perturb, Block, BlockKind, Conv2d, ConvBlock, DepthwiseConv3x3, DownsampleLearned, Gelu, LayerNormChannel, Layer,
    Loffn, Mhca, Module, Param, Pointwise, TransformerLayer, UpsampleLearned,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Above this many coordinates only a random fraction is probed.
pub const FULL_CHECK_LIMIT: usize = 10_000;
pub const SAMPLE_FRACTION: f64 = 0.05;

/// A scalar function of an input tensor and a set of parameters.
pub trait Objective: Module<f64> {
    fn value(&self, x: &Tensor<f64>) -> Result<f64>;

    /// Returns `∂f/∂x` and accumulates `∂f/∂θ` into the parameter gradients.
    fn gradient(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Reduces a layer to a scalar through a fixed random projection of its output.
pub struct Projected<L> {
    pub layer: L,
    pub weights: Tensor<f64>,
}

impl<L: Layer<f64>> Projected<L> {
    pub fn new(layer: L, x: &Tensor<f64>, rng: &mut Rng) -> Result<Self> {
        let y = layer.apply(x)?;
        let weights = rng.normal_tensor(y.shape(), 1.0);
        Ok(Projected { layer, weights })
    }
}

impl<L: Layer<f64>> Module<f64> for Projected<L> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        self.layer.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.layer.visit_mut(prefix, f)
    }
}

impl<L: Layer<f64>> Objective for Projected<L> {
    fn value(&self, x: &Tensor<f64>) -> Result<f64> {
        let y = self.layer.apply(x)?;
        y.same_shape(&self.weights, "gradcheck projection")?;
        Ok(y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (_, cache) = self.layer.forward(x)?;
        self.layer.backward(&cache, &self.weights)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub total: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}); {} of {} coordinates checked",
            self.max_rel_error, self.worst, self.analytic, self.numeric, self.checked, self.total
        )
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn sample(len: usize, sampled: bool, rng: &mut Rng) -> Vec<usize> {
    if !sampled {
        return (0..len).collect();
    }
    let k = ((len as f64 * SAMPLE_FRACTION).ceil() as usize).max(1);
    let mut idx = rng.permutation(len);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn set_param(obj: &mut dyn Objective, target: usize, coord: usize, delta: f64) {
    let mut i = 0;
    obj.visit_mut("", &mut |_, p| {
        if i == target {
            p.value.data_mut()[coord] += delta;
        }
        i += 1;
    });
}

/// Compares the analytic gradient of `obj` at `x` with central differences
/// over every input and parameter coordinate.
pub fn gradcheck(obj: &mut dyn Objective, x: &Tensor<f64>, rng: &mut Rng) -> Result<GradcheckReport> {
    obj.zero_grad();
    let dx = obj.gradient(x)?;
    dx.same_shape(x, "gradcheck input gradient")?;
    dx.ensure_finite("input gradient")?;
    let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
    obj.visit("", &mut |name, p| params.push((name.to_string(), p.grad.clone())));
    for (name, g) in &params {
        g.ensure_finite(&format!("gradient of {}", name))?;
    }

    let total = x.len() + params.iter().map(|(_, g)| g.len()).sum::<usize>();
    let sampled = total > FULL_CHECK_LIMIT;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        total,
    };
    let mut record = |name: &str, i: usize, a: f64, fp: f64, fm: f64| -> Result<()> {
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("finite difference at {}[{}]", name, i)));
        }
        let n = (fp - fm) / (2.0 * STEP);
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = format!("{}[{}]", name, i);
            report.analytic = a;
            report.numeric = n;
        }
        Ok(())
    };

    let mut xp = x.clone();
    for i in sample(x.len(), sampled, rng) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let fp = obj.value(&xp)?;
        xp.data_mut()[i] = orig - STEP;
        let fm = obj.value(&xp)?;
        xp.data_mut()[i] = orig;
        record("input", i, dx.data()[i], fp, fm)?;
    }
    for (t, (name, g)) in params.iter().enumerate() {
        for i in sample(g.len(), sampled, rng) {
            set_param(obj, t, i, STEP);
            let fp = obj.value(x)?;
            set_param(obj, t, i, -2.0 * STEP);
            let fm = obj.value(x)?;
            set_param(obj, t, i, STEP);
            record(name, i, g.data()[i], fp, fm)?;
        }
    }
    Ok(report)
}

/// Gradient check of a single layer on a random input of the given shape.
pub fn check_layer_with<L: Layer<f64>>(layer: L, input_shape: &[usize], seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let x = rng.normal_tensor(input_shape, 1.0);
    let mut obj = Projected::new(layer, &x, &mut rng)?;
    gradcheck(&mut obj, &x, &mut rng)
}

/// Layers that can be checked by name.
pub const LAYER_NAMES: &[&str] = &[
    "pointwise_conv",
    "depthwise_conv3x3",
    "conv3x3",
    "layernorm_channel",
    "mhca",
    "loffn",
    "gelu",
    "downsample_learned",
    "upsample_learned",
    "transformer_layer",
    "conv_block",
];

/// Builds a small randomly initialized (and perturbed) instance of the named
/// layer and checks it.
pub fn check_named_layer(name: &str, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed ^ 0x6772_6164);
    let std = 0.2;
    macro_rules! run {
        ($layer:expr, $shape:expr) => {{
            let mut l = $layer;
            perturb(&mut l, &mut rng, std);
            check_layer_with(l, &$shape, seed)
        }};
    }
    match name {
        "pointwise_conv" => run!(Pointwise::<f64>::new(4, 3, true, &mut rng), [4, 4, 4]),
        "depthwise_conv3x3" => run!(DepthwiseConv3x3::<f64>::new(4, &mut rng), [4, 4, 4]),
        "conv3x3" => run!(Conv2d::<f64>::new(3, 3, 4, 1, &mut rng), [4, 4, 3]),
        "layernorm_channel" => run!(LayerNormChannel::<f64>::new(4), [4, 4, 4]),
        "mhca" => run!(Mhca::<f64>::new(4, 2, &mut rng)?, [4, 4, 4]),
        "loffn" => run!(Loffn::<f64>::new(4, 2.0, &mut rng), [4, 4, 4]),
        "gelu" => check_layer_with(Gelu, &[4, 4, 4], seed),
        "downsample_learned" => run!(DownsampleLearned::<f64>::new(4, &mut rng), [4, 4, 4]),
        "upsample_learned" => run!(UpsampleLearned::<f64>::new(4, &mut rng), [2, 2, 4]),
        "transformer_layer" => run!(TransformerLayer::<f64>::new(4, 2, 2.0, &mut rng)?, [4, 4, 4]),
        "conv_block" => run!(ConvBlock::<f64>::new(4, &mut rng), [4, 4, 4]),
        other => Err(Error::InvalidParam(format!(
            "unknown layer '{}'; expected one of {}",
            other,
            LAYER_NAMES.join(", ")
        ))),
    }
}

/// Gradient check of one block of either kind.
pub fn check_block(kind: BlockKind, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut b = Block::<f64>::new(kind, 4, 2, 2.0, &mut rng)?;
    perturb(&mut b, &mut rng, 0.2);
    check_layer_with(b, &[4, 4, 4], seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pointwise layer whose backward reports a scaled input gradient.
    struct Corrupted(Pointwise<f64>);

    impl Module<f64> for Corrupted {
        fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            self.0.visit(p, f)
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            self.0.visit_mut(p, f)
        }
    }

    impl Layer<f64> for Corrupted {
        type Cache = Tensor<f64>;
        fn forward(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
            self.0.forward(x)
        }
        fn backward(&mut self, c: &Tensor<f64>, g: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(self.0.backward(c, g)?.scale(1.1))
        }
    }

    #[test]
    fn linear_layer_is_nearly_exact() {
        for seed in 0..3 {
            let l = Pointwise::<f64>::new(5, 3, true, &mut Rng::new(seed));
            let r = check_layer_with(l, &[3, 3, 5], seed).unwrap();
            assert!(r.max_rel_error < 1e-7, "{}", r);
            assert_eq!(r.checked, r.total);
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let l = Corrupted(Pointwise::new(3, 3, true, &mut Rng::new(0)));
        let r = check_layer_with(l, &[3, 3, 3], 0).unwrap();
        assert!(r.max_rel_error > 1e-2, "{}", r);
        assert!(!r.passed(DEFAULT_TOLERANCE));
    }

    #[test]
    fn every_named_layer_passes() {
        for name in LAYER_NAMES {
            for seed in 0..3 {
                let r = check_named_layer(name, seed).unwrap();
                assert!(r.passed(DEFAULT_TOLERANCE), "{} seed {}: {}", name, seed, r);
            }
        }
        assert!(check_named_layer("nope", 0).is_err());
    }

    #[test]
    fn blocks_pass() {
        for kind in [BlockKind::Transformer, BlockKind::Conv] {
            let r = check_block(kind, 5).unwrap();
            assert!(r.passed(DEFAULT_TOLERANCE), "{:?}: {}", kind, r);
        }
    }

    #[test]
    fn large_inputs_are_sampled() {
        let l = Pointwise::<f64>::new(2, 2, false, &mut Rng::new(1));
        let r = check_layer_with(l, &[80, 80, 2], 1).unwrap();
        assert!(r.total > FULL_CHECK_LIMIT);
        assert!(r.checked < r.total / 10);
    }
}
