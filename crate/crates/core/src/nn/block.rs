use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::attention::MhcaCache;
use crate::nn::ffn::LoffnCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{gelu, gelu_grad, join, Conv2d, LayerNormChannel, Layer, Loffn, Mhca, Module, Param};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Pre-norm transformer layer: `y = x + attn(ln1(x))`, `z = y + ffn(ln2(y))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer<T = f32> {
    pub ln1: LayerNormChannel<T>,
    pub attn: Mhca<T>,
    pub ln2: LayerNormChannel<T>,
    pub ffn: Loffn<T>,
}

#[derive(Clone, Debug)]
pub struct TransformerCache<T> {
    ln1: LayerNormCache<T>,
    attn: MhcaCache<T>,
    ln2: LayerNormCache<T>,
    ffn: LoffnCache<T>,
}

impl<T: Real> TransformerLayer<T> {
    pub fn new(c: usize, heads: usize, ffn_expansion: f64, rng: &mut Rng) -> Result<Self> {
        let mut attn = Mhca::new(c, heads, rng)?;
        attn.residual = false;
        let mut ffn = Loffn::new(c, ffn_expansion, rng);
        ffn.residual = false;
        Ok(TransformerLayer {
            ln1: LayerNormChannel::new(c),
            attn,
            ln2: LayerNormChannel::new(c),
            ffn,
        })
    }
}

impl<T: Real> Module<T> for TransformerLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

impl<T: Real> Layer<T> for TransformerLayer<T> {
    type Cache = TransformerCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, TransformerCache<T>)> {
        let (n1, ln1) = self.ln1.forward(x)?;
        let (a, attn) = self.attn.forward(&n1)?;
        let y = x.add(&a)?;
        let (n2, ln2) = self.ln2.forward(&y)?;
        let (f, ffn) = self.ffn.forward(&n2)?;
        let z = y.add(&f)?;
        Ok((z, TransformerCache { ln1, attn, ln2, ffn }))
    }

    fn backward(&mut self, cache: &TransformerCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let dn2 = self.ffn.backward(&cache.ffn, g)?;
        let mut dy = self.ln2.backward(&cache.ln2, &dn2)?;
        dy.add_assign(g)?;
        let dn1 = self.attn.backward(&cache.attn, &dy)?;
        let mut dx = self.ln1.backward(&cache.ln1, &dn1)?;
        dx.add_assign(&dy)?;
        Ok(dx)
    }
}

/// Convolutional residual block used in place of a transformer layer:
/// `x + conv2(gelu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ConvBlock<T = f32> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T> {
    x: Tensor<T>,
    h: Tensor<T>,
    a: Tensor<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(3, c, c, 1, rng),
            conv2: Conv2d::new(3, c, c, 1, rng),
        }
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

impl<T: Real> Layer<T> for ConvBlock<T> {
    type Cache = ConvBlockCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
        let (h, _) = self.conv1.forward(x)?;
        let a = h.map(gelu);
        let (mut y, _) = self.conv2.forward(&a)?;
        y.add_assign(x)?;
        Ok((y, ConvBlockCache { x: x.clone(), h, a }))
    }

    fn backward(&mut self, cache: &ConvBlockCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let da = self.conv2.backward(&cache.a, g)?;
        let dh = cache.h.zip_map(&da, |v, gv| gelu_grad(v) * gv)?;
        let mut dx = self.conv1.backward(&cache.x, &dh)?;
        dx.add_assign(g)?;
        Ok(dx)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Transformer,
    Conv,
}

#[derive(Clone, Debug)]
pub enum Block<T = f32> {
    Transformer(TransformerLayer<T>),
    Conv(ConvBlock<T>),
}

#[derive(Clone, Debug)]
pub enum BlockCache<T> {
    Transformer(TransformerCache<T>),
    Conv(ConvBlockCache<T>),
}

impl<T: Real> Block<T> {
    pub fn new(kind: BlockKind, c: usize, heads: usize, ffn_expansion: f64, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            BlockKind::Transformer => Block::Transformer(TransformerLayer::new(c, heads, ffn_expansion, rng)?),
            BlockKind::Conv => Block::Conv(ConvBlock::new(c, rng)),
        })
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Block::Transformer(b) => b.visit(prefix, f),
            Block::Conv(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Block::Transformer(b) => b.visit_mut(prefix, f),
            Block::Conv(b) => b.visit_mut(prefix, f),
        }
    }
}

impl<T: Real> Layer<T> for Block<T> {
    type Cache = BlockCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        Ok(match self {
            Block::Transformer(b) => {
                let (y, c) = b.forward(x)?;
                (y, BlockCache::Transformer(c))
            }
            Block::Conv(b) => {
                let (y, c) = b.forward(x)?;
                (y, BlockCache::Conv(c))
            }
        })
    }

    fn backward(&mut self, cache: &BlockCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Block::Transformer(b), BlockCache::Transformer(c)) => b.backward(c, g),
            (Block::Conv(b), BlockCache::Conv(c)) => b.backward(c, g),
            _ => Err(crate::Error::InvalidParam("block cache does not match block kind".into())),
        }
    }
}

/// A sequence of same-width blocks.
#[derive(Clone, Debug)]
pub struct Stage<T = f32> {
    pub blocks: Vec<Block<T>>,
}

impl<T: Real> Stage<T> {
    pub fn new(kind: BlockKind, depth: usize, c: usize, heads: usize, ffn_expansion: f64, rng: &mut Rng) -> Result<Self> {
        let blocks = (0..depth)
            .map(|_| Block::new(kind, c, heads, ffn_expansion, rng))
            .collect::<Result<_>>()?;
        Ok(Stage { blocks })
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real> Layer<T> for Stage<T> {
    type Cache = Vec<BlockCache<T>>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockCache<T>>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&cur)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    fn backward(&mut self, caches: &Vec<BlockCache<T>>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut grad = g.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            grad = b.backward(c, &grad)?;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer_with;
    use crate::nn::{perturb, Pointwise};

    #[test]
    fn zero_output_projections_make_identity() {
        let mut rng = Rng::new(3);
        let mut t = TransformerLayer::<f32>::new(8, 2, 2.0, &mut rng).unwrap();
        t.attn.proj = Pointwise::zeros(8, 8, true);
        t.ffn.project = Pointwise::zeros(16, 8, true);
        let x = rng.normal_tensor(&[4, 4, 8], 1.0);
        assert_eq!(t.apply(&x).unwrap(), x);
    }

    #[test]
    fn stage_names_are_indexed() {
        let s = Stage::<f32>::new(BlockKind::Conv, 2, 4, 1, 2.0, &mut Rng::new(0)).unwrap();
        assert_eq!(s.param_names(), ["0.conv1.weight", "0.conv1.bias", "0.conv2.weight", "0.conv2.bias", "1.conv1.weight", "1.conv1.bias", "1.conv2.weight", "1.conv2.bias"]);
    }

    #[test]
    fn gradchecks() {
        for seed in 0..3 {
            let mut rng = Rng::new(400 + seed);
            let mut t = TransformerLayer::<f64>::new(4, 2, 2.0, &mut rng).unwrap();
            perturb(&mut t, &mut rng, 0.2);
            let r = check_layer_with(t, &[4, 4, 4], seed).unwrap();
            assert!(r.passed(1e-4), "{}", r);
            let r = check_layer_with(ConvBlock::<f64>::new(3, &mut rng), &[4, 4, 3], seed).unwrap();
            assert!(r.passed(1e-4), "{}", r);
            let s = Stage::<f64>::new(BlockKind::Transformer, 2, 4, 1, 1.5, &mut rng).unwrap();
            let r = check_layer_with(s, &[3, 4, 4], seed).unwrap();
            assert!(r.passed(1e-4), "{}", r);
        }
    }
}
