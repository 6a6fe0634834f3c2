//! U-Net style residual encoder-decoder producing a `D`-channel feature map
//! at input resolution.
//!
//! Layout, for stage widths `w_0..w_{S-1}` and block counts `n_0..n_{S-1}`:
//!
//! * stem: 3×3 conv, RGB → `w_0`
//! * encoder stage `i`: `n_i` residual blocks at `w_i`; the stage output is
//!   kept as a skip, then 2×2 average pooling and a 1×1 conv to `w_{i+1}`
//!   (the last stage keeps its width)
//! * bottleneck: residual block → self-attention → residual block
//! * decoder stage `i` (reverse order): 1×1 conv to `w_i`, nearest ×2
//!   upsampling, add the skip, then `n_i + 1` residual blocks
//! * head: norm → SiLU → 3×3 conv to `D`
//!
//! Residual blocks are `x + conv(silu(norm(conv(silu(norm(x))))))`. Blocks in
//! the last two encoder stages add a norm and dropout on the branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::FeatureMap;
use crate::nn::{
    AvgPool2, Conv1x1, Conv3x3, Dropout, GroupNorm, Module, Param, Silu, SpatialAttention, Tensor,
    Upsample2,
};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Output channels `D`.
    pub out_channels: usize,
    #[serde(default)]
    pub bottleneck_attention: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_dropout() -> f32 {
    0.1
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::exp1()
    }
}

impl BackboneConfig {
    /// ColoredMNIST configuration.
    pub fn exp1() -> Self {
        Self {
            widths: vec![32, 64, 64],
            blocks: vec![1, 2, 2],
            out_channels: 32,
            bottleneck_attention: false,
            dropout: 0.1,
        }
    }

    /// 3D scene configuration.
    pub fn exp2() -> Self {
        Self {
            widths: vec![16, 16, 32, 32, 64],
            blocks: vec![1, 1, 1, 2, 4],
            out_channels: 32,
            bottleneck_attention: false,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "backbone needs equally long, non-empty widths and blocks (got {} and {})",
                self.widths.len(),
                self.blocks.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.out_channels <= 3 {
            return Err(Error::Config(format!(
                "output channels must exceed 3, got {}",
                self.out_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }
}

struct ResBlock {
    norm1: GroupNorm,
    act1: Silu,
    conv1: Conv3x3,
    norm2: GroupNorm,
    act2: Silu,
    conv2: Conv3x3,
    extra: Option<(GroupNorm, Dropout)>,
}

impl ResBlock {
    fn new(name: &str, c: usize, dropout: Option<f32>, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), c, true),
            act1: Silu::default(),
            conv1: Conv3x3::new(&format!("{name}.conv1"), c, c, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), c, true),
            act2: Silu::default(),
            conv2: Conv3x3::new(&format!("{name}.conv2"), c, c, rng),
            extra: dropout.map(|p| (GroupNorm::new(&format!("{name}.norm3"), c, true), Dropout::new(p))),
        }
    }

    fn forward(&mut self, x: &Tensor, rng: Option<&mut ChaCha8Rng>, cache: bool) -> Tensor {
        let h = self.norm1.forward(x, cache);
        let h = self.act1.forward_t(&h, cache);
        let h = self.conv1.forward(&h, cache);
        let h = self.norm2.forward(&h, cache);
        let h = self.act2.forward_t(&h, cache);
        let mut h = self.conv2.forward(&h, cache);
        if let Some((norm, drop)) = &mut self.extra {
            h = norm.forward(&h, cache);
            h = drop.forward(&h, rng, cache);
        }
        h.add_assign(x);
        h
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        if let Some((norm, drop)) = &mut self.extra {
            d = norm.backward(&drop.backward(&d));
        }
        let d = self.conv2.backward(&d);
        let d = self.act2.backward_t(&d);
        let d = self.norm2.backward(&d);
        let d = self.conv1.backward(&d);
        let d = self.act1.backward_t(&d);
        let mut d = self.norm1.backward(&d);
        d.add_assign(dy);
        d
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some((norm, _)) = &self.extra {
            norm.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some((norm, _)) = &mut self.extra {
            norm.visit_mut(f);
        }
    }
}

struct EncoderStage {
    blocks: Vec<ResBlock>,
    down: Conv1x1,
}

struct DecoderStage {
    up: Conv1x1,
    blocks: Vec<ResBlock>,
}

/// The feature extractor.
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv3x3,
    encoder: Vec<EncoderStage>,
    mid1: ResBlock,
    attention: SpatialAttention,
    mid2: ResBlock,
    decoder: Vec<DecoderStage>,
    head_norm: GroupNorm,
    head_act: Silu,
    head_conv: Conv3x3,
}

impl Backbone {
    /// Builds a freshly initialized backbone; `seed` drives the init.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.stages();
        let w = &config.widths;
        let stem = Conv3x3::new("stem", 3, w[0], &mut rng);
        let mut encoder = Vec::with_capacity(s);
        for i in 0..s {
            let dropout = (i + 2 >= s).then_some(config.dropout);
            let blocks = (0..config.blocks[i])
                .map(|b| ResBlock::new(&format!("enc{i}.block{b}"), w[i], dropout, &mut rng))
                .collect();
            let next = if i + 1 < s { w[i + 1] } else { w[i] };
            let down = Conv1x1::new(&format!("enc{i}.down"), w[i], next, &mut rng);
            encoder.push(EncoderStage { blocks, down });
        }
        let c = w[s - 1];
        let mid1 = ResBlock::new("mid.block0", c, None, &mut rng);
        let attention = SpatialAttention::new("mid.attn", c, &mut rng);
        let mid2 = ResBlock::new("mid.block1", c, None, &mut rng);
        let mut decoder = Vec::with_capacity(s);
        let mut c = c;
        for i in (0..s).rev() {
            let up = Conv1x1::new(&format!("dec{i}.up"), c, w[i], &mut rng);
            let blocks = (0..=config.blocks[i])
                .map(|b| ResBlock::new(&format!("dec{i}.block{b}"), w[i], None, &mut rng))
                .collect();
            decoder.push(DecoderStage { up, blocks });
            c = w[i];
        }
        let head_norm = GroupNorm::new("head.norm", c, true);
        let head_conv = Conv3x3::new("head.conv", c, config.out_channels, &mut rng);
        Ok(Self {
            config,
            stem,
            encoder,
            mid1,
            attention,
            mid2,
            decoder,
            head_norm,
            head_act: Silu::default(),
            head_conv,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = self.config.size_multiple();
        if x.c != 3 {
            return Err(Error::Shape(format!("backbone expects 3 input channels, got {}", x.c)));
        }
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {m}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    /// Training-mode forward: caches activations for [`Backbone::backward`]
    /// and applies dropout drawn from `rng`.
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(x, Some(rng), true))
    }

    /// Evaluation-mode forward: no dropout, no caches.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(x, None, false))
    }

    fn run(&mut self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>, cache: bool) -> Tensor {
        let mut h = self.stem.forward(x, cache);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &mut self.encoder {
            for block in &mut stage.blocks {
                h = block.forward(&h, rng.as_deref_mut(), cache);
            }
            let pooled = AvgPool2::forward(&h);
            skips.push(h);
            h = stage.down.forward(&pooled, cache);
        }
        h = self.mid1.forward(&h, None, cache);
        if self.config.bottleneck_attention {
            h = self.attention.forward(&h, cache);
        }
        h = self.mid2.forward(&h, None, cache);
        for stage in &mut self.decoder {
            let up = stage.up.forward(&h, cache);
            h = Upsample2::forward(&up);
            h.add_assign(&skips.pop().expect("one skip per stage"));
            for block in &mut stage.blocks {
                h = block.forward(&h, None, cache);
            }
        }
        let h = self.head_norm.forward(&h, cache);
        let h = self.head_act.forward_t(&h, cache);
        self.head_conv.forward(&h, cache)
    }

    /// Backpropagates `dy` (gradient w.r.t. the output features) through the
    /// last training forward, accumulating parameter gradients. Returns the
    /// gradient w.r.t. the input.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.head_conv.backward(dy);
        let d = self.head_act.backward_t(&d);
        let mut d = self.head_norm.backward(&d);
        let mut dskips = Vec::with_capacity(self.decoder.len());
        for stage in self.decoder.iter_mut().rev() {
            for block in stage.blocks.iter_mut().rev() {
                d = block.backward(&d);
            }
            dskips.push(d.clone());
            d = stage.up.backward(&Upsample2::backward(&d));
        }
        d = self.mid2.backward(&d);
        if self.config.bottleneck_attention {
            d = self.attention.backward(&d);
        }
        d = self.mid1.backward(&d);
        // dskips is ordered shallow to deep, matching the encoder.
        for (stage, dskip) in self.encoder.iter_mut().zip(dskips.iter()).rev() {
            d = AvgPool2::backward(&stage.down.backward(&d));
            d.add_assign(dskip);
            for block in stage.blocks.iter_mut().rev() {
                d = block.backward(&d);
            }
        }
        self.stem.backward(&d)
    }

    /// Features for a batch of images, evaluation mode.
    pub fn features(&mut self, images: &[Image]) -> Result<Vec<FeatureMap>> {
        let x = images_to_tensor(images)?;
        Ok(tensor_to_features(&self.forward(&x)?))
    }
}

impl Module for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit(f);
        for s in &self.encoder {
            s.blocks.iter().for_each(|b| b.visit(f));
            s.down.visit(f);
        }
        self.mid1.visit(f);
        self.attention.visit(f);
        self.mid2.visit(f);
        for s in &self.decoder {
            s.up.visit(f);
            s.blocks.iter().for_each(|b| b.visit(f));
        }
        self.head_norm.visit(f);
        self.head_conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        for s in &mut self.encoder {
            s.blocks.iter_mut().for_each(|b| b.visit_mut(f));
            s.down.visit_mut(f);
        }
        self.mid1.visit_mut(f);
        self.attention.visit_mut(f);
        self.mid2.visit_mut(f);
        for s in &mut self.decoder {
            s.up.visit_mut(f);
            s.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        }
        self.head_norm.visit_mut(f);
        self.head_conv.visit_mut(f);
    }
}

/// Packs equally sized RGB images into a `[3][N][H][W]` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (h, w, n) = (first.height(), first.width(), images.len());
    let hw = h * w;
    let mut t = Tensor::zeros(3, n, h, w);
    for (b, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        for (i, px) in img.as_slice().chunks_exact(3).enumerate() {
            for c in 0..3 {
                t.data[(c * n + b) * hw + i] = px[c];
            }
        }
    }
    Ok(t)
}

/// Splits a `[D][N][H][W]` tensor into per-image `H×W×D` feature maps.
pub fn tensor_to_features(t: &Tensor) -> Vec<FeatureMap> {
    let hw = t.hw();
    (0..t.n)
        .map(|b| {
            let mut data = vec![0.0; hw * t.c];
            for c in 0..t.c {
                let src = &t.data[(c * t.n + b) * hw..][..hw];
                for (i, v) in src.iter().enumerate() {
                    data[i * t.c + c] = *v;
                }
            }
            FeatureMap::from_vec(t.h, t.w, t.c, data).expect("sizes agree")
        })
        .collect()
}

/// Inverse of [`tensor_to_features`].
pub fn features_to_tensor(maps: &[FeatureMap]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Input("empty feature batch".into()))?;
    let (h, w, d, n) = (first.height(), first.width(), first.depth(), maps.len());
    let hw = h * w;
    let mut t = Tensor::zeros(d, n, h, w);
    for (b, m) in maps.iter().enumerate() {
        if (m.height(), m.width(), m.depth()) != (h, w, d) {
            return Err(Error::Shape("feature maps in a batch must share dimensions".into()));
        }
        for (i, px) in m.as_slice().chunks_exact(d).enumerate() {
            for c in 0..d {
                t.data[(c * n + b) * hw + i] = px[c];
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            widths: vec![4, 8],
            blocks: vec![1, 1],
            out_channels: 5,
            bottleneck_attention: true,
            dropout: 0.0,
        }
    }

    fn random_input(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * n * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(3, n, h, w, data).unwrap()
    }

    #[test]
    fn exp1_parameter_count() {
        assert_eq!(Backbone::new(BackboneConfig::exp1(), 0).unwrap().num_params(), 993_664);
    }

    #[test]
    fn exp2_parameter_count() {
        assert_eq!(Backbone::new(BackboneConfig::exp2(), 0).unwrap().num_params(), 1_031_344);
    }

    #[test]
    fn attention_toggle_does_not_change_count() {
        let mut cfg = BackboneConfig::exp1();
        cfg.bottleneck_attention = true;
        assert_eq!(Backbone::new(cfg, 0).unwrap().num_params(), 993_664);
    }

    #[test]
    fn inconsistent_config_rejected() {
        let mut cfg = BackboneConfig::exp1();
        cfg.blocks.pop();
        assert!(matches!(Backbone::new(cfg, 0), Err(Error::Config(_))));
        let mut cfg = BackboneConfig::exp1();
        cfg.out_channels = 3;
        assert!(matches!(Backbone::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shape_is_preserved_and_bad_sizes_rejected() {
        let mut net = Backbone::new(BackboneConfig::exp1(), 1).unwrap();
        let y = net.forward(&random_input(0, 1, 32, 32)).unwrap();
        assert_eq!((y.c, y.n, y.h, y.w), (32, 1, 32, 32));
        assert!(matches!(net.forward(&random_input(0, 1, 28, 28)), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let mut net = Backbone::new(BackboneConfig::exp1(), 2).unwrap();
        let one = random_input(3, 1, 16, 16);
        let a = net.forward(&one).unwrap();
        let b = net.forward(&one).unwrap();
        assert_eq!(a, b);
        let two = Tensor::stack(&[one.clone(), one]).unwrap();
        let y = net.forward(&two).unwrap();
        assert_eq!(y.sample(0), y.sample(1));
        assert_eq!(y.sample(0), a);
    }

    #[test]
    fn largest_response_stays_near_the_perturbed_pixel() {
        // The full-resolution path (stem, stage-0 blocks, stage-0 decoder
        // blocks, head) is 1 + 2 + 4 + 1 = 8 convs deep: radius 8.
        let mut net = Backbone::new(BackboneConfig::exp1(), 4).unwrap();
        let x = random_input(5, 1, 64, 64);
        let base = net.forward(&x).unwrap();
        for (py, px) in [(20usize, 20usize), (40, 13), (31, 50)] {
            let mut xp = x.clone();
            for c in 0..3 {
                let i = xp.idx(c, 0, py, px);
                xp.data[i] += 1.0;
            }
            let y = net.forward(&xp).unwrap();
            let mut best = (0.0f32, 0, 0);
            for yy in 0..64 {
                for xx in 0..64 {
                    let delta: f32 = (0..32).map(|c| (y.at(c, 0, yy, xx) - base.at(c, 0, yy, xx)).abs()).sum();
                    if delta > best.0 {
                        best = (delta, yy, xx);
                    }
                }
            }
            assert!(best.0 > 0.0);
            assert!(best.1.abs_diff(py) <= 8 && best.2.abs_diff(px) <= 8, "peak at {:?} for ({py},{px})", best);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut net = Backbone::new(small(), 6).unwrap();
        let x = random_input(7, 2, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = net.forward_train(&x, &mut rng).unwrap();
        let dy = y.with_data(y.data.iter().enumerate().map(|(i, _)| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect());
        net.backward(&dy);
        net.visit(&mut |p| {
            assert!(p.grad.iter().any(|g| *g != 0.0), "{} has zero gradient", p.name);
        });
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Backbone::new(small(), 8).unwrap();
        let x = random_input(9, 2, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = net.forward_train(&x, &mut rng).unwrap();
        let mut grng = ChaCha8Rng::seed_from_u64(10);
        let dy = y.with_data((0..y.data.len()).map(|_| grng.gen_range(-1.0..1.0)).collect());
        net.backward(&dy);
        let objective = |net: &mut Backbone| -> f64 {
            let out = net.forward(&x).unwrap();
            out.data.iter().zip(&dy.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut grads = Vec::new();
        net.visit(&mut |p| grads.push((p.name.clone(), p.grad.clone())));
        let h = 1e-2f32;
        let mut checked = 0;
        for (pi, (name, g)) in grads.iter().enumerate() {
            for j in [0, g.len() / 2, g.len() - 1] {
                let set = |net: &mut Backbone, delta: f32| {
                    let mut k = 0;
                    net.visit_mut(&mut |p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                };
                set(&mut net, h);
                let plus = objective(&mut net);
                set(&mut net, -2.0 * h);
                let minus = objective(&mut net);
                set(&mut net, h);
                let num = (plus - minus) / (2.0 * h as f64);
                let ana = g[j] as f64;
                assert!(
                    (num - ana).abs() <= 3e-2 * (1.0 + num.abs().max(ana.abs())),
                    "{name}[{j}]: numeric {num} analytic {ana}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
