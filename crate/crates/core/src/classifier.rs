//! Permutation-invariant attention pixel classifier for frozen features.
//!
//! Each pixel's descriptor is normalized, projected to `Q, K, V`, attends
//! over every pixel of the image (no positional encoding), and a small MLP
//! turns the attended vector into one logit per pixel. The image logit is
//! the mean pixel logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::FeatureMap;
use crate::nn::{attention_backward, attention_forward, Linear, Module, Param, Silu, TokenNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub feature_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![150, 100, 50]
}

impl ClassifierConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("classifier feature_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("classifier hidden widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

struct Cache {
    tokens: Vec<usize>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<Vec<f32>>,
}

pub struct Classifier {
    config: ClassifierConfig,
    in_norm: TokenNorm,
    qkv: Linear,
    q_norm: TokenNorm,
    k_norm: TokenNorm,
    mlp: Vec<Linear>,
    acts: Vec<Silu>,
    cache: Option<Cache>,
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(z: f32, label: f32) -> f32 {
    z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let qkv = Linear::new("qkv", d, 3 * d, &mut rng);
        let mut mlp = Vec::new();
        let mut fan_in = d;
        for (i, &w) in config.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            mlp.push(Linear::new(&format!("mlp{i}"), fan_in, w, &mut rng));
            fan_in = w;
        }
        let acts = (0..config.hidden.len()).map(|_| Silu::default()).collect();
        Ok(Self {
            in_norm: TokenNorm::new("in_norm", d, false),
            qkv,
            q_norm: TokenNorm::new("q_norm", d, true),
            k_norm: TokenNorm::new("k_norm", d, true),
            mlp,
            acts,
            config,
            cache: None,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    fn check(&self, maps: &[FeatureMap]) -> Result<()> {
        if maps.is_empty() {
            return Err(Error::Input("empty feature batch".into()));
        }
        for m in maps {
            if m.depth() != self.config.feature_dim {
                return Err(Error::Config(format!(
                    "classifier expects {} feature channels, got {}",
                    self.config.feature_dim,
                    m.depth()
                )));
            }
        }
        Ok(())
    }

    fn run(&mut self, maps: &[FeatureMap], cache: bool) -> Vec<Vec<f32>> {
        let d = self.config.feature_dim;
        let tokens: Vec<usize> = maps.iter().map(|m| m.height() * m.width()).collect();
        let x: Vec<f32> = maps.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        let h = self.in_norm.forward(&x, cache);
        let qkv = self.qkv.forward(&h, cache);
        let rows = qkv.len() / (3 * d);
        let mut q = Vec::with_capacity(rows * d);
        let mut k = Vec::with_capacity(rows * d);
        let mut v = Vec::with_capacity(rows * d);
        for row in qkv.chunks_exact(3 * d) {
            q.extend_from_slice(&row[..d]);
            k.extend_from_slice(&row[d..2 * d]);
            v.extend_from_slice(&row[2 * d..]);
        }
        let q = self.q_norm.forward(&q, cache);
        let k = self.k_norm.forward(&k, cache);
        let scale = 1.0 / (d as f32).sqrt();
        let mut attended = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(maps.len());
        let mut off = 0;
        for &t in &tokens {
            let r = off * d..(off + t) * d;
            let (o, a) = attention_forward(&q[r.clone()], &k[r.clone()], &v[r.clone()], t, d, scale);
            attended[r].copy_from_slice(&o);
            if cache {
                probs.push(a);
            }
            off += t;
        }
        let mut h = attended;
        let last = self.mlp.len() - 1;
        for (i, layer) in self.mlp.iter_mut().enumerate() {
            h = layer.forward(&h, cache);
            if i < last {
                h = self.acts[i].forward(&h, cache);
            }
        }
        if cache {
            self.cache = Some(Cache { tokens: tokens.clone(), q, k, v, probs });
        }
        let mut out = Vec::with_capacity(maps.len());
        let mut off = 0;
        for &t in &tokens {
            out.push(h[off..off + t].to_vec());
            off += t;
        }
        out
    }

    /// Per-pixel logits for each map, evaluation mode.
    pub fn pixel_logits(&mut self, maps: &[FeatureMap]) -> Result<Vec<Vec<f32>>> {
        self.check(maps)?;
        Ok(self.run(maps, false))
    }

    /// `(sigmoid(mean pixel logit), pixel logits)` for one image.
    pub fn predict_image(&mut self, features: &FeatureMap) -> Result<(f32, Vec<f32>)> {
        let logits = self.pixel_logits(std::slice::from_ref(features))?.remove(0);
        Ok((sigmoid(image_logit(&logits)), logits))
    }

    /// Mean BCE over the batch; accumulates parameter gradients.
    pub fn loss_and_backward(&mut self, maps: &[FeatureMap], labels: &[u8]) -> Result<f32> {
        self.check(maps)?;
        if labels.len() != maps.len() {
            return Err(Error::Shape("one label per feature map required".into()));
        }
        let logits = self.run(maps, true);
        let b = maps.len() as f32;
        let mut loss = 0.0;
        let mut d_logits = Vec::with_capacity(logits.iter().map(Vec::len).sum());
        for (l, &y) in logits.iter().zip(labels) {
            let z = image_logit(l);
            let y = y as f32;
            loss += bce_with_logit(z, y) / b;
            let g = (sigmoid(z) - y) / (b * l.len() as f32);
            d_logits.extend(std::iter::repeat(g).take(l.len()));
        }
        self.backward(&d_logits);
        Ok(loss)
    }

    fn backward(&mut self, d_logits: &[f32]) {
        let Cache { tokens, q, k, v, probs } = self
            .cache
            .take()
            .expect("classifier: backward called without a cached forward");
        let d = self.config.feature_dim;
        let last = self.mlp.len() - 1;
        let mut g = d_logits.to_vec();
        for i in (0..self.mlp.len()).rev() {
            if i < last {
                g = self.acts[i].backward(&g);
            }
            g = self.mlp[i].backward(&g);
        }
        let scale = 1.0 / (d as f32).sqrt();
        let mut dq = vec![0.0; g.len()];
        let mut dk = vec![0.0; g.len()];
        let mut dv = vec![0.0; g.len()];
        let mut off = 0;
        for (b, &t) in tokens.iter().enumerate() {
            let r = off * d..(off + t) * d;
            let (gq, gk, gv) = attention_backward(
                &g[r.clone()],
                &q[r.clone()],
                &k[r.clone()],
                &v[r.clone()],
                &probs[b],
                t,
                d,
                scale,
            );
            dq[r.clone()].copy_from_slice(&gq);
            dk[r.clone()].copy_from_slice(&gk);
            dv[r].copy_from_slice(&gv);
            off += t;
        }
        let dq = self.q_norm.backward(&dq);
        let dk = self.k_norm.backward(&dk);
        let mut d_qkv = Vec::with_capacity(3 * dq.len());
        for ((a, b), c) in dq.chunks_exact(d).zip(dk.chunks_exact(d)).zip(dv.chunks_exact(d)) {
            d_qkv.extend_from_slice(a);
            d_qkv.extend_from_slice(b);
            d_qkv.extend_from_slice(c);
        }
        let dh = self.qkv.backward(&d_qkv);
        // The input gradient is not needed: the backbone stays frozen.
        let _ = self.in_norm.backward(&dh);
    }
}

/// Uniform mean of the pixel logits.
pub fn image_logit(pixel_logits: &[f32]) -> f32 {
    let sum: f64 = pixel_logits.iter().map(|&v| v as f64).sum();
    (sum / pixel_logits.len() as f64) as f32
}

impl Module for Classifier {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.in_norm.visit(f);
        self.qkv.visit(f);
        self.q_norm.visit(f);
        self.k_norm.visit(f);
        self.mlp.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.in_norm.visit_mut(f);
        self.qkv.visit_mut(f);
        self.q_norm.visit_mut(f);
        self.k_norm.visit_mut(f);
        self.mlp.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
