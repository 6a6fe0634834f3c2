use super::gemm::gemm;
use super::layers::{Conv1x1, GroupNorm, TokenNorm};
use super::param::{Module, Param};
use super::tensor::Tensor;

/// Single-head softmax attention `softmax(scale · Q Kᵀ) V` for one set of
/// `t` tokens with `d` features each (all row-major `[t, d]`).
///
/// Returns the attended values and the attention matrix `[t, t]`.
pub fn attention_forward(q: &[f32], k: &[f32], v: &[f32], t: usize, d: usize, scale: f32) -> (Vec<f32>, Vec<f32>) {
    let mut a = vec![0.0; t * t];
    gemm(t, d, t, scale, q, false, k, true, 0.0, &mut a);
    for row in a.chunks_exact_mut(t) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    let mut o = vec![0.0; t * d];
    gemm(t, t, d, 1.0, &a, false, v, false, 0.0, &mut o);
    (o, a)
}

/// Gradients `(dQ, dK, dV)` of [`attention_forward`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    d_out: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    a: &[f32],
    t: usize,
    d: usize,
    scale: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dv = vec![0.0; t * d];
    gemm(t, t, d, 1.0, a, true, d_out, false, 0.0, &mut dv);
    let mut ds = vec![0.0; t * t];
    gemm(t, d, t, 1.0, d_out, false, v, true, 0.0, &mut ds);
    for (ds_row, a_row) in ds.chunks_exact_mut(t).zip(a.chunks_exact(t)) {
        let inner: f32 = ds_row.iter().zip(a_row).map(|(g, p)| g * p).sum();
        for (g, p) in ds_row.iter_mut().zip(a_row) {
            *g = scale * p * (*g - inner);
        }
    }
    let mut dq = vec![0.0; t * d];
    gemm(t, t, d, 1.0, &ds, false, k, false, 0.0, &mut dq);
    let mut dk = vec![0.0; t * d];
    gemm(t, t, d, 1.0, &ds, true, q, false, 0.0, &mut dk);
    (dq, dk, dv)
}

/// Channel slab `[c0, c0 + c)` of a `[C][N][T]` tensor as token-major
/// `[N*T, c]` rows.
fn to_tokens(x: &Tensor, c0: usize, c: usize) -> Vec<f32> {
    let t = x.hw();
    let mut out = vec![0.0; x.n * t * c];
    for ch in 0..c {
        let src = &x.data[(c0 + ch) * x.n * t..][..x.n * t];
        for (i, v) in src.iter().enumerate() {
            out[i * c + ch] = *v;
        }
    }
    out
}

fn from_tokens(rows: &[f32], c: usize, into: &mut Tensor, c0: usize) {
    let nt = into.n * into.hw();
    for ch in 0..c {
        let dst = &mut into.data[(c0 + ch) * nt..][..nt];
        for (i, v) in dst.iter_mut().enumerate() {
            *v = rows[i * c + ch];
        }
    }
}

struct AttnCache {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<Vec<f32>>,
}

/// Residual self-attention over the pixels of a feature map:
/// `x + proj(attn(norm(x)))`, with per-token normalized queries and keys.
pub struct SpatialAttention {
    pub norm: GroupNorm,
    pub qkv: Conv1x1,
    pub q_norm: TokenNorm,
    pub k_norm: TokenNorm,
    pub proj: Conv1x1,
    c: usize,
    cache: Option<AttnCache>,
}

impl SpatialAttention {
    pub fn new(name: &str, c: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            norm: GroupNorm::new(&format!("{name}.norm"), c, true),
            qkv: Conv1x1::new(&format!("{name}.qkv"), c, 3 * c, rng),
            q_norm: TokenNorm::new(&format!("{name}.q_norm"), c, false),
            k_norm: TokenNorm::new(&format!("{name}.k_norm"), c, false),
            proj: Conv1x1::new(&format!("{name}.proj"), c, c, rng),
            c,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let c = self.c;
        let t = x.hw();
        let scale = 1.0 / (c as f32).sqrt();
        let qkv = self.qkv.forward(&self.norm.forward(x, cache), cache);
        let q = self.q_norm.forward(&to_tokens(&qkv, 0, c), cache);
        let k = self.k_norm.forward(&to_tokens(&qkv, c, c), cache);
        let v = to_tokens(&qkv, 2 * c, c);
        let mut o = vec![0.0; x.n * t * c];
        let mut probs = Vec::with_capacity(x.n);
        for b in 0..x.n {
            let r = b * t * c..(b + 1) * t * c;
            let (ob, ab) = attention_forward(&q[r.clone()], &k[r.clone()], &v[r.clone()], t, c, scale);
            o[r].copy_from_slice(&ob);
            probs.push(ab);
        }
        let mut attended = Tensor::zeros(c, x.n, x.h, x.w);
        from_tokens(&o, c, &mut attended, 0);
        let mut out = self.proj.forward(&attended, cache);
        out.add_assign(x);
        if cache {
            self.cache = Some(AttnCache { q, k, v, probs });
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let AttnCache { q, k, v, probs } = self
            .cache
            .take()
            .expect("attention: backward called without a cached forward");
        let c = self.c;
        let t = dy.hw();
        let scale = 1.0 / (c as f32).sqrt();
        let d_att = self.proj.backward(dy);
        let d_o = to_tokens(&d_att, 0, c);
        let (mut dq, mut dk, mut dv) = (vec![0.0; d_o.len()], vec![0.0; d_o.len()], vec![0.0; d_o.len()]);
        for b in 0..dy.n {
            let r = b * t * c..(b + 1) * t * c;
            let (gq, gk, gv) = attention_backward(
                &d_o[r.clone()],
                &q[r.clone()],
                &k[r.clone()],
                &v[r.clone()],
                &probs[b],
                t,
                c,
                scale,
            );
            dq[r.clone()].copy_from_slice(&gq);
            dk[r.clone()].copy_from_slice(&gk);
            dv[r].copy_from_slice(&gv);
        }
        let mut d_qkv = Tensor::zeros(3 * c, dy.n, dy.h, dy.w);
        from_tokens(&self.q_norm.backward(&dq), c, &mut d_qkv, 0);
        from_tokens(&self.k_norm.backward(&dk), c, &mut d_qkv, c);
        from_tokens(&dv, c, &mut d_qkv, 2 * c);
        let mut dx = self.norm.backward(&self.qkv.backward(&d_qkv));
        dx.add_assign(dy);
        dx
    }
}

impl Module for SpatialAttention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm.visit(f);
        self.qkv.visit(f);
        self.q_norm.visit(f);
        self.k_norm.visit(f);
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm.visit_mut(f);
        self.qkv.visit_mut(f);
        self.q_norm.visit_mut(f);
        self.k_norm.visit_mut(f);
        self.proj.visit_mut(f);
    }
}
