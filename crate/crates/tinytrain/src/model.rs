//! Decoder-only transformer with pre-layer-norm blocks, learned positions and an output
//! projection tied to the token embedding. Forward and backward passes are written out by hand.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use callmask::model::LanguageModel;
use callmask::objective::LogitSlab;

use crate::ops::{add_bias, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, sum_rows_into};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub context: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab == 0 || self.context == 0 || self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err("model dimensions must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        Ok(())
    }
}

/// Name, shape and offset of one parameter array in the flat store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrices get weight decay; gains and biases do not.
    pub fn decays(&self) -> bool {
        self.shape.len() >= 2
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    params: Vec<ParamInfo>,
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut params = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            params.push(ParamInfo { name, shape, offset });
            offset
        };
        let d = c.dim;
        let wte = add("wte".into(), vec![c.vocab, d]);
        let wpe = add("wpe".into(), vec![c.context, d]);
        let mut layers = Vec::new();
        for l in 0..c.layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1.g"), vec![d]),
                ln1_b: add(p("ln1.b"), vec![d]),
                w_qkv: add(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: add(p("attn.b_qkv"), vec![3 * d]),
                w_o: add(p("attn.w_o"), vec![d, d]),
                b_o: add(p("attn.b_o"), vec![d]),
                ln2_g: add(p("ln2.g"), vec![d]),
                ln2_b: add(p("ln2.b"), vec![d]),
                w_fc: add(p("mlp.w_fc"), vec![d, 4 * d]),
                b_fc: add(p("mlp.b_fc"), vec![4 * d]),
                w_proj: add(p("mlp.w_proj"), vec![4 * d, d]),
                b_proj: add(p("mlp.b_proj"), vec![d]),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        Layout { params, wte, wpe, layers, lnf_g, lnf_b, total }
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    layout: Layout,
    pub params: Vec<f32>,
}

struct LayerCache {
    ln1_xhat: Vec<f32>,
    ln1_rstd: Vec<f32>,
    ln1_out: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    att: Vec<f32>,
    ln2_xhat: Vec<f32>,
    ln2_rstd: Vec<f32>,
    ln2_out: Vec<f32>,
    fc_pre: Vec<f32>,
    fc_act: Vec<f32>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    rows: usize,
    seq: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f32>,
    lnf_rstd: Vec<f32>,
    lnf_out: Vec<f32>,
    pub logits: Vec<f32>,
}

impl ForwardCache {
    pub fn slab(&self, vocab: usize) -> LogitSlab {
        LogitSlab::new(self.rows * self.seq, vocab, self.logits.clone()).expect("logit shape")
    }
}

impl Transformer {
    /// Normal(0, 0.02) weights, residual projections scaled by `1/sqrt(2 * layers)`,
    /// unit gains and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("valid model config");
        let layout = Layout::new(&config);
        let mut params = vec![0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid = 0.02 / (2.0 * config.layers as f64).sqrt();
        for p in &layout.params {
            let slice = &mut params[p.offset..p.offset + p.len()];
            if p.name.ends_with(".g") {
                slice.fill(1.0);
            } else if p.decays() {
                let std = if p.name.ends_with("w_o") || p.name.ends_with("w_proj") { resid } else { 0.02 };
                for v in slice.iter_mut() {
                    *v = (normal(&mut rng) * std) as f32;
                }
            }
        }
        Transformer { config, layout, params }
    }

    /// All parameters zero; for loading stored weights.
    pub fn zeros(config: ModelConfig) -> Self {
        config.validate().expect("valid model config");
        let layout = Layout::new(&config);
        let params = vec![0f32; layout.total];
        Transformer { config, layout, params }
    }

    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self, String> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(format!("expected {} parameters, got {}", layout.total, params.len()));
        }
        Ok(Transformer { config, layout, params })
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.layout.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn p(&self, offset: usize, len: usize) -> &[f32] {
        &self.params[offset..offset + len]
    }

    /// Runs `rows` sequences of `seq` tokens each, stored row-major in `tokens`.
    pub fn forward_train(&self, tokens: &[u32], rows: usize, seq: usize) -> ForwardCache {
        let c = self.config;
        assert!(seq <= c.context, "sequence longer than the context");
        assert_eq!(tokens.len(), rows * seq);
        let (d, n, lay) = (c.dim, rows * seq, &self.layout);
        let mut x = vec![0f32; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            assert!((t as usize) < c.vocab, "token {t} outside the vocabulary");
            let te = self.p(lay.wte + t as usize * d, d);
            let pe = self.p(lay.wpe + (i % seq) * d, d);
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        let mut layers = Vec::with_capacity(c.layers);
        for lo in &lay.layers {
            let (mut ln1_out, mut ln1_xhat, mut ln1_rstd) = (vec![0f32; n * d], vec![0f32; n * d], vec![0f32; n]);
            layer_norm(&x, d, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), &mut ln1_out, &mut ln1_xhat, &mut ln1_rstd);
            let mut qkv = vec![0f32; n * 3 * d];
            gemm(n, d, 3 * d, &ln1_out, false, self.p(lo.w_qkv, d * 3 * d), false, &mut qkv, 0.0);
            add_bias(&mut qkv, self.p(lo.b_qkv, 3 * d));
            let (probs, att) = self.attention(&qkv, rows, seq);
            let mut y = vec![0f32; n * d];
            gemm(n, d, d, &att, false, self.p(lo.w_o, d * d), false, &mut y, 0.0);
            add_bias(&mut y, self.p(lo.b_o, d));
            for (a, b) in x.iter_mut().zip(&y) {
                *a += b;
            }
            let (mut ln2_out, mut ln2_xhat, mut ln2_rstd) = (vec![0f32; n * d], vec![0f32; n * d], vec![0f32; n]);
            layer_norm(&x, d, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), &mut ln2_out, &mut ln2_xhat, &mut ln2_rstd);
            let mut fc_pre = vec![0f32; n * 4 * d];
            gemm(n, d, 4 * d, &ln2_out, false, self.p(lo.w_fc, d * 4 * d), false, &mut fc_pre, 0.0);
            add_bias(&mut fc_pre, self.p(lo.b_fc, 4 * d));
            let fc_act: Vec<f32> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mut m = vec![0f32; n * d];
            gemm(n, 4 * d, d, &fc_act, false, self.p(lo.w_proj, 4 * d * d), false, &mut m, 0.0);
            add_bias(&mut m, self.p(lo.b_proj, d));
            for (a, b) in x.iter_mut().zip(&m) {
                *a += b;
            }
            layers.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                ln1_out,
                qkv,
                probs,
                att,
                ln2_xhat,
                ln2_rstd,
                ln2_out,
                fc_pre,
                fc_act,
            });
        }
        let (mut lnf_out, mut lnf_xhat, mut lnf_rstd) = (vec![0f32; n * d], vec![0f32; n * d], vec![0f32; n]);
        layer_norm(&x, d, self.p(lay.lnf_g, d), self.p(lay.lnf_b, d), &mut lnf_out, &mut lnf_xhat, &mut lnf_rstd);
        let mut logits = vec![0f32; n * c.vocab];
        gemm(n, d, c.vocab, &lnf_out, false, self.p(lay.wte, c.vocab * d), true, &mut logits, 0.0);
        ForwardCache { rows, seq, tokens: tokens.to_vec(), layers, lnf_xhat, lnf_rstd, lnf_out, logits }
    }

    /// Causal multi-head attention; returns the probabilities and the merged head outputs.
    fn attention(&self, qkv: &[f32], rows: usize, seq: usize) -> (Vec<f32>, Vec<f32>) {
        let (d, h) = (self.config.dim, self.config.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0f32; rows * h * seq * seq];
        let mut out = vec![0f32; rows * seq * d];
        for b in 0..rows {
            for head in 0..h {
                let base = (b * h + head) * seq * seq;
                for t in 0..seq {
                    let q = &qkv[(b * seq + t) * 3 * d + head * dh..][..dh];
                    let row = &mut probs[base + t * seq..base + (t + 1) * seq];
                    let mut max = f32::NEG_INFINITY;
                    for s in 0..=t {
                        let k = &qkv[(b * seq + s) * 3 * d + d + head * dh..][..dh];
                        let v: f32 = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                        row[s] = v;
                        max = max.max(v);
                    }
                    let mut sum = 0f32;
                    for p in row[..=t].iter_mut() {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    for p in row[..=t].iter_mut() {
                        *p /= sum;
                    }
                    let o = &mut out[(b * seq + t) * d + head * dh..][..dh];
                    for s in 0..=t {
                        let v = &qkv[(b * seq + s) * 3 * d + 2 * d + head * dh..][..dh];
                        let p = row[s];
                        for j in 0..dh {
                            o[j] += p * v[j];
                        }
                    }
                }
            }
        }
        (probs, out)
    }

    /// Parameter gradient given the gradient of the objective with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32]) -> Vec<f32> {
        let c = self.config;
        let (d, v, lay) = (c.dim, c.vocab, &self.layout);
        let (rows, seq) = (cache.rows, cache.seq);
        let n = rows * seq;
        assert_eq!(dlogits.len(), n * v);
        let mut g = vec![0f32; self.layout.total];

        let mut dln = vec![0f32; n * d];
        gemm(n, v, d, dlogits, false, self.p(lay.wte, v * d), false, &mut dln, 0.0);
        {
            let dwte = &mut g[lay.wte..lay.wte + v * d];
            gemm(v, n, d, dlogits, true, &cache.lnf_out, false, dwte, 1.0);
        }
        let mut dx = vec![0f32; n * d];
        {
            let (dgain, dbias) = split_pair(&mut g, lay.lnf_g, lay.lnf_b, d);
            layer_norm_backward(&dln, &cache.lnf_xhat, &cache.lnf_rstd, d, self.p(lay.lnf_g, d), dgain, dbias, &mut dx);
        }

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch.
            gemm(4 * d, n, d, &lc.fc_act, true, &dx, false, &mut g[lo.w_proj..lo.w_proj + 4 * d * d], 1.0);
            sum_rows_into(&dx, &mut g[lo.b_proj..lo.b_proj + d]);
            let mut dfc = vec![0f32; n * 4 * d];
            gemm(n, d, 4 * d, &dx, false, self.p(lo.w_proj, 4 * d * d), true, &mut dfc, 0.0);
            for (gv, &pre) in dfc.iter_mut().zip(&lc.fc_pre) {
                *gv *= gelu_grad(pre);
            }
            gemm(d, n, 4 * d, &lc.ln2_out, true, &dfc, false, &mut g[lo.w_fc..lo.w_fc + d * 4 * d], 1.0);
            sum_rows_into(&dfc, &mut g[lo.b_fc..lo.b_fc + 4 * d]);
            let mut dln2 = vec![0f32; n * d];
            gemm(n, 4 * d, d, &dfc, false, self.p(lo.w_fc, d * 4 * d), true, &mut dln2, 0.0);
            {
                let (dgain, dbias) = split_pair(&mut g, lo.ln2_g, lo.ln2_b, d);
                layer_norm_backward(&dln2, &lc.ln2_xhat, &lc.ln2_rstd, d, self.p(lo.ln2_g, d), dgain, dbias, &mut dx);
            }
            // Attention branch.
            gemm(d, n, d, &lc.att, true, &dx, false, &mut g[lo.w_o..lo.w_o + d * d], 1.0);
            sum_rows_into(&dx, &mut g[lo.b_o..lo.b_o + d]);
            let mut datt = vec![0f32; n * d];
            gemm(n, d, d, &dx, false, self.p(lo.w_o, d * d), true, &mut datt, 0.0);
            let dqkv = self.attention_backward(&lc.qkv, &lc.probs, &datt, rows, seq);
            gemm(d, n, 3 * d, &lc.ln1_out, true, &dqkv, false, &mut g[lo.w_qkv..lo.w_qkv + d * 3 * d], 1.0);
            sum_rows_into(&dqkv, &mut g[lo.b_qkv..lo.b_qkv + 3 * d]);
            let mut dln1 = vec![0f32; n * d];
            gemm(n, 3 * d, d, &dqkv, false, self.p(lo.w_qkv, d * 3 * d), true, &mut dln1, 0.0);
            {
                let (dgain, dbias) = split_pair(&mut g, lo.ln1_g, lo.ln1_b, d);
                layer_norm_backward(&dln1, &lc.ln1_xhat, &lc.ln1_rstd, d, self.p(lo.ln1_g, d), dgain, dbias, &mut dx);
            }
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            let src = &dx[i * d..(i + 1) * d];
            let te = lay.wte + t as usize * d;
            for j in 0..d {
                g[te + j] += src[j];
            }
            let pe = lay.wpe + (i % seq) * d;
            for j in 0..d {
                g[pe + j] += src[j];
            }
        }
        g
    }

    fn attention_backward(&self, qkv: &[f32], probs: &[f32], dout: &[f32], rows: usize, seq: usize) -> Vec<f32> {
        let (d, h) = (self.config.dim, self.config.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dqkv = vec![0f32; qkv.len()];
        let mut dp = vec![0f32; seq];
        for b in 0..rows {
            for head in 0..h {
                let base = (b * h + head) * seq * seq;
                for t in 0..seq {
                    let p = &probs[base + t * seq..base + t * seq + t + 1];
                    let o = &dout[(b * seq + t) * d + head * dh..][..dh];
                    let mut dot = 0f32;
                    for s in 0..=t {
                        let vo = (b * seq + s) * 3 * d + 2 * d + head * dh;
                        let v = &qkv[vo..vo + dh];
                        dp[s] = o.iter().zip(v).map(|(a, b)| a * b).sum();
                        dot += p[s] * dp[s];
                        for j in 0..dh {
                            dqkv[vo + j] += p[s] * o[j];
                        }
                    }
                    let qo = (b * seq + t) * 3 * d + head * dh;
                    for s in 0..=t {
                        let ds = p[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (b * seq + s) * 3 * d + d + head * dh;
                        for j in 0..dh {
                            dqkv[qo + j] += ds * qkv[ko + j];
                            dqkv[ko + j] += ds * qkv[qo + j];
                        }
                    }
                }
            }
        }
        dqkv
    }
}

fn split_pair(g: &mut [f32], a: usize, b: usize, len: usize) -> (&mut [f32], &mut [f32]) {
    assert!(a + len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl LanguageModel for Transformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn context_length(&self) -> usize {
        self.config.context
    }

    fn forward(&self, tokens: &[u32]) -> LogitSlab {
        self.forward_train(tokens, 1, tokens.len()).slab(self.config.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Transformer {
        Transformer::new(ModelConfig { vocab: 7, context: 5, dim: 8, layers: 2, heads: 2 }, 3)
    }

    /// A fixed linear functional of the logits, as a stand-in objective.
    fn objective(m: &Transformer, tokens: &[u32], w: &[f32]) -> f64 {
        let c = m.forward_train(tokens, 2, 4);
        c.logits.iter().zip(w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut m = tiny();
        // Break the symmetry of unit gains and zero biases.
        for (i, p) in m.params.iter_mut().enumerate() {
            *p += 0.05 * ((i * 7919 % 101) as f32 / 101.0 - 0.5);
        }
        let tokens = [1u32, 4, 2, 6, 0, 3, 3, 5];
        let w: Vec<f32> = (0..8 * 7).map(|i| ((i * 37 % 17) as f32 / 17.0) - 0.5).collect();
        let cache = m.forward_train(&tokens, 2, 4);
        let g = m.backward(&cache, &w);
        let mut worst = 0f64;
        for info in m.param_info().to_vec() {
            for k in [0, info.len() / 2, info.len() - 1] {
                let i = info.offset + k;
                let h = 1e-2f32;
                let orig = m.params[i];
                m.params[i] = orig + h;
                let up = objective(&m, &tokens, &w);
                m.params[i] = orig - h;
                let down = objective(&m, &tokens, &w);
                m.params[i] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let err = (fd - g[i] as f64).abs() / fd.abs().max(1e-2);
                worst = worst.max(err);
                assert!(err < 2e-2, "{} [{k}]: fd {fd} analytic {}", info.name, g[i]);
            }
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn causal() {
        let m = tiny();
        let a = m.forward(&[1, 2, 3, 4, 5]);
        let b = m.forward(&[1, 2, 6, 4, 0]);
        for i in 0..5 {
            let same = a.row(i) == b.row(i);
            assert_eq!(same, i < 2, "position {i}");
        }
    }

    #[test]
    fn rows_are_independent() {
        let m = tiny();
        let both = m.forward_train(&[1, 2, 3, 4, 5, 6], 2, 3);
        let single = m.forward_train(&[4, 5, 6], 1, 3);
        assert_eq!(&both.logits[3 * 7..], &single.logits[..]);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(tiny().params, tiny().params);
        let other = Transformer::new(tiny().config, 4);
        assert_ne!(tiny().params, other.params);
    }
}
