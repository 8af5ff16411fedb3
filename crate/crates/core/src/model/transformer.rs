//! Pre-LayerNorm transformer blocks over the graph engine.

use rand::Rng;

use super::ModelConfig;
use crate::tensor::{BoundSet, Graph, ParameterSet, Tensor, Var};
use crate::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Sinusoidal positional encodings for positions `0..len`.
pub(crate) fn positional(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10_000f64.powf(k / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub(crate) struct Init<'a, R: Rng + ?Sized> {
    pub set: ParameterSet,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn add(&mut self, name: String, t: Tensor) -> Result<()> {
        self.set.insert(name, t.with_grad(true))
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.add(format!("{prefix}.g"), Tensor::ones(&[d]))?;
        self.zeros(format!("{prefix}.b"), &[d])
    }

    pub fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        let std = 1.0 / (d as f64).sqrt();
        for w in ["wq", "wk", "wv", "wo"] {
            self.normal(format!("{prefix}.{w}"), &[d, d], std)?;
        }
        Ok(())
    }

    pub fn feed_forward(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<()> {
        self.normal(format!("{prefix}.w1"), &[d, d_ff], 1.0 / (d as f64).sqrt())?;
        self.zeros(format!("{prefix}.b1"), &[d_ff])?;
        self.normal(
            format!("{prefix}.w2"),
            &[d_ff, d],
            1.0 / (d_ff as f64).sqrt(),
        )?;
        self.zeros(format!("{prefix}.b2"), &[d])
    }
}

/// Bound parameters of one model half, looked up by suffix.
pub(crate) struct Block<'a> {
    pub bound: &'a BoundSet,
    pub prefix: &'a str,
}

impl Block<'_> {
    pub fn var(&self, suffix: &str) -> Result<Var> {
        self.bound.get(&format!("{}.{suffix}", self.prefix))
    }
}

pub(crate) fn layer_norm(g: &mut Graph, p: &Block, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.g"))?;
    let bias = p.var(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Multi-head attention of `q_in` over `kv_in`.
pub(crate) fn attention(
    g: &mut Graph,
    p: &Block,
    name: &str,
    cfg: &ModelConfig,
    q_in: Var,
    kv_in: Var,
    causal: bool,
) -> Result<Var> {
    let wq = p.var(&format!("{name}.wq"))?;
    let wk = p.var(&format!("{name}.wk"))?;
    let wv = p.var(&format!("{name}.wv"))?;
    let wo = p.var(&format!("{name}.wo"))?;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let kt = g.transpose(k)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kth = g.slice_rows(kt, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul(qh, kth)?;
        let scores = g.scale(scores, scale);
        let attn = if causal {
            g.causal_softmax(scores)?
        } else {
            g.softmax(scores)?
        };
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, wo)
}

pub(crate) fn feed_forward(g: &mut Graph, p: &Block, name: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.var(&format!("{name}.w1"))?)?;
    let h = g.add(h, p.var(&format!("{name}.b1"))?)?;
    let h = g.gelu(h);
    let h = g.matmul(h, p.var(&format!("{name}.w2"))?)?;
    g.add(h, p.var(&format!("{name}.b2"))?)
}

/// Token embeddings plus sinusoidal positions.
pub(crate) fn embed(g: &mut Graph, p: &Block, ids: &[usize], d: usize) -> Result<Var> {
    let table = p.var("embed")?;
    let e = g.embedding(table, ids)?;
    let pe = g.constant(vec![ids.len(), d], positional(ids.len(), d))?;
    g.add(e, pe)
}
