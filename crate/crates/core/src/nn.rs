//! Transformer building blocks shared by the generator and the reward model.
//!
//! Pre-norm residual blocks with single-head attention, sinusoidal
//! positions, affine-free layer norm and a GELU feed-forward layer. Every op
//! is row-independent, so a causal decoder gives bit-identical rows for a
//! prefix whether or not later positions are present.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    pub dim: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Maximum sequence length for encoder and decoder inputs.
    pub context: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { dim: 32, ffn: 64, enc_layers: 1, dec_layers: 1, context: 512 }
    }
}

pub fn positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

fn insert_uniform(p: &mut ParamSet, name: String, rows: usize, cols: usize, rng: &mut impl Rng) {
    let bound = (1.0 / rows as f64).sqrt();
    p.insert(name, ParamSet::uniform(rows, cols, bound, rng));
}

pub fn init_attention(p: &mut ParamSet, prefix: &str, dim: usize, rng: &mut impl Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        insert_uniform(p, format!("{prefix}.{w}"), dim, dim, rng);
    }
}

pub fn init_ffn(p: &mut ParamSet, prefix: &str, dim: usize, ffn: usize, rng: &mut impl Rng) {
    insert_uniform(p, format!("{prefix}.ff1"), dim, ffn, rng);
    p.insert(format!("{prefix}.ff1b"), Tensor::zeros(1, ffn));
    insert_uniform(p, format!("{prefix}.ff2"), ffn, dim, rng);
    p.insert(format!("{prefix}.ff2b"), Tensor::zeros(1, dim));
}

/// Encoder stack parameters under `prefix` (`{prefix}{l}.attn`, `{prefix}{l}.ffn`).
pub fn init_stack(p: &mut ParamSet, prefix: &str, layers: usize, arch: &Arch, cross: bool, rng: &mut impl Rng) {
    for l in 0..layers {
        init_attention(p, &format!("{prefix}{l}.attn"), arch.dim, rng);
        if cross {
            init_attention(p, &format!("{prefix}{l}.cross"), arch.dim, rng);
        }
        init_ffn(p, &format!("{prefix}{l}.ffn"), arch.dim, arch.ffn, rng);
    }
}

/// Single-head attention of `x` (queries) over `mem` (keys/values).
pub fn attention(g: &mut Graph, b: &Bound, prefix: &str, x: Var, mem: Var, causal: bool) -> Var {
    let dim = g.value(x).cols();
    let q = g.matmul(x, b.var(&format!("{prefix}.wq")));
    let k = g.matmul(mem, b.var(&format!("{prefix}.wk")));
    let v = g.matmul(mem, b.var(&format!("{prefix}.wv")));
    let s = g.matmul_t(q, k);
    let s = g.scale(s, 1.0 / (dim as f64).sqrt());
    let a = g.softmax_rows(s, causal);
    let h = g.matmul(a, v);
    g.matmul(h, b.var(&format!("{prefix}.wo")))
}

pub fn feed_forward(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = g.matmul(x, b.var(&format!("{prefix}.ff1")));
    let h = g.add_row(h, b.var(&format!("{prefix}.ff1b")));
    let h = g.gelu(h);
    let o = g.matmul(h, b.var(&format!("{prefix}.ff2")));
    g.add_row(o, b.var(&format!("{prefix}.ff2b")))
}

/// Token embeddings plus sinusoidal positions.
pub fn embed(g: &mut Graph, table: Var, ids: &[usize]) -> Var {
    let e = g.gather(table, ids);
    let dim = g.value(e).cols();
    let pe = g.constant(positions(ids.len(), dim));
    g.add(e, pe)
}

/// Bidirectional stack; returns the final layer-normed states.
pub fn encoder(g: &mut Graph, b: &Bound, prefix: &str, layers: usize, mut x: Var) -> Var {
    for l in 0..layers {
        let n = g.layer_norm(x);
        let a = attention(g, b, &format!("{prefix}{l}.attn"), n, n, false);
        x = g.add(x, a);
        let n = g.layer_norm(x);
        let f = feed_forward(g, b, &format!("{prefix}{l}.ffn"), n);
        x = g.add(x, f);
    }
    g.layer_norm(x)
}

/// Causal stack with cross-attention to `memory`.
pub fn decoder(g: &mut Graph, b: &Bound, prefix: &str, layers: usize, mut x: Var, memory: Var) -> Var {
    for l in 0..layers {
        let n = g.layer_norm(x);
        let a = attention(g, b, &format!("{prefix}{l}.attn"), n, n, true);
        x = g.add(x, a);
        let n = g.layer_norm(x);
        let c = attention(g, b, &format!("{prefix}{l}.cross"), n, memory, false);
        x = g.add(x, c);
        let n = g.layer_norm(x);
        let f = feed_forward(g, b, &format!("{prefix}{l}.ffn"), n);
        x = g.add(x, f);
    }
    g.layer_norm(x)
}
