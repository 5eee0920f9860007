//! Decoder-only Transformer with post-norm blocks:
//! `x ← LN(x + Attn(x))`, `x ← LN(x + FFN(x))`, FFN width `4d` with relu.

use super::{relu_std, Binder, Init, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

pub(super) fn init(c: &ModelConfig, init: &mut Init<'_>) {
    let d = c.embed_dim;
    init.normal("embed", &[c.vocab_size, d], 1.0);
    init.normal("pos", &[c.context_length, d], 1.0);
    let linear_std = 1.0 / (d as f64).sqrt();
    for i in 0..c.n_blocks {
        for proj in ["q", "k", "v", "o"] {
            init.normal(&format!("block{i}.attn.{proj}.weight"), &[d, d], linear_std);
            init.fill(&format!("block{i}.attn.{proj}.bias"), &[d], 0.0);
        }
        init.norm(&format!("block{i}.ln1"), d, false);
        init.normal(&format!("block{i}.ffn1.weight"), &[d, 4 * d], relu_std(d));
        init.fill(&format!("block{i}.ffn1.bias"), &[4 * d], 0.0);
        init.normal(&format!("block{i}.ffn2.weight"), &[4 * d, d], 1.0 / ((4 * d) as f64).sqrt());
        init.fill(&format!("block{i}.ffn2.bias"), &[d], 0.0);
        init.norm(&format!("block{i}.ln2"), d, false);
    }
    init.output(d, c.vocab_size, c.eps_init);
}

pub(super) fn forward(
    c: &ModelConfig,
    b: &mut Binder<'_>,
    g: &mut Graph,
    ids: &[usize],
    batch: usize,
    len: usize,
) -> Result<Var> {
    if len > c.context_length {
        return Err(Error::InvalidArgument(format!(
            "input length {len} exceeds the context length {}",
            c.context_length
        )));
    }
    let d = c.embed_dim;
    let table = b.p(g, "embed")?;
    let tok = g.embedding(table, ids)?;
    let pos_table = b.p(g, "pos")?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let pos = g.embedding(pos_table, &positions)?;
    let x = g.add(tok, pos)?;
    let mut x = g.reshape(x, &[batch, len, d])?;
    for i in 0..c.n_blocks {
        let q = b.linear(g, x, &format!("block{i}.attn.q"))?;
        let k = b.linear(g, x, &format!("block{i}.attn.k"))?;
        let v = b.linear(g, x, &format!("block{i}.attn.v"))?;
        let a = g.causal_attention(q, k, v, c.n_heads)?;
        let a = b.linear(g, a, &format!("block{i}.attn.o"))?;
        let r = g.add(x, a)?;
        x = b.layer_norm(g, r, &format!("block{i}.ln1"))?;
        let f = b.linear(g, x, &format!("block{i}.ffn1"))?;
        let f = g.relu(f);
        let f = b.linear(g, f, &format!("block{i}.ffn2"))?;
        let r = g.add(x, f)?;
        x = b.layer_norm(g, r, &format!("block{i}.ln2"))?;
    }
    b.linear(g, x, "out")
}
