//! Stacked dilated causal convolutions.
//!
//! embed → for each layer `l`: causal conv (dilation `K_f^l`) → tanh →
//! batch norm over all `B·T` positions → linear output head.

use super::{tanh_std, Binder, Init, ModelConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};

pub(super) fn init(c: &ModelConfig, init: &mut Init<'_>) {
    init.normal("embed", &[c.vocab_size, c.embed_dim], 1.0);
    for l in 0..c.conv_layers {
        let c_in = if l == 0 { c.embed_dim } else { c.hidden_dim };
        init.normal(
            &format!("conv{l}.weight"),
            &[c.conv_kernel, c_in, c.hidden_dim],
            tanh_std(c.conv_kernel * c_in),
        );
        init.norm(&format!("conv{l}.bn"), c.hidden_dim, true);
    }
    init.output(c.hidden_dim, c.vocab_size, c.eps_init);
}

pub(super) fn forward(
    c: &ModelConfig,
    b: &mut Binder<'_>,
    g: &mut Graph,
    ids: &[usize],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let table = b.p(g, "embed")?;
    let e = g.embedding(table, ids)?;
    let mut x = g.reshape(e, &[batch, len, c.embed_dim])?;
    for (l, dilation) in c.dilations().into_iter().enumerate() {
        let w = b.p(g, &format!("conv{l}.weight"))?;
        let y = g.causal_conv1d(x, w, dilation)?;
        let y = g.tanh(y);
        x = b.batch_norm(g, y, &format!("conv{l}.bn"))?;
    }
    b.linear(g, x, "out")
}
