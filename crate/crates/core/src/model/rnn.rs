//! Single-layer Elman recurrence `h_t = tanh(W_h h_{t−1} + W_x x_t + b)`,
//! with `h_0 = 0`.

use super::{tanh_std, Binder, Init, ModelConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};

pub(super) fn init(c: &ModelConfig, init: &mut Init<'_>) {
    init.normal("embed", &[c.vocab_size, c.embed_dim], 1.0);
    // Both matrices feed the same tanh, whose fan-in is d + h.
    let std = tanh_std(c.embed_dim + c.hidden_dim);
    init.normal("rnn.w_x", &[c.embed_dim, c.hidden_dim], std);
    init.normal("rnn.w_h", &[c.hidden_dim, c.hidden_dim], std);
    init.fill("rnn.b", &[c.hidden_dim], 0.0);
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
    let e = g.reshape(e, &[batch, len, c.embed_dim])?;
    let (w_x, w_h, bias) = (b.p(g, "rnn.w_x")?, b.p(g, "rnn.w_h")?, b.p(g, "rnn.b")?);
    // The input projection does not depend on the state: do it for all steps at once.
    let xw = g.matmul(e, w_x)?;
    let xw = g.add_bias(xw, bias)?;
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        let mut pre = g.time_step(xw, t)?;
        if let Some(&h) = states.last() {
            let rec = g.matmul(h, w_h)?;
            pre = g.add(pre, rec)?;
        }
        states.push(g.tanh(pre));
    }
    let h = g.stack_steps(&states)?;
    b.linear(g, h, "out")
}
