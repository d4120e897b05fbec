//! Single-head cross-attention: queries from one token set, keys and values
//! from another, with a residual connection to the queries.

use crate::nn::uniform_init;
use crate::tensor::{Graph, ParamId, ParamStore, Result, RngKey, TensorError, Var};

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, key: RngKey) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut mk = |label: &str, i: u64| {
            store.add(
                format!("{name}.{label}"),
                uniform_init(&[width, width], bound, key.child(label, i)),
            )
        };
        Self {
            query: mk("query", 0),
            key: mk("key", 1),
            value: mk("value", 2),
            width,
        }
    }

    /// `queries + softmax(Q K^T / sqrt(d)) V` with `Q = queries Wq`,
    /// `K = context Wk`, `V = context Wv`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var) -> Result<AttentionOutput> {
        if g.value(context).rows() == 0 || g.value(queries).rows() == 0 {
            return Err(TensorError::Invalid("attention over an empty token set".into()));
        }
        if g.value(queries).cols() != self.width || g.value(context).cols() != self.width {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                lhs: g.shape(queries).to_vec(),
                rhs: g.shape(context).to_vec(),
            });
        }
        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let wv = g.param(store, self.value);
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(context, wk)?;
        let v = g.matmul(context, wv)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let scaled = g.scale(logits, 1.0 / (self.width as f64).sqrt())?;
        let weights = g.softmax_rows(scaled)?;
        let attended = g.matmul(weights, v)?;
        let output = g.add(queries, attended)?;
        Ok(AttentionOutput { output, weights })
    }
}
