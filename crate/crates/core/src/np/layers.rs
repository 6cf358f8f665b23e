use rand::Rng;

use crate::autodiff::{AttentionLayout, Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Affine map `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected stack with tanh between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i < last {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }
}

/// Multi-head attention with learned query/key/value projections and an
/// output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        qk_in: usize,
        v_in: usize,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MultiHeadAttention {
            heads,
            query: Linear::new(store, &format!("{name}.q"), qk_in, width, false, rng),
            key: Linear::new(store, &format!("{name}.k"), qk_in, width, false, rng),
            value: Linear::new(store, &format!("{name}.v"), v_in, width, false, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
        }
    }

    /// Returns the output rows and the raw attention node (for its weights).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        queries: usize,
        keys: usize,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, store, q)?;
        let k = self.key.forward(g, store, k)?;
        let v = self.value.forward(g, store, v)?;
        let layout = AttentionLayout {
            heads: self.heads,
            groups,
            queries,
            keys,
        };
        let att = g.attention(q, k, v, layout)?;
        Ok((self.out.forward(g, store, att)?, att))
    }
}
