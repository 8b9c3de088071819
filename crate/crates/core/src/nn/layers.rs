use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, KeyMask, ParamGroup, ParamId, ParamStore, Scalar, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add_fan_in(format!("{name}.weight"), group, vec![inp, out], inp, rng);
        let b = store.add_zeros(format!("{name}.bias"), group, vec![out]);
        Self { w, b, inp, out }
    }

    /// Applies to the last axis of any rank >= 2 input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_trailing(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), group, vec![dim]),
            beta: store.add_zeros(format!("{name}.beta"), group, vec![dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention over `[B, T, d]` token sequences.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dim, dim, rng),
            heads,
        }
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let x = g.reshape(x, vec![b, t, self.heads, d / self.heads]);
        g.swap_axes12(x)
    }

    /// Queries from `xq`, keys and values from `xkv`; `mask` marks valid keys.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        xkv: Var,
        mask: Option<&KeyMask>,
    ) -> Result<Var> {
        let sq = g.shape(xq).to_vec();
        let sk = g.shape(xkv).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::Shape(format!(
                "attention inputs {sq:?} and {sk:?} are incompatible"
            )));
        }
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let dh = d / self.heads;
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let q = self.split_heads(g, q);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores, mask);
        let ctx = g.matmul(attn, v);
        let ctx = g.swap_axes12(ctx);
        let ctx = g.reshape(ctx, vec![b, tq, d]);
        Ok(self.o.forward(g, ctx))
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ff: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), group, dim, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), group, ff, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: Option<&KeyMask>,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, mask)?;
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.ff1.forward(g, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        let h = g.dropout(h, dropout);
        Ok(g.add(x, h))
    }
}

/// `h = Linear1(v); out = LayerNorm(h + Dropout(Linear2(GELU(h))))`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub lin1: Linear,
    pub lin2: Linear,
    pub ln: LayerNorm,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let group = ParamGroup::Projection;
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), group, inp, dim, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), group, dim, dim, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), group, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var, dropout: f64) -> Result<Var> {
        let w = g.shape(v).last().copied().unwrap_or(0);
        if w != self.lin1.inp {
            return Err(Error::Shape(format!(
                "projection head expects width {}, got {w}",
                self.lin1.inp
            )));
        }
        let h = self.lin1.forward(g, v);
        let u = g.gelu(h);
        let u = self.lin2.forward(g, u);
        let u = g.dropout(u, dropout);
        let s = g.add(h, u);
        Ok(self.ln.forward(g, s))
    }
}

/// Same-padded 1-D convolution, GELU, then pairwise average pooling.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Linear,
    pub kernel: usize,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv: Linear::new(store, name, ParamGroup::Signal, kernel * inp, out, rng),
            kernel,
        }
    }

    /// `[B, L, C_in] -> [B, L/2, C_out]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let cols = g.im2col(x, self.kernel);
        let y = self.conv.forward(g, cols);
        let y = g.gelu(y);
        g.avg_pool2(y)
    }
}
