use std::collections::BTreeMap;

use crate::numerics::{Axis, Graph, NodeId, NumericsError};
use crate::scalar::Scalar;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
}

/// Parameter shapes and initializers declared while building a graph.
pub type ParamSpecs = BTreeMap<String, (Vec<usize>, Init)>;

/// Graph builder that records parameter initializers as it declares them.
pub struct Builder<'a, T> {
    pub g: &'a mut Graph<T>,
    pub specs: &'a mut ParamSpecs,
}

type R = Result<NodeId, NumericsError>;

impl<T: Scalar> Builder<'_, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> R {
        self.specs
            .entry(name.to_string())
            .or_insert_with(|| (shape.to_vec(), init));
        self.g.param(name, shape)
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: NodeId, name: &str, out: usize, zero: bool) -> R {
        let cin = self.g.shape(x)[1];
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal(1.0 / (cin as f64).sqrt())
        };
        let w = self.param(&format!("{name}.w"), &[cin, out], init)?;
        let b = self.param(&format!("{name}.b"), &[1, out], Init::Zeros)?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    /// Temporal convolution with bias, kernel 3.
    pub fn conv(&mut self, x: NodeId, name: &str, out: usize, stride: usize, zero: bool) -> R {
        let cin = self.g.shape(x)[1];
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal(1.0 / ((3 * cin) as f64).sqrt())
        };
        let w = self.param(&format!("{name}.w"), &[3, cin, out], init)?;
        let b = self.param(&format!("{name}.b"), &[1, out], Init::Zeros)?;
        let y = self.g.conv1d(x, w, stride, 1)?;
        self.g.add(y, b)
    }

    /// `(gamma(c) + 1) * h + beta(c)` with zero-initialized heads.
    pub fn film(&mut self, h: NodeId, cond: NodeId, name: &str) -> R {
        let ch = self.g.shape(h)[1];
        let gamma = self.linear(cond, &format!("{name}.gamma"), ch, true)?;
        let beta = self.linear(cond, &format!("{name}.beta"), ch, true)?;
        film_apply(self.g, h, gamma, beta)
    }

    /// `h + conv(silu(film(norm(h), c)))`.
    pub fn res_block(&mut self, h: NodeId, cond: NodeId, name: &str) -> R {
        let ch = self.g.shape(h)[1];
        let n = self.g.layer_norm(h, T::lit(1e-5));
        let n = self.film(n, cond, &format!("{name}.film"))?;
        let a = self.g.silu(n);
        let a = self.conv(a, &format!("{name}.conv"), ch, 1, false)?;
        self.g.add(h, a)
    }

    fn projections(&mut self, name: &str, ch: usize) -> Result<[NodeId; 3], NumericsError> {
        let init = Init::Normal(1.0 / (ch as f64).sqrt());
        Ok([
            self.param(&format!("{name}.wq"), &[ch, ch], init)?,
            self.param(&format!("{name}.wk"), &[ch, ch], init)?,
            self.param(&format!("{name}.wv"), &[ch, ch], init)?,
        ])
    }

    /// Multi-head attention of `q_in` over `kv_in` before the output
    /// projection; also returns each head's weight matrix.
    pub fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        name: &str,
        heads: usize,
    ) -> Result<(NodeId, Vec<NodeId>), NumericsError> {
        let ch = self.g.shape(q_in)[1];
        let [wq, wk, wv] = self.projections(name, ch)?;
        let q = self.g.matmul(q_in, wq)?;
        let k = self.g.matmul(kv_in, wk)?;
        let v = self.g.matmul(kv_in, wv)?;
        let dh = ch / heads;
        let inv = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.g.slice_cols(q, s, e)?,
                    self.g.slice_cols(k, s, e)?,
                    self.g.slice_cols(v, s, e)?,
                )
            };
            let scores = self.g.matmul_t(qh, kh)?;
            let scores = self.g.scale(scores, inv);
            let w = self.g.softmax_rows(scores);
            outs.push(self.g.matmul(w, vh)?);
            weights.push(w);
        }
        let out = if heads == 1 {
            outs[0]
        } else {
            self.g.concat(&outs, Axis::Cols)?
        };
        Ok((out, weights))
    }

    /// Bidirectional cross-attention with projections shared by both
    /// directions.
    pub fn cross_attend(
        &mut self,
        h_a: NodeId,
        h_b: NodeId,
        name: &str,
        heads: usize,
    ) -> Result<CrossAttention, NumericsError> {
        let (a, weights_a) = self.attention(h_a, h_b, name, heads)?;
        let (b, weights_b) = self.attention(h_b, h_a, name, heads)?;
        Ok(CrossAttention {
            a,
            b,
            weights_a,
            weights_b,
        })
    }

    fn out_proj(&mut self, x: NodeId, name: &str) -> R {
        let ch = self.g.shape(x)[1];
        let wo = self.param(&format!("{name}.wo"), &[ch, ch], Init::Normal(1.0 / (ch as f64).sqrt()))?;
        self.g.matmul(x, wo)
    }

    /// `h + W_o attn(norm(h), norm(h))`.
    pub fn self_attention_site(&mut self, h: NodeId, name: &str, heads: usize) -> R {
        let n = self.g.layer_norm(h, T::lit(1e-5));
        let (a, _) = self.attention(n, n, name, heads)?;
        let a = self.out_proj(a, name)?;
        self.g.add(h, a)
    }

    /// Residual cross-attention site applied to both streams.
    pub fn cross_attention_site(
        &mut self,
        h_a: NodeId,
        h_b: NodeId,
        name: &str,
        heads: usize,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let na = self.g.layer_norm(h_a, T::lit(1e-5));
        let nb = self.g.layer_norm(h_b, T::lit(1e-5));
        let c = self.cross_attend(na, nb, name, heads)?;
        let a = self.out_proj(c.a, name)?;
        let b = self.out_proj(c.b, name)?;
        Ok((self.g.add(h_a, a)?, self.g.add(h_b, b)?))
    }
}

/// `(gamma + 1) * h + beta`.
pub fn film_apply<T: Scalar>(g: &mut Graph<T>, h: NodeId, gamma: NodeId, beta: NodeId) -> R {
    let scale = g.shift(gamma, T::one());
    let y = g.mul(scale, h)?;
    g.add(y, beta)
}

/// Output nodes of [`Builder::cross_attend`].
#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// Stream A attending over stream B.
    pub a: NodeId,
    /// Stream B attending over stream A.
    pub b: NodeId,
    pub weights_a: Vec<NodeId>,
    pub weights_b: Vec<NodeId>,
}
