//! Full-sequence forward pass recorded on a [`Graph`].

use super::{AttentionBlock, FeedForwardBlock, TransformerLm};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

fn bind_tensor(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub wh: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct BoundFeedForward {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl AttentionBlock {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAttention {
        BoundAttention {
            q: bind_tensor(g, &self.q, trainable),
            k: bind_tensor(g, &self.k, trainable),
            v: bind_tensor(g, &self.v, trainable),
            wh: bind_tensor(g, &self.wh, trainable),
            ln_gain: bind_tensor(g, &self.ln_gain, trainable),
            ln_bias: bind_tensor(g, &self.ln_bias, trainable),
            n_heads: self.n_heads,
        }
    }
}

impl FeedForwardBlock {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFeedForward {
        BoundFeedForward {
            w1: bind_tensor(g, &self.w1, trainable),
            b1: bind_tensor(g, &self.b1, trainable),
            w2: bind_tensor(g, &self.w2, trainable),
            b2: bind_tensor(g, &self.b2, trainable),
            ln_gain: bind_tensor(g, &self.ln_gain, trainable),
            ln_bias: bind_tensor(g, &self.ln_bias, trainable),
        }
    }
}

/// `x · Wᵀ` for activations `x[T×in]` and a weight `W[out×in]`.
fn linear(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    g.matmul(x, wt)
}

impl BoundAttention {
    /// `LayerNorm(W_h · SelfAttention(x) + x)` for every row of `x[T×d]`,
    /// row `t` attending to rows `0..=t`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d_model = g.value(x).cols();
        let d_head = d_model / self.n_heads;
        let q = linear(g, x, self.q)?;
        let k = linear(g, x, self.k)?;
        let v = linear(g, x, self.v)?;
        let scale = 1.0 / (d_head as f32).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * d_head, d_head)?;
            let kh = g.slice_cols(k, h * d_head, d_head)?;
            let vh = g.slice_cols(v, h * d_head, d_head)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, true)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let attended = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads)?
        };
        let projected = linear(g, attended, self.wh)?;
        let residual = g.add(projected, x)?;
        g.layer_norm(residual, self.ln_gain, self.ln_bias)
    }
}

impl BoundFeedForward {
    /// `LayerNorm(W_2 · GELU(W_1 · z + b_1) + b_2 + z)` row-wise.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let hidden = linear(g, z, self.w1)?;
        let hidden = g.add_row(hidden, self.b1)?;
        let hidden = g.gelu(hidden)?;
        let out = linear(g, hidden, self.w2)?;
        let out = g.add_row(out, self.b2)?;
        let residual = g.add(out, z)?;
        g.layer_norm(residual, self.ln_gain, self.ln_bias)
    }
}

/// A model's parameters placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub tok: Var,
    pub pos: Var,
    pub layers: Vec<(BoundAttention, BoundFeedForward)>,
    pub out: Var,
    /// Every bound parameter in canonical (checkpoint) order.
    pub params: Vec<Var>,
}

impl BoundModel {
    pub(super) fn new(model: &TransformerLm, g: &mut Graph, trainable: bool) -> Self {
        let tok = bind_tensor(g, &model.tok_embed, trainable);
        let pos = bind_tensor(g, &model.pos_embed, trainable);
        let mut params = vec![tok, pos];
        let mut layers = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let a = layer.attn.bind(g, trainable);
            let f = layer.ffn.bind(g, trainable);
            params.extend([
                a.q, a.k, a.v, a.wh, f.w1, f.b1, f.w2, f.b2, a.ln_gain, a.ln_bias, f.ln_gain,
                f.ln_bias,
            ]);
            layers.push((a, f));
        }
        let out = match &model.out_proj {
            Some(p) => {
                let v = bind_tensor(g, p, trainable);
                params.push(v);
                v
            }
            None => tok,
        };
        BoundModel {
            tok,
            pos,
            layers,
            out,
            params,
        }
    }

    /// Token plus position embedding for `tokens`, one row per token.
    pub fn embed(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let tok = g.gather_rows(self.tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(self.pos, &positions)?;
        g.add(tok, pos)
    }

    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        linear(g, hidden, self.out)
    }

    /// Per-position NLL vector of length `tokens.len() - 1`.
    /// Callers must pass at least two tokens.
    pub fn sequence_nll(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let inputs = &tokens[..tokens.len() - 1];
        let targets = &tokens[1..];
        let mut x = self.embed(g, inputs)?;
        for (attn, ffn) in &self.layers {
            let z = attn.forward(g, x)?;
            x = ffn.forward(g, z)?;
        }
        let logits = self.logits(g, x)?;
        g.cross_entropy(logits, targets)
    }
}
