//! Step-at-a-time evaluation against a key/value history cache.

use super::{AttentionBlock, FeedForwardBlock, ModelConfig, TransformerLm};
use crate::error::{Error, Result};
use crate::tensor::kernels::{gelu, layer_norm_row, matvec, softmax_prefix};

/// Keys and values consumed so far by one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    d_model: usize,
    n_heads: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl LayerCache {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        LayerCache {
            d_model,
            n_heads,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// History for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub layers: Vec<LayerCache>,
    steps: usize,
}

impl AttentionState {
    pub fn new(config: &ModelConfig) -> Self {
        AttentionState {
            layers: (0..config.n_layers)
                .map(|_| LayerCache::new(config.d_model, config.n_heads))
                .collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

fn apply_layer_norm(s: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let (xhat, _) = layer_norm_row(s);
    xhat.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&h, (&g, &b))| g * h + b)
        .collect()
}

/// One attention sub-layer step: projects `x_t`, appends its key and value to
/// `cache`, attends over the whole history and returns
/// `LayerNorm(W_h · attention + x_t)`.
pub fn attention_step(block: &AttentionBlock, x_t: &[f32], cache: &mut LayerCache) -> Result<Vec<f32>> {
    let d = block.q.shape()[0];
    if x_t.len() != d {
        return Err(Error::shape(
            "attention_step",
            format!("input of {} values for d_model {d}", x_t.len()),
        ));
    }
    if cache.d_model != d || cache.n_heads != block.n_heads {
        return Err(Error::StateMismatch(format!(
            "cache built for d_model {} / {} heads, layer has {d} / {}",
            cache.d_model, cache.n_heads, block.n_heads
        )));
    }
    if cache.keys.len() != cache.values.len() {
        return Err(Error::StateMismatch("key and value histories differ in length".into()));
    }
    let q = matvec(block.q.data(), x_t, d, d);
    cache.keys.push(matvec(block.k.data(), x_t, d, d));
    cache.values.push(matvec(block.v.data(), x_t, d, d));

    let d_head = d / block.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let steps = cache.keys.len();
    let mut attended = vec![0.0f32; d];
    for h in 0..block.n_heads {
        let span = h * d_head..(h + 1) * d_head;
        let mut scores: Vec<f32> = cache
            .keys
            .iter()
            .map(|k| {
                let s: f64 = q[span.clone()]
                    .iter()
                    .zip(&k[span.clone()])
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                (s * scale) as f32
            })
            .collect();
        softmax_prefix(&mut scores, steps);
        for (j, slot) in attended[span.clone()].iter_mut().enumerate() {
            let acc: f64 = scores
                .iter()
                .zip(&cache.values)
                .map(|(&w, v)| f64::from(w) * f64::from(v[h * d_head + j]))
                .sum();
            *slot = acc as f32;
        }
    }
    let projected = matvec(block.wh.data(), &attended, d, d);
    let y: Vec<f32> = projected.iter().zip(x_t).map(|(a, b)| a + b).collect();
    Ok(apply_layer_norm(&y, block.ln_gain.data(), block.ln_bias.data()))
}

/// `LayerNorm(W_2 · GELU(W_1 · z + b_1) + b_2 + z)` for a single position.
pub fn feed_forward(block: &FeedForwardBlock, z_t: &[f32]) -> Result<Vec<f32>> {
    let (d_ff, d) = (block.w1.shape()[0], block.w1.shape()[1]);
    if z_t.len() != d {
        return Err(Error::shape(
            "feed_forward",
            format!("input of {} values for d_model {d}", z_t.len()),
        ));
    }
    let hidden: Vec<f32> = matvec(block.w1.data(), z_t, d_ff, d)
        .iter()
        .zip(block.b1.data())
        .map(|(&h, &b)| gelu(h + b))
        .collect();
    let s: Vec<f32> = matvec(block.w2.data(), &hidden, d, d_ff)
        .iter()
        .zip(block.b2.data())
        .zip(z_t)
        .map(|((&o, &b), &z)| o + b + z)
        .collect();
    Ok(apply_layer_norm(&s, block.ln_gain.data(), block.ln_bias.data()))
}

pub(super) fn model_step(model: &TransformerLm, token: usize, state: &mut AttentionState) -> Result<Vec<f32>> {
    let c = &model.config;
    if state.layers.len() != c.n_layers {
        return Err(Error::StateMismatch(format!(
            "state has {} layers, model has {}",
            state.layers.len(),
            c.n_layers
        )));
    }
    if state.layers.iter().any(|l| l.len() != state.steps) {
        return Err(Error::StateMismatch(
            "layer caches disagree with the number of consumed steps".into(),
        ));
    }
    if token >= c.vocab {
        return Err(Error::Index(format!("token {token} out of range for vocabulary of {}", c.vocab)));
    }
    if state.steps >= c.max_len {
        return Err(Error::Index(format!("position {} exceeds max_len {}", state.steps, c.max_len)));
    }
    let d = c.d_model;
    let tok = &model.tok_embed.data()[token * d..(token + 1) * d];
    let pos = &model.pos_embed.data()[state.steps * d..(state.steps + 1) * d];
    let mut x: Vec<f32> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
    for (layer, cache) in model.layers.iter().zip(state.layers.iter_mut()) {
        let z = attention_step(&layer.attn, &x, cache)?;
        x = feed_forward(&layer.ffn, &z)?;
    }
    state.steps += 1;
    Ok(matvec(model.output_matrix().data(), &x, c.vocab, d))
}
