//! Post-norm Transformer language model: multi-head causal self-attention
//! and GELU feed-forward sub-layers, each wrapped in a residual connection
//! followed by layer normalization, over learned token and position
//! embeddings.

mod cached;
mod forward;

pub use cached::{attention_step, feed_forward, AttentionState, LayerCache};
pub use forward::{BoundAttention, BoundFeedForward, BoundModel};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Bound of the uniform initializer used for every weight matrix.
pub const INIT_BOUND: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn desk(vocab: usize) -> Self {
        ModelConfig {
            vocab,
            d_model: 64,
            d_ff: 256,
            n_heads: 2,
            n_layers: 2,
            max_len: 32,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Query/key/value projections, the attention output projection and the
/// normalization that follows the residual add.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub wh: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub attn: AttentionBlock,
    pub ffn: FeedForwardBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<TransformerLayer>,
    /// `None` when the output projection is tied to `tok_embed`.
    pub out_proj: Option<Tensor>,
}

impl AttentionBlock {
    pub fn init<R: Rng + ?Sized>(d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        let sq = [d_model, d_model];
        AttentionBlock {
            q: Tensor::uniform(&sq, INIT_BOUND, rng),
            k: Tensor::uniform(&sq, INIT_BOUND, rng),
            v: Tensor::uniform(&sq, INIT_BOUND, rng),
            wh: Tensor::uniform(&sq, INIT_BOUND, rng),
            ln_gain: Tensor::ones(&[d_model]),
            ln_bias: Tensor::zeros(&[d_model]),
            n_heads,
        }
    }
}

impl FeedForwardBlock {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        FeedForwardBlock {
            w1: Tensor::uniform(&[d_ff, d_model], INIT_BOUND, rng),
            b1: Tensor::zeros(&[d_ff]),
            w2: Tensor::uniform(&[d_model, d_ff], INIT_BOUND, rng),
            b2: Tensor::zeros(&[d_model]),
            ln_gain: Tensor::ones(&[d_model]),
            ln_bias: Tensor::zeros(&[d_model]),
        }
    }
}

/// Suffixes of the per-layer parameter names, in canonical order.
pub const LAYER_PARAM_NAMES: [&str; 12] = [
    "Q", "K", "V", "Wh", "W1", "b1", "W2", "b2", "ln1.g", "ln1.b", "ln2.g", "ln2.b",
];

impl TransformerLayer {
    fn slots(&self) -> [&Tensor; 12] {
        let (a, f) = (&self.attn, &self.ffn);
        [
            &a.q, &a.k, &a.v, &a.wh, &f.w1, &f.b1, &f.w2, &f.b2, &a.ln_gain, &a.ln_bias,
            &f.ln_gain, &f.ln_bias,
        ]
    }

    fn slots_mut(&mut self) -> [&mut Tensor; 12] {
        let (a, f) = (&mut self.attn, &mut self.ffn);
        [
            &mut a.q,
            &mut a.k,
            &mut a.v,
            &mut a.wh,
            &mut f.w1,
            &mut f.b1,
            &mut f.w2,
            &mut f.b2,
            &mut a.ln_gain,
            &mut a.ln_bias,
            &mut f.ln_gain,
            &mut f.ln_bias,
        ]
    }
}

impl TransformerLm {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab,
            d_model,
            d_ff,
            n_heads,
            n_layers,
            max_len,
            tie_embeddings,
        } = config;
        let tok_embed = Tensor::uniform(&[vocab, d_model], INIT_BOUND, rng);
        let pos_embed = Tensor::uniform(&[max_len, d_model], INIT_BOUND, rng);
        let layers = (0..n_layers)
            .map(|_| TransformerLayer {
                attn: AttentionBlock::init(d_model, n_heads, rng),
                ffn: FeedForwardBlock::init(d_model, d_ff, rng),
            })
            .collect();
        let out_proj = (!tie_embeddings).then(|| Tensor::uniform(&[vocab, d_model], INIT_BOUND, rng));
        Ok(TransformerLm {
            config,
            tok_embed,
            pos_embed,
            layers,
            out_proj,
        })
    }

    /// Expected shape of every named parameter, in canonical order.
    pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (config.d_model, config.d_ff);
        let mut out = vec![
            ("embed.tok".to_string(), vec![config.vocab, d]),
            ("embed.pos".to_string(), vec![config.max_len, d]),
        ];
        for i in 0..config.n_layers {
            let shapes = [
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![f, d],
                vec![f],
                vec![d, f],
                vec![d],
                vec![d],
                vec![d],
                vec![d],
                vec![d],
            ];
            for (name, shape) in LAYER_PARAM_NAMES.iter().zip(shapes) {
                out.push((format!("layer{i}.{name}"), shape));
            }
        }
        if !config.tie_embeddings {
            out.push(("out.proj".to_string(), vec![config.vocab, d]));
        }
        out
    }

    /// Every parameter with its checkpoint name, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.tok".to_string(), &self.tok_embed),
            ("embed.pos".to_string(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(layer.slots()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        if let Some(p) = &self.out_proj {
            out.push(("out.proj".to_string(), p));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.extend(layer.slots_mut());
        }
        if let Some(p) = &mut self.out_proj {
            out.push(p);
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let index = self.named_params().iter().position(|(n, _)| n == name)?;
        self.params_mut().into_iter().nth(index)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_named(config: ModelConfig, mut tensors: HashMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::format(name, "tensor missing"))?;
            if t.shape() != shape {
                return Err(Error::format(
                    name,
                    format!("shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            Ok(t)
        };
        let shapes = Self::param_shapes(&config);
        let mut ordered = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            ordered.push(take(name, shape)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(extra.clone(), "unexpected tensor"));
        }
        let mut it = ordered.into_iter();
        let mut next = || it.next().expect("one tensor per expected name");
        let tok_embed = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (q, k, v, wh) = (next(), next(), next(), next());
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let (g1, bb1, g2, bb2) = (next(), next(), next(), next());
            layers.push(TransformerLayer {
                attn: AttentionBlock {
                    q,
                    k,
                    v,
                    wh,
                    ln_gain: g1,
                    ln_bias: bb1,
                    n_heads: config.n_heads,
                },
                ffn: FeedForwardBlock {
                    w1,
                    b1,
                    w2,
                    b2,
                    ln_gain: g2,
                    ln_bias: bb2,
                },
            });
        }
        let out_proj = (!config.tie_embeddings).then(&mut next);
        Ok(TransformerLm {
            config,
            tok_embed,
            pos_embed,
            layers,
            out_proj,
        })
    }

    /// All parameter values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, values: &[f32]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(Error::shape(
                "set_flat",
                format!("{} values for {total} parameters", values.len()),
            ));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        BoundModel::new(self, g, trainable)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Index(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index(format!(
                "token {bad} out of range for vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Per-position negative log-likelihood, evaluated over the whole
    /// sequence at once with a causal mask. Position `t` predicts token
    /// `t + 1`, so the result has `tokens.len() - 1` entries.
    pub fn forward_sequence(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        if tokens.len() < 2 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let nll = bound.sequence_nll(&mut g, tokens)?;
        Ok(g.value(nll).data().to_vec())
    }

    /// Same quantity as [`forward_sequence`](Self::forward_sequence), computed
    /// one step at a time against a growing key/value cache.
    pub fn forward_sequence_cached(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        let mut state = AttentionState::new(&self.config);
        let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
        for (t, &tok) in tokens.iter().enumerate().take(tokens.len().saturating_sub(1)) {
            let logits = self.step(tok, &mut state)?;
            let lse = crate::tensor::kernels::log_sum_exp(&logits);
            let next = tokens[t + 1];
            out.push((lse - f64::from(logits[next])) as f32);
        }
        Ok(out)
    }

    /// Consumes one token and returns next-token logits.
    pub fn step(&self, token: usize, state: &mut AttentionState) -> Result<Vec<f32>> {
        cached::model_step(self, token, state)
    }

    pub fn output_matrix(&self) -> &Tensor {
        self.out_proj.as_ref().unwrap_or(&self.tok_embed)
    }
}

/// Sum of NLL and number of predicted positions over a token stream, split
/// into `max_len` windows that overlap by one token so that every token
/// after the first is predicted exactly once.
pub fn stream_nll(model: &TransformerLm, stream: &[usize]) -> Result<(f64, usize)> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for window in stream_windows(stream.len(), model.config.max_len) {
        let nll = model.forward_sequence(&stream[window])?;
        total += nll.iter().map(|&v| f64::from(v)).sum::<f64>();
        count += nll.len();
    }
    Ok((total, count))
}

/// Window ranges of at most `max_len` tokens covering `0..len`, consecutive
/// windows sharing one boundary token.
pub fn stream_windows(len: usize, max_len: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    if len < 2 || max_len < 2 {
        return out;
    }
    let mut start = 0;
    while start + 1 < len {
        let end = (start + max_len).min(len);
        out.push(start..end);
        start = end - 1;
    }
    out
}

/// `exp` of the mean NLL over every predicted position of the stream.
pub fn perplexity(model: &TransformerLm, stream: &[usize]) -> Result<f64> {
    let (total, count) = stream_nll(model, stream)?;
    if count == 0 {
        return Err(Error::EmptyInput(
            "perplexity needs at least two tokens".into(),
        ));
    }
    Ok((total / count as f64).exp())
}
