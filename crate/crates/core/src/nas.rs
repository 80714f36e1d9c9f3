//! Mixed-precision architecture search.
//!
//! Each Transformer layer makes two decisions, one for the attention
//! sub-layer and one for the feed-forward sub-layer. Every decision owns one
//! candidate per bit-width, copied from the uniformly quantized model of that
//! width, and a vector of selection logits. The sub-layer output is the
//! softmax-weighted sum of its candidates' outputs, all fed the same input.
//! Training minimizes `CE + β·Σ α·√bits`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AttentionBlock, BoundAttention, BoundFeedForward, FeedForwardBlock, ModelConfig, TransformerLm,
};
use crate::quant::{quantize_cluster, BitWidth, ClusterSpec, Precision};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{clip_flat, sample_windows, LogRow, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubLayer {
    Attn,
    Ffn,
}

impl fmt::Display for SubLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubLayer::Attn => "attn",
            SubLayer::Ffn => "ffn",
        })
    }
}

impl FromStr for SubLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(SubLayer::Attn),
            "ffn" => Ok(SubLayer::Ffn),
            other => Err(Error::Config(format!("unknown sub-layer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperLayer {
    pub attn: Vec<AttentionBlock>,
    pub ffn: Vec<FeedForwardBlock>,
    pub attn_logits: Vec<f32>,
    pub ffn_logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub config: ModelConfig,
    /// Candidate bit-widths, ascending; index `i` of every decision uses `bits[i]`.
    pub bits: Vec<BitWidth>,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub out_proj: Option<Tensor>,
    pub layers: Vec<SuperLayer>,
    /// Grid of the shared embeddings and output projection; `None` keeps
    /// them in full precision.
    pub embed_bits: Option<BitWidth>,
    pub out_bits: Option<BitWidth>,
}

/// Builds a supernet from uniformly quantized models (given dequantized, one
/// per bit-width) and the model that provides the shared embeddings and output
/// projection. All weights are copied.
pub fn build_supernet(
    uniform: &[(BitWidth, &TransformerLm)],
    shared: &TransformerLm,
    embed_bits: Option<BitWidth>,
    out_bits: Option<BitWidth>,
) -> Result<Supernet> {
    if uniform.is_empty() {
        return Err(Error::Incompatible("supernet needs at least one candidate".into()));
    }
    let config = shared.config;
    if let Some((b, _)) = uniform.iter().find(|(_, m)| m.config != config) {
        return Err(Error::Incompatible(format!(
            "{b}-bit candidate has a different architecture from the shared model"
        )));
    }
    let mut sorted: Vec<(BitWidth, &TransformerLm)> = uniform.to_vec();
    sorted.sort_by_key(|(b, _)| *b);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Incompatible("duplicate candidate bit-width".into()));
    }
    let k = sorted.len();
    let layers = (0..config.n_layers)
        .map(|l| SuperLayer {
            attn: sorted.iter().map(|(_, m)| m.layers[l].attn.clone()).collect(),
            ffn: sorted.iter().map(|(_, m)| m.layers[l].ffn.clone()).collect(),
            attn_logits: vec![0.0; k],
            ffn_logits: vec![0.0; k],
        })
        .collect();
    Ok(Supernet {
        config,
        bits: sorted.iter().map(|(b, _)| *b).collect(),
        tok_embed: shared.tok_embed.clone(),
        pos_embed: shared.pos_embed.clone(),
        out_proj: shared.out_proj.clone(),
        layers,
        embed_bits,
        out_bits,
    })
}

/// Row-wise softmax in double precision.
fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| f64::from(l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// One decision's logits and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub layer: usize,
    pub sublayer: SubLayer,
    pub logits: Vec<f32>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionWeights {
    pub bits: Vec<BitWidth>,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SelectionRow {
    layer: usize,
    sublayer: SubLayer,
    bits: u32,
    logit: f32,
    weight: f64,
}

impl SelectionWeights {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for d in &self.decisions {
            for ((b, &logit), &weight) in self.bits.iter().zip(&d.logits).zip(&d.weights) {
                w.serialize(SelectionRow {
                    layer: d.layer,
                    sublayer: d.sublayer,
                    bits: b.bits(),
                    logit,
                    weight,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows: Vec<SelectionRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let mut bits: Vec<BitWidth> = Vec::new();
        let mut decisions: Vec<Decision> = Vec::new();
        for row in rows {
            let b = BitWidth::new(row.bits)?;
            let fresh = decisions
                .last()
                .is_none_or(|d| (d.layer, d.sublayer) != (row.layer, row.sublayer));
            if fresh {
                decisions.push(Decision {
                    layer: row.layer,
                    sublayer: row.sublayer,
                    logits: Vec::new(),
                    weights: Vec::new(),
                });
            }
            if decisions.len() == 1 {
                bits.push(b);
            }
            let d = decisions.last_mut().expect("pushed above");
            let d_len = d.logits.len();
            if bits.get(d_len) != Some(&b) {
                return Err(Error::format(
                    "bits",
                    format!("layer {} {}: candidate {d_len} is not {b}", row.layer, row.sublayer),
                ));
            }
            d.logits.push(row.logit);
            d.weights.push(row.weight);
        }
        if decisions.is_empty() || decisions.iter().any(|d| d.logits.len() != bits.len()) {
            return Err(Error::format("bits", "every decision must list the same candidates"));
        }
        Ok(SelectionWeights { bits, decisions })
    }
}

impl Supernet {
    pub fn selection(&self) -> SelectionWeights {
        let mut decisions = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (sublayer, logits) in [(SubLayer::Attn, &layer.attn_logits), (SubLayer::Ffn, &layer.ffn_logits)] {
                decisions.push(Decision {
                    layer: l,
                    sublayer,
                    logits: logits.clone(),
                    weights: softmax(logits),
                });
            }
        }
        SelectionWeights {
            bits: self.bits.clone(),
            decisions,
        }
    }

    /// Sets every decision's logits so that the candidate of `bits` gets all
    /// of the weight.
    pub fn set_one_hot(&mut self, bits: BitWidth) -> Result<()> {
        let i = self
            .bits
            .iter()
            .position(|&b| b == bits)
            .ok_or_else(|| Error::Config(format!("no {bits}-bit candidate")))?;
        for layer in &mut self.layers {
            for logits in [&mut layer.attn_logits, &mut layer.ffn_logits] {
                logits.iter_mut().for_each(|l| *l = -1e4);
                logits[i] = 0.0;
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, train_weights: bool, train_arch: bool) -> BoundSupernet {
        let mut weight_params = Vec::new();
        let bind = |g: &mut Graph, t: &Tensor, params: &mut Vec<Var>| {
            if train_weights {
                let v = g.param(t.clone());
                params.push(v);
                v
            } else {
                g.constant(t.clone())
            }
        };
        let tok = bind(g, &self.tok_embed, &mut weight_params);
        let pos = bind(g, &self.pos_embed, &mut weight_params);
        let out = match &self.out_proj {
            Some(p) => bind(g, p, &mut weight_params),
            None => tok,
        };
        let mut arch_params = Vec::new();
        let mut logits_var = |g: &mut Graph, logits: &[f32]| {
            let t = Tensor::new(vec![1, logits.len()], logits.to_vec()).expect("logit row");
            if train_arch {
                let v = g.param(t);
                arch_params.push(v);
                v
            } else {
                g.constant(t)
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let attn: Vec<BoundAttention> = layer.attn.iter().map(|b| b.bind(g, train_weights)).collect();
            let ffn: Vec<BoundFeedForward> = layer.ffn.iter().map(|b| b.bind(g, train_weights)).collect();
            if train_weights {
                for a in &attn {
                    weight_params.extend([a.q, a.k, a.v, a.wh, a.ln_gain, a.ln_bias]);
                }
                for f in &ffn {
                    weight_params.extend([f.w1, f.b1, f.w2, f.b2, f.ln_gain, f.ln_bias]);
                }
            }
            let attn_logits = logits_var(g, &layer.attn_logits);
            let ffn_logits = logits_var(g, &layer.ffn_logits);
            layers.push(BoundSuperLayer {
                attn,
                ffn,
                attn_logits,
                ffn_logits,
            });
        }
        let sqrt_bits = g.constant(
            Tensor::new(
                vec![self.bits.len(), 1],
                self.bits.iter().map(|b| (b.bits() as f32).sqrt()).collect(),
            )
            .expect("bit column"),
        );
        BoundSupernet {
            tok,
            pos,
            out,
            layers,
            sqrt_bits,
            weight_params,
            arch_params,
        }
    }

    /// Per-position NLL of `tokens` through the weighted candidates.
    pub fn forward_sequence(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Index(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if tokens.len() < 2 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false);
        let weights = bound.selection_vars(&mut g)?;
        let nll = bound.sequence_nll(&mut g, &weights, tokens)?;
        Ok(g.value(nll).data().to_vec())
    }

    fn weight_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        if let Some(p) = &mut self.out_proj {
            out.push(p);
        }
        for layer in &mut self.layers {
            for a in &mut layer.attn {
                out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.wh, &mut a.ln_gain, &mut a.ln_bias]);
            }
            for f in &mut layer.ffn {
                out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2, &mut f.ln_gain, &mut f.ln_bias]);
            }
        }
        out
    }

    fn logits_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.attn_logits, &mut l.ffn_logits])
            .collect()
    }

    /// Projects every candidate, and the shared components when they have a
    /// grid, back onto freshly fitted tables.
    pub fn reproject(&mut self) -> Result<()> {
        fn project(tensors: &mut [&mut Tensor], bits: BitWidth) -> Result<()> {
            let values: Vec<f32> = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
            let q = quantize_cluster(&values, bits)?;
            let mut offset = 0;
            for t in tensors.iter_mut() {
                let n = t.numel();
                t.data_mut().copy_from_slice(&q.values[offset..offset + n]);
                offset += n;
            }
            Ok(())
        }
        if let Some(b) = self.embed_bits {
            project(&mut [&mut self.tok_embed, &mut self.pos_embed], b)?;
        }
        if let (Some(b), Some(p)) = (self.out_bits, self.out_proj.as_mut()) {
            project(&mut [p], b)?;
        }
        let bits = self.bits.clone();
        for layer in &mut self.layers {
            for (a, &b) in layer.attn.iter_mut().zip(&bits) {
                project(&mut [&mut a.q, &mut a.k, &mut a.v, &mut a.wh], b)?;
            }
            for (f, &b) in layer.ffn.iter_mut().zip(&bits) {
                project(&mut [&mut f.w1, &mut f.w2], b)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BoundSuperLayer {
    pub attn: Vec<BoundAttention>,
    pub ffn: Vec<BoundFeedForward>,
    pub attn_logits: Var,
    pub ffn_logits: Var,
}

#[derive(Debug, Clone)]
pub struct BoundSupernet {
    pub tok: Var,
    pub pos: Var,
    pub out: Var,
    pub layers: Vec<BoundSuperLayer>,
    sqrt_bits: Var,
    pub weight_params: Vec<Var>,
    pub arch_params: Vec<Var>,
}

/// Softmax rows `[1×K]` of every decision, attention first within a layer.
pub struct SelectionVars(Vec<(Var, Var)>);

fn combine(g: &mut Graph, outputs: &[Var], weights: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        let w = g.element(weights, i)?;
        let term = g.scale_by(o, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::shape("combine", "no candidates"))
}

impl BoundSupernet {
    pub fn selection_vars(&self, g: &mut Graph) -> Result<SelectionVars> {
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = g.softmax(layer.attn_logits, false)?;
            let f = g.softmax(layer.ffn_logits, false)?;
            out.push((a, f));
        }
        Ok(SelectionVars(out))
    }

    pub fn sequence_nll(&self, g: &mut Graph, weights: &SelectionVars, tokens: &[usize]) -> Result<Var> {
        let inputs = &tokens[..tokens.len() - 1];
        let tok = g.gather_rows(self.tok, inputs)?;
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pos = g.gather_rows(self.pos, &positions)?;
        let mut x = g.add(tok, pos)?;
        for (layer, &(wa, wf)) in self.layers.iter().zip(&weights.0) {
            let outs = layer
                .attn
                .iter()
                .map(|a| a.forward(g, x))
                .collect::<Result<Vec<_>>>()?;
            let z = combine(g, &outs, wa)?;
            let outs = layer
                .ffn
                .iter()
                .map(|f| f.forward(g, z))
                .collect::<Result<Vec<_>>>()?;
            x = combine(g, &outs, wf)?;
        }
        let wt = g.transpose(self.out)?;
        let logits = g.matmul(x, wt)?;
        g.cross_entropy(logits, &tokens[1..])
    }

    /// `Σ α·√bits` over every decision, as a single-element node.
    pub fn penalty(&self, g: &mut Graph, weights: &SelectionVars) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(wa, wf) in &weights.0 {
            for w in [wa, wf] {
                let p = g.matmul(w, self.sqrt_bits)?;
                let p = g.element(p, 0)?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => g.add(a, p)?,
                });
            }
        }
        acc.ok_or_else(|| Error::shape("penalty", "supernet has no layers"))
    }

    /// Mean NLL over `windows` plus `β` times the penalty; returns the loss
    /// node and the mean NLL value.
    pub fn loss(&self, g: &mut Graph, windows: &[&[usize]], beta: f32) -> Result<(Var, f64)> {
        let weights = self.selection_vars(g)?;
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for w in windows.iter().filter(|w| w.len() >= 2) {
            let nll = self.sequence_nll(g, &weights, w)?;
            let s = g.sum(nll)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
            count += w.len() - 1;
        }
        let total = total.ok_or_else(|| Error::EmptyInput("batch has no predicted positions".into()))?;
        let mean = g.scale(total, 1.0 / count as f32)?;
        let nll = f64::from(g.value(mean).item());
        if beta == 0.0 {
            return Ok((mean, nll));
        }
        let pen = self.penalty(g, &weights)?;
        let pen = g.scale(pen, beta)?;
        Ok((g.add(mean, pen)?, nll))
    }
}

/// `f + β·Σ α·√bits`.
pub fn nas_loss(nll: f64, weights: &SelectionWeights, beta: f64) -> f64 {
    let penalty: f64 = weights
        .decisions
        .iter()
        .map(|d| {
            d.weights
                .iter()
                .zip(&weights.bits)
                .map(|(a, b)| a * f64::from(b.bits()).sqrt())
                .sum::<f64>()
        })
        .sum();
    nll + beta * penalty
}

#[derive(Debug, Clone, PartialEq)]
pub struct NasConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_weights: f32,
    pub lr_arch: f32,
    pub beta: f64,
    pub clip: Option<f64>,
    /// Keep candidate and shared weights fixed; only the logits learn.
    pub freeze_weights: bool,
    pub seed: u64,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            epochs: 10,
            steps_per_epoch: 20,
            batch_size: 8,
            lr_weights: 0.1,
            lr_arch: 0.5,
            beta: 0.01,
            clip: Some(5.0),
            freeze_weights: false,
            seed: 0,
        }
    }
}

fn sample<'a>(stream: &'a [usize], max_len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [usize]> {
    sample_windows(stream.len(), max_len, count, rng)
        .into_iter()
        .map(|r| &stream[r])
        .collect()
}

fn flat_grads(grads: Vec<Tensor>) -> Vec<f32> {
    grads.into_iter().flat_map(Tensor::into_data).collect()
}

/// Alternates one logit step on `arch_stream` and one weight step on
/// `weight_stream`. Logged loss is the mean penalized loss of the logit steps.
pub fn search(
    net: &mut Supernet,
    weight_stream: &[usize],
    arch_stream: &[usize],
    config: &NasConfig,
) -> Result<(SelectionWeights, TrainLog)> {
    if weight_stream.len() < 2 || arch_stream.len() < 2 {
        return Err(Error::EmptyInput("search needs two non-trivial token streams".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let beta = config.beta as f32;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let windows = sample(arch_stream, net.config.max_len, config.batch_size, &mut rng);
            let mut g = Graph::new();
            let bound = net.bind(&mut g, false, true);
            let (loss, _) = bound.loss(&mut g, &windows, beta)?;
            let value = f64::from(g.value(loss).item());
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = g.gradient(loss, &bound.arch_params)?;
            for (logits, grad) in net.logits_mut().into_iter().zip(grads) {
                for (l, gr) in logits.iter_mut().zip(grad.data()) {
                    *l -= config.lr_arch * gr;
                }
            }
            total += value;

            if !config.freeze_weights {
                let windows = sample(weight_stream, net.config.max_len, config.batch_size, &mut rng);
                let mut g = Graph::new();
                let bound = net.bind(&mut g, true, false);
                let (loss, nll) = bound.loss(&mut g, &windows, 0.0)?;
                if !nll.is_finite() {
                    return Err(Error::Diverged { step, loss: nll });
                }
                let mut grad = flat_grads(g.gradient(loss, &bound.weight_params)?);
                clip_flat(&mut grad, config.clip);
                let mut offset = 0;
                for t in net.weight_tensors_mut() {
                    for w in t.data_mut() {
                        *w -= config.lr_weights * grad[offset];
                        offset += 1;
                    }
                }
            }
            step += 1;
        }
        if !config.freeze_weights {
            net.reproject()?;
        }
        let loss = total / config.steps_per_epoch.max(1) as f64;
        log::debug!("search epoch {epoch}: loss {loss:.4}");
        log.rows.push(LogRow {
            iteration: epoch,
            loss,
            primal_residual: None,
            mean_alpha: None,
        });
    }
    Ok((net.selection(), log))
}

/// Highest-weight candidate of every decision; ties go to fewer bits.
pub fn extract_1best(weights: &SelectionWeights) -> Vec<(usize, SubLayer, BitWidth)> {
    weights
        .decisions
        .iter()
        .map(|d| {
            let mut best = 0;
            for (i, &w) in d.weights.iter().enumerate() {
                if w > d.weights[best] {
                    best = i;
                }
            }
            (d.layer, d.sublayer, weights.bits[best])
        })
        .collect()
}

/// Precision of every cluster given extracted per-sub-layer widths, with the
/// embedding and output clusters at the shared components' widths.
pub fn nas_assignment(
    choice: &[(usize, SubLayer, BitWidth)],
    clusters: &[ClusterSpec],
    embed_bits: Option<BitWidth>,
    out_bits: Option<BitWidth>,
) -> Result<Vec<(ClusterSpec, Precision)>> {
    clusters
        .iter()
        .map(|c| {
            let precision = match c.id.as_str() {
                "embed" => embed_bits.map_or(Precision::Full, Precision::Quantized),
                "out" => out_bits.map_or(Precision::Full, Precision::Quantized),
                id => {
                    let b = choice
                        .iter()
                        .find(|(l, s, _)| format!("layer{l}.{s}") == id)
                        .map(|(_, _, b)| *b)
                        .ok_or_else(|| Error::Incompatible(format!("no selection for cluster `{id}`")))?;
                    Precision::Quantized(b)
                }
            };
            Ok((c.clone(), precision))
        })
        .collect()
}
