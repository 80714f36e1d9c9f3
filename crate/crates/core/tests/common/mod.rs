//! Double-precision reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod allocation;
pub mod grid;
pub mod mlp;
pub mod primitives;
pub mod supernet;

use std::collections::HashMap;

use mixquant::model::{ModelConfig, TransformerLm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize, n_layers: usize, tie: bool) -> ModelConfig {
    ModelConfig {
        vocab,
        d_model: 4,
        d_ff: 8,
        n_heads: 2,
        n_layers,
        max_len: 8,
        tie_embeddings: tie,
    }
}

/// A model with every parameter, gains and biases included, drawn at random.
pub fn random_model(config: ModelConfig, seed: u64) -> TransformerLm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TransformerLm::init(config, &mut rng).unwrap();
    let flat: Vec<f32> = model
        .flatten()
        .iter()
        .map(|_| rng.random_range(-0.8f32..0.8))
        .collect();
    model.set_flat(&flat).unwrap();
    model
}

/// Parameters by canonical name, widened to `f64`.
pub struct Params {
    pub config: ModelConfig,
    tensors: HashMap<String, Vec<f64>>,
}

impl Params {
    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Self {
        let mut tensors = HashMap::new();
        let mut offset = 0;
        for (name, shape) in TransformerLm::param_shapes(&config) {
            let n: usize = shape.iter().product();
            tensors.insert(name, flat[offset..offset + n].to_vec());
            offset += n;
        }
        assert_eq!(offset, flat.len());
        Params { config, tensors }
    }

    pub fn from_model(model: &TransformerLm) -> Self {
        let flat: Vec<f64> = model.flatten().into_iter().map(f64::from).collect();
        Self::from_flat(model.config, &flat)
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.tensors[name]
    }

    fn layer(&self, l: usize, suffix: &str) -> &[f64] {
        self.get(&format!("layer{l}.{suffix}"))
    }
}

/// `W·x` for a row-major `W[rows×cols]`.
pub fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mu) * inv * g + b)
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Attention sub-layer over a whole sequence, one head at a time.
pub fn attention(p: &Params, l: usize, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = p.config.d_model;
    let heads = p.config.n_heads;
    let dh = d / heads;
    let qs: Vec<Vec<f64>> = xs.iter().map(|x| matvec(p.layer(l, "Q"), x)).collect();
    let ks: Vec<Vec<f64>> = xs.iter().map(|x| matvec(p.layer(l, "K"), x)).collect();
    let vs: Vec<Vec<f64>> = xs.iter().map(|x| matvec(p.layer(l, "V"), x)).collect();
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut attended = vec![0.0; d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..=t)
                .map(|s| {
                    cols.clone().map(|c| qs[t][c] * ks[s][c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (s, score) in scores.iter().enumerate() {
                let w = (score - max).exp() / z;
                for c in cols.clone() {
                    attended[c] += w * vs[s][c];
                }
            }
        }
        let y: Vec<f64> = matvec(p.layer(l, "Wh"), &attended)
            .iter()
            .zip(&xs[t])
            .map(|(a, b)| a + b)
            .collect();
        out.push(layer_norm(&y, p.layer(l, "ln1.g"), p.layer(l, "ln1.b")));
    }
    out
}

pub fn feed_forward(p: &Params, l: usize, z: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = matvec(p.layer(l, "W1"), z)
        .iter()
        .zip(p.layer(l, "b1"))
        .map(|(a, b)| gelu(a + b))
        .collect();
    let s: Vec<f64> = matvec(p.layer(l, "W2"), &hidden)
        .iter()
        .zip(p.layer(l, "b2"))
        .zip(z)
        .map(|((a, b), r)| a + b + r)
        .collect();
    layer_norm(&s, p.layer(l, "ln2.g"), p.layer(l, "ln2.b"))
}

/// Per-position NLL of `tokens`.
pub fn sequence_nll(p: &Params, tokens: &[usize]) -> Vec<f64> {
    let d = p.config.d_model;
    let tok = p.get("embed.tok");
    let pos = p.get("embed.pos");
    let mut xs: Vec<Vec<f64>> = tokens[..tokens.len() - 1]
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| tok[id * d + j] + pos[t * d + j]).collect())
        .collect();
    for l in 0..p.config.n_layers {
        let zs = attention(p, l, &xs);
        xs = zs.iter().map(|z| feed_forward(p, l, z)).collect();
    }
    let out = if p.config.tie_embeddings { tok } else { p.get("out.proj") };
    xs.iter()
        .zip(&tokens[1..])
        .map(|(h, &target)| {
            let logits = matvec(out, h);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - logits[target]
        })
        .collect()
}

/// Mean NLL over every predicted position of `windows`.
pub fn mean_nll(p: &Params, windows: &[&[usize]]) -> f64 {
    let all: Vec<f64> = windows.iter().flat_map(|w| sequence_nll(p, w)).collect();
    all.iter().sum::<f64>() / all.len() as f64
}
