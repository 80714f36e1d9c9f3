//! Full-precision training on a token stream.
//!
//! Optimization runs over a flat parameter vector so the same loop drives the
//! language model and small analytic objectives. An epoch is a fixed number
//! of minibatches of random windows.

use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::tensor::Graph;

/// A differentiable loss over a flat parameter vector.
pub trait Objective {
    fn loss_grad(&mut self, params: &[f32]) -> Result<(f64, Vec<f32>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f32]) -> Result<(f64, Vec<f32>)>,
{
    fn loss_grad(&mut self, params: &[f32]) -> Result<(f64, Vec<f32>)> {
        self(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    /// Global-norm clipping threshold for gradients.
    pub clip: Option<f64>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.5,
            clip: Some(5.0),
            epochs: 10,
            steps_per_epoch: 50,
        }
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub primal_residual: Option<f64>,
    pub mean_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { rows })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Scales `grad` so its L2 norm is at most `max`; returns the original norm.
pub(crate) fn clip_flat(grad: &mut [f32], max: Option<f64>) -> f64 {
    let norm = grad.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if let Some(max) = max {
        if norm > max && norm > 0.0 {
            let factor = (max / norm) as f32;
            grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
    norm
}

pub(crate) fn checked_loss_grad<O: Objective + ?Sized>(
    objective: &mut O,
    params: &[f32],
    step: usize,
) -> Result<(f64, Vec<f32>)> {
    let (loss, grad) = objective.loss_grad(params)?;
    if grad.len() != params.len() {
        return Err(Error::shape(
            "objective",
            format!("{} gradient entries for {} params", grad.len(), params.len()),
        ));
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step, loss });
    }
    Ok((loss, grad))
}

/// Plain SGD. Logs the mean minibatch loss of every epoch.
pub fn train_sgd<O: Objective + ?Sized>(
    params: &mut [f32],
    objective: &mut O,
    config: &SgdConfig,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let (loss, mut grad) = checked_loss_grad(objective, params, step)?;
            clip_flat(&mut grad, config.clip);
            for (w, g) in params.iter_mut().zip(&grad) {
                *w -= config.lr * g;
            }
            total += loss;
            step += 1;
        }
        let loss = total / config.steps_per_epoch.max(1) as f64;
        log::debug!("epoch {epoch}: loss {loss:.4}");
        log.rows.push(LogRow {
            iteration: epoch,
            loss,
            primal_residual: None,
            mean_alpha: None,
        });
    }
    Ok(log)
}

/// Random `window`-token slices of `stream`.
pub fn sample_windows<R: Rng + ?Sized>(
    stream_len: usize,
    window: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let window = window.min(stream_len);
    (0..count)
        .map(|_| {
            let start = rng.random_range(0..=stream_len - window);
            start..start + window
        })
        .collect()
}

/// Mean next-token cross-entropy over `windows` and its gradient with respect
/// to every parameter, in canonical order.
pub fn batch_loss_grad(model: &TransformerLm, windows: &[&[usize]]) -> Result<(f64, Vec<f32>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mut total = None;
    let mut count = 0usize;
    for w in windows.iter().filter(|w| w.len() >= 2) {
        let nll = bound.sequence_nll(&mut g, w)?;
        let s = g.sum(nll)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
        count += w.len() - 1;
    }
    let total = total.ok_or_else(|| Error::EmptyInput("batch has no predicted positions".into()))?;
    let loss = g.scale(total, 1.0 / count as f32)?;
    let value = f64::from(g.value(loss).item());
    let grads = g.gradient(loss, &bound.params)?;
    let mut flat = Vec::with_capacity(model.param_count());
    for t in grads {
        flat.extend_from_slice(t.data());
    }
    Ok((value, flat))
}

/// Minibatch cross-entropy of a language model on random training windows.
pub struct LmObjective<'a> {
    model: TransformerLm,
    stream: &'a [usize],
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> LmObjective<'a> {
    pub fn new(model: TransformerLm, stream: &'a [usize], batch_size: usize, seed: u64) -> Result<Self> {
        if stream.len() < 2 {
            return Err(Error::EmptyInput("training stream needs at least two tokens".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(LmObjective {
            model,
            stream,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn model(&self) -> &TransformerLm {
        &self.model
    }

    /// The model carrying `params`.
    pub fn into_model(mut self, params: &[f32]) -> Result<TransformerLm> {
        self.model.set_flat(params)?;
        Ok(self.model)
    }
}

impl Objective for LmObjective<'_> {
    fn loss_grad(&mut self, params: &[f32]) -> Result<(f64, Vec<f32>)> {
        self.model.set_flat(params)?;
        let ranges = sample_windows(
            self.stream.len(),
            self.model.config.max_len,
            self.batch_size,
            &mut self.rng,
        );
        let windows: Vec<&[usize]> = ranges.into_iter().map(|r| &self.stream[r]).collect();
        batch_loss_grad(&self.model, &windows)
    }
}

/// Trains `model` in place with plain SGD on random windows of `stream`.
pub fn train_model(
    model: &mut TransformerLm,
    stream: &[usize],
    config: &SgdConfig,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    let mut params = model.flatten();
    let mut objective = LmObjective::new(model.clone(), stream, batch_size, seed)?;
    let log = train_sgd(&mut params, &mut objective, config)?;
    model.set_flat(&params)?;
    Ok(log)
}
