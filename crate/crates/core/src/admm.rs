//! Quantization-constrained training by ADMM.
//!
//! The problem `min f(W)` subject to each cluster of `W` lying on a shared
//! grid is split with an auxiliary `Q` and a scaled dual `λ`:
//!
//! * W-step: minibatch steps on `f(W) + (ρ/2)‖W − Q + λ‖²`. The penalty is
//!   applied in proximal form, `W ← (W − η∇f + ηρ(Q − λ)) / (1 + ηρ)`, which
//!   is exact for the quadratic term and stays stable for large `ηρ`.
//! * Q-step: every cluster of `W + λ` is refitted and projected onto its grid.
//! * dual step: `λ ← λ + W − Q`.
//!
//! Clusters kept at full precision carry no constraint and follow plain SGD.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::quant::{quantize_cluster, ClusterSpec, Precision, QuantTable, QuantizedModel};
use crate::train::{checked_loss_grad, clip_flat, LmObjective, LogRow, Objective, SgdConfig, TrainLog};

/// A cluster located by coordinate ranges in a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatCluster {
    pub id: String,
    pub ranges: Vec<Range<usize>>,
    pub precision: Precision,
}

impl FlatCluster {
    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, v: &[f32]) -> Vec<f32> {
        self.ranges.iter().flat_map(|r| v[r.clone()].iter().copied()).collect()
    }

    fn scatter(&self, v: &mut [f32], values: &[f32]) {
        let mut offset = 0;
        for r in &self.ranges {
            v[r.clone()].copy_from_slice(&values[offset..offset + r.len()]);
            offset += r.len();
        }
    }
}

/// Flat coordinate ranges of `specs` inside `model.flatten()`.
pub fn flat_clusters(model: &TransformerLm, specs: &[(ClusterSpec, Precision)]) -> Result<Vec<FlatCluster>> {
    let mut offsets = std::collections::HashMap::new();
    let mut at = 0;
    for (name, t) in model.named_params() {
        offsets.insert(name, at..at + t.numel());
        at += t.numel();
    }
    specs
        .iter()
        .map(|(spec, precision)| {
            let ranges = spec
                .members
                .iter()
                .map(|m| {
                    offsets
                        .get(m)
                        .cloned()
                        .ok_or_else(|| Error::Incompatible(format!("model has no tensor `{m}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FlatCluster {
                id: spec.id.clone(),
                ranges,
                precision: *precision,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub sgd: SgdConfig,
    /// Initial penalty coefficient.
    pub rho: f64,
    /// Factor applied to `ρ` after every projection round.
    pub rho_growth: f64,
    /// Stop once `‖W − Q‖ / √N` falls below this.
    pub tolerance: f64,
    /// W-steps between projections; `0` projects once per epoch.
    pub project_every: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            sgd: SgdConfig::default(),
            rho: 1e-3,
            rho_growth: 1.05,
            tolerance: 1e-3,
            project_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub w: Vec<f32>,
    pub q: Vec<f32>,
    pub lambda: Vec<f32>,
    pub rho: f64,
    pub clusters: Vec<FlatCluster>,
    /// Current table of each cluster; `None` for full precision.
    pub tables: Vec<Option<QuantTable>>,
    pub iteration: usize,
    mask: Vec<bool>,
}

impl AdmmState {
    /// Starts from `w` with `λ = 0` and `Q` the projection of `w`.
    pub fn new(w: Vec<f32>, clusters: Vec<FlatCluster>, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::Config(format!("rho must be non-negative, got {rho}")));
        }
        let mut mask = vec![false; w.len()];
        for c in &clusters {
            for r in &c.ranges {
                if r.end > w.len() {
                    return Err(Error::shape(
                        "admm",
                        format!("cluster `{}` reaches past {} params", c.id, w.len()),
                    ));
                }
                for i in r.clone() {
                    if mask[i] {
                        return Err(Error::Config(format!("coordinate {i} is in two clusters")));
                    }
                    mask[i] = matches!(c.precision, Precision::Quantized(_));
                }
            }
        }
        let n = w.len();
        let mut state = AdmmState {
            q: w.clone(),
            w,
            lambda: vec![0.0; n],
            rho,
            tables: vec![None; clusters.len()],
            clusters,
            iteration: 0,
            mask,
        };
        state.project()?;
        Ok(state)
    }

    /// One W-step with gradient `grad` of `f` (clipped first when `clip` is set).
    pub fn w_update(&mut self, grad: &mut [f32], lr: f32, clip: Option<f64>) -> Result<()> {
        if grad.len() != self.w.len() {
            return Err(Error::shape(
                "admm_w_update",
                format!("{} gradient entries for {} params", grad.len(), self.w.len()),
            ));
        }
        clip_flat(grad, clip);
        let eta_rho = f64::from(lr) * self.rho;
        for i in 0..self.w.len() {
            if self.mask[i] && self.rho > 0.0 {
                let pulled = f64::from(self.w[i]) - f64::from(lr) * f64::from(grad[i])
                    + eta_rho * (f64::from(self.q[i]) - f64::from(self.lambda[i]));
                self.w[i] = (pulled / (1.0 + eta_rho)) as f32;
            } else {
                self.w[i] -= lr * grad[i];
            }
        }
        Ok(())
    }

    /// Refits each quantized cluster on `W + λ` and sets `Q` to its projection.
    pub fn project(&mut self) -> Result<()> {
        for (c, table) in self.clusters.iter().zip(self.tables.iter_mut()) {
            let bits = match c.precision {
                Precision::Quantized(b) => b,
                Precision::Full => continue,
            };
            let shifted: Vec<f32> = c
                .gather(&self.w)
                .iter()
                .zip(c.gather(&self.lambda))
                .map(|(w, l)| w + l)
                .collect();
            let q = quantize_cluster(&shifted, bits)?;
            c.scatter(&mut self.q, &q.values);
            *table = Some(q.table);
        }
        for i in 0..self.w.len() {
            if !self.mask[i] {
                self.q[i] = self.w[i];
            }
        }
        Ok(())
    }

    /// `λ ← λ + W − Q`.
    pub fn dual_update(&mut self) {
        for i in 0..self.w.len() {
            self.lambda[i] += self.w[i] - self.q[i];
        }
    }

    /// `‖W − Q‖ / √N` over all parameters.
    pub fn primal_residual(&self) -> f64 {
        let sq: f64 = self
            .w
            .iter()
            .zip(&self.q)
            .map(|(&w, &q)| (f64::from(w) - f64::from(q)).powi(2))
            .sum();
        (sq / self.w.len().max(1) as f64).sqrt()
    }

    /// Changes `ρ`, rescaling the scaled dual so the unscaled one is kept.
    pub fn set_rho(&mut self, rho: f64) {
        if self.rho > 0.0 && rho > 0.0 {
            let factor = (self.rho / rho) as f32;
            self.lambda.iter_mut().for_each(|l| *l *= factor);
        }
        self.rho = rho;
    }

    pub fn mean_alpha(&self) -> Option<f64> {
        let alphas: Vec<f64> = self.tables.iter().flatten().map(|t| t.alpha()).collect();
        (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOutcome {
    /// Final parameters: `Q` on quantized clusters, `W` elsewhere.
    pub params: Vec<f32>,
    pub tables: Vec<Option<QuantTable>>,
    pub log: TrainLog,
    /// Scale of every cluster after each projection round.
    pub alpha_history: Vec<Vec<Option<f64>>>,
    pub converged: bool,
}

/// Runs ADMM from `w0` until the residual tolerance or the epoch budget is hit.
/// Without convergence, the round with the smallest residual is returned and
/// `converged` is false.
pub fn train_admm<O: Objective + ?Sized>(
    w0: Vec<f32>,
    clusters: Vec<FlatCluster>,
    objective: &mut O,
    config: &AdmmConfig,
) -> Result<AdmmOutcome> {
    // with nothing quantized the residual is trivially zero; run the full schedule
    let constrained = clusters.iter().any(|c| matches!(c.precision, Precision::Quantized(_)));
    let mut state = AdmmState::new(w0, clusters, config.rho)?;
    let per_round = if config.project_every == 0 {
        config.sgd.steps_per_epoch
    } else {
        config.project_every
    }
    .max(1);
    let rounds = (config.sgd.epochs * config.sgd.steps_per_epoch).div_ceil(per_round);
    let mut log = TrainLog::default();
    let mut alpha_history = Vec::new();
    let mut best: Option<(f64, Vec<f32>, Vec<Option<QuantTable>>)> = None;
    let mut step = 0;
    let mut converged = false;
    for round in 0..rounds {
        let mut total = 0.0;
        for _ in 0..per_round {
            let (loss, mut grad) = checked_loss_grad(objective, &state.w, step)?;
            state.w_update(&mut grad, config.sgd.lr, config.sgd.clip)?;
            total += loss;
            step += 1;
        }
        state.project()?;
        state.dual_update();
        state.iteration += 1;
        let residual = state.primal_residual();
        log.rows.push(LogRow {
            iteration: round,
            loss: total / per_round as f64,
            primal_residual: Some(residual),
            mean_alpha: state.mean_alpha(),
        });
        alpha_history.push(state.tables.iter().map(|t| t.map(|t| t.alpha())).collect());
        log::debug!("admm round {round}: residual {residual:.3e}, rho {:.3e}", state.rho);
        if best.as_ref().is_none_or(|b| residual <= b.0) {
            best = Some((residual, state.q.clone(), state.tables.clone()));
        }
        if constrained && residual < config.tolerance {
            converged = true;
            break;
        }
        state.set_rho(state.rho * config.rho_growth);
    }
    let (params, tables) = match best {
        Some((_, q, tables)) if !converged => (q, tables),
        _ => (state.q, state.tables),
    };
    if constrained && !converged {
        log::warn!("ADMM stopped after {rounds} rounds without reaching tolerance {}", config.tolerance);
    }
    Ok(AdmmOutcome {
        params,
        tables,
        log,
        alpha_history,
        converged: converged || !constrained,
    })
}

/// Quantized language model produced by [`train_lm`].
#[derive(Debug, Clone)]
pub struct AdmmResult {
    pub model: QuantizedModel,
    pub log: TrainLog,
    pub converged: bool,
}

/// ADMM training of a language model at a per-cluster precision assignment.
pub fn train_lm(
    model: &TransformerLm,
    stream: &[usize],
    assignment: &[(ClusterSpec, Precision)],
    config: &AdmmConfig,
    batch_size: usize,
    seed: u64,
) -> Result<AdmmResult> {
    let clusters = flat_clusters(model, assignment)?;
    let mut objective = LmObjective::new(model.clone(), stream, batch_size, seed)?;
    let outcome = train_admm(model.flatten(), clusters, &mut objective, config)?;
    let trained = objective.into_model(&outcome.params)?;
    let tables: Vec<(ClusterSpec, QuantTable)> = assignment
        .iter()
        .zip(&outcome.tables)
        .filter_map(|((spec, _), t)| t.map(|t| (spec.clone(), t)))
        .collect();
    Ok(AdmmResult {
        model: QuantizedModel::from_projected(&trained, &tables)?,
        log: outcome.log,
        converged: outcome.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::BitWidth;

    fn cluster(range: Range<usize>, bits: u32) -> FlatCluster {
        FlatCluster {
            id: "c".into(),
            ranges: vec![range],
            precision: Precision::Quantized(BitWidth::new(bits).unwrap()),
        }
    }

    #[test]
    fn dual_update_is_direct() {
        let mut s = AdmmState::new(vec![0.7], vec![cluster(0..1, 1)], 1.0).unwrap();
        s.q = vec![1.0];
        s.lambda = vec![0.0];
        s.dual_update();
        assert!((s.lambda[0] - -0.3).abs() < 1e-7);
        let before = s.lambda.clone();
        s.q = s.w.clone();
        s.dual_update();
        assert_eq!(s.lambda, before);
    }

    #[test]
    fn penalty_pulls_towards_q() {
        let mut s = AdmmState::new(vec![1.0], vec![cluster(0..1, 2)], 1.0).unwrap();
        s.w = vec![0.0];
        s.q = vec![1.0];
        for _ in 0..200 {
            s.w_update(&mut [0.0], 0.1, None).unwrap();
        }
        assert!((s.w[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn projection_of_grid_values_is_fixed() {
        let w = vec![0.5f32, -0.5, 0.0, 1.0, -1.5];
        let s = AdmmState::new(w.clone(), vec![cluster(0..5, 3)], 1.0).unwrap();
        assert_eq!(s.q, w);
        assert_eq!(s.primal_residual(), 0.0);
    }

    #[test]
    fn rho_change_keeps_unscaled_dual() {
        let mut s = AdmmState::new(vec![0.3, 0.9], vec![cluster(0..2, 2)], 2.0).unwrap();
        s.lambda = vec![0.5, -0.25];
        s.set_rho(4.0);
        assert_eq!(s.lambda, vec![0.25, -0.125]);
    }

    #[test]
    fn full_precision_clusters_are_unconstrained() {
        let c = FlatCluster {
            id: "f".into(),
            ranges: vec![0..2],
            precision: Precision::Full,
        };
        let mut s = AdmmState::new(vec![0.3, 0.9], vec![c], 5.0).unwrap();
        s.w_update(&mut [1.0, 1.0], 0.1, None).unwrap();
        assert_eq!(s.w, vec![0.3 - 0.1, 0.9 - 0.1]);
        s.project().unwrap();
        assert_eq!(s.q, s.w);
    }
}
