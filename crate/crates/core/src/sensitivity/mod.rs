//! Hessian-trace sensitivity of each cluster to quantization and the bit
//! allocation that minimizes total sensitivity under an average-bit budget.
//!
//! Hessian-vector products are central differences of gradients. The trace
//! of a cluster's diagonal Hessian block is estimated with Hutchinson probes
//! supported on that cluster's coordinates.

mod allocate;
mod report;

pub use allocate::{allocate_bits, allocate_dp, allocate_exhaustive, AssignedCluster, PrecisionAssignment};
pub use report::{SensitivityRecord, SensitivityReport};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::quant::{quantize_cluster, BitWidth, ClusterSpec, Precision};
use crate::train::batch_loss_grad;

/// Gradient of a scalar loss, evaluated in double precision.
pub trait GradientFn {
    fn gradient(&mut self, theta: &[f64]) -> Result<Vec<f64>>;
}

impl<F> GradientFn for F
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn gradient(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        self(theta)
    }
}

/// Difference step for a direction of norm `norm`: `1e-3 / norm` rounded to a
/// power of two, so that `θ ± εv` and the final division add no rounding.
pub fn fd_step(norm: f64) -> f64 {
    (1e-3 / norm).log2().round().exp2()
}

/// `H·v ≈ (∇f(θ + εv) − ∇f(θ − εv)) / 2ε`.
pub fn hvp<G: GradientFn + ?Sized>(grad: &mut G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != v.len() {
        return Err(Error::shape(
            "hvp",
            format!("direction of {} for {} params", v.len(), theta.len()),
        ));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Degenerate("hvp direction must be non-zero".into()));
    }
    let eps = fd_step(norm);
    let shifted = |sign: f64| -> Vec<f64> {
        theta.iter().zip(v).map(|(t, d)| t + sign * eps * d).collect()
    };
    let plus = grad.gradient(&shifted(1.0))?;
    let minus = grad.gradient(&shifted(-1.0))?;
    if plus.len() != theta.len() || minus.len() != theta.len() {
        return Err(Error::shape("hvp", "gradient length differs from params"));
    }
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "hvp" });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Gaussian,
    /// ±1 entries; exact on diagonal Hessians. Meant for testing.
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub trace: f64,
    /// Standard error of the mean; NaN for a single sample.
    pub std_error: f64,
    pub samples: usize,
}

/// Hutchinson estimate of the trace of the Hessian block on `coords`.
pub fn hutchinson_trace<G: GradientFn + ?Sized>(
    grad: &mut G,
    theta: &[f64],
    coords: &[Range<usize>],
    samples: usize,
    probe: Probe,
    seed: u64,
) -> Result<TraceEstimate> {
    if samples == 0 {
        return Err(Error::Config("Hutchinson needs at least one sample".into()));
    }
    if coords.iter().any(|r| r.end > theta.len()) || coords.iter().all(|r| r.is_empty()) {
        return Err(Error::shape("hutchinson_trace", "cluster coordinates out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(samples);
    let mut z = vec![0.0f64; theta.len()];
    for _ in 0..samples {
        for r in coords {
            for zi in &mut z[r.clone()] {
                *zi = match probe {
                    Probe::Gaussian => rng.sample(StandardNormal),
                    Probe::Rademacher => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
            }
        }
        let hz = hvp(grad, theta, &z)?;
        let quad: f64 = coords
            .iter()
            .flat_map(|r| r.clone())
            .map(|i| z[i] * hz[i])
            .sum();
        values.push(quad);
    }
    let m = samples as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std_error = if samples > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        f64::NAN
    };
    Ok(TraceEstimate {
        trace: mean,
        std_error,
        samples,
    })
}

/// `Ω = T̄r · ‖Q(W) − W‖²`, where `T̄r` is the trace divided by the cluster
/// size when `average` is set and the raw trace otherwise.
pub fn cluster_sensitivity(trace: f64, perturbation: f64, size: usize, average: bool) -> f64 {
    trace_factor(trace, size, average) * perturbation
}

pub(crate) fn trace_factor(trace: f64, size: usize, average: bool) -> f64 {
    if average {
        trace / size as f64
    } else {
        trace
    }
}

/// Mean cross-entropy gradient of a model over a fixed set of windows.
pub struct ProbeLoss<'a> {
    model: TransformerLm,
    windows: Vec<&'a [usize]>,
}

impl<'a> ProbeLoss<'a> {
    pub fn new(model: TransformerLm, windows: Vec<&'a [usize]>) -> Self {
        ProbeLoss { model, windows }
    }
}

impl GradientFn for ProbeLoss<'_> {
    fn gradient(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        let flat: Vec<f32> = theta.iter().map(|&t| t as f32).collect();
        self.model.set_flat(&flat)?;
        let (_, grad) = batch_loss_grad(&self.model, &self.windows)?;
        Ok(grad.into_iter().map(f64::from).collect())
    }
}

/// Consecutive windows covering roughly the first `tokens` positions of `stream`.
pub fn probe_windows(stream: &[usize], max_len: usize, tokens: usize) -> Vec<&[usize]> {
    let limit = (tokens + 1).min(stream.len());
    crate::model::stream_windows(limit, max_len)
        .into_iter()
        .map(|r| &stream[r])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityConfig {
    pub samples: usize,
    pub probe: Probe,
    pub seed: u64,
    pub average_trace: bool,
    pub candidates: Vec<BitWidth>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            samples: 16,
            probe: Probe::Gaussian,
            seed: 0,
            average_trace: true,
            candidates: BitWidth::CANDIDATES.to_vec(),
        }
    }
}

/// Sensitivity of every cluster of `model` at each candidate bit-width.
pub fn analyze(
    model: &TransformerLm,
    windows: Vec<&[usize]>,
    clusters: &[ClusterSpec],
    config: &SensitivityConfig,
) -> Result<SensitivityReport> {
    let theta: Vec<f64> = model.flatten().into_iter().map(f64::from).collect();
    let assignment: Vec<(ClusterSpec, Precision)> = clusters
        .iter()
        .map(|c| (c.clone(), Precision::Full))
        .collect();
    let flat = crate::admm::flat_clusters(model, &assignment)?;
    let mut loss = ProbeLoss::new(model.clone(), windows);
    let mut records = Vec::new();
    for (i, (spec, fc)) in clusters.iter().zip(&flat).enumerate() {
        let est = hutchinson_trace(
            &mut loss,
            &theta,
            &fc.ranges,
            config.samples,
            config.probe,
            config.seed.wrapping_add(i as u64),
        )?;
        let trace = trace_factor(est.trace, spec.count, config.average_trace);
        let std_error = trace_factor(est.std_error, spec.count, config.average_trace);
        log::info!("cluster {}: trace {trace:.4e} ± {std_error:.1e}", spec.id);
        let weights = spec.gather(model)?;
        for &bits in &config.candidates {
            let perturbation = quantize_cluster(&weights, bits)?.perturbation;
            records.push(SensitivityRecord {
                cluster: spec.id.clone(),
                params: spec.count,
                bits: bits.bits(),
                trace,
                trace_stderr: std_error,
                perturbation,
                omega: trace * perturbation,
                samples: est.samples,
            });
        }
    }
    SensitivityReport::new(records)
}
