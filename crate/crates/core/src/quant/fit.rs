//! Choosing a cluster's scale `α`.
//!
//! For a fixed assignment of integer levels `q` the error
//! `Σ(w − α·q)²` is minimized by `α = Σ w·q / Σ q²`, and for a fixed `α` by
//! the nearest-level assignment. Alternating the two only finds a local
//! minimum, so the starting point comes from an exact sweep: as `α` shrinks,
//! the level of `|w|` under `n ≥ 2` steps from `k` to `k + 1` at
//! `α = |w| / (k + ½)`, and between consecutive breakpoints the error is a
//! quadratic in `α` whose minimizer is known in closed form.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{nearest_level, BitWidth, QuantTable};
use crate::error::{Error, Result};

const MAX_ITERS: usize = 50;
const TOLERANCE: f64 = 1e-9;

/// Scales and objectives visited while fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub alphas: Vec<f64>,
    pub objectives: Vec<f64>,
}

/// `Σ (w − α·q(w))²` with `q` the nearest-level assignment under `table`.
pub fn scale_objective(weights: &[f32], table: &QuantTable) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let w = f64::from(w);
            let r = w - table.value(nearest_level(w, table));
            r * r
        })
        .sum()
}

pub fn fit_scale(weights: &[f32], bits: BitWidth) -> Result<QuantTable> {
    fit_scale_traced(weights, bits).map(|(t, _)| t)
}

pub fn fit_scale_traced(weights: &[f32], bits: BitWidth) -> Result<(QuantTable, FitTrace)> {
    if weights.is_empty() {
        return Err(Error::DegenerateScale("cluster has no weights".into()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::DegenerateScale("cluster has non-finite weights".into()));
    }
    let abs: Vec<f64> = weights
        .iter()
        .map(|&w| f64::from(w).abs())
        .filter(|&a| a > 0.0)
        .collect();
    if abs.is_empty() {
        return Err(Error::DegenerateScale("all weights are zero".into()));
    }
    let start = if bits == BitWidth::ONE {
        abs.iter().sum::<f64>() / weights.len() as f64
    } else {
        sweep(&abs, bits.max_level())
    };
    let mut table = QuantTable::new(bits, start)?;
    let mut trace = FitTrace {
        alphas: vec![start],
        objectives: vec![scale_objective(weights, &table)],
    };
    for _ in 0..MAX_ITERS {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &w in weights {
            let q = f64::from(nearest_level(f64::from(w), &table));
            num += f64::from(w) * q;
            den += q * q;
        }
        if den == 0.0 || num <= 0.0 {
            break;
        }
        let next = QuantTable::new(bits, num / den)?;
        let objective = scale_objective(weights, &next);
        // ties between levels can make a refit bounce; keep the better table
        if objective > *trace.objectives.last().unwrap() {
            break;
        }
        let delta = (next.alpha() - table.alpha()).abs();
        table = next;
        trace.alphas.push(table.alpha());
        trace.objectives.push(objective);
        if delta < TOLERANCE {
            break;
        }
    }
    Ok((table, trace))
}

struct Breakpoint {
    alpha: f64,
    index: usize,
    level: i32,
}

impl PartialEq for Breakpoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.alpha
            .total_cmp(&other.alpha)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Global minimizer of the quantization error over `α > 0` for positive
/// magnitudes `abs` on a grid with levels `0..=max_level`.
fn sweep(abs: &[f64], max_level: i32) -> f64 {
    // Breakpoints are visited in decreasing α. Each weight contributes its
    // next one lazily, so memory stays linear in the cluster size.
    let mut heap: BinaryHeap<Breakpoint> = abs
        .iter()
        .enumerate()
        .map(|(index, &a)| Breakpoint {
            alpha: a / 0.5,
            index,
            level: 0,
        })
        .collect();
    let total: f64 = abs.iter().map(|a| a * a).sum();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    let mut best = (total, abs.iter().cloned().fold(0.0, f64::max) * 2.0);
    while let Some(bp) = heap.pop() {
        let upper = bp.alpha;
        let a = abs[bp.index];
        let k = f64::from(bp.level);
        s1 += a;
        s2 += 2.0 * k + 1.0;
        if bp.level + 1 < max_level {
            heap.push(Breakpoint {
                alpha: a / (k + 1.5),
                index: bp.index,
                level: bp.level + 1,
            });
        }
        let lower = heap.peek().map_or(0.0, |b| b.alpha);
        if lower == upper {
            continue;
        }
        let alpha = (s1 / s2).clamp(lower, upper);
        if alpha <= 0.0 {
            continue;
        }
        let objective = total - 2.0 * alpha * s1 + alpha * alpha * s2;
        if objective < best.0 {
            best = (objective, alpha);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_scan_min(weights: &[f32], bits: BitWidth, points: usize) -> f64 {
        let max = weights.iter().map(|w| w.abs()).fold(0.0, f32::max) as f64;
        (1..=points)
            .map(|i| {
                let alpha = 2.0 * max * i as f64 / points as f64;
                scale_objective(weights, &QuantTable::new(bits, alpha).unwrap())
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn binary_scale_is_mean_magnitude() {
        let t = fit_scale(&[0.9, 1.0, -1.1], BitWidth::ONE).unwrap();
        assert!((t.alpha() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn constant_weights_are_exact() {
        let w = [0.3f32; 17];
        let t = fit_scale(&w, BitWidth::TWO).unwrap();
        assert!((t.alpha() - 0.3f32 as f64).abs() < 1e-12);
        assert!(scale_objective(&w, &t) < 1e-20);
    }

    #[test]
    fn zero_weights_are_degenerate() {
        assert!(matches!(fit_scale(&[0.0; 4], BitWidth::TWO), Err(Error::DegenerateScale(_))));
        assert!(matches!(fit_scale(&[], BitWidth::TWO), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn beats_dense_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [1, 2, 4, 8] {
            let bits = BitWidth::new(bits).unwrap();
            for _ in 0..10 {
                let w: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
                let fitted = scale_objective(&w, &fit_scale(&w, bits).unwrap());
                let scanned = dense_scan_min(&w, bits, 10_000);
                assert!(fitted <= scanned * (1.0 + 1e-6), "{bits}: {fitted} > {scanned}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn alternation_never_increases_objective(
            w in proptest::collection::vec(-3.0f32..3.0, 1..60),
            bits in 1u32..=8,
        ) {
            proptest::prop_assume!(w.iter().any(|&x| x != 0.0));
            let (_, trace) = fit_scale_traced(&w, BitWidth::new(bits).unwrap()).unwrap();
            for pair in trace.objectives.windows(2) {
                proptest::prop_assert!(pair[1] <= pair[0]);
            }
        }
    }
}
