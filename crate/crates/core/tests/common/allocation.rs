//! Sensitivity tables and exhaustive allocation search.

use mixquant::sensitivity::{PrecisionAssignment, SensitivityRecord, SensitivityReport};

pub fn report(table: &[(usize, Vec<f64>)], bits: &[u32]) -> SensitivityReport {
    let records = table
        .iter()
        .enumerate()
        .flat_map(|(i, (params, omegas))| {
            bits.iter().zip(omegas).map(move |(&b, &o)| SensitivityRecord {
                cluster: format!("c{i}"),
                params: *params,
                bits: b,
                trace: o,
                trace_stderr: 0.0,
                perturbation: 1.0,
                omega: o,
                samples: 1,
            })
        })
        .collect();
    SensitivityReport::new(records).unwrap()
}

/// Smallest total Ω over every combination within the budget.
pub fn enumerate(table: &[(usize, Vec<f64>)], bits: &[u32], budget: f64) -> Option<f64> {
    let total: usize = table.iter().map(|c| c.0).sum();
    let cap = (budget * total as f64 + 1e-9).floor() as u64;
    let mut best: Option<f64> = None;
    let combos = bits.len().pow(table.len() as u32);
    for code in 0..combos {
        let (mut rest, mut cost, mut omega) = (code, 0u64, 0.0);
        for (params, omegas) in table {
            let k = rest % bits.len();
            rest /= bits.len();
            cost += *params as u64 * u64::from(bits[k]);
            omega += omegas[k];
        }
        if cost <= cap && best.is_none_or(|b| omega < b) {
            best = Some(omega);
        }
    }
    best
}

pub fn assigned_omega(table: &[(usize, Vec<f64>)], bits: &[u32], a: &PrecisionAssignment) -> f64 {
    a.clusters
        .iter()
        .enumerate()
        .map(|(i, c)| table[i].1[bits.iter().position(|&b| b == c.bits).unwrap()])
        .sum()
}
