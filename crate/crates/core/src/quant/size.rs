//! Storage accounting. Quantized scalars cost their bit-width, each cluster
//! stores one 32-bit scale, and everything else is kept as 32-bit floats.

use super::QuantizedModel;
use crate::error::{Error, Result};
use crate::model::TransformerLm;

pub const MEGABYTE: f64 = 1e6;

/// Size in MB of `quantized` clusters, given as `(scalar count, bits)`, plus
/// `residue` full-precision scalars.
pub fn size_mb(quantized: &[(usize, u32)], residue: usize) -> f64 {
    let bits: f64 = quantized
        .iter()
        .map(|&(count, b)| count as f64 * f64::from(b))
        .sum();
    let bytes = bits / 8.0 + 4.0 * quantized.len() as f64 + 4.0 * residue as f64;
    bytes / MEGABYTE
}

pub fn full_precision_size_mb(model: &TransformerLm) -> f64 {
    size_mb(&[], model.param_count())
}

pub fn model_size_mb(model: &QuantizedModel) -> f64 {
    let clusters: Vec<(usize, u32)> = model
        .clusters()
        .iter()
        .map(|c| (c.spec.count, c.table.bits().bits()))
        .collect();
    let residue = model.residue().iter().map(|(_, t)| t.numel()).sum();
    size_mb(&clusters, residue)
}

/// `full_mb / quant_mb` rounded to one decimal.
pub fn compression_ratio(full_mb: f64, quant_mb: f64) -> Result<f64> {
    if !(full_mb > 0.0 && quant_mb > 0.0) {
        return Err(Error::Degenerate(format!(
            "compression ratio needs positive sizes, got {full_mb} and {quant_mb}"
        )));
    }
    Ok((full_mb / quant_mb * 10.0).round() / 10.0)
}
