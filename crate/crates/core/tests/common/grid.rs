//! Exhaustive scans over quantization grids.

use mixquant::quant::{BitWidth, QuantTable};

/// Every level of the grid, scanned with ties going to the smaller magnitude
/// and then to the positive side.
pub fn scan_level(theta: f64, table: &QuantTable) -> i32 {
    let m = table.bits().max_level();
    let levels: Vec<i32> = if table.bits() == BitWidth::ONE {
        vec![-1, 1]
    } else {
        (-m..=m).collect()
    };
    let mut best = levels[0];
    for &l in &levels[1..] {
        let (d, bd) = ((theta - table.value(l)).abs(), (theta - table.value(best)).abs());
        if d < bd || (d == bd && (l.abs(), -l) < (best.abs(), -best)) {
            best = l;
        }
    }
    best
}

pub fn scan_objective(weights: &[f32], table: &QuantTable) -> f64 {
    weights
        .iter()
        .map(|&w| {
            let w = f64::from(w);
            (w - table.value(scan_level(w, table))).powi(2)
        })
        .sum()
}
