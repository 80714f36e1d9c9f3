//! Locally shared quantization tables.
//!
//! A table with `n` bits and scale `α` holds the levels
//! `{0, ±α, ±2α, …, ±(2ⁿ⁻¹−1)α}` for `n ≥ 2` and `{−α, +α}` for `n = 1`.
//! Every weight in a cluster is mapped to its nearest level; ties go to the
//! level of smaller magnitude, then to the positive one.

mod cluster;
mod fit;
pub mod pack;
mod size;

pub use cluster::{
    model_clusters, quantize_cluster, quantize_with_table, ClusterQuantization, ClusterSpec,
    QuantizedCluster, QuantizedModel,
};
pub use fit::{fit_scale, fit_scale_traced, scale_objective, FitTrace};
pub use size::{compression_ratio, full_precision_size_mb, model_size_mb, size_mb, MEGABYTE};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A quantization bit-width between 1 and 8. Automatic precision selection
/// only considers [`BitWidth::CANDIDATES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BitWidth(u8);

impl BitWidth {
    pub const ONE: BitWidth = BitWidth(1);
    pub const TWO: BitWidth = BitWidth(2);
    pub const FOUR: BitWidth = BitWidth(4);
    pub const EIGHT: BitWidth = BitWidth(8);

    /// Candidate widths for automatic precision selection, ascending.
    pub const CANDIDATES: [BitWidth; 4] = [Self::ONE, Self::TWO, Self::FOUR, Self::EIGHT];

    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            1..=8 => Ok(BitWidth(bits as u8)),
            other => Err(Error::Config(format!(
                "unsupported bit-width {other}; expected 1 to 8"
            ))),
        }
    }

    pub fn bits(self) -> u32 {
        u32::from(self.0)
    }

    /// Largest level magnitude: 1 for binary tables, `2ⁿ⁻¹ − 1` otherwise.
    pub fn max_level(self) -> i32 {
        if self.0 == 1 {
            1
        } else {
            (1 << (self.0 - 1)) - 1
        }
    }

    pub fn level_count(self) -> usize {
        if self.0 == 1 {
            2
        } else {
            (1usize << self.0) - 1
        }
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for BitWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .parse::<u32>()
            .map_err(|_| Error::Config(format!("invalid bit-width `{s}`")))?;
        BitWidth::new(bits)
    }
}

/// Storage precision of one cluster: quantized, or kept at 32 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Full,
    Quantized(BitWidth),
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Full => 32,
            Precision::Quantized(b) => b.bits(),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "32" {
            Ok(Precision::Full)
        } else {
            s.parse().map(Precision::Quantized)
        }
    }
}

impl From<BitWidth> for Precision {
    fn from(b: BitWidth) -> Self {
        Precision::Quantized(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantTable {
    bits: BitWidth,
    alpha: f64,
}

impl QuantTable {
    pub fn new(bits: BitWidth, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::DegenerateScale(format!("scale must be positive, got {alpha}")));
        }
        Ok(QuantTable { bits, alpha })
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Every integer level of the grid, ascending.
    pub fn levels(&self) -> Vec<i32> {
        let m = self.bits.max_level();
        if self.bits == BitWidth::ONE {
            vec![-1, 1]
        } else {
            (-m..=m).collect()
        }
    }

    pub fn contains_level(&self, level: i32) -> bool {
        if self.bits == BitWidth::ONE {
            level == 1 || level == -1
        } else {
            level.abs() <= self.bits.max_level()
        }
    }

    /// Real value of a level, `α·level`.
    pub fn value(&self, level: i32) -> f64 {
        self.alpha * f64::from(level)
    }

    /// The level's value as stored in a model.
    pub fn value_f32(&self, level: i32) -> f32 {
        self.value(level) as f32
    }
}

fn prefer(candidate: (f64, i32), best: (f64, i32)) -> bool {
    let (d, l) = candidate;
    let (bd, bl) = best;
    d < bd || (d == bd && (l.abs() < bl.abs() || (l.abs() == bl.abs() && l > bl)))
}

/// Nearest level to `theta`, returned with its real value.
pub fn quantize_value(theta: f64, table: &QuantTable) -> (i32, f64) {
    let level = nearest_level(theta, table);
    (level, table.value(level))
}

pub(crate) fn nearest_level(theta: f64, table: &QuantTable) -> i32 {
    let max = table.bits.max_level();
    let dist = |l: i32| (theta - table.value(l)).abs();
    if table.bits == BitWidth::ONE {
        let (dn, dp) = (dist(-1), dist(1));
        return if prefer((dn, -1), (dp, 1)) { -1 } else { 1 };
    }
    let ratio = theta.abs() / table.alpha;
    let k0 = if ratio.is_finite() {
        ratio.floor().min(f64::from(max)) as i32
    } else {
        max
    };
    let mut best = (dist(0), 0);
    for k in (k0 - 1).max(1)..=(k0 + 1).min(max) {
        for l in [k, -k] {
            let cand = (dist(l), l);
            if prefer(cand, best) {
                best = cand;
            }
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive scan over every level with the same tie rules.
    fn scan(theta: f64, table: &QuantTable) -> i32 {
        let mut best: Option<(f64, i32)> = None;
        for l in table.levels() {
            let cand = ((theta - table.value(l)).abs(), l);
            if best.is_none_or(|b| prefer(cand, b)) {
                best = Some(cand);
            }
        }
        best.unwrap().1
    }

    #[test]
    fn nearest_grid_point() {
        let t = QuantTable::new(BitWidth::new(3).unwrap(), 0.5).unwrap();
        assert_eq!(t.levels(), vec![-3, -2, -1, 0, 1, 2, 3]);
        assert_eq!(quantize_value(0.7, &t), (1, 0.5));
        let t = QuantTable::new(BitWidth::TWO, 0.5).unwrap();
        assert_eq!(quantize_value(-3.0, &t), (-1, -0.5));
        let t = QuantTable::new(BitWidth::FOUR, 0.5).unwrap();
        assert_eq!(quantize_value(1.3, &t), (3, 1.5));
    }

    #[test]
    fn zero_maps_to_zero() {
        for b in [BitWidth::TWO, BitWidth::FOUR, BitWidth::EIGHT] {
            let t = QuantTable::new(b, 0.37).unwrap();
            assert_eq!(quantize_value(0.0, &t), (0, 0.0));
        }
        let bin = QuantTable::new(BitWidth::ONE, 0.37).unwrap();
        assert_eq!(quantize_value(0.0, &bin).0, 1);
    }

    #[test]
    fn ties_round_toward_smaller_magnitude() {
        let t = QuantTable::new(BitWidth::FOUR, 1.0).unwrap();
        assert_eq!(quantize_value(2.5, &t).0, 2);
        assert_eq!(quantize_value(-0.5, &t).0, 0);
        assert_eq!(quantize_value(100.0, &t).0, 7);
        assert_eq!(quantize_value(-100.0, &t).0, -7);
    }

    #[test]
    fn level_counts() {
        for (b, n) in [(1, 2), (2, 3), (4, 15), (8, 255)] {
            let t = QuantTable::new(BitWidth::new(b).unwrap(), 1.0).unwrap();
            assert_eq!(t.levels().len(), n);
            assert_eq!(t.bits().level_count(), n);
        }
    }

    #[test]
    fn rejects_bad_scale_and_width() {
        assert!(QuantTable::new(BitWidth::TWO, 0.0).is_err());
        assert!(QuantTable::new(BitWidth::TWO, f64::NAN).is_err());
        assert!(BitWidth::new(0).is_err());
        assert!(BitWidth::new(9).is_err());
        assert_eq!("32".parse::<Precision>().unwrap(), Precision::Full);
        assert_eq!(
            "4".parse::<Precision>().unwrap(),
            Precision::Quantized(BitWidth::FOUR)
        );
    }

    proptest::proptest! {
        #[test]
        fn fast_path_matches_scan(theta in -50.0f64..50.0, alpha in 1e-3f64..10.0, bits in 1u32..=8) {
            let t = QuantTable::new(BitWidth::new(bits).unwrap(), alpha).unwrap();
            proptest::prop_assert_eq!(nearest_level(theta, &t), scan(theta, &t));
        }

        #[test]
        fn quantizing_a_grid_value_is_identity(level in -127i32..=127, alpha in 1e-3f64..10.0, idx in 0usize..4) {
            let t = QuantTable::new(BitWidth::CANDIDATES[idx], alpha).unwrap();
            let l = level.clamp(-t.bits().max_level(), t.bits().max_level());
            proptest::prop_assume!(t.contains_level(l));
            proptest::prop_assert_eq!(quantize_value(t.value(l), &t).0, l);
        }
    }
}
