//! Little-endian bit packing of level indices. A level `ℓ` is stored as the
//! unsigned code `ℓ + (2ⁿ⁻¹ − 1)` for `n ≥ 2`, and as `0`/`1` for `−1`/`+1`
//! when `n = 1`. Codes are written least significant bit first.

use super::BitWidth;
use crate::error::{Error, Result};

pub fn packed_len(count: usize, bits: BitWidth) -> usize {
    (count * bits.bits() as usize).div_ceil(8)
}

fn encode(level: i8, bits: BitWidth) -> u32 {
    if bits == BitWidth::ONE {
        u32::from(level > 0)
    } else {
        (i32::from(level) + bits.max_level()) as u32
    }
}

fn decode(code: u32, bits: BitWidth) -> Option<i8> {
    if bits == BitWidth::ONE {
        return Some(if code == 1 { 1 } else { -1 });
    }
    let level = code as i32 - bits.max_level();
    (level <= bits.max_level()).then_some(level as i8)
}

pub fn pack_levels(levels: &[i8], bits: BitWidth) -> Vec<u8> {
    let n = bits.bits() as usize;
    let mut out = vec![0u8; packed_len(levels.len(), bits)];
    for (i, &level) in levels.iter().enumerate() {
        let code = encode(level, bits);
        for b in 0..n {
            if code >> b & 1 == 1 {
                let pos = i * n + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

pub fn unpack_levels(bytes: &[u8], bits: BitWidth, count: usize) -> Result<Vec<i8>> {
    let expected = packed_len(count, bits);
    if bytes.len() != expected {
        return Err(Error::format(
            "levels",
            format!("{} packed bytes, expected {expected}", bytes.len()),
        ));
    }
    let n = bits.bits() as usize;
    (0..count)
        .map(|i| {
            let code = (0..n).fold(0u32, |acc, b| {
                let pos = i * n + b;
                acc | (u32::from(bytes[pos / 8] >> (pos % 8) & 1) << b)
            });
            decode(code, bits).ok_or_else(|| {
                Error::format("levels", format!("code {code} out of range at index {i}"))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_layout() {
        // levels -1, 0, 1, 0 -> codes 0, 1, 2, 1 -> 0b01_10_01_00
        assert_eq!(pack_levels(&[-1, 0, 1, 0], BitWidth::TWO), vec![0b0110_0100]);
    }

    #[test]
    fn rejects_unused_code_and_bad_length() {
        assert!(unpack_levels(&[0b11], BitWidth::TWO, 1).is_err());
        assert!(unpack_levels(&[0, 0], BitWidth::TWO, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip(bits in 1u32..=8, raw in proptest::collection::vec(-127i32..=127, 0..200)) {
            let bits = BitWidth::new(bits).unwrap();
            let m = bits.max_level();
            let levels: Vec<i8> = raw
                .iter()
                .map(|&l| {
                    let l = l.clamp(-m, m);
                    if bits == BitWidth::ONE && l == 0 { 1 } else { l as i8 }
                })
                .collect();
            let packed = pack_levels(&levels, bits);
            proptest::prop_assert_eq!(packed.len(), packed_len(levels.len(), bits));
            proptest::prop_assert_eq!(unpack_levels(&packed, bits, levels.len()).unwrap(), levels);
        }
    }
}
