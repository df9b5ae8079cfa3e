//! Symbol streams for the gaussian-conditional and factorized models.
//!
//! Symbols are visited in flat NCHW order (channel-major, then row-major);
//! masked-out positions are neither written nor read.

use super::cdf::{gaussian_tables, sigma_index, sigma_levels, symbol_index, CdfTable, ESCAPE, MAX_SYMBOL, PRECISION};
use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::likelihood::gaussian_bits;

/// Escaped magnitudes `|s| - 65` use an Exp-Golomb code of the table's
/// order: a unary prefix of `n` zeros and a one, then `n + k` suffix bits.
fn escape_bits(u: u64, k: u32) -> f64 {
    let n = ((u >> k) + 1).ilog2();
    (2 * n + 1 + k) as f64
}

fn encode_symbol(enc: &mut RangeEncoder, s: i32, table: &CdfTable) {
    match symbol_index(s) {
        Some(i) => enc.encode(table.cum(i), table.freq(i), PRECISION),
        None => {
            enc.encode(table.cum(ESCAPE), table.freq(ESCAPE), PRECISION);
            enc.encode_bits((s < 0) as u32, 1);
            let k = table.escape_order();
            let u = (s as i64).unsigned_abs() - MAX_SYMBOL as u64 - 1;
            let q = (u >> k) + 1;
            let n = q.ilog2();
            for _ in 0..n {
                enc.encode_bits(0, 1);
            }
            enc.encode_bits(1, 1);
            enc.encode_bits((q - (1 << n)) as u32, n);
            enc.encode_bits((u & ((1 << k) - 1)) as u32, k);
        }
    }
}

fn decode_symbol(dec: &mut RangeDecoder, table: &CdfTable) -> Result<i32> {
    let i = table.find(dec.target(PRECISION)?);
    dec.consume(table.cum(i), table.freq(i), PRECISION)?;
    if i != ESCAPE {
        return Ok(i as i32 - MAX_SYMBOL);
    }
    let negative = dec.decode_bits(1)? == 1;
    let k = table.escape_order();
    let mut n = 0;
    while dec.decode_bits(1)? == 0 {
        n += 1;
        if n > 31 {
            return Err(Error::Corrupt("escape prefix too long".into()));
        }
    }
    let q = (1u64 << n) + dec.decode_bits(n)? as u64;
    let u = ((q - 1) << k) + dec.decode_bits(k)? as u64;
    let v = i32::try_from(u + MAX_SYMBOL as u64 + 1).map_err(|_| Error::Corrupt("escape value overflow".into()))?;
    Ok(if negative { -v } else { v })
}

/// Symbols must satisfy `|s| < 2^31 - 64`.
fn check_range(s: i32) -> Result<()> {
    if (s as i64).abs() >= (1i64 << 31) - MAX_SYMBOL as i64 {
        return Err(Error::Alphabet(s as i64));
    }
    Ok(())
}

fn active(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// Codes `symbols[i]` with the gaussian table for `sigma[i]` wherever
/// `mask` is set.
pub fn encode_gaussian(symbols: &[i32], sigma: &[f32], mask: Option<&[bool]>) -> Result<Vec<u8>> {
    assert_eq!(symbols.len(), sigma.len());
    if let Some(m) = mask {
        assert_eq!(m.len(), symbols.len());
    }
    let tables = gaussian_tables();
    let mut enc = RangeEncoder::new();
    for (i, (&s, &sg)) in symbols.iter().zip(sigma).enumerate() {
        if active(mask, i) {
            check_range(s)?;
            encode_symbol(&mut enc, s, &tables[sigma_index(sg)]);
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_gaussian`]; skipped positions decode as 0.
pub fn decode_gaussian(bytes: &[u8], sigma: &[f32], mask: Option<&[bool]>) -> Result<Vec<i32>> {
    let tables = gaussian_tables();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = vec![0i32; sigma.len()];
    for (i, &sg) in sigma.iter().enumerate() {
        if active(mask, i) {
            out[i] = decode_symbol(&mut dec, &tables[sigma_index(sg)])?;
        }
    }
    dec.finish()?;
    Ok(out)
}

/// Ideal code length of the gaussian model at the snapped scales.
pub fn gaussian_codelength(symbols: &[i32], sigma: &[f32], mask: Option<&[bool]>) -> f64 {
    let levels = sigma_levels();
    symbols
        .iter()
        .zip(sigma)
        .enumerate()
        .filter(|(i, _)| active(mask, *i))
        .map(|(_, (&s, &sg))| gaussian_bits(s as f64, levels[sigma_index(sg)] as f64))
        .sum()
}

/// Codes an `[N, C, plane]` array with one table per channel.
pub fn encode_factorized(symbols: &[i32], plane: usize, tables: &[CdfTable]) -> Result<Vec<u8>> {
    assert_eq!(symbols.len() % (plane * tables.len()), 0);
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        check_range(s)?;
        encode_symbol(&mut enc, s, &tables[(i / plane) % tables.len()]);
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_factorized`] for `len` symbols.
pub fn decode_factorized(bytes: &[u8], len: usize, plane: usize, tables: &[CdfTable]) -> Result<Vec<i32>> {
    assert_eq!(len % (plane * tables.len()), 0);
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = vec![0i32; len];
    for (i, o) in out.iter_mut().enumerate() {
        *o = decode_symbol(&mut dec, &tables[(i / plane) % tables.len()])?;
    }
    dec.finish()?;
    Ok(out)
}

/// Code length under the quantised tables, escapes included.
pub fn table_codelength(symbols: &[i32], table_for: impl Fn(usize) -> usize, tables: &[CdfTable]) -> f64 {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let t = &tables[table_for(i)];
            match symbol_index(s) {
                Some(j) => t.bits(j),
                None => {
                    let u = (s as i64).unsigned_abs() - MAX_SYMBOL as u64 - 1;
                    t.bits(ESCAPE) + 1.0 + escape_bits(u, t.escape_order())
                }
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::cdf::logistic_table;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn escapes_round_trip() {
        let symbols = vec![0, 64, -64, 65, -65, 66, 1000, -123_456, 2_000_000_000, -2_000_000_000];
        let sigma = vec![0.5; symbols.len()];
        let bytes = encode_gaussian(&symbols, &sigma, None).unwrap();
        assert_eq!(decode_gaussian(&bytes, &sigma, None).unwrap(), symbols);
    }

    #[test]
    fn empty_mask_gives_empty_payload() {
        let symbols = vec![3, -2, 7];
        let sigma = vec![1.0; 3];
        let mask = vec![false; 3];
        let bytes = encode_gaussian(&symbols, &sigma, Some(&mask)).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(decode_gaussian(&bytes, &sigma, Some(&mask)).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn masked_round_trip_and_tightness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5000;
        let sigma: Vec<f32> = (0..n).map(|_| rng.random_range(0.11..8.0)).collect();
        let symbols: Vec<i32> = sigma
            .iter()
            .map(|&s| (rng.random_range(-2.0f32..2.0) * s).round() as i32)
            .collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let bytes = encode_gaussian(&symbols, &sigma, Some(&mask)).unwrap();
        let decoded = decode_gaussian(&bytes, &sigma, Some(&mask)).unwrap();
        for i in 0..n {
            assert_eq!(decoded[i], if mask[i] { symbols[i] } else { 0 });
        }
        let ideal = gaussian_codelength(&symbols, &sigma, Some(&mask));
        let actual = bytes.len() as f64 * 8.0;
        assert!(actual <= ideal * 1.02 + 32.0, "{actual} vs {ideal}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let symbols: Vec<i32> = (0..400).map(|i| (i % 9) - 4).collect();
        let sigma = vec![2.0; symbols.len()];
        let bytes = encode_gaussian(&symbols, &sigma, None).unwrap();
        let cut = &bytes[..bytes.len() - 4];
        assert!(decode_gaussian(cut, &sigma, None).is_err());
    }

    #[test]
    fn factorized_round_trip() {
        let tables: Vec<CdfTable> = [0.3, 1.0, 4.0].iter().map(|&s| logistic_table(s)).collect();
        let symbols = vec![0, 1, -1, 0, 5, -9, 12, 100, -3];
        let bytes = encode_factorized(&symbols, 3, &tables).unwrap();
        assert_eq!(decode_factorized(&bytes, 9, 3, &tables).unwrap(), symbols);
        let twice: Vec<i32> = symbols.iter().chain(&symbols).copied().collect();
        let bytes = encode_factorized(&twice, 3, &tables).unwrap();
        assert_eq!(decode_factorized(&bytes, 18, 3, &tables).unwrap(), twice);
    }

    #[test]
    fn degenerate_distribution_is_nearly_free() {
        let t = vec![logistic_table(0.11)];
        let symbols = vec![0; 100];
        let bytes = encode_factorized(&symbols, 100, &t).unwrap();
        assert!(bytes.len() <= 4, "{}", bytes.len());
    }
}
