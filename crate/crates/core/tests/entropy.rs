use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{analytic_bits, random_case};
use zeromotion::entropy::cdf::{gaussian_tables, logistic_table, ESCAPE, MAX_SYMBOL};
use zeromotion::entropy::{
    decode_factorized, decode_gaussian, encode_factorized, encode_gaussian, read_container, write_container,
    Bitstream, FrameRecord, Header,
};
use zeromotion::gop::FrameType;
use zeromotion::Error;

#[test]
fn gaussian_coding_round_trips_near_the_analytic_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let (symbols, sigma, mask) = random_case(&mut rng);
        let bytes = encode_gaussian(&symbols, &sigma, mask.as_deref()).unwrap();
        let back = decode_gaussian(&bytes, &sigma, mask.as_deref()).unwrap();
        let expect: Vec<i32> = symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| if mask.as_ref().is_none_or(|m| m[i]) { s } else { 0 })
            .collect();
        assert_eq!(back, expect, "case {case}");
        let bound = analytic_bits(&symbols, &sigma, mask.as_deref());
        let payload = bytes.len() as f64 * 8.0;
        assert!(payload <= bound * 1.02 + 32.0, "case {case}: {payload} > {bound}");
    }
}

#[test]
fn all_zero_mask_gives_an_empty_payload() {
    let sigma = vec![1.0f32; 64];
    let symbols = vec![3i32; 64];
    let bytes = encode_gaussian(&symbols, &sigma, Some(&[false; 64])).unwrap();
    assert!(bytes.is_empty());
    assert_eq!(decode_gaussian(&bytes, &sigma, Some(&[false; 64])).unwrap(), vec![0; 64]);
}

#[test]
fn escapes_carry_large_magnitudes() {
    let symbols = vec![0, MAX_SYMBOL, MAX_SYMBOL + 1, -MAX_SYMBOL - 1, 1 << 20, -(1 << 29), 7];
    let sigma = vec![0.5f32; symbols.len()];
    let bytes = encode_gaussian(&symbols, &sigma, None).unwrap();
    assert_eq!(decode_gaussian(&bytes, &sigma, None).unwrap(), symbols);
}

#[test]
fn out_of_alphabet_symbols_are_rejected() {
    assert!(matches!(encode_gaussian(&[i32::MAX], &[1.0], None), Err(Error::Alphabet(_))));
}

#[test]
fn truncated_streams_fail_or_differ() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sigma: Vec<f32> = (0..500).map(|_| rng.random_range(2.0..20.0)).collect();
    let symbols: Vec<i32> = sigma.iter().map(|&s| (rng.random_range(-1.0f32..1.0) * s) as i32).collect();
    let bytes = encode_gaussian(&symbols, &sigma, None).unwrap();
    let cut = &bytes[..bytes.len() / 2];
    if let Ok(v) = decode_gaussian(cut, &sigma, None) { assert_ne!(v, symbols) }
}

#[test]
fn tables_reserve_tail_mass_for_the_escape() {
    for t in gaussian_tables() {
        assert!(t.freq(ESCAPE) >= 1);
    }
    assert!(logistic_table(3.0).freq(ESCAPE) >= 1);
}

proptest! {
    #[test]
    fn factorized_coding_round_trips(
        n in 1usize..3,
        c in 1usize..5,
        plane in 1usize..40,
        scales in proptest::collection::vec(0.1f32..30.0, 4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables: Vec<_> = scales[..c].iter().map(|&s| logistic_table(s)).collect();
        let symbols: Vec<i32> = (0..n * c * plane)
            .map(|i| {
                let s = scales[(i / plane) % c];
                (rng.random_range(-3.0f32..3.0) * s).round() as i32
            })
            .collect();
        let bytes = encode_factorized(&symbols, plane, &tables).unwrap();
        prop_assert_eq!(decode_factorized(&bytes, symbols.len(), plane, &tables).unwrap(), symbols);
    }

    #[test]
    fn gaussian_coding_round_trips_any_mask(
        entries in proptest::collection::vec((-200i32..200, 0.05f32..80.0, any::<bool>()), 1..300),
    ) {
        let symbols: Vec<i32> = entries.iter().map(|e| e.0).collect();
        let sigma: Vec<f32> = entries.iter().map(|e| e.1).collect();
        let mask: Vec<bool> = entries.iter().map(|e| e.2).collect();
        let bytes = encode_gaussian(&symbols, &sigma, Some(&mask)).unwrap();
        let back = decode_gaussian(&bytes, &sigma, Some(&mask)).unwrap();
        for i in 0..symbols.len() {
            prop_assert_eq!(back[i], if mask[i] { symbols[i] } else { 0 });
        }
    }
}

fn sample_stream() -> Bitstream {
    Bitstream {
        header: Header {
            metric: 1,
            gop_size: 2,
            lambda_index: 0,
            width: 60,
            height: 50,
            padded_width: 64,
            padded_height: 64,
            num_frames: 3,
        },
        records: vec![
            FrameRecord {
                poc: 0,
                frame_type: FrameType::Intra,
                payloads: vec![vec![9; 17]],
            },
            FrameRecord {
                poc: 2,
                frame_type: FrameType::Intra,
                payloads: vec![vec![1, 2]],
            },
            FrameRecord {
                poc: 1,
                frame_type: FrameType::BNonref,
                payloads: vec![vec![5; 3], vec![]],
            },
        ],
    }
}

#[test]
fn container_round_trip_and_byte_accounting() {
    let bs = sample_stream();
    let bytes = write_container(&bs).unwrap();
    assert_eq!(read_container(&bytes).unwrap(), bs);
    // Header, then per record: poc, type, count, lengths, payloads.
    let framing: usize = bs.records.iter().map(|r| 4 + 1 + 1 + 4 * r.payloads.len()).sum();
    assert_eq!(bytes.len() as u64 * 8, (28 + framing) as u64 * 8 + bs.total_payload_bits());
}

#[test]
fn container_rejects_unknown_versions_and_truncation() {
    let mut bytes = write_container(&sample_stream()).unwrap();
    assert!(matches!(read_container(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    bytes[4] = 99;
    assert!(matches!(read_container(&bytes), Err(Error::Version(99))));
    bytes[0] = b'X';
    assert!(matches!(read_container(&bytes), Err(Error::BadMagic)));
}
