//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use zeromotion::entropy::cdf::snap_sigma;
use zeromotion::gop::FrameType;

/// `(poc, ref_prev, ref_next, type)` in the order a brute-force recursive
/// split visits them: intervals left to right, each closed by an intra,
/// then its midpoints level by level.
pub type Entry = (usize, Option<usize>, Option<usize>, FrameType);

pub fn oracle(num_frames: usize, gop: usize) -> Vec<Entry> {
    fn split(lo: usize, hi: usize, depth: usize, out: &mut Vec<(usize, usize, usize, usize)>) {
        if hi - lo >= 2 {
            let mid = (lo + hi) / 2;
            out.push((depth, mid, lo, hi));
            split(lo, mid, depth + 1, out);
            split(mid, hi, depth + 1, out);
        }
    }
    // Interval ends: full GOPs, then the binary decomposition of the tail.
    let mut ends = Vec::new();
    let mut at = 0;
    while at + gop < num_frames {
        at += gop;
        ends.push(at);
    }
    let mut tail = num_frames - 1 - at;
    for bit in (0..usize::BITS).rev() {
        if tail & (1 << bit) != 0 {
            at += 1 << bit;
            ends.push(at);
            tail -= 1 << bit;
        }
    }
    let mut out = vec![(0, None, None, FrameType::Intra)];
    let mut lo = 0;
    for hi in ends {
        out.push((hi, None, None, FrameType::Intra));
        let mut nodes = Vec::new();
        split(lo, hi, 0, &mut nodes);
        // Stable sort by depth keeps left-to-right order within a level.
        nodes.sort_by_key(|n| n.0);
        for (_, mid, a, b) in nodes {
            let t = if mid - a == 1 { FrameType::BNonref } else { FrameType::BRef };
            out.push((mid, Some(a), Some(b), t));
        }
        lo = hi;
    }
    out
}

/// Discretised gaussian code length at the coder's snapped scale, from the
/// complementary error function.
pub fn analytic_bits(symbols: &[i32], sigma: &[f32], mask: Option<&[bool]>) -> f64 {
    let phi = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    symbols
        .iter()
        .zip(sigma)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (&s, &sg))| {
            let sg = snap_sigma(sg) as f64;
            let s = (s as f64).abs();
            // Upper-tail form keeps precision far from the mode.
            let p = phi(-(s - 0.5) / sg) - phi(-(s + 0.5) / sg);
            -p.max(1e-300).log2()
        })
        .sum()
}

/// Random symbols, their scales in `[e^-3, e^4.5)` and an optional mask.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<i32>, Vec<f32>, Option<Vec<bool>>) {
    let n = rng.random_range(1..2000);
    let mut symbols = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for _ in 0..n {
        let s: f32 = (rng.random_range(-3.0f32..4.5)).exp();
        let mu: f32 = rng.random_range(-20.0..20.0);
        let z = mu + Normal::new(0.0, s).unwrap().sample(rng);
        symbols.push((z - mu).round() as i32);
        sigma.push(s);
    }
    let mask = rng
        .random_bool(0.5)
        .then(|| (0..n).map(|_| rng.random_bool(0.6)).collect());
    (symbols, sigma, mask)
}
