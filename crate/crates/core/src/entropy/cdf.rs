//! Quantised cumulative distributions over the bounded symbol alphabet.

use std::sync::OnceLock;

use crate::nn::likelihood::{gaussian_mass, logistic_mass};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Largest symbol magnitude coded directly; anything beyond escapes.
pub const MAX_SYMBOL: i32 = 64;
/// Direct symbols `-64..=64` plus one escape entry.
pub const ALPHABET: usize = 2 * MAX_SYMBOL as usize + 2;
pub const ESCAPE: usize = ALPHABET - 1;

pub const SIGMA_MIN: f32 = 0.11;
pub const SIGMA_MAX: f32 = 64.0;
pub const SIGMA_LEVELS: usize = 64;

/// Index into the alphabet, or `None` when `s` needs the escape.
pub fn symbol_index(s: i32) -> Option<usize> {
    (s.abs() <= MAX_SYMBOL).then(|| (s + MAX_SYMBOL) as usize)
}

/// Strictly increasing `cdf[0] = 0 < ... < cdf[ALPHABET] = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    escape_order: u32,
}

impl CdfTable {
    /// Quantises `pmf` so every entry keeps frequency at least 1 and the
    /// total is exactly `2^16`. The remainder goes to the most probable entry.
    pub fn from_pmf(pmf: &[f64]) -> Self {
        assert!(!pmf.is_empty() && pmf.len() < TOTAL as usize);
        let spare = (TOTAL as usize - pmf.len()) as f64;
        let sum: f64 = pmf.iter().map(|p| p.max(0.0)).sum();
        let mut freq: Vec<u32> = pmf
            .iter()
            .map(|&p| 1 + (p.max(0.0) / sum * spare).floor() as u32)
            .collect();
        let used: u32 = freq.iter().sum();
        let best = pmf
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > pmf[b] { i } else { b });
        freq[best] += TOTAL - used;
        let mut cdf = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        CdfTable { cdf, escape_order: 0 }
    }

    /// Sets the Exp-Golomb order of escaped magnitudes to `log2(scale)`.
    pub fn with_escape_scale(mut self, scale: f64) -> Self {
        self.escape_order = scale.max(1.0).log2().floor() as u32;
        self
    }

    pub fn escape_order(&self) -> u32 {
        self.escape_order
    }

    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cum(&self, index: usize) -> u32 {
        self.cdf[index]
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Largest index whose cumulative value does not exceed `target`.
    pub fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Code length of `index` under this table.
    pub fn bits(&self, index: usize) -> f64 {
        PRECISION as f64 - (self.freq(index) as f64).log2()
    }
}

fn sigma_step() -> f64 {
    ((SIGMA_MAX as f64).ln() - (SIGMA_MIN as f64).ln()) / (SIGMA_LEVELS - 1) as f64
}

/// The log-spaced scale levels shared by rate estimation and coding.
pub fn sigma_levels() -> &'static [f32; SIGMA_LEVELS] {
    static LEVELS: OnceLock<[f32; SIGMA_LEVELS]> = OnceLock::new();
    LEVELS.get_or_init(|| {
        let step = sigma_step();
        std::array::from_fn(|j| ((SIGMA_MIN as f64).ln() + step * j as f64).exp() as f32)
    })
}

/// Nearest level in the log domain.
pub fn sigma_index(sigma: f32) -> usize {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX) as f64;
    let j = ((s.ln() - (SIGMA_MIN as f64).ln()) / sigma_step()).round();
    (j as usize).min(SIGMA_LEVELS - 1)
}

pub fn snap_sigma(sigma: f32) -> f32 {
    sigma_levels()[sigma_index(sigma)]
}

/// Alphabet masses for a discretised distribution; the escape entry holds
/// the tail mass.
fn alphabet_pmf(mass: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut pmf: Vec<f64> = (-MAX_SYMBOL..=MAX_SYMBOL).map(|s| mass(s as f64)).collect();
    let inside: f64 = pmf.iter().sum();
    pmf.push((1.0 - inside).max(0.0));
    pmf
}

/// One table per sigma level, built once.
pub fn gaussian_tables() -> &'static [CdfTable] {
    static TABLES: OnceLock<Vec<CdfTable>> = OnceLock::new();
    TABLES.get_or_init(|| {
        sigma_levels()
            .iter()
            .map(|&s| CdfTable::from_pmf(&alphabet_pmf(|d| gaussian_mass(d, s as f64))).with_escape_scale(s as f64))
            .collect()
    })
}

pub fn logistic_table(scale: f32) -> CdfTable {
    let scale = scale.max(SIGMA_MIN) as f64;
    CdfTable::from_pmf(&alphabet_pmf(|d| logistic_mass(d, scale))).with_escape_scale(scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_strictly_increasing_and_complete() {
        for t in gaussian_tables() {
            assert_eq!(t.len(), ALPHABET);
            assert_eq!(t.cum(0), 0);
            assert_eq!(t.cum(ALPHABET), TOTAL);
            assert!((0..ALPHABET).all(|i| t.freq(i) >= 1));
        }
    }

    #[test]
    fn sigma_levels_span_range() {
        let l = sigma_levels();
        assert!((l[0] - SIGMA_MIN).abs() < 1e-6);
        assert!((l[SIGMA_LEVELS - 1] - SIGMA_MAX).abs() < 1e-3);
        for (j, &s) in l.iter().enumerate() {
            assert_eq!(sigma_index(s), j);
        }
        assert_eq!(sigma_index(0.0), 0);
        assert_eq!(sigma_index(1e6), SIGMA_LEVELS - 1);
    }

    #[test]
    fn find_inverts_cumulative() {
        let t = &gaussian_tables()[20];
        for i in 0..ALPHABET {
            assert_eq!(t.find(t.cum(i)), i);
            assert_eq!(t.find(t.cum(i + 1) - 1), i);
        }
    }
}
