//! Analytic parameter and MAC accounting for one B frame.
//!
//! Counts come from a shape-only pass of the encoder and decoder paths, so
//! they depend on the architecture and frame size only.

use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::canf::Mode;
use crate::error::Result;
use crate::gop::FrameType;
use crate::model::{groups, Model, Stage};
use crate::nn::Graph;

pub const GROUPS: [&str; 3] = ["Frame Interpolator", "Base Layer", "Enhancement Layer"];

/// `(group, module, MAC scope, parameter prefixes)`.
const MODULES: [(&str, &str, &str, &[&str]); 7] = [
    ("Frame Interpolator", "Interpolator", "interp", &[groups::INTERP]),
    ("Base Layer", "CANF", "base.canf", &[groups::BASE_CANF, groups::BASE_FA]),
    ("Base Layer", "DS", "base.ds", &[groups::BASE_DS]),
    ("Base Layer", "SR-Net", "base.sr", &[groups::BASE_SR]),
    ("Base Layer", "MFMN", "enh.mfmn", &[groups::ENH_MFMN]),
    ("Enhancement Layer", "Skip Mask", "enh.skip", &[groups::ENH_SKIP]),
    ("Enhancement Layer", "Ad. CANF", "enh.canf", &[groups::ENH_CANF, groups::ENH_FA]),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleRow {
    pub group: &'static str,
    pub module: &'static str,
    pub params: usize,
    pub encode_macs: u64,
    pub decode_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<ModuleRow>,
    pub encode_total: u64,
    pub decode_total: u64,
}

fn in_scope(key: &str, scope: &str) -> bool {
    key == scope || key.strip_prefix(scope).is_some_and(|r| r.starts_with('.'))
}

fn module_macs(macs: &std::collections::BTreeMap<String, u64>, scope: &str) -> u64 {
    macs.iter().filter(|(k, _)| in_scope(k, scope)).map(|(_, v)| v).sum()
}

/// Profiles a reference B frame of `height x width` (multiples of 64).
pub fn profile_complexity(model: &Model, height: usize, width: usize) -> Result<ComplexityReport> {
    let shape = [1, 3, height, width];
    let mut enc = Graph::dry_run();
    let x = enc.placeholder(shape);
    let rp = enc.placeholder(shape);
    let rn = enc.placeholder(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.forward_b(&mut enc, x, rp, rn, FrameType::BRef, Mode::Real, Stage::Full, &mut rng)?;
    let mut dec = Graph::dry_run();
    model.decode_b_dry(&mut dec, shape, FrameType::BRef);
    let mut rows: Vec<ModuleRow> = MODULES
        .iter()
        .map(|&(group, module, scope, prefixes)| ModuleRow {
            group,
            module,
            params: prefixes.iter().map(|p| model.param_count(p)).sum(),
            encode_macs: module_macs(enc.macs(), scope),
            decode_macs: module_macs(dec.macs(), scope),
        })
        .collect();
    let (encode_total, decode_total) = (enc.total_macs(), dec.total_macs());
    let enc_rest = encode_total - rows.iter().map(|r| r.encode_macs).sum::<u64>();
    let dec_rest = decode_total - rows.iter().map(|r| r.decode_macs).sum::<u64>();
    if enc_rest > 0 || dec_rest > 0 {
        rows.push(ModuleRow {
            group: "Other",
            module: "unscoped",
            params: 0,
            encode_macs: enc_rest,
            decode_macs: dec_rest,
        });
    }
    Ok(ComplexityReport {
        width,
        height,
        rows,
        encode_total,
        decode_total,
    })
}

impl ComplexityReport {
    pub fn pixels(&self) -> f64 {
        (self.width * self.height) as f64
    }

    /// `(params, encode MACs, decode MACs)` of one group.
    pub fn group_totals(&self, group: &str) -> (usize, u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.group == group)
            .fold((0, 0, 0), |(p, e, d), r| (p + r.params, e + r.encode_macs, d + r.decode_macs))
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Aligned text table with per-pixel MACs.
    pub fn to_table(&self) -> String {
        let px = self.pixels();
        let mut s = String::new();
        let _ = writeln!(s, "complexity for one B frame at {}x{}", self.width, self.height);
        let _ = writeln!(
            s,
            "{:<20} {:<14} {:>12} {:>16} {:>16}",
            "group", "module", "params", "enc MACs/px", "dec MACs/px"
        );
        let line = |s: &mut String, g: &str, m: &str, p: usize, e: u64, d: u64| {
            let _ = writeln!(s, "{:<20} {:<14} {:>12} {:>16.1} {:>16.1}", g, m, p, e as f64 / px, d as f64 / px);
        };
        let mut groups: Vec<&str> = GROUPS.to_vec();
        if self.rows.iter().any(|r| r.group == "Other") {
            groups.push("Other");
        }
        for g in groups {
            for r in self.rows.iter().filter(|r| r.group == g) {
                line(&mut s, g, r.module, r.params, r.encode_macs, r.decode_macs);
            }
            let (p, e, d) = self.group_totals(g);
            line(&mut s, g, "(sum)", p, e, d);
        }
        line(&mut s, "Total", "", self.total_params(), self.encode_total, self.decode_total);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_matching_respects_boundaries() {
        assert!(in_scope("base.canf.enc1", "base.canf"));
        assert!(in_scope("base.canf", "base.canf"));
        assert!(!in_scope("base.canfx", "base.canf"));
    }
}
