//! Hierarchical B-frame coding plans.

use std::collections::VecDeque;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::FaSlot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameType {
    Intra,
    BRef,
    BNonref,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::Intra => 0,
            FrameType::BRef => 1,
            FrameType::BNonref => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(FrameType::Intra),
            1 => Ok(FrameType::BRef),
            2 => Ok(FrameType::BNonref),
            other => Err(Error::Corrupt(format!("unknown frame type {other}"))),
        }
    }

    /// FA parameter set for B frames; `None` for intra.
    pub fn fa_slot(self) -> Option<FaSlot> {
        match self {
            FrameType::Intra => None,
            FrameType::BRef => Some(FaSlot::Ref),
            FrameType::BNonref => Some(FaSlot::NonRef),
        }
    }

    pub fn is_b(self) -> bool {
        self != FrameType::Intra
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameType::Intra => "I",
            FrameType::BRef => "B-R",
            FrameType::BNonref => "B-NR",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FrameSlot {
    pub poc: usize,
    pub frame_type: FrameType,
    pub ref_prev: Option<usize>,
    pub ref_next: Option<usize>,
    /// Distance to either reference; 0 for intra.
    pub k: usize,
    /// 0 for intra, 1 for the first midpoint split of an interval, and so on.
    pub level: usize,
}

impl FrameSlot {
    fn intra(poc: usize) -> Self {
        FrameSlot {
            poc,
            frame_type: FrameType::Intra,
            ref_prev: None,
            ref_next: None,
            k: 0,
            level: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GopPlan {
    /// Coding order.
    pub slots: Vec<FrameSlot>,
    pub gop_size: usize,
    pub num_frames: usize,
}

pub const GOP_SIZES: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Intra frames sit at every multiple of `gop_size`; each interval between
/// consecutive intra frames is midpoint-split breadth-first. A tail shorter
/// than a full GOP is cut into power-of-two intervals, largest first, each
/// closed by its own intra frame, so every B frame keeps symmetric
/// references.
pub fn build_gop_plan(num_frames: usize, gop_size: usize) -> Result<GopPlan> {
    if !GOP_SIZES.contains(&gop_size) {
        return Err(Error::InvalidArgument(format!(
            "gop size {gop_size} is not one of {GOP_SIZES:?}"
        )));
    }
    if num_frames == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let mut slots = vec![FrameSlot::intra(0)];
    let mut anchor = 0;
    while anchor + 1 < num_frames {
        let remaining = num_frames - 1 - anchor;
        let span = if remaining >= gop_size {
            gop_size
        } else {
            1 << remaining.ilog2()
        };
        slots.push(FrameSlot::intra(anchor + span));
        split_interval(anchor, anchor + span, &mut slots);
        anchor += span;
    }
    Ok(GopPlan {
        slots,
        gop_size,
        num_frames,
    })
}

fn split_interval(a: usize, b: usize, slots: &mut Vec<FrameSlot>) {
    let mut queue = VecDeque::from([(a, b, 1usize)]);
    while let Some((lo, hi, level)) = queue.pop_front() {
        if hi - lo < 2 {
            continue;
        }
        let mid = (lo + hi) / 2;
        let k = mid - lo;
        slots.push(FrameSlot {
            poc: mid,
            frame_type: if k == 1 {
                FrameType::BNonref
            } else {
                FrameType::BRef
            },
            ref_prev: Some(lo),
            ref_next: Some(hi),
            k,
            level,
        });
        queue.push_back((lo, mid, level + 1));
        queue.push_back((mid, hi, level + 1));
    }
}

impl GopPlan {
    pub fn coding_order(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.poc).collect()
    }

    pub fn slot(&self, poc: usize) -> Option<&FrameSlot> {
        self.slots.iter().find(|s| s.poc == poc)
    }

    /// Checks topological order, coverage, k-symmetry and that no slot
    /// references a non-reference frame.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_frames];
        let mut kinds = vec![None; self.num_frames];
        for s in &self.slots {
            if s.poc >= self.num_frames || seen[s.poc] {
                return Err(Error::Corrupt(format!("poc {} repeated or out of range", s.poc)));
            }
            match (s.frame_type, s.ref_prev, s.ref_next) {
                (FrameType::Intra, None, None) => {}
                (FrameType::Intra, _, _) => {
                    return Err(Error::Corrupt(format!("intra {} has references", s.poc)))
                }
                (_, Some(p), Some(n)) => {
                    if !(p < s.poc && s.poc < n) || s.poc - p != s.k || n - s.poc != s.k {
                        return Err(Error::Corrupt(format!("asymmetric references for {}", s.poc)));
                    }
                    for r in [p, n] {
                        if !seen[r] {
                            return Err(Error::Corrupt(format!(
                                "{} references {r} before it is coded",
                                s.poc
                            )));
                        }
                        if kinds[r] == Some(FrameType::BNonref) {
                            return Err(Error::Corrupt(format!(
                                "{} references non-reference frame {r}",
                                s.poc
                            )));
                        }
                    }
                }
                _ => return Err(Error::Corrupt(format!("B frame {} lacks references", s.poc))),
            }
            seen[s.poc] = true;
            kinds[s.poc] = Some(s.frame_type);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Corrupt("plan does not cover every frame".into()));
        }
        Ok(())
    }
}
