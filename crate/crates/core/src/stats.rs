//! Per-layer bit accounting and retained-sample statistics of a coded
//! sequence. Intra frames are counted separately and stay out of the
//! base/enhancement split.

use std::fmt::Write;

use serde::Serialize;

use crate::entropy::Bitstream;
use crate::error::{Error, Result};
use crate::gop::FrameType;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameStats {
    pub poc: usize,
    pub frame_type: FrameType,
    pub base_bits: u64,
    pub enh_bits: u64,
    pub intra_bits: u64,
    /// Transmitted share of the enhancement latent; `None` for intra frames.
    pub retained: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TypeStats {
    pub frames: usize,
    pub base_bits: u64,
    pub enh_bits: u64,
    pub mean_retained: f64,
}

impl TypeStats {
    /// Base-layer share of the B-frame bits, in percent.
    pub fn base_percent(&self) -> f64 {
        percent(self.base_bits, self.base_bits + self.enh_bits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub base_bits: u64,
    pub enh_bits: u64,
    pub intra_bits: u64,
    /// Coding order.
    pub frames: Vec<FrameStats>,
    pub reference: TypeStats,
    pub non_reference: TypeStats,
}

fn percent(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// `masks` is indexed by POC, as produced by the decoder. A B frame without
/// a mask was coded with skip mode off and retains everything.
pub fn layer_stats(bs: &Bitstream, masks: &[Option<Tensor>]) -> Result<LayerStats> {
    let n = bs.header.num_frames as usize;
    if masks.len() != n {
        return Err(Error::Dimension(format!("{} masks for {n} frames", masks.len())));
    }
    let mut frames = Vec::with_capacity(bs.records.len());
    for r in &bs.records {
        let poc = r.poc as usize;
        let mask = masks
            .get(poc)
            .ok_or_else(|| Error::Dimension(format!("record poc {poc} beyond {n} frames")))?;
        let bits = |i: usize| r.payloads.get(i).map_or(0, |p| p.len() as u64 * 8);
        let f = if r.frame_type == FrameType::Intra {
            FrameStats {
                poc,
                frame_type: r.frame_type,
                base_bits: 0,
                enh_bits: 0,
                intra_bits: bits(0),
                retained: None,
            }
        } else {
            let retained = match mask {
                Some(m) if m.numel() > 0 => m.data().iter().map(|&v| v as f64).sum::<f64>() / m.numel() as f64,
                _ => 1.0,
            };
            FrameStats {
                poc,
                frame_type: r.frame_type,
                base_bits: bits(0),
                enh_bits: bits(1),
                intra_bits: 0,
                retained: Some(retained),
            }
        };
        frames.push(f);
    }
    let by_type = |t: FrameType| {
        let sel: Vec<&FrameStats> = frames.iter().filter(|f| f.frame_type == t).collect();
        let count = sel.len();
        TypeStats {
            frames: count,
            base_bits: sel.iter().map(|f| f.base_bits).sum(),
            enh_bits: sel.iter().map(|f| f.enh_bits).sum(),
            mean_retained: if count == 0 {
                0.0
            } else {
                sel.iter().filter_map(|f| f.retained).sum::<f64>() / count as f64
            },
        }
    };
    let (reference, non_reference) = (by_type(FrameType::BRef), by_type(FrameType::BNonref));
    Ok(LayerStats {
        base_bits: frames.iter().map(|f| f.base_bits).sum(),
        enh_bits: frames.iter().map(|f| f.enh_bits).sum(),
        intra_bits: frames.iter().map(|f| f.intra_bits).sum(),
        frames,
        reference,
        non_reference,
    })
}

impl LayerStats {
    pub fn total_bits(&self) -> u64 {
        self.base_bits + self.enh_bits + self.intra_bits
    }

    /// Base-layer share of all B-frame bits, in percent.
    pub fn base_percent(&self) -> f64 {
        percent(self.base_bits, self.base_bits + self.enh_bits)
    }

    /// Mean retained fraction over all B frames; 0 when there are none.
    pub fn mean_retained(&self) -> f64 {
        let r: Vec<f64> = self.frames.iter().filter_map(|f| f.retained).collect();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    /// One row per frame in coding order, then `R`, `NR` and `ALL` summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("poc,frame_type,base_bits,enh_bits,intra_bits,retained\n");
        for f in &self.frames {
            let retained = f.retained.map_or(String::new(), |r| format!("{r:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                f.poc, f.frame_type, f.base_bits, f.enh_bits, f.intra_bits, retained
            );
        }
        for (name, t) in [("R", &self.reference), ("NR", &self.non_reference)] {
            let _ = writeln!(s, ",{name},{},{},0,{:.6}", t.base_bits, t.enh_bits, t.mean_retained);
        }
        let _ = writeln!(
            s,
            ",ALL,{},{},{},{:.6}",
            self.base_bits,
            self.enh_bits,
            self.intra_bits,
            self.mean_retained()
        );
        s
    }
}
