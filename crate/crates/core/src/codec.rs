//! Closed-loop sequence coding over a GOP plan.
//!
//! The encoder keeps the same reference buffer the decoder will hold: every
//! slot is coded against decoded references, and its own reconstruction is
//! produced by the decoder-side computation path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::canf::Mode;
use crate::data::{Frame, Sequence};
use crate::entropy::{Bitstream, FrameRecord, Header};
use crate::error::{Error, Result};
use crate::gop::{build_gop_plan, FrameSlot, FrameType, GopPlan};
use crate::metrics::QualityMetric;
use crate::model::{lambda_index, Model, Stage};
use crate::nn::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub gop_size: usize,
    pub lambda_index: u8,
    pub metric: QualityMetric,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            gop_size: 8,
            lambda_index: 3,
            metric: QualityMetric::Mse,
        }
    }
}

/// Display-order reconstructions (padded) and regenerated skip masks.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub frames: Vec<Frame>,
    /// `None` for intra frames or when skip coding is off.
    pub masks: Vec<Option<Tensor>>,
}

pub struct Encoded {
    pub bitstream: Bitstream,
    /// What the encoder's reference buffer held, in display order.
    pub recon: Decoded,
}

/// A model trained for a known rate point must match the requested one.
fn check_rate_point(model: &Model, metric: QualityMetric, index: u8) -> Result<()> {
    if model.meta.lambda <= 0.0 {
        return Ok(());
    }
    if model.meta.metric != metric || lambda_index(metric, model.meta.lambda) != Some(index) {
        return Err(Error::InvalidArgument(format!(
            "model is trained for {} at lambda {}, stream asks for {metric} index {index}",
            model.meta.metric, model.meta.lambda
        )));
    }
    Ok(())
}

fn refs<'a>(buf: &'a [Option<Tensor>], slot: &FrameSlot) -> Result<(&'a Tensor, &'a Tensor)> {
    let get = |p: Option<usize>| {
        p.and_then(|p| buf.get(p)?.as_ref())
            .ok_or_else(|| Error::Corrupt(format!("reference for poc {} not decoded yet", slot.poc)))
    };
    Ok((get(slot.ref_prev)?, get(slot.ref_next)?))
}

pub fn encode_sequence(seq: &Sequence, model: &Model, cfg: &CodecConfig) -> Result<Encoded> {
    check_rate_point(model, cfg.metric, cfg.lambda_index)?;
    let plan = build_gop_plan(seq.frames.len(), cfg.gop_size)?;
    let n = seq.frames.len();
    let shape = seq.frames[0].data.shape();
    let mut buf: Vec<Option<Tensor>> = vec![None; n];
    let mut masks: Vec<Option<Tensor>> = vec![None; n];
    let mut records = Vec::with_capacity(n);
    // Quantisation noise is never drawn outside training; the generator only
    // satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for slot in &plan.slots {
        let x_t = &seq.frames[slot.poc].data;
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let (payloads, recon, mask) = if slot.frame_type == FrameType::Intra {
            let coded = model.code_intra(&mut g, x, Mode::Real, &mut rng)?;
            (vec![coded.payload.expect("real mode")], g.value(coded.recon).clone(), None)
        } else {
            let (p, nx) = refs(&buf, slot)?;
            let rp = g.constant(p.clone());
            let rn = g.constant(nx.clone());
            let t = model.forward_b(&mut g, x, rp, rn, slot.frame_type, Mode::Real, Stage::Full, &mut rng)?;
            let recon = g.value(t.recon.expect("full stage")).clone();
            let mask = t.skip.map(|s| g.value(s.mask).clone());
            (
                vec![t.base_payload.expect("real mode"), t.enh_payload.expect("real mode")],
                recon,
                mask,
            )
        };
        records.push(FrameRecord {
            poc: slot.poc as u32,
            frame_type: slot.frame_type,
            payloads,
        });
        buf[slot.poc] = Some(recon);
        masks[slot.poc] = mask;
    }
    let header = Header {
        metric: cfg.metric.code(),
        gop_size: cfg.gop_size as u8,
        lambda_index: cfg.lambda_index,
        width: seq.width as u32,
        height: seq.height as u32,
        padded_width: shape[3] as u32,
        padded_height: shape[2] as u32,
        num_frames: n as u32,
    };
    Ok(Encoded {
        bitstream: Bitstream { header, records },
        recon: collect(buf, masks),
    })
}

fn collect(buf: Vec<Option<Tensor>>, masks: Vec<Option<Tensor>>) -> Decoded {
    let frames = buf
        .into_iter()
        .enumerate()
        .map(|(poc, t)| Frame::new(t.expect("every poc coded"), poc))
        .collect();
    Decoded { frames, masks }
}

/// The plan implied by a header, checked against the record order.
fn plan_for(bs: &Bitstream) -> Result<GopPlan> {
    let h = &bs.header;
    let plan = build_gop_plan(h.num_frames as usize, h.gop_size as usize)?;
    if plan.slots.len() != bs.records.len() {
        return Err(Error::Corrupt("record count does not match the GOP plan".into()));
    }
    for (slot, r) in plan.slots.iter().zip(&bs.records) {
        if slot.poc != r.poc as usize || slot.frame_type != r.frame_type {
            return Err(Error::Corrupt(format!(
                "record for poc {} ({}) out of plan order, expected poc {} ({})",
                r.poc, r.frame_type, slot.poc, slot.frame_type
            )));
        }
    }
    Ok(plan)
}

pub fn decode_sequence(bs: &Bitstream, model: &Model) -> Result<Decoded> {
    let h = &bs.header;
    let metric = QualityMetric::from_code(h.metric)?;
    check_rate_point(model, metric, h.lambda_index)?;
    let plan = plan_for(bs)?;
    let (pw, ph) = (h.padded_width as usize, h.padded_height as usize);
    if pw % crate::data::PAD_MULTIPLE != 0 || ph % crate::data::PAD_MULTIPLE != 0 {
        return Err(Error::Corrupt(format!("padded size {pw}x{ph} is not a multiple of 64")));
    }
    let shape = [1, 3, ph, pw];
    let n = h.num_frames as usize;
    let mut buf: Vec<Option<Tensor>> = vec![None; n];
    let mut masks: Vec<Option<Tensor>> = vec![None; n];
    for (slot, record) in plan.slots.iter().zip(&bs.records) {
        let mut g = Graph::inference();
        if slot.frame_type == FrameType::Intra {
            let recon = model.decode_intra(&mut g, &record.payloads[0], shape)?;
            buf[slot.poc] = Some(g.value(recon).clone());
        } else {
            let (p, nx) = refs(&buf, slot)?;
            let rp = g.constant(p.clone());
            let rn = g.constant(nx.clone());
            let (recon, mask) = model.decode_b(
                &mut g,
                &record.payloads[0],
                &record.payloads[1],
                rp,
                rn,
                slot.frame_type,
            )?;
            buf[slot.poc] = Some(g.value(recon).clone());
            masks[slot.poc] = mask.map(|m| g.value(m).clone());
        }
    }
    Ok(collect(buf, masks))
}
