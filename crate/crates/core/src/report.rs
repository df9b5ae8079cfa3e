//! Per-frame quality of a decoded sequence and RD-point CSV files.
//!
//! RD CSV columns: `sequence,lambda,bpp,psnr,msssim`. MS-SSIM is left empty
//! for frames smaller than the five-scale minimum.

use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::Decoded;
use crate::data::{crop_top_left, Sequence};
use crate::entropy::Bitstream;
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim, psnr, RdPoint, MS_SSIM_MIN_SIDE};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameQuality {
    pub poc: usize,
    pub bits: u64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceQuality {
    /// Display order.
    pub frames: Vec<FrameQuality>,
    /// Whole-stream payload bits over all original-size pixels.
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: Option<f64>,
}

impl SequenceQuality {
    pub fn rd_point(&self) -> RdPoint {
        RdPoint {
            bpp: self.bpp,
            psnr: self.psnr,
            msssim: self.msssim.unwrap_or(f64::NAN),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("poc        bits       bpp     PSNR  MS-SSIM\n");
        let ms = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{v:.5}"));
        for f in &self.frames {
            let _ = writeln!(s, "{:>3} {:>11} {:>9.5} {:>8.3} {:>8}", f.poc, f.bits, f.bpp, f.psnr, ms(f.msssim));
        }
        let _ = writeln!(s, "avg {:>11} {:>9.5} {:>8.3} {:>8}", "", self.bpp, self.psnr, ms(self.msssim));
        s
    }
}

/// Scores decoded frames against the original sequence at its unpadded
/// size. Frame quality is averaged per frame.
pub fn evaluate_sequence(original: &Sequence, decoded: &Decoded, bs: &Bitstream) -> Result<SequenceQuality> {
    if decoded.frames.len() != original.frames.len() {
        return Err(Error::Dimension(format!(
            "{} decoded frames for {} originals",
            decoded.frames.len(),
            original.frames.len()
        )));
    }
    let (w, h) = (original.width, original.height);
    let with_msssim = w.min(h) >= MS_SSIM_MIN_SIDE;
    let pixels = (w * h) as f64;
    let mut bits = vec![0u64; original.frames.len()];
    for r in &bs.records {
        if let Some(b) = bits.get_mut(r.poc as usize) {
            *b += r.payload_bits();
        }
    }
    let mut frames = Vec::with_capacity(bits.len());
    for (poc, (o, d)) in original.frames.iter().zip(&decoded.frames).enumerate() {
        let a = crop_top_left(&o.data, w, h);
        let b = crop_top_left(&d.data, w, h);
        frames.push(FrameQuality {
            poc,
            bits: bits[poc],
            bpp: bits[poc] as f64 / pixels,
            psnr: psnr(&a, &b)?,
            msssim: if with_msssim { Some(ms_ssim(&a, &b)?) } else { None },
        });
    }
    let n = frames.len() as f64;
    Ok(SequenceQuality {
        bpp: bits.iter().sum::<u64>() as f64 / (pixels * n),
        psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        msssim: with_msssim.then(|| frames.iter().filter_map(|f| f.msssim).sum::<f64>() / n),
        frames,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdRow {
    pub sequence: String,
    pub lambda: f64,
    pub point: RdPoint,
}

pub const RD_CSV_HEADER: &str = "sequence,lambda,bpp,psnr,msssim";

#[derive(Serialize, Deserialize)]
struct CsvRow {
    sequence: String,
    lambda: f64,
    bpp: f64,
    psnr: f64,
    msssim: Option<f64>,
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("RD CSV: {e}"))
}

pub fn rd_csv(rows: &[RdRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            sequence: r.sequence.clone(),
            lambda: r.lambda,
            bpp: r.point.bpp,
            psnr: r.point.psnr,
            msssim: r.point.msssim.is_finite().then_some(r.point.msssim),
        })
        .expect("writing to memory");
    }
    if rows.is_empty() {
        return format!("{RD_CSV_HEADER}\n");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != RD_CSV_HEADER {
        return Err(Error::InvalidArgument(format!(
            "RD CSV header must be `{RD_CSV_HEADER}`, found `{header}`"
        )));
    }
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            Ok(RdRow {
                sequence: row.sequence,
                lambda: row.lambda,
                point: RdPoint {
                    bpp: row.bpp,
                    psnr: row.psnr,
                    msssim: row.msssim.unwrap_or(f64::NAN),
                },
            })
        })
        .collect()
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rd_csv(&text)
}

/// Mean RD point per lambda over all sequences, sorted by rate.
pub fn average_curve(rows: &[RdRow]) -> Vec<RdPoint> {
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut curve: Vec<RdPoint> = lambdas
        .iter()
        .map(|&l| {
            let sel: Vec<&RdPoint> = rows.iter().filter(|r| r.lambda == l).map(|r| &r.point).collect();
            let n = sel.len() as f64;
            RdPoint {
                bpp: sel.iter().map(|p| p.bpp).sum::<f64>() / n,
                psnr: sel.iter().map(|p| p.psnr).sum::<f64>() / n,
                msssim: sel.iter().map(|p| p.msssim).sum::<f64>() / n,
            }
        })
        .collect();
    curve.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    curve
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_missing_msssim() {
        let rows = vec![
            RdRow {
                sequence: "a".into(),
                lambda: 256.0,
                point: RdPoint {
                    bpp: 0.05,
                    psnr: 31.5,
                    msssim: f64::NAN,
                },
            },
            RdRow {
                sequence: "a".into(),
                lambda: 512.0,
                point: RdPoint {
                    bpp: 0.08,
                    psnr: 33.25,
                    msssim: 0.97,
                },
            },
        ];
        let back = parse_rd_csv(&rd_csv(&rows)).unwrap();
        assert_eq!(back[1], rows[1]);
        assert!(back[0].point.msssim.is_nan());
        assert_eq!(back[0].point.bpp, 0.05);
    }
}
