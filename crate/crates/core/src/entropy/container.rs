//! Byte layout of a coded sequence. All integers are little-endian.
//!
//! ```text
//! header   "TLZM" | version u8 | metric u8 | gop u8 | lambda index u8
//!          | width u32 | height u32 | padded width u32 | padded height u32
//!          | frame count u32
//! record   poc u32 | frame type u8 | payload count u8 | count x length u32
//!          | payload bytes
//! ```
//!
//! Records appear in coding order. Intra records carry one payload; B
//! records carry the base-layer payload followed by the enhancement payload.

use crate::error::{Error, Result};
use crate::gop::FrameType;

pub const MAGIC: &[u8; 4] = b"TLZM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub metric: u8,
    pub gop_size: u8,
    pub lambda_index: u8,
    pub width: u32,
    pub height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub num_frames: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub poc: u32,
    pub frame_type: FrameType,
    pub payloads: Vec<Vec<u8>>,
}

impl FrameRecord {
    pub fn payload_bits(&self) -> u64 {
        self.payloads.iter().map(|p| p.len() as u64 * 8).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub records: Vec<FrameRecord>,
}

fn expected_payloads(t: FrameType) -> usize {
    if t == FrameType::Intra {
        1
    } else {
        2
    }
}

impl Bitstream {
    pub fn total_payload_bits(&self) -> u64 {
        self.records.iter().map(FrameRecord::payload_bits).sum()
    }

    /// Payload bits per original-resolution pixel.
    pub fn bpp(&self) -> f64 {
        let h = &self.header;
        self.total_payload_bits() as f64 / (h.width as f64 * h.height as f64 * h.num_frames as f64)
    }
}

pub fn write_container(bs: &Bitstream) -> Result<Vec<u8>> {
    let h = &bs.header;
    let mut out = Vec::with_capacity(HEADER_LEN + bs.total_payload_bits() as usize / 8 + 16 * bs.records.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, h.metric, h.gop_size, h.lambda_index]);
    for v in [h.width, h.height, h.padded_width, h.padded_height, h.num_frames] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in &bs.records {
        if r.payloads.len() != expected_payloads(r.frame_type) {
            return Err(Error::InvalidArgument(format!(
                "{} record for poc {} has {} payloads",
                r.frame_type,
                r.poc,
                r.payloads.len()
            )));
        }
        out.extend_from_slice(&r.poc.to_le_bytes());
        out.push(r.frame_type.code());
        out.push(r.payloads.len() as u8);
        for p in &r.payloads {
            let len = u32::try_from(p.len())
                .map_err(|_| Error::InvalidArgument("payload exceeds 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
        }
        for p in &r.payloads {
            out.extend_from_slice(p);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Bitstream> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let header = Header {
        metric: c.u8("metric")?,
        gop_size: c.u8("gop size")?,
        lambda_index: c.u8("lambda index")?,
        width: c.u32("width")?,
        height: c.u32("height")?,
        padded_width: c.u32("padded width")?,
        padded_height: c.u32("padded height")?,
        num_frames: c.u32("frame count")?,
    };
    if header.width > header.padded_width || header.height > header.padded_height {
        return Err(Error::Corrupt("true size exceeds padded size".into()));
    }
    let mut records = Vec::with_capacity(header.num_frames as usize);
    for _ in 0..header.num_frames {
        let poc = c.u32("poc")?;
        let frame_type = FrameType::from_code(c.u8("frame type")?)?;
        let count = c.u8("payload count")? as usize;
        if count != expected_payloads(frame_type) {
            return Err(Error::Corrupt(format!("{frame_type} record with {count} payloads")));
        }
        let lens = (0..count)
            .map(|_| c.u32("payload length").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let payloads = lens
            .into_iter()
            .map(|n| c.take(n, "payload").map(<[u8]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        records.push(FrameRecord {
            poc,
            frame_type,
            payloads,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last record",
            bytes.len() - c.pos
        )));
    }
    Ok(Bitstream { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                metric: 0,
                gop_size: 2,
                lambda_index: 3,
                width: 60,
                height: 50,
                padded_width: 64,
                padded_height: 64,
                num_frames: 3,
            },
            records: vec![
                FrameRecord { poc: 0, frame_type: FrameType::Intra, payloads: vec![vec![1, 2, 3]] },
                FrameRecord { poc: 2, frame_type: FrameType::Intra, payloads: vec![vec![]] },
                FrameRecord {
                    poc: 1,
                    frame_type: FrameType::BNonref,
                    payloads: vec![vec![9; 10], vec![7; 5]],
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let bs = sample();
        let bytes = write_container(&bs).unwrap();
        assert_eq!(read_container(&bytes).unwrap(), bs);
        assert_eq!(bs.total_payload_bits(), 18 * 8);
    }

    #[test]
    fn errors() {
        let mut bytes = write_container(&sample()).unwrap();
        assert!(matches!(read_container(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        bytes[4] = 9;
        assert!(matches!(read_container(&bytes), Err(Error::Version(9))));
        bytes[0] ^= 0xFF;
        assert!(matches!(read_container(&bytes), Err(Error::BadMagic)));
    }
}
