//! `.scae` container.
//!
//! ```text
//! "SCAE" | version u8 | model hash [8] | level u8 (1-based)
//! | height u32 | width u32 | pad_h u8 | pad_w u8 | flags u8
//! | if scalable: groups u8, then one u32 length per group
//! | payload bytes | CRC-32 of everything before it (u32)
//! ```
//!
//! Integers are little-endian. Flag bit 0 marks a scalable stream.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCAE";
pub const VERSION: u8 = 1;
const FLAG_SCALABLE: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub model_hash: [u8; 8],
    /// 1-based width level.
    pub level: u8,
    pub height: u32,
    pub width: u32,
    pub pad_h: u8,
    pub pad_w: u8,
    /// Per-group payload lengths; `None` for a single payload.
    pub groups: Option<Vec<u32>>,
}

impl BitstreamHeader {
    pub fn is_scalable(&self) -> bool {
        self.groups.is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.model_hash);
        out.push(self.level);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.push(self.pad_h);
        out.push(self.pad_w);
        match &self.groups {
            None => out.push(0),
            Some(g) => {
                out.push(FLAG_SCALABLE);
                out.push(g.len() as u8);
                for len in g {
                    out.extend_from_slice(&len.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a header; returns it with its encoded length.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::decode("bitstream header is truncated");
        let take = |pos: usize, n: usize| bytes.get(pos..pos + n).ok_or_else(short);
        if take(0, 4)? != MAGIC {
            return Err(Error::decode("not a .scae bitstream (bad magic)"));
        }
        let version = take(4, 1)?[0];
        if version != VERSION {
            return Err(Error::decode(format!("unsupported bitstream version {version}")));
        }
        let model_hash: [u8; 8] = take(5, 8)?.try_into().expect("8 bytes");
        let level = take(13, 1)?[0];
        let height = u32::from_le_bytes(take(14, 4)?.try_into().expect("4 bytes"));
        let width = u32::from_le_bytes(take(18, 4)?.try_into().expect("4 bytes"));
        let pad_h = take(22, 1)?[0];
        let pad_w = take(23, 1)?[0];
        let flags = take(24, 1)?[0];
        if flags & !FLAG_SCALABLE != 0 {
            return Err(Error::decode(format!("unknown flags {flags:#04x}")));
        }
        let mut pos = 25;
        let groups = if flags & FLAG_SCALABLE != 0 {
            let g = take(pos, 1)?[0] as usize;
            pos += 1;
            if g == 0 {
                return Err(Error::decode("scalable stream with zero groups"));
            }
            let mut lens = Vec::with_capacity(g);
            for _ in 0..g {
                lens.push(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")));
                pos += 4;
            }
            Some(lens)
        } else {
            None
        };
        if level == 0 {
            return Err(Error::decode("width level 0 in header"));
        }
        Ok((BitstreamHeader { version, model_hash, level, height, width, pad_h, pad_w, groups }, pos))
    }
}

/// Header followed by payload and checksum.
pub fn assemble(header: &BitstreamHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = header.to_bytes();
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Verifies the checksum and splits a stream into header and payload.
pub fn disassemble(bytes: &[u8]) -> Result<(BitstreamHeader, &[u8])> {
    let (header, hlen) = BitstreamHeader::parse(bytes)?;
    if bytes.len() < hlen + 4 {
        return Err(Error::decode("bitstream is truncated"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != expected {
        return Err(Error::decode("bitstream checksum mismatch"));
    }
    let payload = &body[hlen..];
    if let Some(g) = &header.groups {
        let total: u64 = g.iter().map(|&l| l as u64).sum();
        if total != payload.len() as u64 {
            return Err(Error::decode(format!(
                "group lengths sum to {total} bytes but the payload holds {}",
                payload.len()
            )));
        }
    }
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_header() -> impl Strategy<Value = BitstreamHeader> {
        (
            any::<[u8; 8]>(),
            1u8..=255,
            any::<u32>(),
            any::<u32>(),
            any::<u8>(),
            any::<u8>(),
            proptest::option::of(proptest::collection::vec(any::<u32>(), 1..8)),
        )
            .prop_map(|(model_hash, level, height, width, pad_h, pad_w, groups)| BitstreamHeader {
                version: VERSION,
                model_hash,
                level,
                height,
                width,
                pad_h,
                pad_w,
                groups,
            })
    }

    proptest! {
        #[test]
        fn header_round_trips(h in arb_header()) {
            let bytes = h.to_bytes();
            let (back, len) = BitstreamHeader::parse(&bytes).unwrap();
            prop_assert_eq!(len, bytes.len());
            prop_assert_eq!(back, h);
        }
    }

    #[test]
    fn corruption_is_caught_by_the_checksum() {
        let h = BitstreamHeader {
            version: VERSION,
            model_hash: [1; 8],
            level: 2,
            height: 24,
            width: 24,
            pad_h: 8,
            pad_w: 8,
            groups: None,
        };
        let s = assemble(&h, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(disassemble(&s).unwrap().1, &[0, 1, 2, 3, 4, 5]);
        for i in 0..s.len() {
            let mut bad = s.clone();
            bad[i] ^= 0x10;
            assert!(disassemble(&bad).is_err(), "flip at {i} went unnoticed");
        }
        assert!(disassemble(&s[..s.len() - 1]).is_err());
    }
}
