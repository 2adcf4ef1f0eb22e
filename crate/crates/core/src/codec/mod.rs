//! Image encoding and decoding with the range coder and the `.scae` container.

mod bitstream;
mod rc;

pub use bitstream::{assemble, disassemble, BitstreamHeader, MAGIC, VERSION};
pub use rc::{ideal_bits, range_decode, range_encode, RangeDecoder, RangeEncoder, TERMINATOR_BYTES};

use crate::checkpoint::{hash_hex, model_hash};
use crate::entropy::{ChannelCdf, Quantized};
use crate::error::{Error, Result};
use crate::model::SlimCae;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Table precision used by the codec.
pub const CODER_PRECISION: u32 = 16;

/// An encoded image.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub header: BitstreamHeader,
    /// Range-coded bytes, excluding header and checksum.
    pub payload_bytes: usize,
    pub latent: Quantized,
}

impl Encoded {
    /// Payload bits per original pixel.
    pub fn bpp(&self) -> f64 {
        8.0 * self.payload_bytes as f64 / (self.header.height as f64 * self.header.width as f64)
    }
}

fn tables<S: Scalar>(model: &SlimCae<S>, level: usize) -> Result<Vec<ChannelCdf>> {
    model.entropy().cdf_tables(model.params(), level, CODER_PRECISION)
}

/// Encodes a `(1, c, h, w)` image at 0-based `level`. Scalable streams code
/// each channel group separately and require the widest level.
pub fn encode_image<S: Scalar>(x: &Tensor4<S>, model: &SlimCae<S>, level: usize, scalable: bool) -> Result<Encoded> {
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::config(format!("encode_image takes one image, got a batch of {}", s.n)));
    }
    let k = model.levels();
    if level >= k {
        return Err(Error::config(format!("width level {} outside 1..={k}", level + 1)));
    }
    if scalable && level != k - 1 {
        return Err(Error::config("scalable streams are coded at the widest level"));
    }
    let height = u32::try_from(s.h).map_err(|_| Error::config("image height exceeds u32"))?;
    let width = u32::try_from(s.w).map_err(|_| Error::config("image width exceeds u32"))?;
    let (ph, pw) = model.config().padded_dims(s.h, s.w);
    let pad_h = u8::try_from(ph - s.h).map_err(|_| Error::config("padding exceeds 255 rows"))?;
    let pad_w = u8::try_from(pw - s.w).map_err(|_| Error::config("padding exceeds 255 columns"))?;
    if k > u8::MAX as usize {
        return Err(Error::config("more than 255 width levels"));
    }

    let latent = model.quantized_latent(x, level)?;
    let plane = latent.shape.h * latent.shape.w;
    let (payload, groups) = if scalable {
        let mut payload = Vec::new();
        let mut lens = Vec::with_capacity(k);
        for g in 0..k {
            let chans = model.config().widths.group(g);
            let t = tables(model, g)?;
            let part = range_encode(&latent.symbols[chans.start * plane..chans.end * plane], |i| chans.start + i / plane, &t)?;
            lens.push(part.len() as u32);
            payload.extend_from_slice(&part);
        }
        (payload, Some(lens))
    } else {
        let t = tables(model, level)?;
        (range_encode(&latent.symbols, |i| i / plane, &t)?, None)
    };
    let header = BitstreamHeader {
        version: VERSION,
        model_hash: model_hash(model),
        level: (level + 1) as u8,
        height,
        width,
        pad_h,
        pad_w,
        groups,
    };
    Ok(Encoded { bytes: assemble(&header, &payload), payload_bytes: payload.len(), header, latent })
}

/// Decodes a stream. `groups` selects how many channel groups of a scalable
/// stream to use (all when `None`) and must be `None` for ordinary streams.
pub fn decode_image<S: Scalar>(bytes: &[u8], model: &SlimCae<S>, groups: Option<usize>) -> Result<Tensor4<S>> {
    let (header, payload) = disassemble(bytes)?;
    let found = model_hash(model);
    if header.model_hash != found {
        return Err(Error::ModelMismatch { expected: hash_hex(&header.model_hash), found: hash_hex(&found) });
    }
    let k = model.levels();
    let level = header.level as usize - 1;
    if level >= k {
        return Err(Error::decode(format!("stream level {} but the model has {k}", header.level)));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    let (ph, pw) = (h + header.pad_h as usize, w + header.pad_w as usize);
    if model.config().padded_dims(h, w) != (ph, pw) {
        return Err(Error::decode("padding in header does not match the model"));
    }
    let f = model.config().downsampling();
    let (lh, lw) = (ph / f, pw / f);
    let plane = lh * lw;

    match &header.groups {
        None => {
            if groups.is_some() {
                return Err(Error::config("group selection applies to scalable streams only"));
            }
            let c = model.width(level);
            let t = tables(model, level)?;
            let symbols = range_decode(payload, c * plane, |i| i / plane, &t)?;
            let q = Quantized { shape: Shape4::new(1, c, lh, lw), symbols, clamped: 0 };
            model.reconstruct(&q, level, h, w)
        }
        Some(lens) => {
            if lens.len() != k || level != k - 1 {
                return Err(Error::decode(format!("scalable stream has {} groups for a {k}-level model", lens.len())));
            }
            let l = groups.unwrap_or(k);
            if l == 0 || l > k {
                return Err(Error::config(format!("group count {l} outside 1..={k}")));
            }
            let mut symbols = Vec::new();
            let mut offset = 0usize;
            for (g, &len) in lens.iter().enumerate().take(l) {
                let chans = model.config().widths.group(g);
                let part = &payload[offset..offset + len as usize];
                offset += len as usize;
                let t = tables(model, g)?;
                symbols.extend(range_decode(part, chans.len() * plane, |i| chans.start + i / plane, &t)?);
            }
            let c = model.width(l - 1);
            let q = Quantized { shape: Shape4::new(1, c, lh, lw), symbols, clamped: 0 };
            model.reconstruct(&q, l - 1, h, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::model::SlimCaeConfig;

    fn setup() -> (SlimCae<f64>, Tensor4<f64>) {
        let m = SlimCae::new(SlimCaeConfig::desk(), 3).unwrap();
        let x = make_synthetic(SyntheticKind::GaussianBlobs, 1, 40, 3).remove(0);
        let x = crate::data::crop(&x, 0, 0, 37, 40);
        (m, x)
    }

    #[test]
    fn pipeline_identity_at_every_level() {
        let (m, x) = setup();
        for level in 0..m.levels() {
            let e = encode_image(&x, &m, level, false).unwrap();
            let y = decode_image(&e.bytes, &m, None).unwrap();
            let q = m.quantized_latent(&x, level).unwrap();
            assert_eq!(y, m.reconstruct(&q, level, 37, 40).unwrap());
            assert_eq!(e.bpp(), 8.0 * e.payload_bytes as f64 / (37.0 * 40.0));
        }
    }

    #[test]
    fn scalable_streams_decode_progressively() {
        let (m, x) = setup();
        let e = encode_image(&x, &m, 2, true).unwrap();
        let full = decode_image(&e.bytes, &m, None).unwrap();
        let q = m.quantized_latent(&x, 2).unwrap();
        assert_eq!(full, m.reconstruct(&q, 2, 37, 40).unwrap());
        for l in 1..=3 {
            assert_eq!(decode_image(&e.bytes, &m, Some(l)).unwrap().shape(), x.shape());
        }
        assert!(decode_image(&e.bytes, &m, Some(4)).is_err());
        assert!(encode_image(&x, &m, 1, true).is_err());
    }

    #[test]
    fn wrong_model_is_refused() {
        let (m, x) = setup();
        let other = SlimCae::<f64>::new(SlimCaeConfig::desk(), 4).unwrap();
        let e = encode_image(&x, &m, 1, false).unwrap();
        assert!(matches!(decode_image(&e.bytes, &other, None), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn wrong_level_in_header_is_rejected() {
        let (m, x) = setup();
        let e = encode_image(&x, &m, 1, false).unwrap();
        let mut h = e.header.clone();
        h.level = 3;
        let payload = &e.bytes[e.header.to_bytes().len()..e.bytes.len() - 4];
        assert!(decode_image(&assemble(&h, payload), &m, None).is_err());
    }
}
