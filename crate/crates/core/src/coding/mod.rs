//! Entropy coding of quantizer indices and the bitstream container.
//!
//! Wire layout, all integers little-endian:
//!
//! ```text
//!   offset  size  field
//!        0     4  magic "MDIC"
//!        4     1  version (currently 1)
//!        5     2  image height
//!        7     2  image width
//!        9     2  latent height
//!       11     2  latent width
//!       13     2  codebook size K
//!       15     1  lambda tag (0 -> 0.1, 1 -> 10.0)
//!       16     8  diffusion seed
//!       24     4  payload length in bytes
//!       28     n  range-coded index payload
//!     28+n     4  CRC-32 over the indices as u16 little-endian words
//! ```
//!
//! The trailing checksum covers the decoded indices rather than the payload
//! bytes, so a model mismatch between encoder and decoder is caught even
//! when the payload itself parses cleanly.

mod model;
mod range;

pub use model::{EntropyModel, MAX_SEQ};
pub use range::{quantize_pmf, CumTable, RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};

use crate::error::{CodecError, PipelineResult};

pub const MAGIC: [u8; 4] = *b"MDIC";
pub const VERSION: u8 = 1;
pub const LAMBDA_TAGS: [(u8, f32); 2] = [(0, 0.1), (1, 10.0)];

const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub image_h: u16,
    pub image_w: u16,
    pub latent_h: u16,
    pub latent_w: u16,
    pub codebook: u16,
    pub lambda_tag: u8,
    pub seed: u64,
}

impl BitstreamHeader {
    pub fn lambda(&self) -> Result<f32, CodecError> {
        LAMBDA_TAGS
            .iter()
            .find(|(t, _)| *t == self.lambda_tag)
            .map(|&(_, l)| l)
            .ok_or(CodecError::UnknownLambdaTag(self.lambda_tag))
    }

    pub fn tag_for(lambda: f32) -> Result<u8, CodecError> {
        LAMBDA_TAGS
            .iter()
            .find(|(_, l)| *l == lambda)
            .map(|&(t, _)| t)
            .ok_or(CodecError::UnknownLambdaTag(u8::MAX))
    }
}

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Checksum of an index sequence, independent of the entropy model.
pub fn indices_crc(indices: &[usize]) -> u32 {
    let mut bytes = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        bytes.extend_from_slice(&(i as u16).to_le_bytes());
    }
    crc32(&bytes)
}

/// Range-codes `indices` under the model, one context query per position.
pub fn encode_indices(model: &EntropyModel, indices: &[usize]) -> PipelineResult<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (t, &s) in indices.iter().enumerate() {
        let probs = model.context_probs(&indices[..t])?;
        let cum = CumTable::new(&quantize_pmf(&probs)?);
        if s >= cum.len() {
            return Err(CodecError::SymbolOutOfRange { symbol: s, alphabet: cum.len() }.into());
        }
        let (lo, hi) = cum.bounds(s);
        enc.encode(lo, hi, PROB_TOTAL);
    }
    Ok(enc.finish())
}

/// Inverse of `encode_indices`; the caller supplies the symbol count (from
/// the header grid) and must verify the index checksum afterwards.
pub fn decode_indices(payload: &[u8], model: &EntropyModel, count: usize) -> PipelineResult<Vec<usize>> {
    let mut dec = RangeDecoder::new(payload);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let probs = model.context_probs(&out)?;
        let cum = CumTable::new(&quantize_pmf(&probs)?);
        let s = cum.find(dec.decode_freq(PROB_TOTAL));
        let (lo, hi) = cum.bounds(s);
        dec.decode_update(lo, hi, PROB_TOTAL);
        out.push(s);
    }
    Ok(out)
}

pub fn write_bitstream(header: &BitstreamHeader, payload: &[u8], indices: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header.image_h.to_le_bytes());
    out.extend_from_slice(&header.image_w.to_le_bytes());
    out.extend_from_slice(&header.latent_h.to_le_bytes());
    out.extend_from_slice(&header.latent_w.to_le_bytes());
    out.extend_from_slice(&header.codebook.to_le_bytes());
    out.push(header.lambda_tag);
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&indices_crc(indices).to_le_bytes());
    out
}

/// Parses the container. Returns the header, the coded payload, and the
/// stored index checksum; checksum verification happens after entropy
/// decoding via `verify_indices`.
pub fn read_bitstream(bytes: &[u8]) -> Result<(BitstreamHeader, Vec<u8>, u32), CodecError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(CodecError::Truncated { needed: HEADER_LEN + 4, have: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic { got: [bytes[0], bytes[1], bytes[2], bytes[3]] });
    }
    if bytes[4] != VERSION {
        return Err(CodecError::UnsupportedVersion { got: bytes[4], supported: VERSION });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let header = BitstreamHeader {
        image_h: u16_at(5),
        image_w: u16_at(7),
        latent_h: u16_at(9),
        latent_w: u16_at(11),
        codebook: u16_at(13),
        lambda_tag: bytes[15],
        seed: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
    };
    header.lambda()?;
    let payload_len = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    let needed = HEADER_LEN + payload_len + 4;
    if bytes.len() < needed {
        return Err(CodecError::Truncated { needed, have: bytes.len() });
    }
    let payload = bytes[HEADER_LEN..HEADER_LEN + payload_len].to_vec();
    let crc = u32::from_le_bytes(bytes[needed - 4..needed].try_into().unwrap());
    Ok((header, payload, crc))
}

pub fn verify_indices(indices: &[usize], stored: u32) -> Result<(), CodecError> {
    let computed = indices_crc(indices);
    if computed != stored {
        return Err(CodecError::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header() -> BitstreamHeader {
        BitstreamHeader {
            image_h: 32,
            image_w: 32,
            latent_h: 4,
            latent_w: 4,
            codebook: 256,
            lambda_tag: 0,
            seed: 42,
        }
    }

    #[test]
    fn crc32_matches_published_check_values() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
        assert_eq!(indices_crc(&[1, 2, 3]), 0xFBBA_E94E);
        assert_eq!(indices_crc(&[5, 0, 255, 42]), 0x9CAC_1BD4);
    }

    #[test]
    fn golden_container_bytes() {
        let bytes = write_bitstream(&header(), &[0xAB, 0xCD], &[1, 2, 3]);
        let expected = [
            0x4D, 0x44, 0x49, 0x43, // "MDIC"
            0x01, // version
            0x20, 0x00, 0x20, 0x00, // image 32x32
            0x04, 0x00, 0x04, 0x00, // latent 4x4
            0x00, 0x01, // K = 256
            0x00, // lambda tag 0
            0x2A, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, // seed 42
            0x02, 0x00, 0x00, 0x00, // payload length
            0xAB, 0xCD, // payload
            0x4E, 0xE9, 0xBA, 0xFB, // crc of indices [1, 2, 3]
        ];
        assert_eq!(bytes, expected);
    }

    #[test]
    fn container_round_trips_random_headers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let h = BitstreamHeader {
                image_h: rng.gen(),
                image_w: rng.gen(),
                latent_h: rng.gen(),
                latent_w: rng.gen(),
                codebook: rng.gen(),
                lambda_tag: rng.gen_range(0..2),
                seed: rng.gen(),
            };
            let payload: Vec<u8> = (0..rng.gen_range(0..100)).map(|_| rng.gen()).collect();
            let indices: Vec<usize> = (0..rng.gen_range(0..20)).map(|_| rng.gen_range(0..65536)).collect();
            let bytes = write_bitstream(&h, &payload, &indices);
            let (h2, p2, crc) = read_bitstream(&bytes).unwrap();
            assert_eq!(h, h2);
            assert_eq!(payload, p2);
            verify_indices(&indices, crc).unwrap();
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = write_bitstream(&header(), &[], &[]);
        bytes[0] = b'X';
        assert!(matches!(read_bitstream(&bytes), Err(CodecError::BadMagic { .. })));
    }

    #[test]
    fn unknown_version_is_rejected_with_the_version_in_the_error() {
        let mut bytes = write_bitstream(&header(), &[], &[]);
        bytes[4] = 9;
        match read_bitstream(&bytes) {
            Err(CodecError::UnsupportedVersion { got: 9, supported: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported_with_byte_counts() {
        let bytes = write_bitstream(&header(), &[1, 2, 3, 4], &[7]);
        for cut in [0, 10, HEADER_LEN, bytes.len() - 1] {
            match read_bitstream(&bytes[..cut]) {
                Err(CodecError::Truncated { needed, have }) => {
                    assert_eq!(have, cut);
                    assert!(needed > cut);
                }
                other => panic!("cut {cut}: expected truncation, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_lambda_tag_is_rejected() {
        let mut h = header();
        h.lambda_tag = 7;
        let bytes = write_bitstream(&h, &[], &[]);
        assert!(matches!(read_bitstream(&bytes), Err(CodecError::UnknownLambdaTag(7))));
        assert_eq!(header().lambda().unwrap(), 0.1);
        assert_eq!(BitstreamHeader::tag_for(10.0).unwrap(), 1);
        assert!(BitstreamHeader::tag_for(0.5).is_err());
    }

    #[test]
    fn model_coded_indices_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = EntropyModel::new(&mut rng, 64);
        for n in [0usize, 1, 7, 16] {
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..64)).collect();
            let payload = encode_indices(&model, &indices).unwrap();
            let decoded = decode_indices(&payload, &model, n).unwrap();
            assert_eq!(indices, decoded);
            verify_indices(&decoded, indices_crc(&indices)).unwrap();
        }
    }

    #[test]
    fn payload_tracks_the_model_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EntropyModel::new(&mut rng, 256);
        let indices: Vec<usize> = (0..16).map(|_| rng.gen_range(0..256)).collect();
        let payload = encode_indices(&model, &indices).unwrap();
        let est = model.estimate_bits(&indices).unwrap();
        let actual = payload.len() as f64 * 8.0;
        assert!(actual <= est + 34.0, "actual {actual} vs estimate {est}");
        assert!(actual >= est * 0.9 - 8.0, "suspiciously short: {actual} vs {est}");
    }

    #[test]
    fn mismatched_models_fail_the_index_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc_model = EntropyModel::new(&mut rng, 32);
        let dec_model = EntropyModel::new(&mut rng, 32);
        let indices: Vec<usize> = (0..16).map(|_| rng.gen_range(0..32)).collect();
        let payload = encode_indices(&enc_model, &indices).unwrap();
        let decoded = decode_indices(&payload, &dec_model, 16).unwrap();
        let crc = indices_crc(&indices);
        assert!(
            decoded != indices,
            "distinct models decoded identically; checksum cannot be exercised"
        );
        assert!(matches!(verify_indices(&decoded, crc), Err(CodecError::ChecksumMismatch { .. })));
    }

    #[test]
    fn out_of_range_symbols_are_rejected_at_encode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = EntropyModel::new(&mut rng, 8);
        assert!(matches!(
            encode_indices(&model, &[3, 8]),
            Err(crate::error::PipelineError::Codec(CodecError::SymbolOutOfRange { symbol: 8, alphabet: 8 }))
        ));
    }
}
