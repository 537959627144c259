//! ESCF v1 container.
//!
//! ```text
//! 0..4    magic "ESCF"
//! 4..8    u32 version (1)
//! 8..28   u32 T′, H′, W′, C, R
//! 28..32  u32 frames_per_window
//! 32..    M·C little-endian f32, M = T′·H′·W′
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureError, FeatureSequence, Grid};
use crate::numerics::Tensor;

pub const ESCF_MAGIC: [u8; 4] = *b"ESCF";
pub const ESCF_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub fn write_features<W: Write>(seq: &FeatureSequence, mut w: W) -> Result<(), FeatureError> {
    let c = seq.channels();
    let fields = [
        ESCF_VERSION,
        seq.grid.t as u32,
        seq.grid.h as u32,
        seq.grid.w as u32,
        c as u32,
        seq.raw_frames,
        seq.frames_per_window,
    ];
    let mut buf = Vec::with_capacity(HEADER_LEN + seq.tokens.numel() * 4);
    buf.extend_from_slice(&ESCF_MAGIC);
    for f in fields {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    for v in seq.tokens.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features<R: Read>(mut r: R, source_id: &str) -> Result<FeatureSequence, FeatureError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(FeatureError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != ESCF_MAGIC {
        return Err(FeatureError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = field(0);
    if version != ESCF_VERSION {
        return Err(FeatureError::Version {
            found: version,
            expected: ESCF_VERSION,
        });
    }
    let (t, h, w, c) = (field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize);
    let (raw, fpw) = (field(5), field(6));
    if t == 0 || h == 0 || w == 0 || c == 0 {
        return Err(FeatureError::DimMismatch(format!(
            "zero dimension in header (T′={t}, H′={h}, W′={w}, C={c})"
        )));
    }
    let m = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| FeatureError::DimMismatch("token count overflows".into()))?;
    let expected = m
        .checked_mul(c)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| FeatureError::DimMismatch("payload size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(FeatureError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FeatureError::DimMismatch(format!(
            "payload has {} bytes but M·C·4 = {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let tokens = Tensor::new(vec![m, c], data)?;
    FeatureSequence::new(tokens, Grid::new(t, h, w), raw, fpw, source_id)
}

pub fn save_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(seq, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads an ESCF file; the source id is the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence, FeatureError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_features(BufReader::new(File::open(path)?), &id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> FeatureSequence {
        let grid = Grid::new(t, h, w);
        let tokens = Tensor::new(vec![grid.tokens(), c], data).unwrap();
        FeatureSequence::new(tokens, grid, (t * 16) as u32, 64, "x").unwrap()
    }

    fn encode(s: &FeatureSequence) -> Vec<u8> {
        let mut buf = Vec::new();
        write_features(s, &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout_is_exact() {
        let s = seq(1, 1, 2, 2, vec![1.0, -2.0, 0.5, 3.25]);
        let b = encode(&s);
        assert_eq!(&b[..4], b"ESCF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &2u32.to_le_bytes());
        assert_eq!(&b[24..28], &16u32.to_le_bytes());
        assert_eq!(&b[28..32], &64u32.to_le_bytes());
        assert_eq!(&b[32..36], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32 + 4 * 4);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.escf");
        let data: Vec<f32> = (0..18 * 16).map(|i| (i as f32 * 0.37).sin() * 1e-3).collect();
        let s = seq(2, 3, 3, 16, data);
        save_features(&s, &path).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.source_id, "clip");
        assert_eq!(back.grid, s.grid);
        let bits = |x: &FeatureSequence| x.tokens.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn truncated_payload() {
        // header claims M = 100, payload carries 99·C floats
        let c = 4;
        let s = seq(25, 2, 2, c, vec![0.5; 100 * c]);
        let mut b = encode(&s);
        b.truncate(b.len() - c * 4);
        assert!(matches!(
            read_features(b.as_slice(), "t"),
            Err(FeatureError::Truncated { expected, found }) if expected == 400 * 4 && found == 396 * 4
        ));
    }

    #[test]
    fn wrong_magic() {
        let mut b = encode(&seq(1, 1, 1, 2, vec![0.0, 0.0]));
        b[..4].copy_from_slice(b"ESCG");
        assert!(matches!(read_features(b.as_slice(), "m"), Err(FeatureError::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let mut b = encode(&seq(1, 1, 1, 2, vec![0.0, 0.0]));
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_features(b.as_slice(), "v"),
            Err(FeatureError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn trailing_bytes_are_a_dimension_error() {
        let mut b = encode(&seq(1, 1, 1, 2, vec![0.0, 0.0]));
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(read_features(b.as_slice(), "d"), Err(FeatureError::DimMismatch(_))));
        let mut z = encode(&seq(1, 1, 1, 2, vec![0.0, 0.0]));
        z[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_features(z.as_slice(), "d"), Err(FeatureError::DimMismatch(_))));
    }

    proptest! {
        #[test]
        fn any_valid_sequence_round_trips(
            t in 1usize..6, h in 1usize..4, w in 1usize..4, c in 1usize..6,
            seed in any::<u64>(),
        ) {
            let n = t * h * w * c;
            let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) / 7.0).collect();
            let s = seq(t, h, w, c, data);
            let back = read_features(encode(&s).as_slice(), "x").unwrap();
            prop_assert_eq!(back.grid.tokens() * back.channels(), back.tokens.numel());
            prop_assert_eq!(back, s);
        }
    }
}
