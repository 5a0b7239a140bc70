//! The `DBLT` on-disk latent format.
//!
//! Layout: magic `DBLT`, `u16` version, `u32` rows, `u32` cols, then
//! `rows * cols` row-major `f64` values. Everything is little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::LatentCode;

pub const MAGIC: [u8; 4] = *b"DBLT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

/// Exact file length for a `rows x cols` latent.
pub fn encoded_len(rows: usize, cols: usize) -> usize {
    HEADER_LEN + 8 * rows * cols
}

pub fn encode_latent(w: &LatentCode) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(w.rows(), w.cols()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
    for v in w.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentCode> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Shape(format!("latent header {rows}x{cols} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Shape(format!(
            "latent file has {} trailing bytes after a {rows}x{cols} payload",
            bytes.len() - expected
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LatentCode::new(rows, cols, values)
}

pub fn save_latent(w: &LatentCode, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_latent(w)).map_err(|e| Error::io(path, e))
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentCode> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latent(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(seed: u64) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentCode::standard_normal(16, 6, &mut rng).unwrap()
    }

    #[test]
    fn length_formula() {
        let bytes = encode_latent(&random_latent(1));
        assert_eq!(bytes.len(), 782);
        assert_eq!(encoded_len(16, 6), 14 + 768);
        assert_eq!(&bytes[..4], b"DBLT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[16, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[6, 0, 0, 0]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = random_latent(2);
        let bytes = encode_latent(&w);
        let back = decode_latent(&bytes).unwrap();
        assert!(w.values().iter().zip(back.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode_latent(&back), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_latent(&random_latent(3));
        match decode_latent(&bytes[..bytes.len() - 1]) {
            Err(Error::TruncatedPayload { expected: 782, found: 781 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_latent(&bytes[..9]), Err(Error::TruncatedPayload { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_latent(&bad), Err(Error::BadMagic(m)) if &m == b"XBLT"));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_latent(&v2), Err(Error::VersionMismatch(2))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_latent(&long), Err(Error::Shape(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dblt");
        let w = random_latent(4);
        save_latent(&w, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 782);
        assert_eq!(load_latent(&path).unwrap(), w);
        assert!(matches!(load_latent(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            rows in 2usize..6,
            cols in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = LatentCode::standard_normal(rows, cols, &mut rng).unwrap();
            let bytes = encode_latent(&w);
            prop_assert_eq!(bytes.len(), encoded_len(rows, cols));
            prop_assert_eq!(encode_latent(&decode_latent(&bytes).unwrap()), bytes);
        }
    }
}
