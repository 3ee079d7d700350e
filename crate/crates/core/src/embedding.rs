//! Embedding matrices and the SYNE container format.
//!
//! Layout (little-endian throughout):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"SYNE"`                |
//! | 4      | 4    | version, u32 = 1               |
//! | 8      | 4    | rows, u32                      |
//! | 12     | 4    | dim, u32                       |
//! | 16     | 1    | dtype, u8 (0 = f32)            |
//! | 17     | 4·rows·dim | row-major f32 payload    |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SYNE_MAGIC: [u8; 4] = *b"SYNE";
pub const SYNE_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 17;

/// Dense `rows x dim` matrix of f32 features, one row per corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{dim} embedding matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_f64_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let data = m.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(m.rows(), m.cols(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.rows, self.dim, data).expect("shape invariant")
    }
}

pub fn write_embeddings<W: Write>(matrix: &EmbeddingMatrix, mut sink: W) -> Result<()> {
    let rows = u32::try_from(matrix.rows)
        .map_err(|_| Error::ShapeMismatch(format!("{} rows exceed u32", matrix.rows)))?;
    let dim = u32::try_from(matrix.dim)
        .map_err(|_| Error::ShapeMismatch(format!("dim {} exceeds u32", matrix.dim)))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&SYNE_MAGIC);
    header[4..8].copy_from_slice(&SYNE_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&rows.to_le_bytes());
    header[12..16].copy_from_slice(&dim.to_le_bytes());
    header[16] = DTYPE_F32;
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(matrix.data.len() * 4);
    for v in &matrix.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut source: R) -> Result<EmbeddingMatrix> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_up_to(&mut source, &mut header)?;
    if got < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            got,
        });
    }
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != SYNE_MAGIC {
        return Err(Error::BadMagic {
            expected: SYNE_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != SYNE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if header[16] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header[16]));
    }

    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::ShapeMismatch(format!("{rows}x{dim} overflows")))?;
    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after a {rows}x{dim} payload",
            payload.len() - expected
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::new(rows, dim, data)
}

fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_embeddings(matrix, BufWriter::new(File::create(path)?))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    read_embeddings(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn one_by_two_layout() {
        let m = EmbeddingMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let bytes = encode(&m);
        assert_eq!(bytes.len(), 17 + 8);
        assert_eq!(&bytes[..4], b"SYNE");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(bytes[16], 0);
        assert_eq!(
            &bytes[17..],
            &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x00]
        );
    }

    #[test]
    fn empty_matrix_is_valid() {
        let m = EmbeddingMatrix::empty(5);
        let bytes = encode(&m);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = read_embeddings(&bytes[..]).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.dim(), 5);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&EmbeddingMatrix::new(1, 1, vec![0.5]).unwrap());
        bytes[3] = b'X';
        assert!(matches!(
            read_embeddings(&bytes[..]),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn short_payload() {
        let bytes = encode(&EmbeddingMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let cut = &bytes[..bytes.len() - 4];
        match read_embeddings(cut) {
            Err(Error::Truncated { expected, got }) => assert_eq!((expected, got), (16, 12)),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn short_header() {
        assert!(matches!(
            read_embeddings(&b"SYNE"[..]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn version_and_dtype_rejected() {
        let bytes = encode(&EmbeddingMatrix::new(1, 1, vec![0.5]).unwrap());
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            read_embeddings(&v[..]),
            Err(Error::UnsupportedVersion(2))
        ));
        let mut d = bytes;
        d[16] = 1;
        assert!(matches!(
            read_embeddings(&d[..]),
            Err(Error::UnsupportedDtype(1))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = encode(&EmbeddingMatrix::new(1, 2, vec![0.5, 0.25]).unwrap());
        bytes[21..25].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_embeddings(&bytes[..]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(EmbeddingMatrix::new(1, 1, vec![f32::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(
            rows in 0usize..6,
            dim in 1usize..7,
            seed in any::<u64>(),
        ) {
            let mut s = crate::hash::SplitMix64::new(seed);
            let data: Vec<f32> = (0..rows * dim).map(|_| s.next_signed_unit() as f32 * 100.0).collect();
            let m = EmbeddingMatrix::new(rows, dim, data).unwrap();
            let bytes = encode(&m);
            let back = read_embeddings(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
