//! Portable binary layout for dense matrices and vectors.
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"RSHB"
//! 4       4     format version, u32 LE (currently 1)
//! 8       8     rows, u64 LE
//! 16      8     cols, u64 LE
//! 24      8*n   rows*cols doubles, f64 LE, row-major
//! ```
//!
//! Vectors are stored as a single column.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSHB";
pub const VERSION: u32 = 1;

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R, path: &Path) -> Result<DMatrix<f64>> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut head = [0u8; 24];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| bad("dimension overflow"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * n {
        return Err(bad(&format!("expected {} payload bytes, found {}", 8 * n, bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix(std::io::BufReader::new(std::fs::File::open(path)?), path)
}

pub fn save_vector(path: &Path, v: &[f64]) -> Result<()> {
    save_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let m = load_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("expected a vector, found {} columns", m.ncols()) });
    }
    Ok(m.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matrix_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let m = DMatrix::from_fn(rows, cols, |r, c| (seed as f64).sin() * (r * 7 + c) as f64 - 1.0 / 3.0);
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            prop_assert_eq!(buf.len(), 24 + 8 * rows * cols);
            let back = read_matrix(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn layout_is_little_endian_row_major() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"RSHB");
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&buf[32..40], &2.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &DMatrix::from_element(2, 2, 1.0)).unwrap();
        buf.pop();
        assert!(read_matrix(&buf[..], Path::new("mem")).is_err());
        assert!(read_matrix(&b"XXXX"[..], Path::new("mem")).is_err());
    }
}
