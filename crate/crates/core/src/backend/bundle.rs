//! Backend bundle files.
//!
//! Layout (little-endian): magic `ADVB`, version (u32), length-norm flag (u8),
//! input dim d (u32), output dim r (u32), centering mean (d f64), LDA matrix
//! (r × d f64, row-major), PLDA mean (r f64), between-class covariance and
//! within-class covariance (r × r f64 each, row-major).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{BackendBundle, BackendError, BackendTransform, PldaModel};

pub const BUNDLE_MAGIC: &[u8; 4] = b"ADVB";
pub const BUNDLE_VERSION: u32 = 1;

fn put_f64s<'a>(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        put_f64s(buf, m.row(i).iter());
    }
}

pub fn encode_bundle(b: &BackendBundle) -> Vec<u8> {
    let t = &b.transform;
    let (d, r) = (t.input_dim(), t.output_dim());
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.push(t.length_norm as u8);
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(r as u32).to_le_bytes());
    put_f64s(&mut buf, t.mean.iter());
    put_matrix(&mut buf, &t.lda);
    put_f64s(&mut buf, b.plda.mean.iter());
    put_matrix(&mut buf, &b.plda.between);
    put_matrix(&mut buf, &b.plda.within);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackendError> {
        if self.pos + n > self.buf.len() {
            return Err(BackendError::Format(format!("truncated at byte offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, BackendError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| BackendError::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>, BackendError> {
        Ok(DMatrix::from_row_slice(rows, cols, &self.f64s(rows * cols)?))
    }
}

pub fn decode_bundle(buf: &[u8]) -> Result<BackendBundle, BackendError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != BUNDLE_MAGIC {
        return Err(BackendError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(BackendError::Format(format!("unsupported version {version}")));
    }
    let length_norm = match r.take(1)?[0] {
        0 => false,
        1 => true,
        v => return Err(BackendError::Format(format!("invalid length-norm flag {v}"))),
    };
    let d = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mean = DVector::from_vec(r.f64s(d)?);
    let lda = r.matrix(dim, d)?;
    let plda_mean = DVector::from_vec(r.f64s(dim)?);
    let between = r.matrix(dim, dim)?;
    let within = r.matrix(dim, dim)?;
    if r.pos != buf.len() {
        return Err(BackendError::Format(format!(
            "{} trailing bytes after offset {}",
            buf.len() - r.pos,
            r.pos
        )));
    }
    Ok(BackendBundle {
        transform: BackendTransform { mean, lda, length_norm },
        plda: PldaModel {
            mean: plda_mean,
            between,
            within,
        },
    })
}

/// Writes a bundle via a temporary file and rename.
pub fn write_bundle(path: &Path, b: &BackendBundle) -> Result<(), BackendError> {
    crate::io::write_atomic(path, &encode_bundle(b))?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<BackendBundle, BackendError> {
    decode_bundle(&fs::read(path)?)
}
