//! The "EMTF" feature container.
//!
//! Layout: magic `EMTF`, version `u8`, rank `u8`, `rank` dimensions as `u32`
//! little-endian, then `f32` little-endian values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"EMTF";
pub const VERSION: u8 = 1;

/// Dense f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", dims.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, body) = parse_header(bytes)?;
        let n: usize = dims.iter().product();
        if body.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                body.len(),
                4 * n
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.to_bytes())
    }

    pub fn from_matrix<F: Scalar>(m: &Array2<F>) -> Self {
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn from_vector<F: Scalar>(v: &[F]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }

    pub fn from_array3<F: Scalar>(a: &Array3<F>) -> Self {
        let (l, t, d) = a.dim();
        Self {
            dims: vec![l, t, d],
            data: a.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn into_matrix<F: Scalar>(self) -> Result<Array2<F>> {
        self.expect_rank(2)?;
        let data = self.data.iter().map(|&v| F::lit(v as f64)).collect();
        Array2::from_shape_vec((self.dims[0], self.dims[1]), data).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn into_vector<F: Scalar>(self) -> Result<Array1<F>> {
        self.expect_rank(1)?;
        Ok(self.data.iter().map(|&v| F::lit(v as f64)).collect())
    }

    pub fn into_array3<F: Scalar>(self) -> Result<Array3<F>> {
        self.expect_rank(3)?;
        let data = self.data.iter().map(|&v| F::lit(v as f64)).collect();
        Array3::from_shape_vec((self.dims[0], self.dims[1], self.dims[2]), data)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Format(format!(
                "expected rank-{rank} tensor, found rank {}",
                self.rank()
            )));
        }
        Ok(())
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing EMTF magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported EMTF version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header_len = 6 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::Format("truncated EMTF header".into()));
    }
    let dims = bytes[6..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((dims, &bytes[header_len..]))
}

/// Reads only the dimensions of an EMTF file.
pub fn read_dims(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 6];
    file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("{}: missing EMTF magic", path.display())));
    }
    let rank = head[5] as usize;
    let mut raw = vec![0u8; 4 * rank];
    file.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

/// Writes to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = FeatureTensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"EMTF");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            FeatureTensor::from_bytes(b"NOPE\x01\x00"),
            Err(Error::Format(_))
        ));
        let mut bytes = FeatureTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        bytes.pop();
        assert!(matches!(FeatureTensor::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rank_is_checked_on_conversion() {
        let t = FeatureTensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(t.into_array3::<f32>(), Err(Error::Format(_))));
    }

    #[test]
    fn file_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let t = FeatureTensor::new(vec![2, 3], vec![0.1, -0.0, f32::MIN_POSITIVE, 7.0, 1e-30, 2.5]).unwrap();
        t.write(&path).unwrap();
        let back = FeatureTensor::read(&path).unwrap();
        assert_eq!(back.dims, t.dims);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(read_dims(&path).unwrap(), vec![2, 3]);
    }
}
