//! Binary feature dumps: magic `HSFEAT01`, u32 rows, u32 dim, f64 frame rate,
//! u32 name length + UTF-8 name, then row-major f32 LE values.

use std::path::Path;

use ndarray::Array2;

use super::{FeatureSequence, FrontendError};

const MAGIC: &[u8; 8] = b"HSFEAT01";

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<(), FrontendError> {
    let name = seq.encoder_name().as_bytes();
    let mut buf = Vec::with_capacity(32 + name.len() + 4 * seq.frames().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&seq.frame_rate_hz().to_le_bytes());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    for v in seq.frames().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| FrontendError::FeatureFile(format!("{}: {e}", path.display())))
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrontendError> {
        if self.0.len() < n {
            return Err(FrontendError::FeatureFile("truncated file".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, FrontendError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence, FrontendError> {
    let bytes =
        std::fs::read(path).map_err(|e| FrontendError::FeatureFile(format!("{}: {e}", path.display())))?;
    let mut c = Cursor(&bytes);
    if c.take(8)? != MAGIC {
        return Err(FrontendError::FeatureFile("bad magic".into()));
    }
    let rows = c.u32()? as usize;
    let dim = c.u32()? as usize;
    let rate = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let name_len = c.u32()? as usize;
    let name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|e| FrontendError::FeatureFile(e.to_string()))?
        .to_string();
    let data: Vec<f32> = c
        .take(rows * dim * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if !c.0.is_empty() {
        return Err(FrontendError::FeatureFile("trailing bytes".into()));
    }
    let frames = Array2::from_shape_vec((rows, dim), data).map_err(|e| FrontendError::FeatureFile(e.to_string()))?;
    FeatureSequence::new(frames, rate, name)
}
