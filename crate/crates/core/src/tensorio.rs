//! Raw 4-d tensor files.
//!
//! Layout: the ASCII magic `LALAB1`, four little-endian `u32` dimensions, then
//! the `f32` payload in row-major order, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 6] = b"LALAB1";

pub fn write_tensor<W: Write>(mut w: W, tensor: &Array4<f32>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> std::result::Result<Array4<f32>, String> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != TENSOR_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| e.to_string())?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| format!("truncated payload: {e}"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after payload".into());
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).map_err(|e| e.to_string())
}

pub fn save_tensor(path: &Path, tensor: &Array4<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Array4<f32>> {
    let r = BufReader::new(File::open(path)?);
    read_tensor(r).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Array4::from_shape_fn((2, 1, 1, 3), |(a, _, _, c)| (a * 3 + c) as f32);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..6], b"LALAB1");
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[18..22], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 6 + 16 + 6 * 4);
        assert_eq!(&buf[22 + 4..22 + 8], &1.0f32.to_le_bytes());
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Array4::<f32>::zeros((1, 2, 2, 3));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&bad[..]).is_err());
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_tensor(&buf[..]).is_err());
    }
}
