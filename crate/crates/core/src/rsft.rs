//! `RSFT` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                         |
//! |--------------|-------------------------------|
//! | 4            | magic `RSFT`                  |
//! | 2            | version (`u16`, currently 1)  |
//! | 1            | dtype code (`0` = `f32`)      |
//! | 1            | rank                          |
//! | 8 × rank     | dims (`u64` each)             |
//! | rest         | row-major payload             |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSFT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

/// Serialize a tensor to any writer.
pub fn write_tensor<W: Write>(mut w: W, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    let expected: usize = shape.iter().product();
    assert_eq!(expected, data.len(), "payload length disagrees with shape");
    let rank = u8::try_from(shape.len()).expect("rank exceeds 255");
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, rank])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    // Chunked so large banks don't need a second full-size byte buffer.
    let mut buf = Vec::with_capacity(4 * 16384);
    for chunk in data.chunks(16384) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

/// Deserialize a tensor, returning its shape and flat payload.
pub fn read_tensor<R: Read>(mut r: R) -> Result<(Vec<usize>, Vec<f32>), ReadError> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(ReadError::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(ReadError::Format(format!("unsupported version {version}")));
    }
    if head[6] != DTYPE_F32 {
        return Err(ReadError::Format(format!("unsupported dtype code {}", head[6])));
    }
    let rank = head[7] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        let d = usize::try_from(u64::from_le_bytes(d))
            .map_err(|_| ReadError::Format("dimension overflows usize".into()))?;
        total = total
            .checked_mul(d)
            .ok_or_else(|| ReadError::Format("tensor size overflows usize".into()))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(total);
    let mut buf = vec![0u8; 4 * 16384];
    let mut remaining = total;
    while remaining > 0 {
        let n = remaining.min(16384);
        r.read_exact(&mut buf[..4 * n])?;
        data.extend(
            buf[..4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= n;
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ReadError::Format("trailing bytes after payload".into()));
    }
    Ok((shape, data))
}

#[derive(Debug)]
pub enum ReadError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

impl ReadError {
    fn at(self, path: &Path) -> Error {
        match self {
            ReadError::Io(e) => Error::io(path, e),
            ReadError::Format(m) => Error::VersionMismatch(format!("{}: {m}", path.display())),
        }
    }
}

pub fn save(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(BufWriter::new(file), shape, data).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file)).map_err(|e| e.at(path))
}

pub fn save_array(path: impl AsRef<Path>, array: &ArrayD<f32>) -> Result<()> {
    let owned;
    let slice = match array.as_slice() {
        Some(s) => s,
        None => {
            owned = array.iter().copied().collect::<Vec<_>>();
            &owned
        }
    };
    save(path, array.shape(), slice)
}

pub fn load_array(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let (shape, data) = load(path)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape checked while reading"))
}
