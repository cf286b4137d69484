//! IDX file reader (MNIST images `0x00000803`, labels `0x00000801`).

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// An unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX array; the payload must match the header exactly.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format(0, "IDX file shorter than its magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::format(3, "IDX rank must be positive"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(bytes.len() as u64, "truncated IDX dimensions"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::format(
            header as u64,
            format!("IDX payload has {} bytes, header implies {count}", payload.len()),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn magic(bytes: &[u8]) -> u32 {
    bytes
        .get(..4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .unwrap_or(0)
}

/// Grayscale images, row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl MnistImages {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if magic(bytes) != IMAGES_MAGIC {
            return Err(Error::format(0, format!("expected image magic 0x{IMAGES_MAGIC:08x}")));
        }
        let a = parse_idx(bytes)?;
        Ok(MnistImages {
            count: a.dims[0],
            rows: a.dims[1],
            cols: a.dims[2],
            pixels: a.data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = read_file(path.as_ref())?;
    if magic(&bytes) != LABELS_MAGIC {
        return Err(Error::format(0, format!("expected label magic 0x{LABELS_MAGIC:08x}")));
    }
    Ok(parse_idx(&bytes)?.data)
}

/// Finds the training (or test) image file inside an MNIST directory.
pub fn images_in(dir: &Path, train: bool) -> Result<MnistImages> {
    let stem = if train { "train-images" } else { "t10k-images" };
    for name in [format!("{stem}-idx3-ubyte"), format!("{stem}.idx3-ubyte")] {
        let p = dir.join(&name);
        if p.exists() {
            return MnistImages::read(p);
        }
    }
    Err(Error::MissingFile(dir.join(format!("{stem}-idx3-ubyte"))))
}
