//! `VVOX1` binary volume files.
//!
//! ```text
//! offset  size  field
//! 0       5     magic "VVOX1"
//! 5       1     version (1)
//! 6       1     dtype tag: 0 = f64, 1 = u16 labels
//! 7       16    C, D, H, W as little-endian u32
//! 23      n     payload, little-endian scalars, channel-first row-major
//! 23+n    4     CRC-32 (IEEE) of the payload, little-endian
//! ```
//!
//! Label volumes are written with `C = 1`; images as `(3, 1, rows, cols)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AmaaError, Result};
use crate::objective::LabelVolume;
use crate::tensor::{Image2D, VoxelVolume};

pub const MAGIC: &[u8; 5] = b"VVOX1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    U16 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F64(VoxelVolume),
    U16 { dims: [usize; 4], data: Vec<u16> },
}

fn header(dtype: DType, dims: [usize; 4]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn finish(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes[HEADER_LEN..]);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub fn encode_f64(v: &VoxelVolume) -> Vec<u8> {
    let mut bytes = header(DType::F64, v.dims());
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    finish(bytes)
}

pub fn encode_u16(dims: [usize; 4], data: &[u16]) -> Vec<u8> {
    let mut bytes = header(DType::U16, dims);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    finish(bytes)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<VolumeData> {
    let corrupt = |offset: usize, reason: String| AmaaError::CorruptFile {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[..5] != MAGIC {
        return Err(corrupt(0, "bad magic".into()));
    }
    if bytes[5] != VERSION {
        return Err(corrupt(5, format!("unsupported version {}", bytes[5])));
    }
    let dtype = match bytes[6] {
        0 => DType::F64,
        1 => DType::U16,
        t => return Err(corrupt(6, format!("unknown dtype tag {t}"))),
    };
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 7 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    let payload_len = n * dtype.width();
    let end = HEADER_LEN + payload_len;
    if bytes.len() < end + 4 {
        return Err(corrupt(
            bytes.len(),
            format!("truncated: expected {} bytes, found {}", end + 4, bytes.len()),
        ));
    }
    if bytes.len() > end + 4 {
        return Err(corrupt(end + 4, "trailing bytes after checksum".into()));
    }
    let payload = &bytes[HEADER_LEN..end];
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(corrupt(
            end,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(match dtype {
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            VolumeData::F64(VoxelVolume::new(dims, data)?)
        }
        DType::U16 => {
            let data = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            VolumeData::U16 { dims, data }
        }
    })
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| AmaaError::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| AmaaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| AmaaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| AmaaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| AmaaError::io(path, e))
}

fn read(path: &Path) -> Result<VolumeData> {
    let bytes = fs::read(path).map_err(|e| AmaaError::io(path, e))?;
    decode(&bytes, path)
}

pub fn save_volume(path: &Path, v: &VoxelVolume) -> Result<()> {
    write_atomic(path, &encode_f64(v))
}

pub fn load_volume(path: &Path) -> Result<VoxelVolume> {
    match read(path)? {
        VolumeData::F64(v) => Ok(v),
        VolumeData::U16 { .. } => Err(AmaaError::CorruptFile {
            path: path.to_path_buf(),
            offset: 6,
            reason: "expected f64 payload, found u16 labels".into(),
        }),
    }
}

pub fn save_image(path: &Path, img: &Image2D) -> Result<()> {
    save_volume(path, &img.to_volume())
}

pub fn load_image(path: &Path) -> Result<Image2D> {
    Image2D::from_volume(load_volume(path)?)
}

pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let [d, h, w] = labels.dims();
    let data: Vec<u16> = labels.data().iter().map(|&c| c as u16).collect();
    write_atomic(path, &encode_u16([1, d, h, w], &data))
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    match read(path)? {
        VolumeData::U16 { dims: [1, d, h, w], data } => {
            LabelVolume::new([d, h, w], data.into_iter().map(|c| c as usize).collect())
        }
        _ => Err(AmaaError::CorruptFile {
            path: path.to_path_buf(),
            offset: 6,
            reason: "expected a single-channel u16 label volume".into(),
        }),
    }
}
