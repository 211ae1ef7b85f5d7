//! File formats: PPM/PGM images, raw f64 tensors, and the named-array
//! container used for checkpoints.
//!
//! Images are written both as 8-bit PPM (previewable anywhere) and as raw
//! f64 tensors; the f64 file is the authoritative copy for training so that
//! quantization never enters the loss. All binary payloads are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write `data` to `path` atomically (temp file + rename) so a crash never
/// leaves a half-written artifact behind.
pub fn atomic_write(path: &Path, data: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(data)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- PPM / PGM -----------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6), linear values clamped to [0, 1] and scaled to 8 bits.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::Dimension(format!(
            "ppm: {} pixels given for {}x{}",
            rgb.len(),
            width,
            height
        )));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.reserve(3 * rgb.len());
    for px in rgb {
        buf.extend_from_slice(&[to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]);
    }
    atomic_write(path, &buf)
}

/// Binary PGM (P5). Used for masks: 0 = background, 255 = object.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Dimension(format!(
            "pgm: {} pixels given for {}x{}",
            gray.len(),
            width,
            height
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(gray);
    atomic_write(path, &buf)
}

fn read_pnm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    // magic, whitespace/comments, width, height, maxval, single whitespace.
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("pnm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let m = token(&mut pos)?;
    if m != magic {
        return Err(Error::Format(format!("pnm: expected {magic}, found {m}")));
    }
    let w: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::Format("pnm: bad width".into()))?;
    let h: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::Format("pnm: bad height".into()))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|_| Error::Format("pnm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("pnm: unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    Ok((w, h, pos))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let (w, h, data_at) = read_pnm_header(&bytes, "P5")?;
    let need = w * h;
    let data = bytes
        .get(data_at..data_at + need)
        .ok_or_else(|| Error::Format("pgm: truncated pixel data".into()))?;
    Ok((w, h, data.to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let bytes = std::fs::read(path)?;
    let (w, h, data_at) = read_pnm_header(&bytes, "P6")?;
    let need = 3 * w * h;
    let data = bytes
        .get(data_at..data_at + need)
        .ok_or_else(|| Error::Format("ppm: truncated pixel data".into()))?;
    let px = data
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok((w, h, px))
}

// ---- raw f64 tensors -----------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"F64T";

/// Self-describing raw tensor: magic, u32 rank, u64 dims, then f64
/// little-endian data in C order.
pub fn write_f64_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::Dimension(format!(
            "tensor: dims {:?} imply {} values, got {}",
            dims,
            n,
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + 8 * dims.len() + 8 * data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read_f64_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "tensor: bad magic in {}",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor: implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = vec![0.0f64; n];
    let mut raw = vec![0u8; 8 * n];
    r.read_exact(&mut raw)?;
    for (i, c) in raw.chunks_exact(8).enumerate() {
        data[i] = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok((dims, data))
}

// ---- named-array container -------------------------------------------------

const ARRAYS_MAGIC: &[u8; 4] = b"DSAR";
const ARRAYS_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArraysHeader {
    arrays: Vec<ArrayEntry>,
}

/// One named f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self::new(name, vec![1], vec![v])
    }
}

/// Checkpoint container: magic, format version, u64 JSON header length, the
/// JSON index, then all payloads concatenated as f64 little-endian.
pub fn write_arrays(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0usize;
    for a in arrays {
        let n: usize = a.shape.iter().product();
        if n != a.data.len() {
            return Err(Error::Dimension(format!(
                "array {}: shape {:?} implies {} values, got {}",
                a.name,
                a.shape,
                n,
                a.data.len()
            )));
        }
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
            len: n,
        });
        offset += n;
    }
    let header = serde_json::to_vec(&ArraysHeader { arrays: entries })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * offset);
    buf.extend_from_slice(ARRAYS_MAGIC);
    buf.extend_from_slice(&ARRAYS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for a in arrays {
        for &v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn read_arrays(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != ARRAYS_MAGIC {
        return Err(Error::Format(format!(
            "checkpoint {}: bad magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ARRAYS_VERSION {
        return Err(Error::Format(format!(
            "checkpoint {}: unsupported version {version}",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: ArraysHeader = serde_json::from_slice(
        bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("checkpoint: truncated header".into()))?,
    )?;
    let payload = &bytes[16 + hlen..];
    let mut out = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let lo = 8 * e.offset;
        let hi = lo + 8 * e.len;
        let raw = payload
            .get(lo..hi)
            .ok_or_else(|| Error::Format(format!("checkpoint: array {} truncated", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedArray {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok(out)
}

pub fn find_array<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Format(format!("checkpoint: missing array '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let px = vec![[0.0, 0.5, 1.0], [1.0, 0.25, 0.0], [0.1, 0.2, 0.3], [1.0, 1.0, 1.0]];
        write_ppm(&p, 2, 2, &px).unwrap();
        let (w, h, back) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in px.iter().zip(back.iter()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        let g = dir.path().join("mask.pgm");
        write_pgm(&g, 3, 1, &[0, 255, 0]).unwrap();
        let (w, h, data) = read_pgm(&g).unwrap();
        assert_eq!((w, h, data), (3, 1, vec![0, 255, 0]));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut buf = b"P5\n# a comment\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[7, 9]);
        std::fs::write(&p, &buf).unwrap();
        let (w, h, data) = read_pgm(&p).unwrap();
        assert_eq!((w, h, data), (2, 1, vec![7, 9]));
    }

    #[test]
    fn f64_tensor_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.f64");
        let data = vec![0.1, -2.5, std::f64::consts::PI, 1e-300];
        write_f64_tensor(&p, &[2, 2], &data).unwrap();
        let (dims, back) = read_f64_tensor(&p).unwrap();
        assert_eq!(dims, vec![2, 2]);
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn arrays_roundtrip_preserves_names_shapes_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("state.ckpt");
        let arrays = vec![
            NamedArray::new("w0", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            NamedArray::scalar("s_raw", 3.401),
            NamedArray::new("empty-ok", vec![0], vec![]),
        ];
        write_arrays(&p, &arrays).unwrap();
        let back = read_arrays(&p).unwrap();
        assert_eq!(arrays, back);
        assert!(find_array(&back, "s_raw").is_ok());
        assert!(find_array(&back, "nope").is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        let bad = vec![NamedArray::new("w", vec![3], vec![1.0])];
        assert!(write_arrays(&p, &bad).is_err());
    }
}
