//! Binary file formats. Every format starts with an 8-byte ASCII magic followed by
//! little-endian `u32` dimensions and a little-endian payload.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 8] = b"DEPTHv01";
pub const FEAT_MAGIC: &[u8; 8] = b"FEATv001";
pub const OCC_MAGIC: &[u8; 8] = b"OCCGv001";
pub const GAUSS_MAGIC: &[u8; 8] = b"3DGSv001";
/// Floats per Gaussian record: center 3, color 3, scale 3, quaternion 4 (w, x, y, z), opacity 1.
pub const GAUSS_RECORD: usize = 14;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header(magic: &[u8; 8], dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

/// Checks the magic and returns `n` header dims plus the remaining payload.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 8], n: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let head = 8 + 4 * n;
    if bytes.len() < head {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let dims = (0..n).map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize).collect();
    Ok((dims, &bytes[head..]))
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_f32s(path: &Path, payload: &[u8], count: usize) -> Result<Vec<f32>> {
    if payload.len() != count * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", count * 4, payload.len())));
    }
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn encode_depth(depth: &Tensor<f32>) -> Vec<u8> {
    let s = depth.shape();
    let mut out = header(DEPTH_MAGIC, &[s[0], s[1]]);
    push_f32s(&mut out, depth.data());
    out
}

pub fn write_depth(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    if depth.ndim() != 2 {
        return Err(Error::shape("write_depth", format!("expected [H, W], got {:?}", depth.shape())));
    }
    write_file(path, &encode_depth(depth))
}

pub fn read_depth(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    let (dims, payload) = parse_header(path, &bytes, DEPTH_MAGIC, 2)?;
    let data = parse_f32s(path, payload, dims[0] * dims[1])?;
    Tensor::new(&dims, data)
}

/// Feature file holding `[n_views, h, w, c]`.
pub fn write_features(path: &Path, feats: &Tensor<f32>) -> Result<()> {
    if feats.ndim() != 4 {
        return Err(Error::shape("write_features", format!("expected [V, h, w, c], got {:?}", feats.shape())));
    }
    let mut out = header(FEAT_MAGIC, feats.shape());
    push_f32s(&mut out, feats.data());
    write_file(path, &out)
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    let (dims, payload) = parse_header(path, &bytes, FEAT_MAGIC, 4)?;
    let data = parse_f32s(path, payload, dims.iter().product())?;
    Tensor::new(&dims, data)
}

/// Grid payload: bit-packed binary occupancy or float probabilities. The reader tells the
/// two apart by payload length.
#[derive(Clone, Debug, PartialEq)]
pub enum GridPayload {
    Binary(Vec<bool>),
    Probabilities(Vec<f32>),
}

/// Bits are packed least-significant first in linear (x-major) cell order.
pub fn write_grid(path: &Path, resolution: usize, payload: &GridPayload) -> Result<()> {
    let cells = resolution.pow(3);
    let mut out = header(OCC_MAGIC, &[resolution]);
    match payload {
        GridPayload::Binary(bits) => {
            if bits.len() != cells {
                return Err(Error::shape("write_grid", format!("{} cells for resolution {resolution}", bits.len())));
            }
            let mut packed = vec![0u8; cells.div_ceil(8)];
            for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        GridPayload::Probabilities(p) => {
            if p.len() != cells {
                return Err(Error::shape("write_grid", format!("{} cells for resolution {resolution}", p.len())));
            }
            push_f32s(&mut out, p);
        }
    }
    write_file(path, &out)
}

pub fn read_grid(path: &Path) -> Result<(usize, GridPayload)> {
    let bytes = read_file(path)?;
    let (dims, payload) = parse_header(path, &bytes, OCC_MAGIC, 1)?;
    let res = dims[0];
    let cells = res.pow(3);
    if payload.len() == cells.div_ceil(8) {
        let bits = (0..cells).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok((res, GridPayload::Binary(bits)))
    } else {
        Ok((res, GridPayload::Probabilities(parse_f32s(path, payload, cells)?)))
    }
}

pub fn write_gaussian_records(path: &Path, records: &[[f32; GAUSS_RECORD]]) -> Result<()> {
    let mut out = header(GAUSS_MAGIC, &[records.len()]);
    for r in records {
        push_f32s(&mut out, r);
    }
    write_file(path, &out)
}

pub fn read_gaussian_records(path: &Path) -> Result<Vec<[f32; GAUSS_RECORD]>> {
    let bytes = read_file(path)?;
    let (dims, payload) = parse_header(path, &bytes, GAUSS_MAGIC, 1)?;
    let flat = parse_f32s(path, payload, dims[0] * GAUSS_RECORD)?;
    Ok(flat.chunks_exact(GAUSS_RECORD).map(|c| c.try_into().unwrap()).collect())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[H, W, 3]` (rgb) or `[H, W]` (gray) values in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let color = match s {
        [_, _, 3] => image::ExtendedColorType::Rgb8,
        [_, _] => image::ExtendedColorType::L8,
        _ => return Err(Error::shape("write_png", format!("expected [H, W] or [H, W, 3], got {s:?}"))),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &bytes, s[1] as u32, s[0] as u32, color).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Reads a PNG as `[H, W, 3]` in `[0, 1]`.
pub fn read_png_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open_png(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Reads a PNG as `[H, W]` in `[0, 1]`.
pub fn read_png_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open_png(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let t = Tensor::new(&[2, 3], vec![0.0, 1.5, 2.0, 0.0, 3.25, 1e-3]).unwrap();
        write_depth(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"DEPTHv01");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_depth(&p).unwrap(), t);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"NOTDEPTH\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        assert_eq!(read_depth(&p).unwrap_err().exit_code(), 3);
        fs::write(&p, b"DEPTHv01\x02\0\0\0\x02\0\0\0").unwrap();
        assert!(matches!(read_depth(&p), Err(Error::Format { .. })));
        assert!(matches!(read_depth(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let t = Tensor::new(&[2, 1, 2, 3], (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        write_features(&p, &t).unwrap();
        assert_eq!(read_features(&p).unwrap(), t);
    }

    #[test]
    fn grid_round_trip_both_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let bits: Vec<bool> = (0..512).map(|i| i % 7 == 0 || i == 511).collect();
        write_grid(&p, 8, &GridPayload::Binary(bits.clone())).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 12 + 64);
        assert_eq!(read_grid(&p).unwrap(), (8, GridPayload::Binary(bits)));
        let probs: Vec<f32> = (0..512).map(|i| i as f32 / 512.0).collect();
        write_grid(&p, 8, &GridPayload::Probabilities(probs.clone())).unwrap();
        assert_eq!(read_grid(&p).unwrap(), (8, GridPayload::Probabilities(probs)));
    }

    #[test]
    fn gaussian_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.3dgs");
        let recs = vec![[0.5f32; GAUSS_RECORD], std::array::from_fn(|i| i as f32)];
        write_gaussian_records(&p, &recs).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, 12 + 2 * 14 * 4);
        assert_eq!(read_gaussian_records(&p).unwrap(), recs);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::new(&[2, 2, 3], (0..12).map(|i| i as f32 * 20.0 / 255.0).collect()).unwrap();
        write_png(&p, &t).unwrap();
        let back = read_png_rgb(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
        let m = Tensor::new(&[1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        write_png(&p, &m).unwrap();
        assert_eq!(read_png_gray(&p).unwrap(), m);
    }
}
