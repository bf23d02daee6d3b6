//! Middlebury `.flo` files: a little-endian `f32` magic `202021.25`, `i32`
//! width and height, then row-major interleaved `(u, v)` pairs as `f32`.

use std::fs;
use std::path::Path;

use crate::error::{at_path, Error, Result};
use crate::raster::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER_LEN: usize = 12;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = flow.data().split_at(h * w);
    for (a, b) in u.iter().zip(v) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |offset: usize| -> Result<[u8; 4]> {
        bytes
            .get(offset..offset + 4)
            .map(|b| b.try_into().expect("four bytes"))
            .ok_or_else(|| format_error(offset, "file ends inside the header"))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(format_error(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 {
        return Err(format_error(4, format!("non-positive width {w}")));
    }
    if h <= 0 {
        return Err(format_error(8, format!("non-positive height {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format_error(4, "dimensions overflow"))?;
    if bytes.len() < expected {
        let complete = HEADER_LEN + (bytes.len() - HEADER_LEN) / 8 * 8;
        return Err(format_error(
            complete,
            format!("truncated payload: {} of {} bytes", bytes.len(), expected),
        ));
    }
    if bytes.len() > expected {
        return Err(format_error(expected, "trailing bytes after the payload"));
    }
    let mut data = vec![0f32; 2 * h * w];
    let (u, v) = data.split_at_mut(h * w);
    for (i, pair) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        u[i] = f32::from_le_bytes(pair[..4].try_into().expect("four bytes"));
        v[i] = f32::from_le_bytes(pair[4..].try_into().expect("four bytes"));
    }
    FlowField::new(h, w, data)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    at_path(path, fs::read(path).map_err(Error::from).and_then(|b| decode_flo(&b)))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    at_path(path, fs::write(path, encode_flo(flow)).map_err(Error::from))
}

fn format_error(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_single_pixel() {
        let bytes: Vec<u8> = vec![
            0x50, 0x49, 0x45, 0x48, // "PIEH", the magic's little-endian bytes
            0x01, 0x00, 0x00, 0x00, // width 1
            0x01, 0x00, 0x00, 0x00, // height 1
            0x00, 0x00, 0x80, 0x3f, // u = 1.0
            0x00, 0x00, 0x00, 0xc0, // v = -2.0
        ];
        let flow = decode_flo(&bytes).unwrap();
        assert_eq!(flow.dims(), (1, 1));
        assert_eq!(flow.get(0, 0), [1.0, -2.0]);
        assert_eq!(encode_flo(&flow), bytes);
    }

    #[test]
    fn zero_magic_is_rejected_at_offset_zero() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2).unwrap());
        bytes[..4].copy_from_slice(&0f32.to_le_bytes());
        match decode_flo(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_last_complete_pixel() {
        let bytes = encode_flo(&FlowField::zeros(2, 3).unwrap());
        match decode_flo(&bytes[..12 + 8 * 4 + 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12 + 8 * 4),
            other => panic!("expected format error, got {other:?}"),
        }
        match decode_flo(&bytes[..6]) {
            Err(Error::Format { offset: 4, .. }) => {}
            other => panic!("expected header error, got {other:?}"),
        }
    }
}
