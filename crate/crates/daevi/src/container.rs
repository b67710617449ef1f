//! `DVT1` clip container.
//!
//! ```text
//! offset  size         field
//! 0       4            magic "DVT1"
//! 4       4·4          T, H, W, C as little-endian u32
//! 20      T·H·W·C·4    little-endian f32 samples, frame-major, planar
//! ```

use std::fs;
use std::path::Path;

use daevi_core::data::Clip;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVT1";
pub const HEADER_LEN: usize = 20;

pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.data.len());
    out.extend_from_slice(MAGIC);
    for v in [clip.frames, clip.height, clip.width, clip.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &clip.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<Clip> {
    let err = |offset: usize, detail: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, detail };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let offset = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(bytes.len().min(4));
        return Err(err(offset, "bad magic, expected \"DVT1\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("truncated header, {} of {HEADER_LEN} bytes", bytes.len())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as u64;
    let (t, h, w, c) = (field(0), field(1), field(2), field(3));
    let payload = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .filter(|&v| v <= isize::MAX as u64)
        .ok_or_else(|| err(4, format!("extent {t}×{h}×{w}×{c} overflows")))?;
    let have = (bytes.len() - HEADER_LEN) as u64;
    if have < payload {
        return Err(err(bytes.len(), format!("truncated payload, {have} of {payload} bytes")));
    }
    if have > payload {
        return Err(err(HEADER_LEN + payload as usize, format!("{} trailing bytes", have - payload)));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(Clip::new(t as usize, c as usize, h as usize, w as usize, data)?)
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    fs::write(path, encode_clip(clip)).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let clip = Clip::filled(5, 3, 64, 64, 0.5);
        let bytes = encode_clip(&clip);
        assert_eq!(&bytes[..4], b"DVT1");
        assert_eq!(bytes[4..8], 5u32.to_le_bytes());
        assert_eq!(bytes[16..20], 3u32.to_le_bytes());
        assert_eq!(bytes.len() - HEADER_LEN, 5 * 64 * 64 * 3 * 4);
    }

    #[test]
    fn format_errors_name_offsets() {
        let p = Path::new("x.dvt");
        let mut bytes = encode_clip(&Clip::filled(1, 1, 2, 2, 0.0));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_clip(&bad, p), Err(Error::Format { offset: 0, .. })));
        bytes.pop();
        assert!(matches!(decode_clip(&bytes, p), Err(Error::Format { offset: 35, .. })));
        let mut huge = encode_clip(&Clip::filled(1, 1, 1, 1, 0.0));
        huge[4..20].copy_from_slice(&[0xff; 16]);
        assert!(matches!(decode_clip(&huge, p), Err(Error::Format { offset: 4, .. })));
    }
}
