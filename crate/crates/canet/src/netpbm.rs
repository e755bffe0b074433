//! Minimal binary netpbm reader/writer: 8-bit P6 (PPM) for image pairs and
//! 8-bit P5 (PGM) for labels and predicted change maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Header parse: magic, then width, height, maxval tokens separated by
/// whitespace with `#` comments, then a single whitespace byte before the
/// raster.
fn parse_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let ctx = || format!("{}", path.display());
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::format(ctx(), format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(ctx(), "truncated header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = token
            .parse::<usize>()
            .map_err(|_| Error::format(ctx(), format!("bad header field {token:?}")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(ctx(), "missing raster separator"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(ctx(), format!("unsupported maxval {maxval} (need 255)")));
    }
    Ok((w, h, pos))
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, offset) = parse_header(path, &bytes, magic)?;
    let expected = w * h * channels;
    let raster = &bytes[offset..];
    if raster.len() != expected {
        return Err(Error::format(
            format!("{}", path.display()),
            format!("raster has {} bytes, expected {expected}", raster.len()),
        ));
    }
    Ok((w, h, raster.to_vec()))
}

/// Write an 8-bit RGB image; `rgb` is interleaved row-major, length `3*w*h`.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * w * h, "interleaved rgb raster");
    write_netpbm(path, "P6", w, h, rgb)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6", 3)
}

/// Write an 8-bit grayscale image, length `w*h`.
pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), w * h, "grayscale raster");
    write_netpbm(path, "P5", w, h, gray)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, 4, 5, &rgb).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), (4, 5, rgb));

        let gray: Vec<u8> = (0..6 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let g = dir.path().join("x.pgm");
        write_pgm(&g, 6, 3, &gray).unwrap();
        assert_eq!(read_pgm(&g).unwrap(), (6, 3, gray));
    }

    #[test]
    fn header_comments_and_whitespace_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n 2\t2 # inline\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (2, 2, vec![1, 2, 3, 4]));
    }

    #[test]
    fn malformed_headers_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P5\n2").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(read_pgm(&p).is_err(), "P6 magic in a pgm read");
        // short raster
        std::fs::write(&p, b"P5\n2 2\n255\nab").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }
}
