//! Binary netpbm codecs: P6 (RGB, 8-bit), P5 (gray, 8- or 16-bit).

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded header: (magic, width, height, maxval, offset of first data byte).
fn parse_header(bytes: &[u8], path: &Path) -> Result<(String, usize, usize, u32, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        // skip whitespace and comments
        while i < bytes.len() {
            match bytes[i] {
                b'#' => {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                }
                c if c.is_ascii_whitespace() => i += 1,
                _ => break,
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(Error::format(path, "missing raster data"));
    }
    i += 1;
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what} '{s}'")))
    };
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} out of range")));
    }
    Ok((fields[0].clone(), width, height, maxval, i))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (magic, w, h, maxval, off) = parse_header(bytes, path)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::format(path, format!("expected 8-bit P6, got {magic} maxval {maxval}")));
    }
    let need = w * h * 3;
    let data = &bytes[off..];
    if data.len() != need {
        return Err(Error::format(path, format!("expected {need} raster bytes, found {}", data.len())));
    }
    Ok((w, h, data.to_vec()))
}

pub fn encode_pgm8(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn decode_pgm8(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (magic, w, h, maxval, off) = parse_header(bytes, path)?;
    if magic != "P5" || maxval != 255 {
        return Err(Error::format(path, format!("expected 8-bit P5, got {magic} maxval {maxval}")));
    }
    let data = &bytes[off..];
    if data.len() != w * h {
        return Err(Error::format(path, format!("expected {} raster bytes, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// 16-bit big-endian P5, as the format prescribes for maxval > 255.
pub fn encode_pgm16(width: usize, height: usize, gray: &[u16]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (magic, w, h, maxval, off) = parse_header(bytes, path)?;
    if magic != "P5" || maxval <= 255 {
        return Err(Error::format(path, format!("expected 16-bit P5, got {magic} maxval {maxval}")));
    }
    let data = &bytes[off..];
    if data.len() != 2 * w * h {
        return Err(Error::format(path, format!("expected {} raster bytes, found {}", 2 * w * h, data.len())));
    }
    Ok((w, h, data.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_truncation() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 7).collect();
        let bytes = encode_ppm(2, 3, &rgb);
        let p = Path::new("x.ppm");
        assert_eq!(decode_ppm(&bytes, p).unwrap(), (2, 3, rgb));
        let err = decode_ppm(&bytes[..bytes.len() - 1], p).unwrap_err();
        assert!(err.to_string().contains("x.ppm"));
    }

    #[test]
    fn pgm_round_trips() {
        let g8 = vec![0u8, 1, 2, 255];
        assert_eq!(decode_pgm8(&encode_pgm8(2, 2, &g8), Path::new("m")).unwrap().2, g8);
        let g16 = vec![0u16, 300, 65535, 7];
        assert_eq!(decode_pgm16(&encode_pgm16(4, 1, &g16), Path::new("h")).unwrap().2, g16);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 4]);
        assert_eq!(decode_pgm8(&bytes, Path::new("c")).unwrap(), (2, 1, vec![3, 4]));
    }
}
