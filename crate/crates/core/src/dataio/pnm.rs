use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit netpbm raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5 (PGM), 3 for P6 (PPM).
    pub channels: usize,
    /// Interleaved row-major bytes.
    pub bytes: Vec<u8>,
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Header tokens: magic, width, height, maxval; `#` comments skipped.
fn header(buf: &[u8], path: &Path) -> Result<([String; 4], usize)> {
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    let mut i = 0;
    while tokens.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() && buf[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(data_err(path, "truncated netpbm header"));
        }
        tokens.push(String::from_utf8_lossy(&buf[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= buf.len() || !buf[i].is_ascii_whitespace() {
        return Err(data_err(path, "missing raster after header"));
    }
    let [a, b, c, d]: [String; 4] = tokens.try_into().expect("four tokens");
    Ok(([a, b, c, d], i + 1))
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Raster> {
    let ([magic, w, h, maxval], start) = header(buf, path)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(data_err(path, format!("unsupported netpbm magic {other:?}"))),
    };
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| data_err(path, format!("bad {what} {s:?}")))
    };
    let (width, height) = (num(&w, "width")?, num(&h, "height")?);
    if num(&maxval, "maxval")? != 255 {
        return Err(data_err(path, format!("maxval {maxval} unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(data_err(path, "empty raster"));
    }
    let need = width * height * channels;
    let bytes = buf.get(start..start + need).ok_or_else(|| {
        data_err(path, format!("raster has {} bytes, expected {need}", buf.len() - start))
    })?;
    Ok(Raster {
        width,
        height,
        channels,
        bytes: bytes.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    decode(&fs::read(path)?, path)
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.bytes);
    out
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(r))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_known_bytes() {
        let mut buf = b"P6\n# comment\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[0, 1, 2, 253, 254, 255]);
        let r = decode(&buf, Path::new("x.ppm")).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 3));
        assert_eq!(r.bytes, vec![0, 1, 2, 253, 254, 255]);
    }

    #[test]
    fn round_trip() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 1,
            bytes: vec![9, 8, 7, 6, 5, 4],
        };
        assert_eq!(decode(&encode(&r), Path::new("x.pgm")).unwrap(), r);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("bad.pgm");
        assert!(decode(b"P2\n1 1\n255\n0", p).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0", p).is_err());
        assert!(decode(b"P5\n2 2\n255\n\0", p).is_err());
        assert!(decode(b"P5\n2", p).is_err());
        assert!(decode(b"P5\n0 2\n255\n", p).is_err());
    }
}
