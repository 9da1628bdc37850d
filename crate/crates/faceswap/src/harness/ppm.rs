//! Binary PPM (P6, 8-bit) image IO.
//!
//! Tensor images are `[3,h,w]` in `[-1,1]`; the byte mapping is
//! `round(127.5 * (x + 1))` clamped to 0..=255, and reading inverts it as
//! `v / 127.5 - 1`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use std::io::Write;
use std::path::Path;

pub fn to_ppm_bytes<E: Element>(image: &Tensor<E>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::BadShape {
            op: "to_ppm",
            shape: s.to_vec(),
            expected: "[3,h,w]".into(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            let v = (127.5 * (data[ch * plane + p].into_f64() + 1.0)).round();
            out.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn from_ppm_bytes<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and # comments
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image {
                what: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err(Error::Image {
            what: "not a P6 file".into(),
        });
    }
    let parse = |s: String| -> Result<usize> {
        s.parse().map_err(|_| Error::Image {
            what: format!("bad header field `{s}`"),
        })
    };
    let w = parse(token(bytes)?)?;
    let h = parse(token(bytes)?)?;
    let maxval = parse(token(bytes)?)?;
    if maxval != 255 {
        return Err(Error::Image {
            what: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Image {
            what: format!("pixel payload truncated: need {need} bytes"),
        });
    }
    let plane = w * h;
    let mut data = vec![E::zero(); 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let v = bytes[pos + 3 * p + ch] as f64;
            data[ch * plane + p] = E::from_f64(v / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn write_ppm<E: Element>(path: &Path, image: &Tensor<E>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_ppm_bytes(image)?)
        .map_err(|e| Error::io(path, e))
}

pub fn read_ppm<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_ppm_bytes(&bytes)
}

/// Writes an RGB byte buffer (row-major, interleaved) as P6.
pub fn write_rgb_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * w * h);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
