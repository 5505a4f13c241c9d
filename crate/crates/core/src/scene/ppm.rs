//! Binary PPM (P6, maxval 255) image I/O, plus PFM float maps for depth
//! diagnostics. Reads map bytes to [0,1] by /255; writes round half up, so
//! write∘read∘write is idempotent.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;
use std::io::{Read, Write};
use std::path::Path;

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    // skip whitespace and '#' comments
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
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(bytes[start..*pos].to_vec())
}

/// Read a P6 PPM into a (3, H, W) tensor with values in [0, 1].
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    if magic != b"P6" {
        return Err(Error::parse(path, 1, "malformed header: not a P6 PPM"));
    }
    let mut dim = |what: &str| -> Result<usize> {
        let tok = next_token(&bytes, &mut pos)
            .ok_or_else(|| Error::parse(path, 1, format!("malformed header: missing {what}")))?;
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, format!("malformed header: bad {what}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(path, 1, format!("unsupported maxval {maxval}, want 255")));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::parse(
            path,
            1,
            format!("truncated payload: want {need} bytes, have {}", bytes.len().saturating_sub(pos)),
        ));
    }
    let payload = &bytes[pos..pos + need];
    let inv = 1.0 / 255.0;
    let mut data = vec![T::ZERO; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = payload[(y * w + x) * 3 + c] as f64;
                data[(c * h + y) * w + x] = T::from_f64(b * inv);
            }
        }
    }
    Ok(Tensor::constant(&[3, h, w], data))
}

/// Write a (3, H, W) tensor in [0,1] as binary P6; values round half up.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let sh = image.shape();
    assert!(
        sh.len() == 3 && sh[0] == 3,
        "write_ppm: want (3,H,W), got {sh:?}"
    );
    let (h, w) = (sh[1], sh[2]);
    let data = image.data();
    let mut payload = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].to_f64().clamp(0.0, 1.0);
                payload[(y * w + x) * 3 + c] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write a (H, W) float map as grayscale PFM (scale -1.0 = little endian,
/// rows bottom to top per the format).
pub fn write_pfm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), h * w, "write_pfm: {h}x{w} vs {} values", values.len());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "Pf\n{w} {h}\n-1.0\n").map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&(values[y * w + x] as f32).to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    if magic != b"Pf" {
        return Err(Error::parse(path, 1, "not a grayscale PFM"));
    }
    let mut tok = |what: &str| -> Result<String> {
        next_token(&bytes, &mut pos)
            .and_then(|t| String::from_utf8(t).ok())
            .ok_or_else(|| Error::parse(path, 1, format!("missing {what}")))
    };
    let w: usize = tok("width")?.parse().map_err(|_| Error::parse(path, 1, "bad width"))?;
    let h: usize = tok("height")?.parse().map_err(|_| Error::parse(path, 1, "bad height"))?;
    let scale: f64 = tok("scale")?.parse().map_err(|_| Error::parse(path, 1, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::parse(path, 1, "big-endian PFM unsupported"));
    }
    pos += 1;
    if bytes.len() < pos + 4 * w * h {
        return Err(Error::parse(path, 1, "truncated PFM payload"));
    }
    let mut vals = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let off = pos + ((h - 1 - y) * w + x) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            vals[y * w + x] = v as f64;
        }
    }
    Ok((h, w, vals))
}
