//! Binary PGM/PPM output for sampled images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min–max map to 0..=255; a constant image maps to 128.
fn quantize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Encode a `[1, H, W]` tensor as P5 or a `[3, H, W]` tensor as P6.
pub fn encode_pnm(x: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(Error::shape(format!(
                "images must be [1|3, H, W], got {:?}",
                x.shape()
            )))
        }
    };
    if !x.is_finite() {
        return Err(Error::NonFinite("image contains non-finite pixels".into()));
    }
    let q = quantize(x.data());
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    if c == 1 {
        out.extend_from_slice(&q);
    } else {
        let plane = h * w;
        for p in 0..plane {
            out.extend((0..3).map(|ch| q[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Parse a binary PGM/PPM into a `[C, H, W]` tensor of raw 0..=255 values.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let corrupt = |detail: &str| Error::Corrupt {
        what: "PNM image",
        detail: detail.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("non-ASCII header"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(corrupt(&format!("unsupported magic `{other}`"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt(&format!("bad header field `{s}`")));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(corrupt("only maxval 255 is supported"));
    }
    let body = &bytes[pos + 1..];
    let plane = w * h;
    if body.len() != plane * channels {
        return Err(corrupt(&format!("expected {} pixel bytes, found {}", plane * channels, body.len())));
    }
    let mut data = vec![0.0; plane * channels];
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = body[p * channels + ch] as f64;
        }
    }
    Tensor::new([channels, h, w], data)
}

/// Write `x` as a PGM (one channel) or PPM (three channels).
pub fn render_image(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(x)?).map_err(|e| Error::io(path, e))
}
