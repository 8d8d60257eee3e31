//! Single-image input for the `query` command: binary PGM/PPM or raw bytes.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

/// Reads an image as channel-major bytes of shape `(c, h, w)`.
///
/// Accepts binary PGM (`P5`, one channel) and PPM (`P6`, three channels)
/// with maxval 255, or a headerless file of exactly `c * h * w` bytes
/// already in channel-major order.
pub fn read_image(path: &Path, (c, h, w): (usize, usize, usize)) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_image(&bytes, (c, h, w))
}

pub fn decode_image(bytes: &[u8], (c, h, w): (usize, usize, usize)) -> Result<Vec<u8>> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        let channels = if bytes[1] == b'5' { 1 } else { 3 };
        let (fields, offset) = pnm_header(bytes)?;
        let [pw, ph, maxval] = fields;
        ensure!(maxval == 255, "only 8-bit PNM images are supported (maxval {maxval})");
        ensure!(
            (channels, ph, pw) == (c, h, w),
            "image is {channels}x{ph}x{pw}, model expects {c}x{h}x{w}"
        );
        let body = &bytes[offset..];
        ensure!(body.len() >= c * h * w, "truncated PNM payload");
        // interleaved HWC to planar CHW
        let mut out = vec![0u8; c * h * w];
        for (i, px) in body[..c * h * w].chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = v;
            }
        }
        return Ok(out);
    }
    if bytes.len() != c * h * w {
        bail!(
            "raw image has {} bytes, model expects {c}x{h}x{w} = {}",
            bytes.len(),
            c * h * w
        );
    }
    Ok(bytes.to_vec())
}

fn pnm_header(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => bail!("truncated PNM header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])?
            .parse()
            .context("bad PNM header field")?;
    }
    // exactly one whitespace byte separates the header from the payload
    Ok((fields, pos + 1))
}
