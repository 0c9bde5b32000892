//! Binary netpbm I/O: `P6` colour images and `P5` crack masks, 8-bit only.
//!
//! Colour images map to `[3, H, W]` tensors in `[0, 1]`; masks map to
//! `[H, W]` tensors of `{0, 1}` and must only contain `0` and `255`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

fn skip_space_and_comments(b: &[u8], mut i: usize) -> usize {
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn read_uint(b: &[u8], i: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(b, i);
    let mut end = start;
    while end < b.len() && b[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, format!("expected {what}")));
    }
    let v = std::str::from_utf8(&b[start..end])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(start, format!("{what} out of range")))?;
    Ok((v, end))
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < 2 || b[0] != b'P' {
        return Err(parse_err(0, "missing netpbm magic"));
    }
    let magic = [b[0], b[1]];
    let (width, i) = read_uint(b, 2, "width")?;
    let (height, i) = read_uint(b, i, "height")?;
    let (maxval, i) = read_uint(b, i, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("zero extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "maxval {maxval} (only 8-bit, maxval 255, is supported)"
        )));
    }
    if i >= b.len() || !b[i].is_ascii_whitespace() {
        return Err(parse_err(i, "expected single whitespace before raster"));
    }
    Ok(Header {
        magic,
        width,
        height,
        payload: i + 1,
    })
}

fn raster<'a>(b: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = b.len() - h.payload;
    if have < need {
        return Err(parse_err(b.len(), format!("truncated raster: {have} of {need} bytes")));
    }
    Ok(&b[h.payload..h.payload + need])
}

/// Parses a binary `P6` image into `[3, H, W]` in `[0, 1]`.
pub fn parse_ppm(b: &[u8]) -> Result<Tensor> {
    let h = parse_header(b)?;
    if &h.magic != b"P6" {
        return Err(parse_err(0, "expected P6 magic"));
    }
    let px = raster(b, &h, 3)?;
    let plane = h.width * h.height;
    let mut out = vec![0.0; 3 * plane];
    for (p, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = rgb[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], out)
}

/// Parses a binary `P5` crack mask into `[H, W]` of `{0, 1}`.
pub fn parse_pgm_mask(b: &[u8]) -> Result<Tensor> {
    let h = parse_header(b)?;
    if &h.magic != b"P5" {
        return Err(parse_err(0, "expected P5 magic"));
    }
    let px = raster(b, &h, 1)?;
    let mut out = Vec::with_capacity(px.len());
    for (k, &v) in px.iter().enumerate() {
        out.push(match v {
            0 => 0.0,
            255 => 1.0,
            other => {
                return Err(Error::Validation(format!(
                    "mask value {other} at byte {} (only 0 and 255 allowed)",
                    h.payload + k
                )))
            }
        });
    }
    Tensor::new(vec![h.height, h.width], out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, got: c });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm_mask(mask: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = mask.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in mask.data() {
        out.push(match v {
            v if v == 0.0 => 0,
            v if v == 1.0 => 255,
            other => return Err(Error::Validation(format!("mask value {other} is not binary"))),
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        Error::Unsupported(m) => Error::Unsupported(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    with_path(path, parse_ppm(&read(path)?))
}

pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    with_path(path, parse_pgm_mask(&read(path)?))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_pgm_mask(mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_within_quantization() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 101) as f64 / 100.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn comments_and_whitespace_in_header() {
        let mut b = b"P6 # comment\n2\t1 # w h\n255\n".to_vec();
        b.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = parse_ppm(&b).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unsupported_maxval() {
        let mut b = b"P6\n1 1\n65535\n".to_vec();
        b.extend_from_slice(&[0; 6]);
        assert!(matches!(parse_ppm(&b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn truncated_and_malformed_report_offsets() {
        let b = b"P6\n2 2\n255\n\x00\x01".to_vec();
        match parse_ppm(&b) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, b.len()),
            other => panic!("{other:?}"),
        }
        match parse_ppm(b"P6\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_ppm(b"GIF89a"), Err(Error::Parse { offset: 0, .. })));
        assert!(parse_pgm_mask(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn mask_validation() {
        let mut b = b"P5\n3 1\n255\n".to_vec();
        b.extend_from_slice(&[0, 255, 0]);
        assert_eq!(parse_pgm_mask(&b).unwrap().data(), &[0.0, 1.0, 0.0]);
        *b.last_mut().unwrap() = 7;
        assert!(matches!(parse_pgm_mask(&b), Err(Error::Validation(_))));
        let bad = Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap();
        assert!(encode_pgm_mask(&bad).is_err());
    }

    proptest! {
        #[test]
        fn mask_roundtrip_is_exact(h in 1usize..9, w in 1usize..9, bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = Tensor::from_fn(&[h, w], |i| f64::from(u8::from(bits[i % 64])));
            prop_assert_eq!(parse_pgm_mask(&encode_pgm_mask(&m).unwrap()).unwrap(), m);
        }
    }
}
