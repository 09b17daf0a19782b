//! Binary PPM (P6, maxval 255) frames.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode_err(msg: impl Into<String>) -> Error {
    Error::Decode(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(format!("bad PPM {what}")))
    }
}

/// Decodes a P6 image into `[H, W, 3]` with values `p / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(decode_err("not a binary PPM (missing P6 magic)"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(decode_err(format!("PPM has empty extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(decode_err(format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err("PPM header not terminated"));
    }
    let raster = &bytes[h.pos + 1..];
    let need = width * height * 3;
    if raster.len() < need {
        return Err(decode_err(format!(
            "truncated PPM raster: {} of {need} bytes",
            raster.len()
        )));
    }
    let data = raster[..need].iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new([height, width, 3], data)
}

pub fn decode_frame(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encodes `[H, W, 3]` values in `[0, 1]` (clamped) as P6, rounding to the
/// nearest level.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[height, width, 3] = img.shape() else {
        return Err(Error::Dimension(format!("PPM needs [H, W, 3], got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_frame(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixels() {
        let white = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(white.shape(), &[1, 1, 3]);
        assert_eq!(white.data(), &[1.0, 1.0, 1.0]);
        let black = decode_ppm(b"P6 1 1 255 \x00\x00\x00").unwrap();
        assert_eq!(black.data(), &[0.0; 3]);
    }

    #[test]
    fn header_comments() {
        let img = decode_ppm(b"P6\n# made by hand\n2 1\n255\n\x00\x00\x00\xff\x80\x00").unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data()[4], 128.0 / 255.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(Error::Decode(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Decode(_))));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00"),
            Err(Error::Decode(_))
        ));
        assert!(matches!(decode_ppm(b""), Err(Error::Decode(_))));
    }

    #[test]
    fn pattern_round_trip() {
        let levels = [0u8, 64, 128, 255, 7, 200, 33, 90, 180, 1, 254, 100];
        let img = Tensor::from_fn([2, 2, 3], |i| levels[i] as f32 / 255.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
