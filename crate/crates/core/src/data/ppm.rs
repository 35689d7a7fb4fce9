//! Binary PPM (`P6`) codec. Pixels are exchanged as `[3 x H x W]` tensors
//! with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header_error(msg: impl Into<String>) -> Error {
    Error::data(format!("malformed PPM header: {}", msg.into()))
}

/// Splits the header into its four tokens and returns the offset of the
/// first raster byte.
fn parse_header(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(header_error("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(header_error("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(header_error("expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_error("number out of range"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(header_error("missing separator before raster"));
    }
    Ok((fields, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let ([w, h, maxval], offset) = parse_header(bytes)?;
    if w == 0 || h == 0 {
        return Err(header_error("zero dimension"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(header_error(format!("maxval {maxval} outside 1..=65535")));
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let raster = &bytes[offset..];
    let need = w * h * 3 * bps;
    if raster.len() < need {
        return Err(Error::data(format!("PPM raster truncated: {} of {need} bytes", raster.len())));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            let k = (i * 3 + c) * bps;
            let v = if bps == 1 {
                raster[k] as f64
            } else {
                u16::from_be_bytes([raster[k], raster[k + 1]]) as f64
            };
            data[c * w * h + i] = (v / scale).min(1.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// 8-bit encoding; values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let px = image.data();
    out.reserve(3 * w * h);
    for i in 0..w * h {
        for c in 0..3 {
            let v = px[c * w * h + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    decode_ppm(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1 # width height\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_headers() {
        assert!(decode_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n0\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn round_trip_within_quantization() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let img = Tensor::new(vec![3, 4, 5], data).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
