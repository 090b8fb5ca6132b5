//! Binary PGM (P5) reading and writing.

use std::io::Write;
use std::path::Path;

use crate::error::{MrlrError, Result};
use crate::image::Image;

fn malformed(msg: impl Into<String>) -> MrlrError {
    MrlrError::Format(format!("pgm: {}", msg.into()))
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P2") => return Err(malformed("ascii P2 is not supported")),
        Some(m) => return Err(malformed(format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
        None => return Err(malformed("missing magic")),
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments may precede each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_start: pos,
    })
}

/// Decodes a P5 image; samples are divided by maxval into `[0, 1]`.
pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let count = h
        .width
        .checked_mul(h.height)
        .ok_or_else(|| malformed("image too large"))?;
    let sample_bytes = if h.maxval > 255 { 2 } else { 1 };
    let payload = &bytes[h.data_start..];
    if payload.len() < count * sample_bytes {
        return Err(malformed(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            count * sample_bytes
        )));
    }
    let maxval = h.maxval as f64;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let raw = if sample_bytes == 2 {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32
        } else {
            payload[i] as u32
        };
        if raw > h.maxval {
            return Err(malformed(format!("sample {raw} exceeds maxval {}", h.maxval)));
        }
        data.push(raw as f64 / maxval);
    }
    Image::new(h.width, h.height, data)
}

/// 8-bit sample for an intensity in `[0, 1]`, rounded half to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encodes an image as P5 with maxval 255.
pub fn write_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    let bytes = super::read_file(path)?;
    read_pgm(&bytes).map_err(|e| match e {
        MrlrError::Format(msg) => MrlrError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&write_pgm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_eight_bit_example() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let img = read_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn decodes_sixteen_bit_big_endian() {
        let mut bytes = b"P5\n# comment\n2 1\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x01, 0x00]);
        let img = read_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 256.0 / 65535.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cases: [&[u8]; 7] = [
            b"P2 2 2 255\n0 1 2 3",
            b"P6 1 1 255\n\0\0\0",
            b"P5 2 2 255\n\0\0\0",
            b"P5 2 x 255\n",
            b"P5 0 2 255\n",
            b"P5 1 1 70000\n\0\0",
            b"P5 1 1 7\n\x09",
        ];
        for bytes in cases {
            assert!(matches!(read_pgm(bytes), Err(MrlrError::Format(_))), "{:?}", String::from_utf8_lossy(bytes));
        }
    }

    #[test]
    fn writer_rounds_half_to_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(2.5 / 255.0), 2);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        let img = Image::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(write_pgm(&img), b"P5\n3 1\n255\n\x00\x80\xff".to_vec());
    }

    proptest! {
        #[test]
        fn eight_bit_payload_roundtrips(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let payload: Vec<u8> = (0..w * h).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) as u8).collect();
            let mut bytes = format!("P5 {w} {h} 255\n").into_bytes();
            bytes.extend(&payload);
            let written = write_pgm(&read_pgm(&bytes).unwrap());
            prop_assert_eq!(&written[written.len() - payload.len()..], &payload[..]);
        }
    }
}
