//! 8-bit raster IO: binary PGM/PPM always, PNG with the `png` feature.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit pixels with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, channels: 1, data }
    }

    /// Value of channel `c` at `(x, y)`; gray rasters answer every channel.
    pub fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        let c = if self.channels == 1 { 0 } else { c };
        self.data[(y * self.width + x) * self.channels + c]
    }
}

pub const SUPPORTED_EXTENSIONS: &[&str] = &["pgm", "ppm", "pnm", "png"];

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(path, &bytes);
    }
    decode_pnm(path, &bytes)
}

/// Parses binary `P5` (gray) and `P6` (RGB) files with maxval ≤ 255.
pub fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let bad = |msg: &str| Error::format(path, msg);
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("not a binary PGM/PPM file")),
    };
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
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let n = width * height * channels;
    let payload = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated pixel data"))?;
    let data = if maxval == 255 {
        payload.to_vec()
    } else {
        payload.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect()
    };
    Ok(Raster { width, height, channels, data })
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn write_pnm(path: &Path, r: &Raster) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pnm(r)).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn decode_png(path: &Path, bytes: &[u8]) -> Result<Raster> {
    use png::{ColorType, Transformations};
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::format(path, "unexpanded palette")),
    };
    let keep = if src_channels >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(w * h * keep);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * src_channels];
        for px in row.chunks(src_channels) {
            data.extend_from_slice(&px[..keep]);
        }
    }
    Ok(Raster { width: w, height: h, channels: keep, data })
}

#[cfg(not(feature = "png"))]
fn decode_png(path: &Path, _bytes: &[u8]) -> Result<Raster> {
    Err(Error::format(path, "PNG support is disabled in this build"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_with_comment() {
        let r = Raster { width: 2, height: 1, channels: 3, data: vec![1, 2, 3, 250, 251, 252] };
        let bytes = encode_pnm(&r);
        assert_eq!(decode_pnm(Path::new("x.ppm"), &bytes).unwrap(), r);
        let commented = b"P5\n# made by hand\n2 2\n255\n\x00\xff\x7f\x80";
        let g = decode_pnm(Path::new("m.pgm"), commented).unwrap();
        assert_eq!(g.data, vec![0, 255, 127, 128]);
    }

    #[test]
    fn pnm_errors_are_named() {
        let e = decode_pnm(Path::new("bad.pgm"), b"P5\n2 2\n255\n\x00").unwrap_err();
        assert!(e.to_string().contains("bad.pgm") && e.to_string().contains("truncated"));
        assert!(decode_pnm(Path::new("x"), b"P2\n1 1\n255\n0").is_err());
    }
}
