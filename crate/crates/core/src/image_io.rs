//! 8-bit RGB image files (PNG and binary PPM) plus a float PFM sidecar.
//!
//! Images are `[1, 3, H, W]` tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Reads a PNG or P6 file, chosen by its leading bytes.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else if bytes.starts_with(b"PF") {
        decode_pfm(bytes, path)
    } else {
        Err(Error::UnsupportedImage {
            path: path.into(),
            msg: "expected PNG, binary PPM (P6) or PFM".into(),
        })
    }
}

/// Writes by extension: `.png`, `.ppm` or `.pfm`. PNG and PPM are quantized to 8 bits.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "ppm" => encode_ppm(img)?,
        "pfm" => encode_pfm(img)?,
        _ => {
            return Err(Error::UnsupportedImage {
                path: path.into(),
                msg: format!("unknown extension {ext:?}"),
            })
        }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round-trips every value through 8-bit storage.
pub fn quantized(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| quantize(v) as f32 / 255.0)
}

fn rgb_dims(img: &Tensor<f32>) -> Result<(usize, usize)> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape("write_image", img.shape(), &[1, 3, h, w]));
    }
    Ok((h, w))
}

fn interleaved(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = rgb_dims(img)?;
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok((h, w, out))
}

fn planar(h: usize, w: usize, rgb: &[u8]) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = rgb[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("planar shape")
}

fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, rgb) = interleaved(img)?;
    let buf = RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized from dims");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::pre("encode_png", e.to_string()))?;
    Ok(out.into_inner())
}

/// Walks the chunk list so a damaged file is reported at the first bad chunk.
fn png_chunk_walk(bytes: &[u8], path: &Path) -> Result<()> {
    let mut pos = PNG_SIGNATURE.len();
    loop {
        if pos + 8 > bytes.len() {
            return Err(parse_err(path, pos, "truncated chunk header"));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let end = pos + 12 + len;
        if end > bytes.len() {
            return Err(parse_err(path, pos, "truncated chunk"));
        }
        if kind == b"IEND" {
            return Ok(());
        }
        pos = end;
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    png_chunk_walk(bytes, path)?;
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| parse_err(path, PNG_SIGNATURE.len(), &e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(planar(h as usize, w as usize, rgb.as_raw()))
}

fn parse_err(path: &Path, offset: usize, msg: &str) -> Error {
    Error::ImageParse {
        path: path.into(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Header tokenizer shared by PPM and PFM: whitespace-separated fields, `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Header<'a> {
    fn token(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let bytes = self.bytes;
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(parse_err(self.path, self.pos, &format!("missing {what}"))),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        let s = std::str::from_utf8(&bytes[start..self.pos])
            .map_err(|_| parse_err(self.path, start, &format!("{what} is not ASCII")))?;
        Ok((start, s))
    }

    fn number<N: std::str::FromStr>(&mut self, what: &str) -> Result<(usize, N)> {
        let (at, s) = self.token(what)?;
        let v = s
            .parse()
            .map_err(|_| parse_err(self.path, at, &format!("bad {what} {s:?}")))?;
        Ok((at, v))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(parse_err(self.path, self.pos, "header not terminated")),
        }
    }
}

fn positive_dims(hd: &mut Header) -> Result<(usize, usize)> {
    let (at, w): (usize, usize) = hd.number("width")?;
    let (_, h): (usize, usize) = hd.number("height")?;
    if w == 0 || h == 0 {
        return Err(parse_err(hd.path, at, "zero image dimension"));
    }
    Ok((h, w))
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, rgb) = interleaved(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut hd = Header { bytes, pos: 0, path };
    let (_, magic) = hd.token("magic")?;
    if magic != "P6" {
        return Err(parse_err(path, 0, "not a binary PPM"));
    }
    let (h, w) = positive_dims(&mut hd)?;
    let (_, maxval): (usize, u32) = hd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedImage {
            path: path.into(),
            msg: format!("PPM maxval {maxval}, only 255 is supported"),
        });
    }
    let start = hd.end()?;
    let need = 3 * h * w;
    let have = bytes.len() - start;
    if have < need {
        return Err(parse_err(path, bytes.len(), &format!("pixel data truncated: {have} of {need} bytes")));
    }
    Ok(planar(h, w, &bytes[start..start + need]))
}

/// Little-endian PFM, rows stored bottom to top.
pub fn encode_pfm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(img)?;
    let plane = h * w;
    let d = img.data();
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                out.extend_from_slice(&d[c * plane + y * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut hd = Header { bytes, pos: 0, path };
    let (_, magic) = hd.token("magic")?;
    if magic != "PF" {
        return Err(Error::UnsupportedImage {
            path: path.into(),
            msg: "only colour PFM is supported".into(),
        });
    }
    let (h, w) = positive_dims(&mut hd)?;
    let (at, scale): (usize, f32) = hd.number("scale")?;
    if scale >= 0.0 {
        return Err(Error::UnsupportedImage {
            path: path.into(),
            msg: format!("big-endian PFM (scale at byte {at})"),
        });
    }
    let start = hd.end()?;
    let need = 12 * h * w;
    if bytes.len() - start < need {
        return Err(parse_err(path, bytes.len(), "float data truncated"));
    }
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let mut chunks = bytes[start..start + need].chunks_exact(4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                let b = chunks.next().unwrap();
                data[c * plane + y * w + x] = f32::from_le_bytes(b.try_into().unwrap());
            }
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}
