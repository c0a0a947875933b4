//! PNG and binary PPM reading and writing.

use std::fs::File;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use sdn_autograd::Tensor;

use crate::{Error, Result};

/// 8-bit RGB pixels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `b -> 2b/255 - 1`.
pub fn byte_to_unit(b: u8) -> f32 {
    (2.0 * f64::from(b) / 255.0 - 1.0) as f32
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((f64::from(v).clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn decode_png(bytes: &[u8]) -> Result<Rgb8> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Data(format!("png: {e}")))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Data("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Data("png: unexpanded palette".into())),
    };
    let stride = info.line_size;
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels];
        for px in row.chunks(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(Rgb8 { width: w, height: h, pixels })
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data("ppm: truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

/// Binary (P6) PPM with at most 8 bits per sample.
pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Data("ppm: only binary P6 is supported".into()));
    }
    let mut field = |name: &str| -> Result<usize> {
        let t = ppm_token(bytes, &mut pos)?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("ppm: bad {name}")))
    };
    let (w, h, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("ppm: unsupported maxval {maxval}")));
    }
    pos += 1;
    let need = w * h * 3;
    let data = bytes.get(pos..pos + need).ok_or_else(|| Error::Data("ppm: truncated pixel data".into()))?;
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter().map(|&b| ((u32::from(b) * 255 + maxval as u32 / 2) / maxval as u32) as u8).collect()
    };
    Ok(Rgb8 { width: w, height: h, pixels })
}

pub fn read_image(path: &Path) -> Result<Rgb8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        Err(Error::Data(format!("{}: not a PNG or binary PPM", path.display())))
    }
}

/// Converts to `[3, size, size]` in `[-1, 1]`, bilinearly resampling if needed.
pub fn to_tensor(img: &Rgb8, size: usize) -> Result<Tensor<f32>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Data("empty image".into()));
    }
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    let at = |x: usize, y: usize, k: usize| f64::from(byte_to_unit(img.pixels[(y * img.width + x) * 3 + k]));
    let exact = img.width == size && img.height == size;
    for y in 0..size {
        for x in 0..size {
            for k in 0..3 {
                out[k * plane + y * size + x] = if exact {
                    byte_to_unit(img.pixels[(y * size + x) * 3 + k])
                } else {
                    let sx = ((x as f64 + 0.5) * img.width as f64 / size as f64 - 0.5).clamp(0.0, (img.width - 1) as f64);
                    let sy = ((y as f64 + 0.5) * img.height as f64 / size as f64 - 0.5).clamp(0.0, (img.height - 1) as f64);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let top = at(x0, y0, k) * (1.0 - fx) + at(x1, y0, k) * fx;
                    let bot = at(x0, y1, k) * (1.0 - fx) + at(x1, y1, k) * fx;
                    (top * (1.0 - fy) + bot * fy) as f32
                };
            }
        }
    }
    Ok(Tensor::new(&[3, size, size], out)?)
}

/// Writes a `[3, H, W]` image in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Invalid(format!("write_png expects [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for k in 0..3 {
            rgb.push(unit_to_byte(d[k * h * w + i]));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Lays out `[n, 3, H, W]` images side by side.
pub fn tile_row(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Invalid(format!("tile_row expects [n, 3, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let d = images.data();
    let mut out = vec![0f32; 3 * h * w * n];
    for i in 0..n {
        for k in 0..3 {
            for y in 0..h {
                let src = &d[((i * 3 + k) * h + y) * w..][..w];
                out[(k * h + y) * w * n + i * w..][..w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(&[3, h, w * n], out)?)
}
