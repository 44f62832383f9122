//! Image containers and codecs: 8-bit PNG and binary PPM/PGM for display
//! images, Radiance RGBE for radiance maps, and the luminance conversion
//! shared by every pipeline.

use std::io::{BufRead, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Rec. 601 luma weights for R, G and B.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Rec. 601 luma weights in thousandths, for exact integer arithmetic on 8-bit samples.
const LUMA_MILLI: [u32; 3] = [299, 587, 114];

/// 8-bit display image with interleaved gray or RGB samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl LdrImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images have 1 or 3 channels, not {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!("{} samples for a {width}x{height}x{channels} image", data.len())));
        }
        Ok(LdrImage { width, height, channels, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Linear radiance map with interleaved RGB samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} radiance values for a {width}x{height} RGB map", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("radiance must be finite and non-negative, found {v}")));
        }
        Ok(HdrImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-pixel luminance.
    pub fn luminance(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| luminance_rgb([p[0], p[1], p[2]])).collect()
    }

    /// Ratio of the largest to the smallest positive luminance.
    pub fn dynamic_range(&self) -> f64 {
        let (lo, hi) = self
            .luminance()
            .into_iter()
            .filter(|&l| l > 0.0)
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), l| (lo.min(l as f64), hi.max(l as f64)));
        if hi > 0.0 {
            hi / lo
        } else {
            1.0
        }
    }

    /// 1x3xHxW tensor of radiance values.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| self.data[(y * w + x) * 3 + c])
    }
}

pub fn luminance_rgb([r, g, b]: [f32; 3]) -> f32 {
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

/// Luminance of 8-bit RGB samples, evaluated exactly in integers before one
/// final division so iso-luminant colours give bit-identical results.
pub fn luminance_u8([r, g, b]: [u8; 3]) -> f64 {
    let milli = LUMA_MILLI[0] * r as u32 + LUMA_MILLI[1] * g as u32 + LUMA_MILLI[2] * b as u32;
    milli as f64 / 1000.0
}

/// Luminance of every pixel of a 3-channel tensor, as an Nx1xHxW tensor.
pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::Shape(format!("luminance needs 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        luminance_rgb([image.at(n, 0, y, x), image.at(n, 1, y, x), image.at(n, 2, y, x)])
    }))
}

/// Luminance image of an 8-bit RGB image, rounded half away from zero.
pub fn luminance_image(image: &LdrImage) -> Result<LdrImage> {
    if image.channels != 3 {
        return Err(Error::Shape(format!("luminance needs 3 channels, got {}", image.channels)));
    }
    let data =
        image.data.chunks_exact(3).map(|p| luminance_u8([p[0], p[1], p[2]]).round().clamp(0.0, 255.0) as u8).collect();
    LdrImage::new(image.width, image.height, 1, data)
}

/// Samples as reals in `[0, 255]`, shaped 1xCxHxW.
pub fn to_tensor(image: &LdrImage) -> Tensor {
    let (w, c) = (image.width, image.channels);
    Tensor::from_fn(Shape::new(1, c, image.height, w), |_, ch, y, x| image.data[(y * w + x) * c + ch] as f32)
}

/// Quantises one value: clamp to `[0, 255]`, then round half away from zero.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

/// Converts batch item 0 of a 1- or 3-channel tensor back to 8-bit samples.
pub fn from_tensor(tensor: &Tensor) -> Result<LdrImage> {
    let s = tensor.shape();
    if s.c != 1 && s.c != 3 {
        return Err(Error::Shape(format!("cannot store a {}-channel tensor as an image", s.c)));
    }
    if s.n != 1 {
        return Err(Error::Shape(format!("expected a single image, got batch of {}", s.n)));
    }
    let mut data = Vec::with_capacity(s.len());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                data.push(quantize(tensor.at(0, c, y, x)));
            }
        }
    }
    LdrImage::new(s.w, s.h, s.c, data)
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Loads a PNG or binary PPM/PGM image.
pub fn load_image(path: impl AsRef<Path>) -> Result<LdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(&bytes)
    } else {
        Err(Error::Format(format!("{}: neither PNG nor binary PPM/PGM", path.display())))
    }
}

/// Saves as PNG, or as PPM/PGM when the extension is `.ppm`, `.pgm` or `.pnm`.
pub fn save_image(image: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "ppm" | "pgm" | "pnm" => encode_pnm(image),
        _ => encode_png(image)?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_png(bytes: &[u8]) -> Result<LdrImage> {
    let fail = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("png: unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::Format(format!("png: unsupported colour type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * keep);
    for row in buf.chunks_exact(info.line_size).take(h) {
        for px in row[..w * channels].chunks_exact(channels) {
            data.extend_from_slice(&px[..keep]);
        }
    }
    LdrImage::new(w, h, keep, data)
}

pub fn encode_png(image: &LdrImage) -> Result<Vec<u8>> {
    let fail = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        encoder.set_color(if image.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(fail)?;
        writer.write_image_data(&image.data).map_err(fail)?;
        writer.finish().map_err(fail)?;
    }
    Ok(out)
}

/// Splits the next whitespace-delimited header token, skipping `#` comments.
fn pnm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("pnm: header ends early".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pnm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pnm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Format(format!("pnm: malformed {what} `{}`", String::from_utf8_lossy(tok))))
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<LdrImage> {
    let mut pos = 0;
    let channels = match pnm_token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(Error::Format(format!("pnm: unsupported magic `{}`", String::from_utf8_lossy(other)))),
    };
    let width = pnm_number(bytes, &mut pos, "width")?;
    let height = pnm_number(bytes, &mut pos, "height")?;
    let maxval = pnm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("pnm: unsupported bit depth (maxval {maxval}, only 255 is supported)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("pnm: missing separator before pixel data".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("pnm: dimensions overflow".into()))?;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("pnm: truncated payload ({} of {need} bytes)", bytes.len() - pos)))?;
    LdrImage::new(width, height, channels, payload.to_vec())
}

pub fn encode_pnm(image: &LdrImage) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Loads a Radiance RGBE file.
pub fn load_hdr(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hdr(&bytes)
}

pub fn save_hdr(image: &HdrImage, path: impl AsRef<Path>, rle: bool) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_hdr(image, rle)).map_err(|e| Error::io(path, e))
}

/// Radiance of one RGBE pixel: `(m + 0.5) / 256 * 2^(e - 128)` per channel.
pub fn rgbe_to_rgb([r, g, b, e]: [u8; 4]) -> [f32; 3] {
    if e == 0 {
        return [0.0; 3];
    }
    let scale = 2f64.powi(e as i32 - 136);
    [r, g, b].map(|m| ((m as f64 + 0.5) * scale) as f32)
}

/// Shared-exponent encoding of one RGB radiance triple.
pub fn rgb_to_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let v = rgb.iter().copied().fold(0.0f32, f32::max) as f64;
    if v < 1e-32 {
        return [0; 4];
    }
    // v = mant * 2^exp with mant in [0.5, 1)
    let mut exp = v.log2().floor() as i32 + 1;
    let mut mant = v / 2f64.powi(exp);
    if mant >= 1.0 {
        mant /= 2.0;
        exp += 1;
    } else if mant < 0.5 {
        mant *= 2.0;
        exp -= 1;
    }
    if exp + 128 > 255 {
        return [255, 255, 255, 255];
    }
    if exp + 128 < 1 {
        return [0; 4];
    }
    let scale = mant * 256.0 / v;
    let [r, g, b] = rgb.map(|c| ((c as f64 * scale) as u32).min(255) as u8);
    [r, g, b, (exp + 128) as u8]
}

fn hdr_header_line(cursor: &mut Cursor<&[u8]>) -> Result<String> {
    let mut line = Vec::new();
    cursor.read_until(b'\n', &mut line).map_err(|e| Error::Format(format!("hdr: {e}")))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("hdr: header is truncated".into()));
    }
    line.pop();
    Ok(String::from_utf8_lossy(&line).into_owned())
}

/// Decodes a Radiance RGBE image with flat, old-style run-length or adaptive
/// run-length scanlines. Only the standard `-Y H +X W` orientation is read.
pub fn decode_hdr(bytes: &[u8]) -> Result<HdrImage> {
    let mut cursor = Cursor::new(bytes);
    let signature = hdr_header_line(&mut cursor)?;
    if !(signature.starts_with("#?RADIANCE") || signature.starts_with("#?RGBE")) {
        return Err(Error::Format(format!("hdr: bad signature `{signature}`")));
    }
    loop {
        let line = hdr_header_line(&mut cursor)?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            match fmt.trim() {
                "32-bit_rle_rgbe" => {}
                "32-bit_rle_xyze" => return Err(Error::Format("hdr: XYZE radiance files are not supported".into())),
                other => return Err(Error::Format(format!("hdr: unknown pixel format `{other}`"))),
            }
        }
    }
    let resolution = hdr_header_line(&mut cursor)?;
    let fields: Vec<&str> = resolution.split_whitespace().collect();
    let (height, width) = match fields.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>().map_err(|_| Error::Format(format!("hdr: bad height `{h}`")))?,
            w.parse::<usize>().map_err(|_| Error::Format(format!("hdr: bad width `{w}`")))?,
        ),
        _ => return Err(Error::Format(format!("hdr: unsupported orientation `{resolution}`"))),
    };
    if width == 0 || height == 0 {
        return Err(Error::Format("hdr: empty image".into()));
    }

    let mut data = &bytes[cursor.position() as usize..];
    let mut pixels = Vec::with_capacity(width * height * 3);
    let mut scan = vec![[0u8; 4]; width];
    for row in 0..height {
        read_scanline(&mut data, &mut scan).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("hdr: scanline {row}: {msg}")),
            other => other,
        })?;
        pixels.extend(scan.iter().flat_map(|&p| rgbe_to_rgb(p)));
    }
    HdrImage::new(width, height, pixels)
}

fn take<'a>(data: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if data.len() < n {
        return Err(Error::Format("unexpected end of pixel data".into()));
    }
    let (head, tail) = data.split_at(n);
    *data = tail;
    Ok(head)
}

fn read_scanline(data: &mut &[u8], scan: &mut [[u8; 4]]) -> Result<()> {
    let width = scan.len();
    let first: [u8; 4] = take(data, 4)?.try_into().expect("four bytes");
    let adaptive = (8..=0x7fff).contains(&width) && first[0] == 2 && first[1] == 2 && first[2] & 0x80 == 0;
    if !adaptive {
        return read_flat_scanline(data, first, scan);
    }
    let encoded = ((first[2] as usize) << 8) | first[3] as usize;
    if encoded != width {
        return Err(Error::Format(format!("RLE desync: run header says width {encoded}, image is {width}")));
    }
    for channel in 0..4 {
        let mut x = 0;
        while x < width {
            let count = take(data, 1)?[0] as usize;
            if count > 128 {
                let run = count - 128;
                if x + run > width {
                    return Err(Error::Format("RLE desync: run overflows the scanline".into()));
                }
                let v = take(data, 1)?[0];
                scan[x..x + run].iter_mut().for_each(|p| p[channel] = v);
                x += run;
            } else {
                if count == 0 || x + count > width {
                    return Err(Error::Format("RLE desync: bad literal count".into()));
                }
                for (p, &v) in scan[x..x + count].iter_mut().zip(take(data, count)?) {
                    p[channel] = v;
                }
                x += count;
            }
        }
    }
    Ok(())
}

/// Flat pixels, honouring old-style `(1, 1, 1, n)` repeat markers.
fn read_flat_scanline(data: &mut &[u8], first: [u8; 4], scan: &mut [[u8; 4]]) -> Result<()> {
    let mut x = 0;
    let mut shift = 0;
    let mut pixel = first;
    loop {
        if pixel[..3] == [1, 1, 1] {
            if x == 0 {
                return Err(Error::Format("RLE desync: repeat marker at scanline start".into()));
            }
            let count = (pixel[3] as usize) << shift;
            if x + count > scan.len() {
                return Err(Error::Format("RLE desync: repeat overflows the scanline".into()));
            }
            let prev = scan[x - 1];
            scan[x..x + count].fill(prev);
            x += count;
            shift += 8;
        } else {
            scan[x] = pixel;
            x += 1;
            shift = 0;
        }
        if x == scan.len() {
            return Ok(());
        }
        pixel = take(data, 4)?.try_into().expect("four bytes");
    }
}

/// Encodes a radiance map as RGBE, with adaptive run-length scanlines when
/// `rle` is set and the width allows it.
pub fn encode_hdr(image: &HdrImage, rle: bool) -> Vec<u8> {
    let mut out =
        format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {} +X {}\n", image.height, image.width).into_bytes();
    let w = image.width;
    for row in image.data.chunks_exact(w * 3) {
        let scan: Vec<[u8; 4]> = row.chunks_exact(3).map(|p| rgb_to_rgbe([p[0], p[1], p[2]])).collect();
        if rle && (8..=0x7fff).contains(&w) {
            out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for channel in 0..4 {
                let values: Vec<u8> = scan.iter().map(|p| p[channel]).collect();
                encode_rle_channel(&values, &mut out);
            }
        } else {
            scan.iter().for_each(|p| out.extend_from_slice(p));
        }
    }
    out
}

fn encode_rle_channel(values: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let run_at = |i: usize| values[i..].iter().take(127).take_while(|&&v| v == values[i]).count();
    let mut i = 0;
    while i < values.len() {
        let run = run_at(i);
        if run >= MIN_RUN {
            out.extend_from_slice(&[128 + run as u8, values[i]]);
            i += run;
            continue;
        }
        let start = i;
        while i < values.len() && i - start < 128 && run_at(i) < MIN_RUN {
            i += 1;
        }
        out.push((i - start) as u8);
        out.extend_from_slice(&values[start..i]);
    }
}
