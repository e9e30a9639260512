//! Raster and map file handling.
//!
//! Images load from binary PNM (`P5` grayscale, `P6` RGB) or 8-bit PNG and
//! are scaled to `[0, 1]`. Masks are single-channel 8-bit files where 255
//! encodes IGNORE; an indexed-color PNG variant exists for inspection.
//! Real-valued maps can be stored losslessly as
//!
//! ```text
//! b"WSEGMAP\0"  u32 version=1  u32 channels  u32 height  u32 width
//! channels*height*width little-endian f64 values
//! ```

use std::cell::Cell;
use std::fs;
use std::io::{BufRead, BufWriter, Read, Seek, SeekFrom};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{minmax_normalize, FeatureMap, LabelImage, IGNORE};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const MAP_MAGIC: &[u8; 8] = b"WSEGMAP\0";
const MAP_VERSION: u32 = 1;

/// On-disk code for IGNORE pixels.
pub const IGNORE_CODE: u8 = 255;

/// Raw 8-bit raster: `channels` is 1 or 3, samples interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<u8>,
}

impl Raster {
    pub fn to_feature_map(&self) -> FeatureMap {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut values = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                values[ch * h * w + p] = self.samples[p * c + ch] as f64 / 255.0;
            }
        }
        FeatureMap::new(c, h, w, values).expect("consistent size")
    }

    pub fn from_feature_map(map: &FeatureMap) -> Result<Self> {
        let (c, h, w) = map.shape();
        if c != 1 && c != 3 {
            return Err(Error::usage(format!("cannot store a {c}-channel image")));
        }
        let mut samples = vec![0u8; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                samples[p * c + ch] = (map.plane(ch)[p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            samples,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---- PNM ----

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse("PNM header", start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse("PNM header", start, format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::parse("PNM header", 0, "missing 'P' magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(Error::parse("PNM header", 1, "only binary P5 and P6 are supported")),
    };
    let mut cur = PnmCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse("PNM header", maxval_at, format!("maxval {maxval} is not 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::parse("PNM header", cur.pos, "expected whitespace before pixel data")),
    }
    let need = channels * width * height;
    let data = &bytes[cur.pos..];
    if data.len() < need {
        return Err(Error::parse(
            "PNM pixel data",
            bytes.len(),
            format!("truncated: {} of {need} sample bytes", data.len()),
        ));
    }
    if data.len() > need {
        return Err(Error::parse("PNM pixel data", cur.pos + need, "trailing bytes"));
    }
    Ok(Raster {
        channels,
        height,
        width,
        samples: data.to_vec(),
    })
}

pub fn encode_pnm(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.samples);
    out
}

// ---- PNG ----

/// Counts consumed bytes so decoder failures can name an offset.
struct CountingReader<'a> {
    inner: &'a [u8],
    pos: &'a Cell<usize>,
}

impl Read for CountingReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let pos = self.pos.get();
        let n = buf.len().min(self.inner.len() - pos);
        buf[..n].copy_from_slice(&self.inner[pos..pos + n]);
        self.pos.set(pos + n);
        Ok(n)
    }
}

impl BufRead for CountingReader<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        Ok(&self.inner[self.pos.get()..])
    }

    fn consume(&mut self, amt: usize) {
        self.pos.set(self.pos.get() + amt);
    }
}

impl Seek for CountingReader<'_> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        let target = match pos {
            SeekFrom::Start(p) => p as i64,
            SeekFrom::End(d) => self.inner.len() as i64 + d,
            SeekFrom::Current(d) => self.pos.get() as i64 + d,
        };
        if target < 0 || target as usize > self.inner.len() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "seek out of range"));
        }
        self.pos.set(target as usize);
        Ok(target as u64)
    }
}

/// With `expand` off, indexed images yield their palette indices.
fn decode_png_raw(bytes: &[u8], expand: bool) -> Result<Raster> {
    let pos = Cell::new(0);
    let reader = CountingReader { inner: bytes, pos: &pos };
    let mut decoder = png::Decoder::new(reader);
    if expand {
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    } else {
        decoder.set_transformations(png::Transformations::IDENTITY);
    }
    let fail = |e: png::DecodingError| Error::parse("PNG", pos.get(), e.to_string());
    let mut reader = decoder.read_info().map_err(fail)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader.next_frame(&mut buf).map_err(fail)?;
    // Reading through IEND rejects files cut after the pixel data.
    reader.finish().map_err(fail)?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::parse("PNG", 0, "only 8-bit samples are supported"));
    }
    buf.truncate(frame.buffer_size());
    let (h, w) = (frame.height as usize, frame.width as usize);
    let (channels, samples) = match frame.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => (1, buf),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks(2).map(|p| p[0]).collect()),
        png::ColorType::Rgba => (3, buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
    };
    Ok(Raster {
        channels,
        height: h,
        width: w,
        samples,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    decode_png_raw(bytes, true)
}

fn encode_png_with(raster: &Raster, palette: Option<Vec<u8>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), raster.width as u32, raster.height as u32);
        enc.set_depth(png::BitDepth::Eight);
        match (raster.channels, palette) {
            (1, Some(p)) => {
                enc.set_color(png::ColorType::Indexed);
                enc.set_palette(p);
            }
            (1, None) => enc.set_color(png::ColorType::Grayscale),
            (3, None) => enc.set_color(png::ColorType::Rgb),
            (c, _) => return Err(Error::usage(format!("cannot encode {c} channels as PNG"))),
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::usage(format!("PNG encoding failed: {e}")))?;
        writer
            .write_image_data(&raster.samples)
            .map_err(|e| Error::usage(format!("PNG encoding failed: {e}")))?;
    }
    Ok(out)
}

pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    encode_png_with(raster, None)
}

// ---- dispatch ----

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        decode_pnm(bytes)
    }
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    decode_raster(&read_file(path)?)
}

pub fn save_raster(path: &Path, raster: &Raster) -> Result<()> {
    let bytes = if is_png(path) {
        encode_png(raster)?
    } else {
        encode_pnm(raster)
    };
    write_file(path, &bytes)
}

/// Loads an image with values scaled to `[0, 1]`. The format is detected
/// from content.
pub fn load_image(path: &Path) -> Result<FeatureMap> {
    Ok(load_raster(path)?.to_feature_map())
}

/// Saves a 1- or 3-channel image, quantized to 8 bits. `.png` paths get
/// PNG, anything else PNM.
pub fn save_image(path: &Path, image: &FeatureMap) -> Result<()> {
    save_raster(path, &Raster::from_feature_map(image)?)
}

// ---- masks ----

fn mask_to_raster(mask: &LabelImage) -> Result<Raster> {
    let samples = mask
        .labels()
        .iter()
        .map(|&c| match c {
            IGNORE => Ok(IGNORE_CODE),
            c if c < IGNORE_CODE as u32 => Ok(c as u8),
            c => Err(Error::usage(format!("label {c} does not fit in a mask file"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Raster {
        channels: 1,
        height: mask.height(),
        width: mask.width(),
        samples,
    })
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelImage> {
    let raster = if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png_raw(bytes, false)?
    } else {
        decode_pnm(bytes)?
    };
    if raster.channels != 1 {
        return Err(Error::parse("mask", 0, "masks must be single-channel"));
    }
    let labels = raster
        .samples
        .iter()
        .map(|&v| if v == IGNORE_CODE { IGNORE } else { v as u32 })
        .collect();
    LabelImage::new(raster.height, raster.width, labels)
}

/// Loads a mask; 255 becomes IGNORE. Grayscale and indexed PNGs and P5
/// files are accepted.
pub fn load_mask(path: &Path) -> Result<LabelImage> {
    decode_mask(&read_file(path)?)
}

pub fn save_mask(path: &Path, mask: &LabelImage) -> Result<()> {
    save_raster(path, &mask_to_raster(mask)?)
}

/// Class colors for the palette variant: black background, evenly spaced
/// saturated hues, white for IGNORE.
pub fn mask_palette() -> Vec<u8> {
    let mut p = vec![0u8; 256 * 3];
    for i in 1..255usize {
        let h = (i as f64 * 0.618_033_988_75).fract() * 6.0;
        let x = 1.0 - (h % 2.0 - 1.0).abs();
        let rgb = match h as u32 {
            0 => [1.0, x, 0.0],
            1 => [x, 1.0, 0.0],
            2 => [0.0, 1.0, x],
            3 => [0.0, x, 1.0],
            4 => [x, 0.0, 1.0],
            _ => [1.0, 0.0, x],
        };
        for c in 0..3 {
            p[i * 3 + c] = (rgb[c] * 220.0) as u8 + 20;
        }
    }
    p[255 * 3..].copy_from_slice(&[255, 255, 255]);
    p
}

/// Writes an indexed-color PNG whose indices are the mask codes.
pub fn save_mask_palette(path: &Path, mask: &LabelImage) -> Result<()> {
    write_file(path, &encode_png_with(&mask_to_raster(mask)?, Some(mask_palette()))?)
}

// ---- real-valued maps ----

/// Min-max normalizes a single-channel map to an 8-bit grayscale image.
pub fn save_map_grayscale(path: &Path, map: &FeatureMap) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::usage("grayscale export needs a single-channel map"));
    }
    save_image(path, &minmax_normalize(map))
}

pub fn encode_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * map.values().len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&MAP_VERSION.to_le_bytes());
    let (c, h, w) = map.shape();
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 8 || &bytes[..8] != MAP_MAGIC {
        return Err(Error::parse("map file", 0, "bad magic"));
    }
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::parse("map file", bytes.len(), "truncated header"))
    };
    let version = u32_at(8)?;
    if version != MAP_VERSION {
        return Err(Error::parse("map file", 8, format!("unsupported version {version}")));
    }
    let (c, h, w) = (u32_at(12)? as usize, u32_at(16)? as usize, u32_at(20)? as usize);
    let n = c * h * w;
    let body = &bytes[24..];
    if body.len() != 8 * n {
        return Err(Error::parse(
            "map file",
            24 + body.len().min(8 * n),
            format!("expected {} value bytes, found {}", 8 * n, body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    FeatureMap::new(c, h, w, values)
}

pub fn save_map(path: &Path, map: &FeatureMap) -> Result<()> {
    write_file(path, &encode_map(map))
}

pub fn load_map(path: &Path) -> Result<FeatureMap> {
    decode_map(&read_file(path)?)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| {
        Error::parse(path.display().to_string(), e.utf8_error().valid_up_to(), "invalid UTF-8")
    })
}
