//! Interchange formats shared with external extractors.
//!
//! * Feature tensors: `CSTF` magic, `u32` version, `u32` ndim, `ndim` x `u32` dims,
//!   then a raw `f32` payload. Everything little-endian.
//! * Label maps and binary masks: 8-bit binary PGM (`P5`).
//! * Mask sets: a directory of PGM files plus `manifest.json` listing them in order.
//! * Images: 8-bit binary PPM (`P6`) or PGM.
//! * Anomaly maps: 16-bit binary PGM plus a JSON sidecar holding the value range.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"CSTF";
pub const TENSOR_VERSION: u32 = 1;

const MASK_MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes, expected \"CSTF\"")]
    BadMagic,
    #[error("unsupported tensor version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension mismatch: header declares {expected} values, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("tensor contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("class index {0} does not fit in an 8-bit label map")]
    TooManyClasses(usize),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense row-major `f32` tensor. Feature maps are `[C, H, W]`; pooled
/// per-crop vectors are `[C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(IoError::DimMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(C, H, W)`; a rank-1 tensor is read as `(C, 1, 1)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c] => Ok((c, 1, 1)),
            &[c, h, w] => Ok((c, h, w)),
            other => Err(IoError::UnsupportedFormat(format!(
                "expected a rank-1 or rank-3 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
            return Err(IoError::BadMagic);
        }
        let mut cursor = 4;
        let mut next_u32 = || -> Result<u32> {
            let chunk = bytes
                .get(cursor..cursor + 4)
                .ok_or_else(|| IoError::UnsupportedFormat("truncated tensor header".into()))?;
            cursor += 4;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
        };
        let version = next_u32()?;
        if version != TENSOR_VERSION {
            return Err(IoError::UnsupportedVersion(version));
        }
        let ndim = next_u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(IoError::UnsupportedFormat(format!("ndim {ndim} out of range")));
        }
        let shape = (0..ndim)
            .map(|_| next_u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let payload = &bytes[12 + 4 * ndim..];
        let expected: usize = shape.iter().product();
        if payload.len() != expected * 4 {
            return Err(IoError::DimMismatch {
                expected,
                found: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        FeatureTensor::new(shape, data)
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    FeatureTensor::decode(&bytes)
}

pub fn write_tensor(tensor: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(io_err(path))
}

/// Per-pixel class indices; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(IoError::UnsupportedFormat("label map dimensions must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(IoError::DimMismatch {
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Builds a map from wide class indices, rejecting anything above 255.
    pub fn from_indices(width: usize, height: usize, indices: &[usize]) -> Result<Self> {
        let pixels = indices
            .iter()
            .map(|&k| u8::try_from(k).map_err(|_| IoError::TooManyClasses(k)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.pixels[y * self.width + x] = class;
    }

    pub fn max_class(&self) -> u8 {
        self.pixels.iter().copied().max().unwrap_or(0)
    }
}

/// 8-bit image, interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(IoError::UnsupportedFormat(format!("{channels} channels")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(IoError::DimMismatch {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: usize, y: usize, value: &[u8]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped at the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f32]) {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let p = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * self.channels + c] as f32;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
    }
}

struct Netpbm<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    payload: &'a [u8],
}

fn parse_netpbm(bytes: &[u8]) -> Result<Netpbm<'_>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(IoError::UnsupportedFormat("not a binary netpbm file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(IoError::UnsupportedFormat("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IoError::UnsupportedFormat("bad netpbm header field".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(IoError::UnsupportedFormat("missing header terminator".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(IoError::UnsupportedFormat(format!(
            "invalid header {width}x{height} maxval {maxval}"
        )));
    }
    Ok(Netpbm {
        magic,
        width,
        height,
        maxval,
        payload: &bytes[pos + 1..],
    })
}

fn netpbm_header(magic: &str, width: usize, height: usize, maxval: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn encode_label_map(map: &LabelMap) -> Vec<u8> {
    let mut out = netpbm_header("P5", map.width, map.height, 255);
    out.extend_from_slice(&map.pixels);
    out
}

pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap> {
    let pnm = parse_netpbm(bytes)?;
    if &pnm.magic != b"P5" || pnm.maxval > 255 {
        return Err(IoError::UnsupportedFormat(
            "label maps must be 8-bit single-channel binary PGM (P5)".into(),
        ));
    }
    let n = pnm.width * pnm.height;
    if pnm.payload.len() != n {
        return Err(IoError::DimMismatch {
            expected: n,
            found: pnm.payload.len(),
        });
    }
    LabelMap::new(pnm.width, pnm.height, pnm.payload.to_vec())
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_label_map(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_label_map(map)).map_err(io_err(path))
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut out = netpbm_header(magic, image.width, image.height, 255);
    out.extend_from_slice(&image.data);
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let pnm = parse_netpbm(bytes)?;
    let channels = match &pnm.magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(IoError::UnsupportedFormat("expected P5 or P6".into())),
    };
    if pnm.maxval > 255 {
        return Err(IoError::UnsupportedFormat("16-bit images are not supported".into()));
    }
    let n = pnm.width * pnm.height * channels;
    if pnm.payload.len() != n {
        return Err(IoError::DimMismatch {
            expected: n,
            found: pnm.payload.len(),
        });
    }
    Image::new(pnm.width, pnm.height, channels, pnm.payload.to_vec())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_image(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image)).map_err(io_err(path))
}

/// Binary masks travel as PGM with 0 / 255.
pub fn encode_mask(width: usize, height: usize, bits: &[bool]) -> Vec<u8> {
    let mut out = netpbm_header("P5", width, height, 255);
    out.extend(bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let map = decode_label_map(bytes)?;
    let bits = map.pixels.iter().map(|&p| p != 0).collect();
    Ok((map.width, map.height, bits))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskManifest {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<String>,
}

/// Writes masks as `mask_NNN.pgm` plus `manifest.json` into `dir`.
pub fn write_mask_dir(
    dir: impl AsRef<Path>,
    width: usize,
    height: usize,
    masks: &[Vec<bool>],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::with_capacity(masks.len());
    for (i, bits) in masks.iter().enumerate() {
        if bits.len() != width * height {
            return Err(IoError::DimMismatch {
                expected: width * height,
                found: bits.len(),
            });
        }
        let name = format!("mask_{i:03}.pgm");
        let path = dir.join(&name);
        fs::write(&path, encode_mask(width, height, bits)).map_err(io_err(&path))?;
        names.push(name);
    }
    let manifest = MaskManifest {
        width,
        height,
        masks: names,
    };
    write_json(dir.join(MASK_MANIFEST), &manifest)
}

pub fn read_mask_dir(dir: impl AsRef<Path>) -> Result<(usize, usize, Vec<Vec<bool>>)> {
    let dir = dir.as_ref();
    let manifest: MaskManifest = read_json(dir.join(MASK_MANIFEST))?;
    let mut masks = Vec::with_capacity(manifest.masks.len());
    for name in &manifest.masks {
        let path = dir.join(name);
        let (w, h, bits) = decode_mask(&fs::read(&path).map_err(io_err(&path))?)?;
        if (w, h) != (manifest.width, manifest.height) {
            return Err(IoError::Manifest(format!(
                "{name} is {w}x{h}, manifest says {}x{}",
                manifest.width, manifest.height
            )));
        }
        masks.push(bits);
    }
    Ok((manifest.width, manifest.height, masks))
}

/// Range metadata written next to a 16-bit anomaly map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapRange {
    pub min: f64,
    pub max: f64,
}

/// Quantizes `values` linearly onto 0..=65535 and writes a P5 PGM (big-endian
/// samples, as netpbm requires) plus `<path>.json` with the range.
pub fn write_map16(
    width: usize,
    height: usize,
    values: &[f64],
    path: impl AsRef<Path>,
) -> Result<MapRange> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(IoError::DimMismatch {
            expected: width * height,
            found: values.len(),
        });
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = netpbm_header("P5", width, height, 65535);
    for &v in values {
        let q = if span > 0.0 {
            ((v - min) / span * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(io_err(path))?;
    let range = MapRange { min, max };
    write_json(range_path(path), &range)?;
    Ok(range)
}

/// Reads a map written by [`write_map16`], rescaled through its JSON range.
pub fn read_map16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let pnm = parse_netpbm(&bytes)?;
    if &pnm.magic != b"P5" || pnm.maxval != 65535 {
        return Err(IoError::UnsupportedFormat("expected a 16-bit P5 map".into()));
    }
    let n = pnm.width * pnm.height;
    if pnm.payload.len() != 2 * n {
        return Err(IoError::DimMismatch {
            expected: n,
            found: pnm.payload.len() / 2,
        });
    }
    let range: MapRange = read_json(range_path(path))?;
    let span = range.max - range.min;
    let values = pnm
        .payload
        .chunks_exact(2)
        .map(|c| range.min + u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0 * span)
        .collect();
    Ok((pnm.width, pnm.height, values))
}

fn range_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| IoError::Manifest(e.to_string()))?;
    file.write_all(b"\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Manifest(format!("{}: {e}", path.display())))
}
