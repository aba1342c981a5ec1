//! File formats: the SAFR tensor container and PNG conventions for images and masks.
//!
//! SAFR layout (all integers little-endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `S A F R`                        |
//! | 2     | version, u16 = 1                       |
//! | 1     | dtype, 0 = f32                         |
//! | 1     | number of dimensions `n`               |
//! | 4·n   | each dimension as u32                  |
//! | 4·∏d  | row-major f32 data                     |

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Heatmap, Image, PredictionMap, SourcePartition};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const SAFR_MAGIC: [u8; 4] = *b"SAFR";
pub const SAFR_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Raw SAFR payload.
#[derive(Clone, Debug, PartialEq)]
pub struct SafrTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn encode_safr(dims: &[u32], data: &[f32]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().map(|&d| d as usize).product();
    if count != data.len() {
        return Err(Error::Argument(format!(
            "SAFR dims {dims:?} describe {count} values, got {}",
            data.len()
        )));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::Argument("too many SAFR dimensions".into()));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&SAFR_MAGIC);
    out.extend_from_slice(&SAFR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_safr(bytes: &[u8]) -> Result<SafrTensor> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != SAFR_MAGIC {
        return Err(Error::Format("missing SAFR magic".into()));
    }
    let version = cur.u16()?;
    if version != SAFR_VERSION {
        return Err(Error::Format(format!("unsupported SAFR version {version}")));
    }
    let dtype = cur.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported SAFR dtype {dtype}")));
    }
    let ndims = cur.u8()? as usize;
    let dims = (0..ndims).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Format("SAFR dimensions overflow".into()))?;
    let raw = cur.take(count.checked_mul(4).ok_or_else(|| Error::Format("SAFR size overflow".into()))?)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after SAFR data", cur.remaining())));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(SafrTensor { dims, data })
}

pub fn write_safr(path: &Path, dims: &[u32], data: &[f32]) -> Result<()> {
    let bytes = encode_safr(dims, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_safr(path: &Path) -> Result<SafrTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_safr(&bytes).map_err(|e| with_path(e, path))
}

pub fn write_prediction(map: &PredictionMap, path: &Path) -> Result<()> {
    write_safr(path, &[map.height() as u32, map.width() as u32], map.data())
}

pub fn read_prediction(path: &Path) -> Result<PredictionMap> {
    let t = read_safr(path)?;
    let (h, w) = two_dims(&t, path)?;
    PredictionMap::new(h, w, t.data).map_err(|e| with_path(e, path))
}

pub fn write_heatmap(map: &Heatmap, path: &Path) -> Result<()> {
    write_safr(path, &[map.height() as u32, map.width() as u32], map.data())
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    let t = read_safr(path)?;
    let (h, w) = two_dims(&t, path)?;
    Heatmap::new(h, w, t.data).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn two_dims(t: &SafrTensor, path: &Path) -> Result<(usize, usize)> {
    match t.dims.as_slice() {
        [h, w] => Ok((*h as usize, *w as usize)),
        other => Err(Error::Format(format!(
            "{}: expected a 2-D map, found dims {other:?}",
            path.display()
        ))),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

/// How pixel values of a mask PNG are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskConvention {
    /// 0 → 0, 255 → 1, anything else rejected.
    Binary,
    /// Pixel value is the source index; 255 is reserved.
    Partition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskData {
    Binary(BinaryMask),
    Partition(SourcePartition),
}

/// Reads an 8-bit grayscale or indexed PNG. Indexed images yield raw palette indices.
pub fn read_mask_png(path: &Path, convention: MaskConvention) -> Result<MaskData> {
    let (h, w, raw) = read_gray8(path)?;
    match convention {
        MaskConvention::Binary => {
            let data = raw
                .into_iter()
                .map(|v| match v {
                    0 => Ok(0),
                    255 => Ok(1),
                    other => Err(Error::Format(format!(
                        "{}: pixel value {other} is not a binary mask value (0 or 255)",
                        path.display()
                    ))),
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok(MaskData::Binary(BinaryMask::new(h, w, data)?))
        }
        MaskConvention::Partition => {
            if raw.contains(&255) {
                return Err(Error::Format(format!(
                    "{}: pixel value 255 is reserved in partition masks",
                    path.display()
                )));
            }
            let p = SourcePartition::new(h, w, raw)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Ok(MaskData::Partition(p))
        }
    }
}

pub fn read_binary_mask_png(path: &Path) -> Result<BinaryMask> {
    match read_mask_png(path, MaskConvention::Binary)? {
        MaskData::Binary(m) => Ok(m),
        MaskData::Partition(_) => unreachable!(),
    }
}

pub fn read_partition_png(path: &Path) -> Result<SourcePartition> {
    match read_mask_png(path, MaskConvention::Partition)? {
        MaskData::Partition(p) => Ok(p),
        MaskData::Binary(_) => unreachable!(),
    }
}

pub(crate) fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let png_err = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {}
        (c, d) => {
            return Err(Error::Format(format!(
                "{}: mask must be 8-bit grayscale or indexed, found {c:?} {d:?}",
                path.display()
            )))
        }
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    Ok((h, w, data))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let enc_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

/// Binary mask as grayscale 0/255.
pub fn write_binary_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, None, &data)
}

/// Partition as an indexed PNG whose indices are the source labels.
pub fn write_partition_png(p: &SourcePartition, path: &Path) -> Result<()> {
    let palette: Vec<u8> = (0..p.sources()).flat_map(palette_color).collect();
    write_png(
        path,
        p.width(),
        p.height(),
        png::ColorType::Indexed,
        Some(palette),
        p.data(),
    )
}

/// Grayscale 8-bit rendering of a `[0, 1]` map.
pub fn write_gray_png(height: usize, width: usize, values: &[f32], path: &Path) -> Result<()> {
    let data: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(path, width, height, png::ColorType::Grayscale, None, &data)
}

fn palette_color(i: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    if i < BASE.len() {
        BASE[i]
    } else {
        let h = (i as u32).wrapping_mul(2_654_435_761);
        [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
    }
}

/// RGB PNG, values quantized to 8 bits.
pub fn write_image_png(img: &Image, path: &Path) -> Result<()> {
    let data: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    write_png(path, img.width(), img.height(), png::ColorType::Rgb, None, &data)
}

/// Any image format the `image` crate can decode, converted to 8-bit RGB.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
