//! Atomic file writes, PNG images and masks, JSON documents.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use nodulesynth_core::grid::{BinaryMask, Grid, Image};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ConfigError, Error, Result};

/// Writes through a temporary file in the destination directory, then renames
/// it into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_gray(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
        w.write_image_data(data)
            .map_err(|e| Error::format(path, e))?;
    }
    Ok(out)
}

/// Decoded grayscale samples scaled to `[0, 1]`.
fn decode_gray(path: &Path) -> Result<Grid<f32>> {
    let bytes = read_bytes(path)?;
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::format(
                path,
                format!("expected a grayscale PNG, got {other:?}"),
            ))
        }
    };
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2 * channels)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .chunks_exact(channels)
            .map(|c| c[0] as f32 / 255.0)
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported bit depth {other:?}"),
            ))
        }
    };
    Grid::from_vec(h, w, data).map_err(Error::from)
}

/// 16-bit grayscale; values are clamped to `[0, 1]`.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let data: Vec<u8> = image
        .as_slice()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    atomic_write(
        path,
        &encode_gray(
            path,
            image.width(),
            image.height(),
            png::BitDepth::Sixteen,
            &data,
        )?,
    )
}

/// 8- or 16-bit grayscale normalized to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    decode_gray(path)
}

/// 8-bit, foreground 255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask
        .as_slice()
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    atomic_write(
        path,
        &encode_gray(
            path,
            mask.width(),
            mask.height(),
            png::BitDepth::Eight,
            &data,
        )?,
    )
}

/// Pixels brighter than 127/255 are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let g = decode_gray(path)?;
    Ok(BinaryMask::threshold(&g, 127.5 / 255.0))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Parses JSON, reporting type errors with the key path of the offending value.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::format(path, ConfigError::new(key, e.into_inner()))
    })
}
