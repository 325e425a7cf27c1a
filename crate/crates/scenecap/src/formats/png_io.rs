//! Grayscale PNG: 8-bit label images and 16-bit millimeter depth.

use std::path::Path;

use scenecap_core::grid::Grid;

use crate::error::{read, write, CliError, Result};

fn encode_raw(w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut wr = enc.write_header().map_err(|e| e.to_string())?;
        wr.write_image_data(data).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn decode_raw(bytes: &[u8], want: png::BitDepth) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != want {
        return Err(format!(
            "expected {want:?}-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn encode_labels(labels: &Grid<u8>) -> std::result::Result<Vec<u8>, String> {
    encode_raw(labels.width(), labels.height(), png::BitDepth::Eight, labels.data())
}

pub fn decode_labels(bytes: &[u8]) -> std::result::Result<Grid<u8>, String> {
    let (w, h, data) = decode_raw(bytes, png::BitDepth::Eight)?;
    Grid::from_vec(w, h, data).ok_or_else(|| "pixel count mismatch".into())
}

/// Depth in meters quantized to whole millimeters. Zero (no depth) stays
/// zero; values beyond 65.535 m saturate.
pub fn encode_depth_mm(depth: &Grid<f64>) -> std::result::Result<Vec<u8>, String> {
    let data: Vec<u8> = depth
        .data()
        .iter()
        .flat_map(|z| {
            let mm = if z.is_finite() && *z > 0.0 { (z * 1000.0).round().min(65535.0) as u16 } else { 0 };
            mm.to_be_bytes()
        })
        .collect();
    encode_raw(depth.width(), depth.height(), png::BitDepth::Sixteen, &data)
}

pub fn decode_depth_mm(bytes: &[u8]) -> std::result::Result<Grid<f64>, String> {
    let (w, h, data) = decode_raw(bytes, png::BitDepth::Sixteen)?;
    let vals = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0).collect();
    Grid::from_vec(w, h, vals).ok_or_else(|| "pixel count mismatch".into())
}

pub fn save_labels(path: &Path, labels: &Grid<u8>) -> Result<()> {
    write(path, &encode_labels(labels).map_err(|e| CliError::output(path, e))?)
}

pub fn load_labels(path: &Path) -> Result<Grid<u8>> {
    decode_labels(&read(path)?).map_err(|e| CliError::input(path, e))
}

pub fn save_depth_mm(path: &Path, depth: &Grid<f64>) -> Result<()> {
    write(path, &encode_depth_mm(depth).map_err(|e| CliError::output(path, e))?)
}

pub fn load_depth_mm(path: &Path) -> Result<Grid<f64>> {
    decode_depth_mm(&read(path)?).map_err(|e| CliError::input(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let g = Grid::from_vec(3, 2, vec![0, 1, 2, 255, 7, 0]).unwrap();
        assert_eq!(decode_labels(&encode_labels(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn depth_quantized_to_millimeters() {
        let g = Grid::from_vec(4, 1, vec![0.0, 1.2344, 2.0006, 100.0]).unwrap();
        let back = decode_depth_mm(&encode_depth_mm(&g).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0, 1.234, 2.001, 65.535]);
    }

    #[test]
    fn wrong_bit_depth_rejected() {
        let g = Grid::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(decode_labels(&encode_depth_mm(&g).unwrap()).is_err());
    }
}
