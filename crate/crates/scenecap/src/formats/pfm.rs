//! Single-channel Portable Float Map, little-endian, rows stored bottom-up.

use std::path::Path;

use scenecap_core::grid::Grid;

use crate::error::{read, write, CliError, Result};

pub fn encode(grid: &Grid<f64>) -> Vec<u8> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*grid.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

/// Parses the next whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().filter(|s| !s.is_empty())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Grid<f64>, String> {
    let mut pos = 0;
    match token(bytes, &mut pos) {
        Some("Pf") => {}
        Some("PF") => return Err("three-channel PFM is not supported".into()),
        _ => return Err("not a PFM file".into()),
    }
    let mut num = |what: &str| token(bytes, &mut pos).ok_or_else(|| format!("missing {what}"));
    let w: usize = num("width")?.parse().map_err(|_| "bad width")?;
    let h: usize = num("height")?.parse().map_err(|_| "bad height")?;
    let scale: f64 = num("scale")?.parse().map_err(|_| "bad scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("bad scale".into());
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != 4 * w * h {
        return Err(format!("expected {} data bytes, found {}", 4 * w * h, data.len()));
    }
    let mut grid = Grid::new(w, h, 0.0);
    for (i, c) in data.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        grid.set(i % w, h - 1 - i / w, v as f64);
    }
    Ok(grid)
}

pub fn save(path: &Path, grid: &Grid<f64>) -> Result<()> {
    write(path, &encode(grid))
}

pub fn load(path: &Path) -> Result<Grid<f64>> {
    decode(&read(path)?).map_err(|e| CliError::input(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_float32_exact() {
        let mut g = Grid::new(5, 3, 0.0);
        for y in 0..3 {
            for x in 0..5 {
                g.set(x, y, 0.1 * x as f64 - 1.7 * y as f64);
            }
        }
        let back = decode(&encode(&g)).unwrap();
        assert_eq!(back.width(), 5);
        for (a, b) in g.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn first_stored_row_is_the_bottom_one() {
        let mut g = Grid::new(1, 2, 0.0);
        g.set(0, 1, 2.0);
        let bytes = encode(&g);
        let header = b"Pf\n1 2\n-1.0\n".len();
        assert_eq!(f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn truncated_data_rejected() {
        let mut bytes = encode(&Grid::new(4, 4, 1.0));
        bytes.truncate(bytes.len() - 1);
        assert!(decode(&bytes).is_err());
        assert!(decode(b"P6\n1 1\n255\n").is_err());
    }
}
