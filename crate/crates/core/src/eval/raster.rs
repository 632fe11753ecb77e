use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Colours of cluster indices in partition rasters; indices wrap around.
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn write_bytes(path: &Path, header: String, body: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| {
            f.write_all(header.as_bytes())?;
            f.write_all(body)
        })
        .map_err(|e| Error::io(path, e))
}

/// Binary greyscale (P5) image of `values`, min-max scaled to `0..=255`.
/// Row 0 of `values` is written as the bottom line of the image so that `y`
/// grows upwards. Non-finite values map to 0.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Contract(format!("{} values for a {width}x{height} image", values.len())));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut body = Vec::with_capacity(values.len());
    for r in (0..height).rev() {
        for v in &values[r * width..(r + 1) * width] {
            body.push(if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 });
        }
    }
    write_bytes(path, format!("P5\n{width} {height}\n255\n"), &body)
}

/// Binary colour (P6) image of cluster indices, bottom row first as in
/// [`write_pgm`].
pub fn write_ppm(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::Contract(format!("{} values for a {width}x{height} image", labels.len())));
    }
    let mut body = Vec::with_capacity(3 * labels.len());
    for r in (0..height).rev() {
        for &l in &labels[r * width..(r + 1) * width] {
            body.extend_from_slice(&PALETTE[l % PALETTE.len()]);
        }
    }
    write_bytes(path, format!("P6\n{width} {height}\n255\n"), &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        write_pgm(&p, 2, 2, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[170, 255, 0, 85]);
    }

    #[test]
    fn constant_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ppm");
        write_ppm(&p, 3, 1, &[0, 0, 0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), b"P6\n3 1\n255\n".len() + 9);
        assert!(write_ppm(&p, 2, 2, &[0]).is_err());
    }
}
