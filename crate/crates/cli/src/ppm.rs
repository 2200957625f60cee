//! Binary PPM (P6) output.

use std::fs;
use std::path::Path;

use ndarray::ArrayView3;

/// Map a standardized value to a byte: 0 maps to mid-gray, ±2 to the ends.
pub fn to_byte(v: f32) -> u8 {
    ((v * 0.25 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// RGB rows of a `(bands, h, w)` standardized image: the first three bands,
/// or the first band as gray when fewer than three exist.
pub fn rgb(image: ArrayView3<'_, f32>) -> Vec<[u8; 3]> {
    let (c, h, w) = image.dim();
    let pick = if c >= 3 { [0, 1, 2] } else { [0, 0, 0] };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(pick.map(|b| to_byte(image[[b, y, x]])));
        }
    }
    out
}

/// Write panels of equal size side by side with a 4-pixel white gap.
pub fn write_panels(path: &Path, panels: &[Vec<[u8; 3]>], h: usize, w: usize) -> std::io::Result<()> {
    const GAP: usize = 4;
    let total_w = panels.len() * w + panels.len().saturating_sub(1) * GAP;
    let mut buf = format!("P6\n{total_w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for (k, panel) in panels.iter().enumerate() {
            if k > 0 {
                buf.extend(std::iter::repeat(255u8).take(3 * GAP));
            }
            for x in 0..w {
                buf.extend_from_slice(&panel[y * w + x]);
            }
        }
    }
    fs::write(path, buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(-2.0), 0);
        assert_eq!(to_byte(2.0), 255);
        assert_eq!(to_byte(100.0), 255);
    }

    #[test]
    fn panel_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let panel = vec![[1u8, 2, 3]; 6];
        write_panels(&p, &[panel.clone(), panel], 2, 3).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P6\n10 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 10 * 2 * 3);
    }
}
