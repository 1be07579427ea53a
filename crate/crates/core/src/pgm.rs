//! PGM (portable graymap) writer and reader.
//!
//! Maps are exported as 16-bit P2 (maxval 65535) after min-max scaling;
//! masks as binary P2 (maxval 1). The reader also accepts P5 with 8- or
//! 16-bit (big-endian) samples, as the format specifies.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spatial::{InstructionMask, SpatialActivationMap};
use crate::trace_io::atomic_write;

/// In-memory grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each `<= maxval`.
    pub pixels: Vec<u16>,
}

impl PgmImage {
    /// Quantize a `[0, 1]` map to 16 bits: `round(v * 65535)`.
    pub fn from_normalized_map(map: &SpatialActivationMap) -> Self {
        let g = map.grid_side();
        let pixels = map
            .values()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Self {
            width: g,
            height: g,
            maxval: 65535,
            pixels,
        }
    }

    pub fn from_mask(mask: &InstructionMask) -> Self {
        let g = mask.grid_side();
        let pixels = mask.cells().iter().map(|&b| u16::from(b)).collect();
        Self {
            width: g,
            height: g,
            maxval: 1,
            pixels,
        }
    }

    /// Back to `[0, 1]` values (quantization error at most `1/maxval`).
    pub fn dequantize(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&p| p as f64 / self.maxval as f64)
            .collect()
    }
}

/// Write as ASCII P2.
pub fn write_pgm(path: &Path, image: &PgmImage) -> Result<()> {
    let mut out = String::new();
    out.push_str("P2\n");
    out.push_str(&format!(
        "{} {}\n{}\n",
        image.width, image.height, image.maxval
    ));
    for row in image.pixels.chunks(image.width.max(1)) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Write as binary P5 (16-bit samples are big-endian per the format).
pub fn write_pgm_binary(path: &Path, image: &PgmImage) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(
        format!("P5\n{} {}\n{}\n", image.width, image.height, image.maxval).as_bytes(),
    );
    for &p in &image.pixels {
        if image.maxval > 255 {
            out.extend_from_slice(&p.to_be_bytes());
        } else {
            out.push(p as u8);
        }
    }
    atomic_write(path, &out)
}

fn malformed(context: String) -> Error {
    Error::Malformed {
        kind: "pgm",
        context,
    }
}

/// Read P2 or P5, honoring `#` comments in the header.
pub fn read_pgm(path: &Path) -> Result<PgmImage> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 {
        return Err(malformed(format!("{} is too short", path.display())));
    }
    let magic = &bytes[0..2];
    match magic {
        b"P2" => read_p2(&bytes, path),
        b"P5" => read_p5(&bytes, path),
        _ => Err(malformed(format!(
            "{} has magic {:?}, expected P2 or P5",
            path.display(),
            String::from_utf8_lossy(magic)
        ))),
    }
}

/// Pull the next whitespace-separated token, skipping `#` comment lines.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<(usize, usize, u16)> {
    let mut fields = [0usize; 3];
    for field in &mut fields {
        let token = next_token(bytes, pos)
            .ok_or_else(|| malformed(format!("{} header ended early", path.display())))?;
        *field = token
            .parse()
            .map_err(|_| malformed(format!("{}: bad header token {token:?}", path.display())))?;
    }
    let maxval = fields[2];
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(format!(
            "{}: maxval {maxval} out of range",
            path.display()
        )));
    }
    Ok((fields[0], fields[1], maxval as u16))
}

fn read_p2(bytes: &[u8], path: &Path) -> Result<PgmImage> {
    let mut pos = 2;
    let (width, height, maxval) = parse_header(bytes, &mut pos, path)?;
    let mut pixels = Vec::with_capacity(width * height);
    while let Some(token) = next_token(bytes, &mut pos) {
        let v: u32 = token
            .parse()
            .map_err(|_| malformed(format!("{}: bad sample {token:?}", path.display())))?;
        if v > maxval as u32 {
            return Err(malformed(format!(
                "{}: sample {v} exceeds maxval {maxval}",
                path.display()
            )));
        }
        pixels.push(v as u16);
    }
    if pixels.len() != width * height {
        return Err(malformed(format!(
            "{}: {} samples for {width}x{height}",
            path.display(),
            pixels.len()
        )));
    }
    Ok(PgmImage {
        width,
        height,
        maxval,
        pixels,
    })
}

fn read_p5(bytes: &[u8], path: &Path) -> Result<PgmImage> {
    let mut pos = 2;
    let (width, height, maxval) = parse_header(bytes, &mut pos, path)?;
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let expected = width * height * sample_bytes;
    let raster = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| malformed(format!("{} raster is truncated", path.display())))?;
    let pixels = if sample_bytes == 2 {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(PgmImage {
        width,
        height,
        maxval,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::MapSubject;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("saas-pgm-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn quantization_hand_case() {
        let map =
            SpatialActivationMap::from_values(2, vec![0.0, 0.25, 0.5, 1.0], MapSubject::InputImage)
                .unwrap();
        let image = PgmImage::from_normalized_map(&map);
        assert_eq!(image.pixels, vec![0, 16384, 32768, 65535]);
    }

    #[test]
    fn p2_round_trip() {
        let map =
            SpatialActivationMap::from_values(2, vec![0.0, 0.25, 0.5, 1.0], MapSubject::InputImage)
                .unwrap();
        let image = PgmImage::from_normalized_map(&map);
        let path = tmp("round.pgm");
        write_pgm(&path, &image).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, image);
        for (d, v) in back.dequantize().iter().zip(map.values()) {
            assert!((d - v).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn p5_round_trip_16bit() {
        let image = PgmImage {
            width: 3,
            height: 1,
            maxval: 65535,
            pixels: vec![0, 300, 65535],
        };
        let path = tmp("round.p5.pgm");
        write_pgm_binary(&path, &image).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), image);
    }

    #[test]
    fn mask_pgm_is_binary() {
        let mask = InstructionMask::from_cells(2, vec![true, false, true, true], 0, 0).unwrap();
        let image = PgmImage::from_mask(&mask);
        assert_eq!(image.maxval, 1);
        assert_eq!(image.pixels, vec![1, 0, 1, 1]);
        let path = tmp("mask.pgm");
        write_pgm(&path, &image).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), image);
    }

    #[test]
    fn comments_are_skipped() {
        let path = tmp("comment.pgm");
        fs::write(&path, "P2\n# a comment\n2 1\n255\n7 9\n").unwrap();
        let image = read_pgm(&path).unwrap();
        assert_eq!(image.pixels, vec![7, 9]);
    }

    #[test]
    fn oversized_sample_is_rejected() {
        let path = tmp("bad.pgm");
        fs::write(&path, "P2\n1 1\n10\n11\n").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
