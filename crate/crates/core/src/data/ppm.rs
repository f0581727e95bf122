//! Binary PPM (P6) reading and writing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Decoded P6 image, planar RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| format!("bad {what}: {e}"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PpmImage> {
    let fail = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    if !bytes.starts_with(b"P6") {
        return Err(fail("missing P6 magic".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width").map_err(fail)?;
    let height = h.number("height").map_err(fail)?;
    let maxval = h.number("maxval").map_err(fail)?;
    if width == 0 || height == 0 {
        return Err(fail(format!("empty image {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(fail(format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("header must end with a single whitespace byte".into()));
    }
    let body = &bytes[h.pos + 1..];
    let depth = if maxval < 256 { 1 } else { 2 };
    let plane = width * height;
    let need = plane * 3 * depth;
    if body.len() < need {
        return Err(fail(format!("expected {need} payload bytes, found {}", body.len())));
    }
    let mut data = vec![0.0; 3 * plane];
    let scale = maxval as f64;
    for i in 0..plane {
        for c in 0..3 {
            let k = i * 3 + c;
            let raw = if depth == 1 { body[k] as u32 } else { u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as u32 };
            data[c * plane + i] = (raw as f64 / scale).min(1.0);
        }
    }
    Ok(PpmImage { width, height, data })
}

pub fn read(path: &Path) -> Result<PpmImage> {
    decode(&fs::read(path)?, path)
}

/// Encodes a planar `3 x h x w` image in `[0, 1]` with maxval 255.
pub fn encode(data: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    let plane = height * width;
    if data.len() != 3 * plane || plane == 0 {
        return Err(Error::shape("ppm::encode", format!("{} values for 3x{height}x{width}", data.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write(path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    let bytes = encode(data, height, width)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Center-crops to the target aspect ratio, then resizes with nearest-neighbour sampling.
pub fn fit(img: &PpmImage, height: usize, width: usize) -> Vec<f64> {
    let (sh, sw) = (img.height, img.width);
    if (sh, sw) == (height, width) {
        return img.data.clone();
    }
    // largest crop with aspect width/height
    let (ch, cw) = if sw * height > sh * width { (sh, (sh * width / height).max(1)) } else { ((sw * height / width).max(1), sw) };
    let (oy, ox) = ((sh - ch) / 2, (sw - cw) / 2);
    let plane = sh * sw;
    let mut out = vec![0.0; 3 * height * width];
    for y in 0..height {
        let sy = oy + ((2 * y + 1) * ch / (2 * height)).min(ch - 1);
        for x in 0..width {
            let sx = ox + ((2 * x + 1) * cw / (2 * width)).min(cw - 1);
            for c in 0..3 {
                out[c * height * width + y * width + x] = img.data[c * plane + sy * sw + sx];
            }
        }
    }
    out
}

/// Result of scanning an image directory.
#[derive(Debug, Clone, Default)]
pub struct DirScan {
    pub images: Vec<Vec<f64>>,
    /// Files without a `.ppm` extension, in scan order.
    pub skipped: Vec<PathBuf>,
}

/// Loads every `.ppm` file in `dir` in lexicographic order, fitted to `height x width`.
pub fn load_dir(dir: &Path, height: usize, width: usize) -> Result<DirScan> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read image directory {}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    let mut scan = DirScan::default();
    for path in files {
        let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if !is_ppm {
            log::warn!("skipping non-PPM file {}", path.display());
            scan.skipped.push(path);
            continue;
        }
        scan.images.push(fit(&read(&path)?, height, width));
    }
    if scan.images.is_empty() {
        return Err(Error::Config(format!("no PPM images found in {}", dir.display())));
    }
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_example() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let img = decode(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn comments_and_wide_samples() {
        let mut bytes = b"P6 # c\n1 # w\n1\n1023\n".to_vec();
        bytes.extend([0x03, 0xff, 0x00, 0x00, 0x01, 0xff]);
        let img = decode(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(img.data[0], 1.0);
        assert_eq!(img.data[1], 0.0);
        assert!((img.data[2] - 511.0 / 1023.0).abs() < 1e-15);
    }

    #[test]
    fn malformed_headers_name_the_file() {
        for bad in [&b"P3\n1 1\n255\n\0\0\0"[..], b"P6\n1\n", b"P6\n1 1\n0\n\0\0\0", b"P6\n2 2\n255\n\0\0"] {
            match decode(bad, Path::new("bad.ppm")) {
                Err(Error::Format { path, .. }) => assert_eq!(path, Path::new("bad.ppm")),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn round_trip_and_fit() {
        let data: Vec<f64> = (0..48).map(|i| (i % 7) as f64 * 17.0 / 255.0).collect();
        let img = decode(&encode(&data, 4, 4).unwrap(), Path::new("m")).unwrap();
        assert!(img.data.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-12));
        // 4x4 -> 2x2 samples the centres of each 2x2 block
        let small = fit(&img, 2, 2);
        assert_eq!(small[0], img.data[5]);
        assert_eq!(small[3], img.data[15]);
        // 2x4 wide -> 2x2 keeps the middle columns
        let wide = PpmImage { width: 4, height: 2, data: (0..24).map(|v| v as f64).collect() };
        assert_eq!(&fit(&wide, 2, 2)[..4], &[1.0, 2.0, 5.0, 6.0]);
    }
}
