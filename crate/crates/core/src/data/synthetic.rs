//! Procedural stand-ins for the four visual domains.
//!
//! * `photo`: smooth two-colour gradient with soft blobs and Gaussian grain, muted tones.
//! * `art`: layered sinusoids mapped through a random vivid palette.
//! * `cartoon`: 3-6 flat Voronoi regions from a small palette, dark outlines.
//! * `sketch`: a few dark strokes on white; at most 20% of pixels are inked.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, RngStream};

pub const PHOTO: &str = "photo";
pub const ART: &str = "art";
pub const CARTOON: &str = "cartoon";
pub const SKETCH: &str = "sketch";

/// Names with a built-in generator, in canonical reporting order.
pub const BUILTIN_DOMAINS: [&str; 4] = [PHOTO, ART, CARTOON, SKETCH];

/// Upper bound on inked (non-white) pixels in a sketch.
pub const SKETCH_MAX_INK: f64 = 0.2;

pub fn has_generator(name: &str) -> bool {
    BUILTIN_DOMAINS.contains(&name)
}

/// Planar `3 x h x w` image in `[0, 1]`.
pub type RawImage = Vec<f64>;

/// Generates image `index` of `domain`; deterministic in `(domain, seed, index)`.
pub fn generate(domain: &str, h: usize, w: usize, seed: u64, index: u64) -> Result<RawImage> {
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("synthetic images need at least 16x16, got {h}x{w}")));
    }
    let mut r = rng::stream(seed, &[rng::label_key("synthetic"), rng::label_key(domain), index]);
    let img = match domain {
        PHOTO => photo(&mut r, h, w),
        ART => art(&mut r, h, w),
        CARTOON => cartoon(&mut r, h, w, true),
        SKETCH => sketch(&mut r, h, w),
        other => return Err(Error::Config(format!("no generator registered for domain '{other}'"))),
    };
    debug_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    Ok(img)
}

/// Cartoon image without outlines, exposing the flat-colour stage.
pub fn cartoon_regions(h: usize, w: usize, seed: u64, index: u64) -> RawImage {
    let mut r = rng::stream(seed, &[rng::label_key("synthetic"), rng::label_key(CARTOON), index]);
    cartoon(&mut r, h, w, false)
}

fn plane_len(h: usize, w: usize) -> usize {
    h * w
}

fn photo(r: &mut RngStream, h: usize, w: usize) -> RawImage {
    let c0: [f64; 3] = std::array::from_fn(|_| r.random_range(0.3..0.7));
    let c1: [f64; 3] = std::array::from_fn(|_| r.random_range(0.3..0.7));
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..r.random_range(1..=3))
        .map(|_| {
            (
                r.random_range(0.0..w as f64),
                r.random_range(0.0..h as f64),
                r.random_range(0.15..0.35) * w.min(h) as f64,
                std::array::from_fn(|_| r.random_range(-0.12..0.12)),
            )
        })
        .collect();
    let mut out = vec![0.0; 3 * plane_len(h, w)];
    for y in 0..h {
        for x in 0..w {
            let u = ((x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy + 0.71) / 1.42;
            for c in 0..3 {
                let mut v = c0[c] * (1.0 - u) + c1[c] * u;
                for (bx, by, rad, amp) in &blobs {
                    let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (rad * rad);
                    v += amp[c] * (-d2).exp();
                }
                let grain: f64 = StandardNormal.sample(r);
                out[c * h * w + y * w + x] = (v + 0.035 * grain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn art(r: &mut RngStream, h: usize, w: usize) -> RawImage {
    let palette: Vec<[f64; 3]> = (0..3)
        .map(|_| std::array::from_fn(|_| if r.random_bool(0.5) { r.random_range(0.0..0.25) } else { r.random_range(0.75..1.0) }))
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let f: f64 = r.random_range(1.5..5.0);
            (a.cos() * f, a.sin() * f, r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = vec![0.0; 3 * plane_len(h, w)];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let s: f64 = waves
                .iter()
                .map(|(fx, fy, ph, amp)| amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                .sum::<f64>()
                / norm;
            // s in [-1, 1] -> position along the 3-colour palette
            let t = ((s + 1.0) / 2.0).clamp(0.0, 1.0) * 2.0;
            let (i, f) = if t >= 1.0 { (1, t - 1.0) } else { (0, t) };
            for c in 0..3 {
                out[c * h * w + y * w + x] = palette[i][c] * (1.0 - f) + palette[i + 1][c] * f;
            }
        }
    }
    out
}

const CARTOON_PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.30, 0.25],
    [0.25, 0.70, 0.95],
    [0.98, 0.85, 0.20],
    [0.35, 0.85, 0.40],
    [0.95, 0.55, 0.80],
    [0.60, 0.45, 0.90],
    [0.98, 0.65, 0.25],
    [0.55, 0.90, 0.85],
];

fn cartoon(r: &mut RngStream, h: usize, w: usize, outline: bool) -> RawImage {
    let regions = r.random_range(3..=6);
    let seeds: Vec<(f64, f64, usize)> = (0..regions)
        .map(|_| (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64), r.random_range(0..CARTOON_PALETTE.len())))
        .collect();
    let mut label = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            label[y * w + x] = seeds
                .iter()
                .enumerate()
                .map(|(i, (sx, sy, _))| (i, (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least three regions");
        }
    }
    let ink = 0.08;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let l = label[y * w + x];
            let edge = outline
                && ((x + 1 < w && label[y * w + x + 1] != l) || (y + 1 < h && label[(y + 1) * w + x] != l)
                    || x == 0 || y == 0 || x + 1 == w || y + 1 == h);
            for c in 0..3 {
                out[c * h * w + y * w + x] = if edge { ink } else { CARTOON_PALETTE[seeds[l].2][c] };
            }
        }
    }
    out
}

fn sketch(r: &mut RngStream, h: usize, w: usize) -> RawImage {
    let mut ink = vec![1.0f64; h * w];
    let budget = (SKETCH_MAX_INK * (h * w) as f64) as usize;
    let mut inked = 0usize;
    let strokes = r.random_range(2..=5);
    let max_len = (w.min(h) as f64 * 0.7).max(4.0);
    for _ in 0..strokes {
        let tone = r.random_range(0.05..0.3);
        let (mut x, mut y) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let mut heading: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let len = r.random_range(4.0..max_len) as usize;
        for _ in 0..len {
            let (px, py) = (x.floor() as isize, y.floor() as isize);
            if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                let cell = &mut ink[py as usize * w + px as usize];
                if *cell == 1.0 {
                    if inked >= budget {
                        break;
                    }
                    inked += 1;
                }
                *cell = cell.min(tone);
            }
            heading += r.random_range(-0.35..0.35);
            x += heading.cos();
            y += heading.sin();
        }
    }
    let mut out = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        out.extend_from_slice(&ink);
    }
    out
}

/// Rec. 601 luma of pixel `i` of a planar image.
pub fn luminance(img: &[f64], plane: usize, i: usize) -> f64 {
    0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_per_index() {
        for d in BUILTIN_DOMAINS {
            assert_eq!(generate(d, 32, 32, 5, 3).unwrap(), generate(d, 32, 32, 5, 3).unwrap());
            assert_ne!(generate(d, 32, 32, 5, 3).unwrap(), generate(d, 32, 32, 5, 4).unwrap());
        }
    }

    #[test]
    fn sketches_are_mostly_white() {
        for i in 0..50 {
            let img = generate(SKETCH, 32, 32, 11, i).unwrap();
            let bright = (0..1024).filter(|&p| luminance(&img, 1024, p) > 0.9).count();
            assert!(bright as f64 >= 0.8 * 1024.0, "image {i}: {bright}");
        }
    }

    #[test]
    fn cartoons_use_few_colours() {
        for i in 0..50 {
            let img = cartoon_regions(32, 32, 2, i);
            let colours: HashSet<[u64; 3]> =
                (0..1024).map(|p| [img[p].to_bits(), img[1024 + p].to_bits(), img[2048 + p].to_bits()]).collect();
            assert!(colours.len() <= 16, "image {i}: {}", colours.len());
        }
    }

    #[test]
    fn unknown_domain_is_config_error() {
        assert!(matches!(generate("infrared", 32, 32, 0, 0), Err(Error::Config(_))));
        assert!(matches!(generate(PHOTO, 8, 8, 0, 0), Err(Error::Config(_))));
    }
}
