//! Image quality metrics: PSNR, SSIM and MS-SSIM.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) applied without padding,
//! `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, and averages the local map per
//! channel and then over channels. MS-SSIM downsamples with 2x2 average
//! pooling (odd extents are padded by repeating the last row/column), clamps
//! every per-scale term at zero and raises it to the renormalised standard
//! weight. When a scale is smaller than the window, the window shrinks to the
//! scale's extent.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Standard five-scale MS-SSIM exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Scale count used for 32x32 evaluation.
pub const DEFAULT_SCALES: usize = 3;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Coarsest scale must keep at least this many pixels per side.
const MIN_COARSE_SIDE: usize = 3;

pub fn mse<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<T: Real>(a: &[T], b: &[T], max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Usage(format!("max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let at = |y: usize, x: usize| self.data[y.min(self.h - 1) * self.w + x.min(self.w - 1)];
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (y0, x0) = (2 * y, 2 * x);
                data.push((at(y0, x0) + at(y0, x0 + 1) + at(y0 + 1, x0) + at(y0 + 1, x0 + 1)) / 4.0);
            }
        }
        Plane { h, w, data }
    }
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering without padding.
fn blur(p: &Plane, win: &[f64]) -> Plane {
    let n = win.len();
    let ow = p.w - n + 1;
    let oh = p.h - n + 1;
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = win.iter().zip(&row[x..x + n]).map(|(g, v)| g * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(i, g)| g * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane { h: oh, w: ow, data: out }
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_plane(a: &Plane, b: &Plane, max_val: f64) -> (f64, f64) {
    let size = WINDOW.min(a.h).min(a.w);
    let win = gaussian(size, SIGMA);
    let c1 = (K1 * max_val).powi(2);
    let c2 = (K2 * max_val).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| Plane {
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = blur(a, &win);
    let mu_b = blur(b, &win);
    let xy = blur(&prod(&|x, y| x * y), &win);
    let sq = blur(&prod(&|x, y| x * x + y * y), &win);
    let n = mu_a.data.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let num0 = 2.0 * ma * mb;
        let den0 = ma * ma + mb * mb;
        let lum = (num0 + c1) / (den0 + c1);
        let cs = (2.0 * xy.data[i] - num0 + c2) / (sq.data[i] - den0 + c2);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

fn planes<T: Real>(t: &Tensor<T>) -> Result<Vec<Plane>> {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape("ssim", format!("expected (H, W) or (C, H, W), got {s:?}"))),
    };
    Ok(t.data()
        .chunks(h * w)
        .take(c)
        .map(|ch| Plane { h, w, data: ch.iter().map(|v| v.f64()).collect() })
        .collect())
}

fn paired<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<Plane>, Vec<Plane>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((planes(a)?, planes(b)?))
}

/// Mean SSIM, averaged over channels.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    let (pa, pb) = paired(a, b)?;
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, max_val).0).sum::<f64>() / pa.len() as f64)
}

/// Number of scales actually used for an image with smallest side `side`.
pub fn effective_scales(side: usize, requested: usize) -> usize {
    let mut s = requested.clamp(1, MS_SSIM_WEIGHTS.len());
    while s > 1 && (side >> (s - 1)) < MIN_COARSE_SIDE {
        s -= 1;
    }
    s
}

/// Exponents for `scales` scales: the leading standard weights renormalised to sum to one.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let used = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = used.iter().sum();
    used.iter().map(|w| w / total).collect()
}

/// Multi-scale SSIM with `scales` scales, averaged over channels.
pub fn ms_ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, scales: usize, max_val: f64) -> Result<f64> {
    let (pa, pb) = paired(a, b)?;
    let side = pa[0].h.min(pa[0].w);
    let scales = effective_scales(side, scales);
    let weights = scale_weights(scales);
    let channels = pa.len();
    let mut total = 0.0;
    for (mut x, mut y) in pa.into_iter().zip(pb) {
        let mut value = 1.0;
        for (s, w) in weights.iter().enumerate() {
            if s > 0 {
                x = x.downsample();
                y = y.downsample();
            }
            let (full, cs) = ssim_plane(&x, &y, max_val);
            let term = if s + 1 == scales { full } else { cs };
            value *= term.max(0.0).powf(*w);
        }
        total += value;
    }
    Ok(total / channels as f64)
}
