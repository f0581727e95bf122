//! Image pairs and TensorFlow SSIM / MS-SSIM scores (three scales, renormalised
//! weights) frozen by `ms_ssim_reference.py`.

use feddom_core::Tensor;

const SIZE: usize = 64;

pub const REFERENCE: [(f64, f64); 20] = [
    (0.984159290791, 0.995884358883),
    (0.951144874096, 0.991306602955),
    (0.919000923634, 0.987634837627),
    (0.892573595047, 0.983251750469),
    (0.873195409775, 0.977460205555),
    (0.852730035782, 0.970299303532),
    (0.834634125233, 0.959636867046),
    (0.813163101673, 0.946703732014),
    (0.793944060802, 0.929686248302),
    (0.762757718563, 0.906792581081),
    (0.735908031464, 0.879493415356),
    (0.706155538559, 0.816168010235),
    (0.671555936337, 0.728334844112),
    (0.648674368858, 0.634918510914),
    (0.616143763065, 0.52063035965),
    (0.582150042057, 0.467440575361),
    (0.557679891586, 0.445901602507),
    (0.521193563938, 0.512812018394),
    (0.502130270004, 0.468901634216),
    (0.472210973501, 0.52143663168),
];

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(p: usize, k: usize, c: usize, y: usize, x: usize) -> f64 {
    let idx = ((((p * 2 + k) * 3 + c) * SIZE + y) * SIZE + x) as u64;
    (splitmix(idx) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn pair(p: usize) -> (Tensor<f64>, Tensor<f64>) {
    let spread = 0.05 + 0.05 * p as f64;
    let mut a = Vec::with_capacity(3 * SIZE * SIZE);
    let mut b = Vec::with_capacity(3 * SIZE * SIZE);
    for c in 0..3 {
        for y in 0..SIZE {
            for x in 0..SIZE {
                let v = 0.5 + 0.25 * (0.1 * (p + 1) as f64 * x as f64 + 0.07 * y as f64 + c as f64).sin() + 0.25 * (unit(p, 0, c, y, x) - 0.5);
                a.push(v);
                b.push((v + spread * (unit(p, 1, c, y, x) - 0.5)).clamp(0.0, 1.0));
            }
        }
    }
    let shape = vec![3, SIZE, SIZE];
    (Tensor::new(shape.clone(), a).unwrap(), Tensor::new(shape, b).unwrap())
}
