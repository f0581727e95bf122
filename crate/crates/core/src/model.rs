//! Convolutional JSCC encoder/decoder pair.
//!
//! Encoder: `conv(3->w1, /2) -> LeakyReLU -> conv(w1->w2, /2) -> LeakyReLU`,
//! then a head maps the `w2 x H/4 x W/4` activation to `2k` reals, i.e. `k`
//! complex channel symbols as interleaved `(re, im)` pairs. With SNR
//! conditioning, `snr_db / 10` joins the head input.
//!
//! Two heads are available:
//!
//! * `conv` (default): a 1x1 convolution to `2k / (H/4 * W/4)` channels, so
//!   `2k` must tile the grid. SNR enters as an extra constant channel.
//! * `dense`: flatten, then a fully connected layer; any ratio works.
//!
//! The feature vector used for representation alignment is the spatial mean of
//! the second convolution's activation.
//!
//! Decoder mirrors it: the inverse head, LeakyReLU, two stride-2 transposed
//! convolutions and a sigmoid.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JsccConfig {
    pub image_shape: [usize; 3],
    /// `k / n` as `[numerator, denominator]`, with `n = 3 * H * W`.
    pub compression_ratio: [u64; 2],
    pub channel_widths: [usize; 2],
    pub feature_dim: usize,
    pub snr_conditioning: bool,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub head: HeadKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Conv,
    Dense,
}

fn default_kernel() -> usize {
    4
}

fn default_slope() -> f64 {
    0.2
}

impl Default for JsccConfig {
    fn default() -> Self {
        JsccConfig {
            image_shape: [3, 32, 32],
            compression_ratio: [1, 12],
            channel_widths: [16, 32],
            feature_dim: 32,
            snr_conditioning: true,
            kernel_size: default_kernel(),
            leaky_slope: default_slope(),
            head: HeadKind::default(),
        }
    }
}

// parameter slots, encoder first
const ENC_CONV1_W: usize = 0;
const ENC_CONV1_B: usize = 1;
const ENC_CONV2_W: usize = 2;
const ENC_CONV2_B: usize = 3;
const ENC_HEAD_W: usize = 4;
const ENC_HEAD_B: usize = 5;
const DEC_HEAD_W: usize = 6;
const DEC_HEAD_B: usize = 7;
const DEC_UP1_W: usize = 8;
const DEC_UP1_B: usize = 9;
const DEC_UP2_W: usize = 10;
const DEC_UP2_B: usize = 11;

/// Number of leading entries of [`ModelParams`] that belong to the encoder.
pub const ENCODER_ENTRIES: usize = 6;

#[derive(Debug, Clone)]
pub struct Jscc {
    cfg: JsccConfig,
    symbols: usize,
    grid: (usize, usize),
    pad: usize,
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `(B, 2k)` latent, not yet power normalised.
    pub latent: Var,
    /// `(B, C)` per-image feature vectors.
    pub features: Var,
}

impl Jscc {
    pub fn new(cfg: JsccConfig) -> Result<Self> {
        let [c, h, w] = cfg.image_shape;
        if c != 3 {
            return Err(Error::Config(format!("images must have 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::Config(format!("image extents must be positive multiples of 4, got {h}x{w}")));
        }
        let k = cfg.kernel_size;
        if k < 2 || !k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be even and >= 2, got {k}")));
        }
        if cfg.channel_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if cfg.feature_dim != cfg.channel_widths[1] {
            return Err(Error::Config(format!(
                "feature_dim {} must equal the last encoder width {}",
                cfg.feature_dim, cfg.channel_widths[1]
            )));
        }
        let [num, den] = cfg.compression_ratio;
        if num == 0 || den == 0 {
            return Err(Error::Config("compression ratio must be positive".into()));
        }
        let n = (c * h * w) as u64;
        let symbols = ((n * num + den / 2) / den) as usize;
        if symbols == 0 {
            return Err(Error::Config("compression ratio leaves no channel symbols".into()));
        }
        let cells = (h / 4) * (w / 4);
        if cfg.head == HeadKind::Conv && !(2 * symbols).is_multiple_of(cells) {
            return Err(Error::Config(format!(
                "conv head needs 2k = {} to be a multiple of the {cells} grid cells; use the dense head",
                2 * symbols
            )));
        }
        Ok(Jscc { symbols, grid: (h / 4, w / 4), pad: (k - 2) / 2, cfg })
    }

    pub fn config(&self) -> &JsccConfig {
        &self.cfg
    }

    /// Source dimension `n = 3 * H * W`.
    pub fn source_dim(&self) -> usize {
        self.cfg.image_shape.iter().product()
    }

    /// Number of complex channel symbols `k`.
    pub fn symbols(&self) -> usize {
        self.symbols
    }

    /// Encoder output length `2k`.
    pub fn latent_len(&self) -> usize {
        2 * self.symbols
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Latent channels per grid cell under the conv head.
    fn latent_channels(&self) -> usize {
        self.latent_len() / self.cells()
    }

    fn flat_dim(&self) -> usize {
        self.cfg.channel_widths[1] * self.grid.0 * self.grid.1
    }

    fn snr_inputs(&self) -> usize {
        self.cfg.snr_conditioning as usize
    }

    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let [w1, w2] = self.cfg.channel_widths;
        let k = self.cfg.kernel_size;
        let latent = self.latent_len();
        let flat = self.flat_dim();
        let s = self.snr_inputs();
        let heads = match self.cfg.head {
            HeadKind::Dense => [
                ("enc.head.weight", vec![latent, flat + s], flat + s),
                ("enc.head.bias", vec![latent], 0),
                ("dec.head.weight", vec![flat, latent + s], latent + s),
                ("dec.head.bias", vec![flat], 0),
            ],
            HeadKind::Conv => {
                let c = self.latent_channels();
                [
                    ("enc.head.weight", vec![c, w2 + s, 1, 1], w2 + s),
                    ("enc.head.bias", vec![c], 0),
                    ("dec.head.weight", vec![w2, c + s, 1, 1], c + s),
                    ("dec.head.bias", vec![w2], 0),
                ]
            }
        };
        let [eh_w, eh_b, dh_w, dh_b] = heads;
        // (name, shape, fan_in)
        vec![
            ("enc.conv1.weight", vec![w1, 3, k, k], 3 * k * k),
            ("enc.conv1.bias", vec![w1], 0),
            ("enc.conv2.weight", vec![w2, w1, k, k], w1 * k * k),
            ("enc.conv2.bias", vec![w2], 0),
            eh_w,
            eh_b,
            dh_w,
            dh_b,
            ("dec.up1.weight", vec![w2, w1, k, k], w2 * k * k / 4),
            ("dec.up1.bias", vec![w1], 0),
            ("dec.up2.weight", vec![w1, 3, k, k], w1 * k * k / 4),
            ("dec.up2.bias", vec![3], 0),
        ]
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams<T> {
        let entries = self
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![T::zero(); n]
                } else {
                    let gain = 2.0 / (1.0 + self.cfg.leaky_slope * self.cfg.leaky_slope);
                    let bound = (3.0 * gain / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
                };
                (name.to_string(), Tensor::new(shape, data).expect("layout is consistent").with_requires_grad(true))
            })
            .collect();
        ModelParams::new(entries)
    }

    pub fn zero_params<T: Real>(&self) -> ModelParams<T> {
        let entries = self
            .layout()
            .into_iter()
            .map(|(name, shape, _)| (name.to_string(), Tensor::zeros(shape).with_requires_grad(true)))
            .collect();
        ModelParams::new(entries)
    }

    pub fn check_layout<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        let layout = self.layout();
        let ok = params.len() == layout.len()
            && params.entries().iter().zip(&layout).all(|((n, t), (ln, ls, _))| n == ln && t.shape() == ls.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("parameters do not match the configured topology".into()))
        }
    }

    /// Stacks images into a `(B, 3, H, W)` constant after validating shapes.
    pub fn images_var<T: Real>(&self, tape: &mut Tape<T>, images: &[&Tensor<T>]) -> Result<Var> {
        for img in images {
            if img.shape() != self.cfg.image_shape {
                return Err(Error::Config(format!(
                    "image shape {:?} does not match configured {:?}",
                    img.shape(),
                    self.cfg.image_shape
                )));
            }
        }
        let batch = Tensor::stack(images)?;
        Ok(tape.constant(&batch))
    }

    fn with_snr<T: Real>(&self, tape: &mut Tape<T>, x: Var, snr_db: &[f64]) -> Result<Var> {
        if !self.cfg.snr_conditioning {
            return Ok(x);
        }
        let rows = tape.shape(x)[0];
        if snr_db.len() != rows {
            return Err(Error::shape("snr conditioning", format!("{} SNR values for {rows} rows", snr_db.len())));
        }
        let plane: usize = tape.shape(x)[2..].iter().product();
        let mut shape = tape.shape(x).to_vec();
        shape[1] = 1;
        let col = Tensor::new(shape, snr_db.iter().flat_map(|&s| std::iter::repeat_n(T::lit(s / 10.0), plane)).collect())?;
        let c = tape.constant(&col);
        tape.concat(x, c)
    }

    /// Encoder convolutions up to the feature tap: `(B, w2, H/4, W/4)`.
    fn encoder_trunk<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Var> {
        let s = self.cfg.leaky_slope;
        let h = tape.conv2d(images, p.var(ENC_CONV1_W), p.var(ENC_CONV1_B), 2, self.pad)?;
        tape.check_finite(h, "enc.conv1")?;
        let h = tape.leaky_relu(h, s);
        let h = tape.conv2d(h, p.var(ENC_CONV2_W), p.var(ENC_CONV2_B), 2, self.pad)?;
        tape.check_finite(h, "enc.conv2")?;
        Ok(tape.leaky_relu(h, s))
    }

    pub fn encode_graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, images: Var, snr_db: &[f64]) -> Result<Encoded> {
        let act = self.encoder_trunk(tape, p, images)?;
        let features = tape.spatial_mean(act)?;
        let batch = tape.shape(act)[0];
        let latent = match self.cfg.head {
            HeadKind::Dense => {
                let flat = tape.reshape(act, vec![batch, self.flat_dim()])?;
                let flat = self.with_snr(tape, flat, snr_db)?;
                tape.dense(flat, p.var(ENC_HEAD_W), p.var(ENC_HEAD_B))?
            }
            HeadKind::Conv => {
                let x = self.with_snr(tape, act, snr_db)?;
                let y = tape.conv2d(x, p.var(ENC_HEAD_W), p.var(ENC_HEAD_B), 1, 0)?;
                tape.reshape(y, vec![batch, self.latent_len()])?
            }
        };
        tape.check_finite(latent, "enc.head")?;
        Ok(Encoded { latent, features })
    }

    /// Per-image features only, skipping the dense head.
    pub fn features_graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Var> {
        let act = self.encoder_trunk(tape, p, images)?;
        tape.spatial_mean(act)
    }

    pub fn decode_graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, received: Var, snr_db: &[f64]) -> Result<Var> {
        let shape = tape.shape(received).to_vec();
        if shape.len() != 2 || shape[1] != self.latent_len() {
            return Err(Error::Config(format!("decoder expects (B, {}), got {shape:?}", self.latent_len())));
        }
        let s = self.cfg.leaky_slope;
        let (gh, gw) = self.grid;
        let h = match self.cfg.head {
            HeadKind::Dense => {
                let x = self.with_snr(tape, received, snr_db)?;
                let h = tape.dense(x, p.var(DEC_HEAD_W), p.var(DEC_HEAD_B))?;
                tape.reshape(h, vec![shape[0], self.cfg.channel_widths[1], gh, gw])?
            }
            HeadKind::Conv => {
                let x = tape.reshape(received, vec![shape[0], self.latent_channels(), gh, gw])?;
                let x = self.with_snr(tape, x, snr_db)?;
                tape.conv2d(x, p.var(DEC_HEAD_W), p.var(DEC_HEAD_B), 1, 0)?
            }
        };
        tape.check_finite(h, "dec.head")?;
        let h = tape.leaky_relu(h, s);
        let h = tape.conv_transpose2d(h, p.var(DEC_UP1_W), p.var(DEC_UP1_B), 2, self.pad)?;
        tape.check_finite(h, "dec.up1")?;
        let h = tape.leaky_relu(h, s);
        let h = tape.conv_transpose2d(h, p.var(DEC_UP2_W), p.var(DEC_UP2_B), 2, self.pad)?;
        tape.check_finite(h, "dec.up2")?;
        Ok(tape.sigmoid(h))
    }

    /// Encodes one image to its `2k` latent (before power normalisation).
    pub fn encode<T: Real>(&self, params: &ModelParams<T>, image: &Tensor<T>, snr_db: f64) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = self.images_var(&mut tape, &[image])?;
        let out = self.encode_graph(&mut tape, &p, x, &[snr_db])?;
        Tensor::new(vec![self.latent_len()], tape.value(out.latent).to_vec())
    }

    /// Decodes one received `2k` vector to a `(3, H, W)` image in `(0, 1)`.
    pub fn decode<T: Real>(&self, params: &ModelParams<T>, received: &Tensor<T>, snr_db: f64) -> Result<Tensor<T>> {
        if received.len() != self.latent_len() {
            return Err(Error::Config(format!("decoder expects {} values, got {}", self.latent_len(), received.len())));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let r = tape.constant(&received.clone().reshape(vec![1, self.latent_len()])?);
        let y = self.decode_graph(&mut tape, &p, r, &[snr_db])?;
        Tensor::new(self.cfg.image_shape.to_vec(), tape.value(y).to_vec())
    }

    /// Feature vector `f(I)` of one image.
    pub fn extract_feature<T: Real>(&self, params: &ModelParams<T>, image: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.batch_features(params, &[image])?.pop().expect("one image"))
    }

    pub fn batch_features<T: Real>(&self, params: &ModelParams<T>, images: &[&Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = self.images_var(&mut tape, images)?;
        let f = self.features_graph(&mut tape, &p, x)?;
        Ok(tape.value(f).chunks(self.feature_dim()).map(|c| c.to_vec()).collect())
    }

    /// Mean feature over a dataset, accumulated in `f64` in input order,
    /// `chunk` images per forward pass.
    pub fn mean_feature<T: Real>(&self, params: &ModelParams<T>, images: &[Tensor<T>], chunk: usize) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::Usage("mean feature of an empty dataset".into()));
        }
        let mut acc = vec![0.0f64; self.feature_dim()];
        for part in images.chunks(chunk.max(1)) {
            let refs: Vec<&Tensor<T>> = part.iter().collect();
            for f in self.batch_features(params, &refs)? {
                for (a, v) in acc.iter_mut().zip(f) {
                    *a += v.f64();
                }
            }
        }
        let n = images.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Attention cost of global versus window self-attention on an `h x w` patch
/// grid with `c` channels and `m x m` windows:
/// `(4hwC^2 + 2(hw)^2 C, 4hwC^2 + 2 M^2 hw C)`.
pub fn attention_complexity(h: u64, w: u64, c: u64, m: u64) -> Result<(u128, u128)> {
    if h == 0 || w == 0 || c == 0 || m == 0 {
        return Err(Error::Usage("attention complexity arguments must be >= 1".into()));
    }
    let overflow = || Error::Usage("attention complexity overflows u128".into());
    let (h, w, c, m) = (h as u128, w as u128, c as u128, m as u128);
    let hw = h.checked_mul(w).ok_or_else(overflow)?;
    let proj = hw.checked_mul(c).and_then(|v| v.checked_mul(c)).and_then(|v| v.checked_mul(4)).ok_or_else(overflow)?;
    let global = hw.checked_mul(hw).and_then(|v| v.checked_mul(c)).and_then(|v| v.checked_mul(2)).ok_or_else(overflow)?;
    let window = m
        .checked_mul(m)
        .and_then(|v| v.checked_mul(hw))
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(overflow)?;
    Ok((proj.checked_add(global).ok_or_else(overflow)?, proj.checked_add(window).ok_or_else(overflow)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn latent_length_follows_ratio() {
        let m = Jscc::new(JsccConfig::default()).unwrap();
        assert_eq!(m.source_dim(), 3072);
        assert_eq!(m.symbols(), 256);
        assert_eq!(m.latent_len(), 512);
        for (num, den, k, head) in
            [(1u64, 6u64, 512usize, HeadKind::Conv), (1, 24, 128, HeadKind::Conv), (1, 7, 439, HeadKind::Dense)]
        {
            let cfg = JsccConfig { compression_ratio: [num, den], head, ..JsccConfig::default() };
            let m = Jscc::new(cfg).unwrap();
            assert_eq!(m.symbols(), k);
            let img = Tensor::<f32>::full(vec![3, 32, 32], 0.5);
            let p = m.init_params::<f32, _>(&mut rng::stream(0, &[]));
            assert_eq!(m.encode(&p, &img, 5.0).unwrap().len(), 2 * k);
        }
    }

    #[test]
    fn zero_encoder_gives_zero_latent_and_gray_decoder() {
        let m = Jscc::new(JsccConfig::default()).unwrap();
        let p = m.zero_params::<f32>();
        let img = Tensor::full(vec![3, 32, 32], 0.7);
        let z = m.encode(&p, &img, 3.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let out = m.decode(&p, &z, 3.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert!(m.extract_feature(&p, &img).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snr_conditioning_changes_latent_only_when_enabled() {
        let img = Tensor::<f32>::full(vec![3, 32, 32], 0.3);
        let on = Jscc::new(JsccConfig::default()).unwrap();
        let p = on.init_params::<f32, _>(&mut rng::stream(1, &[]));
        assert_ne!(on.encode(&p, &img, 1.0).unwrap(), on.encode(&p, &img, 9.0).unwrap());

        let off = Jscc::new(JsccConfig { snr_conditioning: false, ..JsccConfig::default() }).unwrap();
        let p = off.init_params::<f32, _>(&mut rng::stream(1, &[]));
        let a = off.encode(&p, &img, 1.0).unwrap();
        let b = off.encode(&p, &img, 9.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(off.decode(&p, &a, 1.0).unwrap(), off.decode(&p, &a, 9.0).unwrap());
    }

    #[test]
    fn wrong_shapes_are_config_errors() {
        let m = Jscc::new(JsccConfig::default()).unwrap();
        let p = m.zero_params::<f32>();
        let img = Tensor::<f32>::zeros(vec![3, 16, 16]);
        assert!(matches!(m.encode(&p, &img, 1.0), Err(Error::Config(_))));
        let short = Tensor::<f32>::zeros(vec![10]);
        assert!(matches!(m.decode(&p, &short, 1.0), Err(Error::Config(_))));
        assert!(Jscc::new(JsccConfig { feature_dim: 3, ..JsccConfig::default() }).is_err());
        assert!(Jscc::new(JsccConfig { compression_ratio: [1, 7], ..JsccConfig::default() }).is_err());
    }

    #[test]
    fn attention_complexity_examples() {
        assert_eq!(attention_complexity(7, 7, 96, 7).unwrap(), (2_267_328, 2_267_328));
        assert_eq!(attention_complexity(1, 1, 1, 1).unwrap(), (6, 6));
        let (g1, w1) = attention_complexity(8, 8, 32, 4).unwrap();
        let (g2, w2) = attention_complexity(16, 8, 32, 4).unwrap();
        assert!(g2 > 2 * g1);
        assert_eq!(w2, 2 * w1);
        assert!(attention_complexity(0, 1, 1, 1).is_err());
        assert!(attention_complexity(u64::MAX, u64::MAX, u64::MAX, 1).is_err());
    }
}
