//! End-to-end evaluation of a codec over a channel.

use crate::channel::{self, ChannelConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Jscc;
use crate::params::ModelParams;
use crate::rng;
use crate::scalar::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

const CHUNK: usize = 32;

/// Per-image mean PSNR and MS-SSIM at one SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Transmits every image once at `snr_db` and averages the per-image metrics.
///
/// The codec is conditioned on `snr_db` clamped to the training SNR range.
/// Channel draws for image `i` come from the stream `(seed, "eval", keys.., i)`,
/// so results do not depend on chunking or on which other images are evaluated.
pub fn evaluate<T: Real>(
    model: &Jscc,
    params: &ModelParams<T>,
    images: &[Tensor<T>],
    channel_cfg: &ChannelConfig,
    snr_db: f64,
    seed: u64,
    keys: &[u64],
) -> Result<Quality> {
    if images.is_empty() {
        return Err(Error::Usage("evaluation over no images".into()));
    }
    let norm = channel::target_norm(model.symbols(), channel_cfg.transmit_power);
    let (mut psnr, mut ms_ssim) = (0.0, 0.0);
    let mut path = vec![rng::label_key("eval")];
    path.extend_from_slice(keys);
    path.push(0);
    for (c, part) in images.chunks(CHUNK).enumerate() {
        let refs: Vec<&Tensor<T>> = part.iter().collect();
        let snrs = vec![channel::conditioning_snr(channel_cfg, snr_db); part.len()];
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = model.images_var(&mut tape, &refs)?;
        let enc = model.encode_graph(&mut tape, &p, x, &snrs)?;
        let z = tape.row_normalize(enc.latent, norm)?;
        let mut received = Vec::with_capacity(tape.value(z).len());
        for (j, row) in tape.value(z).chunks(model.latent_len()).enumerate() {
            *path.last_mut().expect("index slot") = (c * CHUNK + j) as u64;
            let mut r = rng::stream(seed, &path);
            received.extend(channel::transmit(row, channel_cfg, snr_db, &mut r)?);
        }
        let shape = tape.shape(z).to_vec();
        let y = tape.constant(&Tensor::new(shape, received)?);
        let out = model.decode_graph(&mut tape, &p, y, &snrs)?;
        for (img, rec) in part.iter().zip(tape.tensor(out).unstack()) {
            psnr += metrics::psnr(img.data(), rec.data(), 1.0)?;
            ms_ssim += metrics::ms_ssim(img, &rec, metrics::DEFAULT_SCALES, 1.0)?;
        }
    }
    let n = images.len() as f64;
    Ok(Quality { psnr: psnr / n, ms_ssim: ms_ssim / n })
}
