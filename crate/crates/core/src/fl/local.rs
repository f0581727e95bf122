//! Client-side training for one round.

use crate::channel::{self, ChannelConfig};
use crate::data::{self, ClientDataset};
use crate::error::{Error, Result};
use crate::model::Jscc;
use crate::optim::Optimizer;
use crate::params::{Bound, ModelParams};
use crate::rng::{self, RngStream};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{FeatureMode, Strategy, StrategyConfig};

/// Images per forward pass when evaluating over a whole dataset.
const EVAL_CHUNK: usize = 32;

/// Everything a client receives from the server for one round.
#[derive(Clone, Copy)]
pub struct Broadcast<'a, T> {
    pub model: &'a Jscc,
    pub strategy: &'a StrategyConfig,
    pub channel: &'a ChannelConfig,
    pub global: &'a ModelParams<T>,
    /// Global representation, present from the second round on.
    pub g: Option<&'a [f64]>,
    /// 1-based round being trained.
    pub round: usize,
    pub seed: u64,
    /// Also evaluate the full objective at the broadcast model before training.
    pub half_step: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome<T> {
    pub client_id: usize,
    pub params: ModelParams<T>,
    /// Local feature summary `F_m^S`.
    pub feature: Vec<f64>,
    pub samples: usize,
    pub steps: Vec<StepLog>,
    /// Objective at the broadcast model on the whole local dataset.
    pub half_step_loss: Option<f64>,
}

impl<T> LocalOutcome<T> {
    pub fn mean_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum::<f64>() / self.steps.len().max(1) as f64
    }
}

/// Weight of the alignment loss this round; zero when it is inactive.
fn alignment_weight(strategy: &StrategyConfig, g: Option<&[f64]>) -> f64 {
    match (strategy.kind, g) {
        (Strategy::FedDom { lambda, .. }, Some(_)) if lambda > 0.0 => lambda,
        _ => 0.0,
    }
}

/// Builds `L_recon` for a batch: encode, power-normalise, channel, decode.
/// Returns `(loss, features)` where `features` is the `(B, C)` feature node.
fn reconstruction<T: Real>(
    tape: &mut Tape<T>,
    b: &Broadcast<'_, T>,
    params: &Bound,
    images: &[&Tensor<T>],
    rng: &mut RngStream,
) -> Result<(Var, Var)> {
    let model = b.model;
    let snr = channel::sample_snr(b.channel, rng);
    let snrs = vec![snr; images.len()];
    let x = model.images_var(tape, images)?;
    let enc = model.encode_graph(tape, params, x, &snrs)?;
    let z = tape.row_normalize(enc.latent, channel::target_norm(model.symbols(), b.channel.transmit_power))?;
    let mut received = Vec::with_capacity(tape.value(z).len());
    for row in tape.value(z).chunks(model.latent_len()) {
        received.extend(channel::transmit(row, b.channel, snr, rng)?);
    }
    let y = tape.straight_through(z, received)?;
    let recon = model.decode_graph(tape, params, y, &snrs)?;
    Ok((tape.mse(x, recon)?, enc.features))
}

fn alignment<T: Real>(tape: &mut Tape<T>, features: Var, g: &[f64]) -> Result<Var> {
    let mean = tape.mean_rows(features)?;
    let target = Tensor::new(vec![1, g.len()], g.iter().map(|&v| T::lit(v)).collect())?;
    let target = tape.constant(&target);
    tape.mse(mean, target)
}

fn proximal<T: Real>(tape: &mut Tape<T>, params: &Bound, global: &ModelParams<T>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((_, t), &v) in global.entries().iter().zip(params.vars()) {
        let anchor = tape.constant(t);
        let d = tape.sub(v, anchor)?;
        let s = tape.sq_norm(d);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    total.ok_or_else(|| Error::Usage("proximal term over an empty model".into()))
}

/// Batch mean of `log(1 + exp((cos(z, z_prev) - cos(z, z_glob)) / tau))`.
fn contrastive<T: Real>(tape: &mut Tape<T>, z: Var, z_glob: Vec<Vec<T>>, z_prev: Vec<Vec<T>>, tau: f64) -> Result<Var> {
    let rows = z_glob.len();
    let as_const = |tape: &mut Tape<T>, rows_data: Vec<Vec<T>>| -> Result<Var> {
        let c = rows_data.first().map_or(0, Vec::len);
        let t = Tensor::new(vec![rows, c], rows_data.concat())?;
        Ok(tape.constant(&t))
    };
    let zg = as_const(tape, z_glob)?;
    let zp = as_const(tape, z_prev)?;
    let pos = tape.cosine_rows(z, zg)?;
    let neg = tape.cosine_rows(z, zp)?;
    let d = tape.sub(neg, pos)?;
    let d = tape.scale(d, 1.0 / tau);
    let e = tape.exp(d);
    let ones = tape.constant(&Tensor::full(vec![rows], T::one()));
    let s = tape.add(ones, e)?;
    let l = tape.log(s);
    Ok(tape.mean(l))
}

fn divergence(round: usize, client: usize, err: Error) -> Error {
    match err {
        Error::Numeric { layer } => Error::Divergence { round, client, detail: format!("non-finite values in {layer}") },
        other => other,
    }
}

/// Trains a copy of the broadcast model on `client` for the configured number of epochs.
pub fn local_train<T: Real>(b: &Broadcast<'_, T>, client: &ClientDataset<T>, prev: Option<&ModelParams<T>>) -> Result<LocalOutcome<T>> {
    train_inner(b, client, prev).map_err(|e| divergence(b.round, client.id, e))
}

fn train_inner<T: Real>(b: &Broadcast<'_, T>, client: &ClientDataset<T>, prev: Option<&ModelParams<T>>) -> Result<LocalOutcome<T>> {
    let strat = b.strategy;
    if client.is_empty() {
        return Err(Error::Usage(format!("client {} has no images", client.id)));
    }
    let mut rng = rng::stream(b.seed, &[rng::label_key("local"), client.id as u64, b.round as u64]);
    let lambda = alignment_weight(strat, b.g);
    let half_step_loss = if b.half_step {
        let mut hr = rng::stream(b.seed, &[rng::label_key("half-step"), client.id as u64, b.round as u64]);
        Some(objective(b, b.global, &client.images, lambda, &mut hr)?)
    } else {
        None
    };

    let mut params = b.global.clone();
    params.set_requires_grad(true);
    let dim = b.model.feature_dim();
    let mut feature_acc = vec![0.0f64; dim];
    let denom = (strat.local_epochs * client.len()) as f64;
    let mut steps = Vec::new();
    let mut optimizer = Optimizer::new(strat.optimizer, strat.lr);

    for _ in 0..strat.local_epochs {
        for batch in data::batch_indices(client.len(), strat.batch_size, &mut rng)? {
            let images: Vec<&Tensor<T>> = batch.iter().map(|&i| &client.images[i]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let (mut loss, features) = reconstruction(&mut tape, b, &bound, &images, &mut rng)?;

            for row in tape.value(features).chunks(dim) {
                for (a, v) in feature_acc.iter_mut().zip(row) {
                    *a += v.f64() / denom;
                }
            }
            if lambda > 0.0 {
                let lg = alignment(&mut tape, features, b.g.expect("weight is zero without G"))?;
                let lg = tape.scale(lg, lambda);
                loss = tape.add(loss, lg)?;
            }
            match strat.kind {
                Strategy::FedProx { mu } if mu > 0.0 => {
                    let p = proximal(&mut tape, &bound, b.global)?;
                    let p = tape.scale(p, mu / 2.0);
                    loss = tape.add(loss, p)?;
                }
                Strategy::Moon { mu, tau } if mu > 0.0 => {
                    let z_glob = b.model.batch_features(b.global, &images)?;
                    let z_prev = b.model.batch_features(prev.unwrap_or(b.global), &images)?;
                    let c = contrastive(&mut tape, features, z_glob, z_prev, tau)?;
                    let c = tape.scale(c, mu);
                    loss = tape.add(loss, c)?;
                }
                _ => {}
            }

            let value = tape.scalar(loss).f64();
            if !value.is_finite() {
                return Err(Error::Divergence { round: b.round, client: client.id, detail: format!("loss {value} at step {}", steps.len()) });
            }
            let grads = tape.backward(loss)?;
            params.accumulate_grads(&bound, &grads);
            let grad_norm_sq = params.grad_sq_norm();
            if !grad_norm_sq.is_finite() {
                return Err(Error::Divergence { round: b.round, client: client.id, detail: format!("gradient norm {grad_norm_sq} at step {}", steps.len()) });
            }
            optimizer.step(&mut params)?;
            steps.push(StepLog { step: steps.len(), loss: value, grad_norm_sq });
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence { round: b.round, client: client.id, detail: "non-finite parameters after training".into() });
    }

    let feature = match strat.feature_mode {
        FeatureMode::PerStep => feature_acc,
        FeatureMode::PostHoc => b.model.mean_feature(&params, &client.images, EVAL_CHUNK)?,
    };
    Ok(LocalOutcome { client_id: client.id, params, feature, samples: client.len(), steps, half_step_loss })
}

/// Full-dataset objective `L_recon + lambda * L_G` at `params`, without gradients.
///
/// The reconstruction part is the mean of per-chunk losses weighted by chunk size.
pub fn objective<T: Real>(b: &Broadcast<'_, T>, params: &ModelParams<T>, images: &[Tensor<T>], lambda: f64, rng: &mut RngStream) -> Result<f64> {
    let mut recon = 0.0;
    for part in images.chunks(b.strategy.batch_size.max(1)) {
        let refs: Vec<&Tensor<T>> = part.iter().collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let (loss, _) = reconstruction(&mut tape, b, &bound, &refs, rng)?;
        recon += tape.scalar(loss).f64() * part.len() as f64;
    }
    recon /= images.len() as f64;
    let align = match b.g {
        Some(g) if lambda > 0.0 => {
            let f = b.model.mean_feature(params, images, EVAL_CHUNK)?;
            lambda * super::aggregate::generalization_loss(g, &f)?
        }
        _ => 0.0,
    };
    Ok(recon + align)
}
