//! Convergence diagnostics: empirical smoothness and Lipschitz constants,
//! the one-round decrease bound, the admissible learning rate and alignment
//! weight, and round-boundary monotonicity checks.
//!
//! All constants are sample estimates, so every "satisfied" verdict is
//! conditional on them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelConfig};
use crate::error::{Error, Result};
use crate::fl::TraceRow;
use crate::model::Jscc;
use crate::params::ModelParams;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Restart the power iteration in `estimate_l1` from a fresh random direction this often.
const POWER_RESTART: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionEstimates {
    pub l1: f64,
    pub l2: f64,
    pub sigma2: f64,
    pub v: f64,
    /// Gradient or feature evaluations behind the estimates.
    pub samples: usize,
}

impl AssumptionEstimates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.sigma2, self.v];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Usage(format!("assumption constants must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_direction<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&d);
        if n > 0.0 {
            return d.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

fn check_probe_args(probes: usize, radius: f64) -> Result<()> {
    if probes == 0 {
        return Err(Error::Usage("at least one probe is required".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Usage(format!("probe radius must be positive, got {radius}")));
    }
    Ok(())
}

/// Lower-bound estimate of the gradient Lipschitz constant around `theta`.
///
/// Each probe measures `||grad(theta + d) - grad(theta)|| / ||d||` with
/// `||d|| = radius`. Probes after the first in each block follow the measured
/// gradient difference (a finite-difference power iteration on the Hessian).
pub fn estimate_l1<F, R>(grad: F, theta: &[f64], probes: usize, radius: f64, rng: &mut R) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    check_probe_args(probes, radius)?;
    let g0 = grad(theta)?;
    let mut best = 0.0f64;
    let mut dir: Option<Vec<f64>> = None;
    for k in 0..probes {
        let d = match dir.take() {
            Some(d) if k % POWER_RESTART != 0 => d,
            _ => random_direction(theta.len(), radius, rng),
        };
        let shifted: Vec<f64> = theta.iter().zip(&d).map(|(t, x)| t + x).collect();
        let g = grad(&shifted)?;
        let diff: Vec<f64> = g.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let dn = norm(&diff);
        if !dn.is_finite() {
            return Err(Error::Numeric { layer: "gradient probe".into() });
        }
        best = best.max(dn / radius);
        if dn > 0.0 {
            dir = Some(diff.into_iter().map(|x| x * radius / dn).collect());
        }
    }
    Ok(best)
}

/// Lower-bound estimate of the Lipschitz constant of a feature map:
/// max over random probes of `||f(theta + d) - f(theta)|| / ||d||`.
pub fn estimate_l2<F, R>(features: F, theta: &[f64], probes: usize, radius: f64, rng: &mut R) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    check_probe_args(probes, radius)?;
    let f0 = features(theta)?;
    let mut best = 0.0f64;
    for _ in 0..probes {
        let d = random_direction(theta.len(), radius, rng);
        let shifted: Vec<f64> = theta.iter().zip(&d).map(|(t, x)| t + x).collect();
        let f = features(&shifted)?;
        let dn = norm(&f.iter().zip(&f0).map(|(a, b)| a - b).collect::<Vec<_>>());
        if !dn.is_finite() {
            return Err(Error::Numeric { layer: "feature probe".into() });
        }
        best = best.max(dn / radius);
    }
    Ok(best)
}

/// `(sigma2, V)` from minibatch gradients and the full gradient:
/// `sigma2` is the mean of `||g_b - g||^2`, `V` the largest `||g_b||`.
pub fn estimate_variance(batch_grads: &[Vec<f64>], full_grad: &[f64]) -> Result<(f64, f64)> {
    if batch_grads.is_empty() {
        return Err(Error::Usage("variance estimate needs at least one minibatch gradient".into()));
    }
    let mut sigma2 = 0.0;
    let mut v = 0.0f64;
    for g in batch_grads {
        if g.len() != full_grad.len() {
            return Err(Error::shape("variance estimate", format!("gradient of length {} vs {}", g.len(), full_grad.len())));
        }
        sigma2 += g.iter().zip(full_grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        v = v.max(norm(g));
    }
    Ok((sigma2 / batch_grads.len() as f64, v))
}

/// Gradient and feature evaluations of the reconstruction loss with frozen channel noise,
/// so that repeated probes see a deterministic function of the parameters.
pub struct JsccProbe<'a> {
    pub model: &'a Jscc,
    pub template: &'a ModelParams<f64>,
    pub channel: &'a ChannelConfig,
    pub images: &'a [Tensor<f64>],
    pub snr_db: f64,
    pub seed: u64,
}

impl JsccProbe<'_> {
    fn loss_grad_on(&self, theta: &[f64], images: &[&Tensor<f64>], key: u64) -> Result<Vec<f64>> {
        let mut params = self.template.unflatten(theta)?;
        params.set_requires_grad(true);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let snrs = vec![self.snr_db; images.len()];
        let x = self.model.images_var(&mut tape, images)?;
        let enc = self.model.encode_graph(&mut tape, &p, x, &snrs)?;
        let z = tape.row_normalize(enc.latent, channel::target_norm(self.model.symbols(), self.channel.transmit_power))?;
        let mut received = Vec::with_capacity(tape.value(z).len());
        for (i, row) in tape.value(z).chunks(self.model.latent_len()).enumerate() {
            let mut r = rng::stream(self.seed, &[rng::label_key("probe"), key, i as u64]);
            received.extend(channel::transmit(row, self.channel, self.snr_db, &mut r)?);
        }
        let y = tape.straight_through(z, received)?;
        let out = self.model.decode_graph(&mut tape, &p, y, &snrs)?;
        let loss = tape.mse(x, out)?;
        let grads = tape.backward(loss)?;
        params.accumulate_grads(&p, &grads);
        params.flat_grads()
    }

    /// Gradient of the mean reconstruction loss over all probe images.
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let refs: Vec<&Tensor<f64>> = self.images.iter().collect();
        self.loss_grad_on(theta, &refs, 0)
    }

    /// Gradient over a subset of the probe images, with noise keyed by `key`.
    pub fn batch_gradient(&self, theta: &[f64], batch: &[usize], key: u64) -> Result<Vec<f64>> {
        let refs: Vec<&Tensor<f64>> = batch.iter().map(|&i| &self.images[i]).collect();
        self.loss_grad_on(theta, &refs, key)
    }

    /// Mean feature vector over the probe images.
    pub fn features(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let params = self.template.unflatten(theta)?;
        self.model.mean_feature(&params, self.images, self.images.len().max(1))
    }

    /// Estimates all four constants around the template parameters.
    pub fn estimate<R: Rng + ?Sized>(&self, probes: usize, radius: f64, batches: usize, batch_size: usize, rng: &mut R) -> Result<AssumptionEstimates> {
        if self.images.is_empty() {
            return Err(Error::Usage("constant estimation needs at least one image".into()));
        }
        if batches == 0 || batch_size == 0 {
            return Err(Error::Usage("variance estimate needs batches >= 1 and batch_size >= 1".into()));
        }
        let theta = self.template.flatten();
        let l1 = estimate_l1(|t| self.gradient(t), &theta, probes, radius, rng)?;
        let l2 = estimate_l2(|t| self.features(t), &theta, probes, radius, rng)?;
        let full = self.gradient(&theta)?;
        let mut batch_grads = Vec::with_capacity(batches);
        for b in 0..batches {
            let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.images.len())).collect();
            batch_grads.push(self.batch_gradient(&theta, &idx, b as u64 + 1)?);
        }
        let (sigma2, v) = estimate_variance(&batch_grads, &full)?;
        Ok(AssumptionEstimates { l1, l2, sigma2, v, samples: 2 * probes + batches + 1 })
    }
}

/// One client's round as seen by the bound evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub client: usize,
    /// Objective at the broadcast model before the first local step.
    pub half_step_loss: f64,
    /// `||grad L||^2` at each local step.
    pub grad_norm_sq: Vec<f64>,
    pub eta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecreaseCheck {
    pub bound_rhs_delta: f64,
    pub empirical_delta: f64,
    pub satisfied: bool,
}

/// Right-hand side of the one-round decrease bound for a given gradient sum.
pub fn decrease_bound(grad_sum: f64, est: &AssumptionEstimates, eta: f64, lambda: f64, e: usize) -> f64 {
    let e = e as f64;
    -(eta - est.l1 * eta * eta / 2.0) * grad_sum + (est.l1 * e * eta * eta / 2.0) * est.sigma2 + lambda * est.l2 * eta * e * est.v
}

/// Compares the change in half-step loss between `current` and `next` against the bound.
pub fn one_round_decrease(
    current: &RoundTrace,
    next: &RoundTrace,
    est: &AssumptionEstimates,
    e: usize,
    tolerance: f64,
) -> Result<DecreaseCheck> {
    if e == 0 {
        return Err(Error::Usage("local step count E must be >= 1".into()));
    }
    if current.grad_norm_sq.len() != e {
        return Err(Error::Usage(format!(
            "round {} client {}: expected {e} trace steps, found {}",
            current.round,
            current.client,
            current.grad_norm_sq.len()
        )));
    }
    let bound_rhs_delta = decrease_bound(current.grad_norm_sq.iter().sum(), est, current.eta, current.lambda, e);
    let empirical_delta = next.half_step_loss - current.half_step_loss;
    Ok(DecreaseCheck { bound_rhs_delta, empirical_delta, satisfied: empirical_delta <= bound_rhs_delta + tolerance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaBound {
    pub eta_max: f64,
    /// False when the alignment term outweighs the gradients and no step size qualifies.
    pub admissible: bool,
}

/// Largest learning rate for which the bound guarantees a decrease, given the
/// squared gradient norms of the steps taken so far in the round.
pub fn step_size_bound(grad_norm_sq: &[f64], est: &AssumptionEstimates, lambda: f64, e: usize) -> Result<EtaBound> {
    if !(est.l1 > 0.0) {
        return Err(Error::Usage(format!("L1 must be positive for a step-size bound, got {}", est.l1)));
    }
    let align = lambda * est.l2 * e as f64 * est.v;
    let noise = e as f64 * est.sigma2;
    if align == 0.0 && noise == 0.0 {
        return Ok(EtaBound { eta_max: 2.0 / est.l1, admissible: true });
    }
    let s: f64 = grad_norm_sq.iter().sum();
    let num = s - align;
    if num < 0.0 {
        return Ok(EtaBound { eta_max: 0.0, admissible: false });
    }
    Ok(EtaBound { eta_max: 2.0 * num / (est.l1 * (s + noise)), admissible: true })
}

/// Alignment weight `||grad L||^2 / (L2 E V)` suggested by the first-step gradient.
pub fn suggested_lambda(grad_norm_sq_first: f64, est: &AssumptionEstimates, e: usize) -> Result<f64> {
    if grad_norm_sq_first == 0.0 {
        return Ok(0.0);
    }
    let denom = est.l2 * e as f64 * est.v;
    if !(denom > 0.0) {
        return Err(Error::Usage("lambda bound needs L2, E and V all positive".into()));
    }
    Ok(grad_norm_sq_first / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicReport {
    /// Round indices (into the input) where the boundary loss went up.
    pub increases: Vec<usize>,
    pub compliant_fraction: f64,
    /// Compliance restricted to rounds whose step size satisfied the bound.
    pub compliant_fraction_admissible: Option<f64>,
    pub compliant_fraction_inadmissible: Option<f64>,
    /// First index at which the loss is non-finite or has risen for `window` consecutive rounds.
    pub diverged_at: Option<usize>,
}

fn fraction(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut ok, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        ok += usize::from(f);
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

/// Flags increases in a sequence of round-boundary losses. `eta_ok[r]` says
/// whether the step size used for the transition `r -> r + 1` satisfied the
/// step-size bound.
pub fn check_monotonic_decrease(losses: &[f64], eta_ok: Option<&[bool]>, window: usize) -> Result<MonotonicReport> {
    if window == 0 {
        return Err(Error::Usage("window must be >= 1".into()));
    }
    let transitions = losses.len().saturating_sub(1);
    if let Some(ok) = eta_ok {
        if ok.len() < transitions {
            return Err(Error::Usage(format!("{} step-size flags for {transitions} transitions", ok.len())));
        }
    }
    let compliant: Vec<bool> = losses.windows(2).map(|w| w[1] <= w[0]).collect();
    let increases = compliant.iter().enumerate().filter(|(_, c)| !**c).map(|(i, _)| i + 1).collect();
    let mut diverged_at = None;
    let mut run = 0usize;
    for (i, &l) in losses.iter().enumerate() {
        if !l.is_finite() {
            diverged_at = Some(i);
            break;
        }
        run = if i > 0 && l > losses[i - 1] { run + 1 } else { 0 };
        if run >= window {
            diverged_at = Some(i);
            break;
        }
    }
    let split = |want: bool| eta_ok.and_then(|ok| fraction(compliant.iter().zip(ok).filter(|(_, o)| **o == want).map(|(c, _)| *c)));
    Ok(MonotonicReport {
        increases,
        compliant_fraction: fraction(compliant.iter().copied()).unwrap_or(1.0),
        compliant_fraction_admissible: split(true),
        compliant_fraction_inadmissible: split(false),
        diverged_at,
    })
}

/// Groups a step trace by `(client, round)`; only rounds with a recorded half-step loss are kept.
pub fn round_traces(rows: &[TraceRow]) -> Result<Vec<RoundTrace>> {
    let mut map: BTreeMap<(usize, usize), RoundTrace> = BTreeMap::new();
    for r in rows {
        let t = map.entry((r.client, r.round)).or_insert_with(|| RoundTrace {
            round: r.round,
            client: r.client,
            half_step_loss: f64::NAN,
            grad_norm_sq: Vec::new(),
            eta: r.eta,
            lambda: r.lambda,
        });
        if r.step != t.grad_norm_sq.len() {
            return Err(Error::Usage(format!("trace for client {} round {} skips to step {}", r.client, r.round, r.step)));
        }
        t.grad_norm_sq.push(r.grad_norm_sq);
        if let Some(h) = r.half_step_loss {
            t.half_step_loss = h;
        }
    }
    Ok(map.into_values().filter(|t| !t.half_step_loss.is_nan()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostic {
    pub round: usize,
    pub client: usize,
    /// Local steps `E` taken by this client in the round.
    pub local_steps: usize,
    pub bound_rhs_delta: f64,
    pub empirical_delta: f64,
    pub satisfied: bool,
    pub eta: f64,
    pub eta_max: f64,
    pub eta_admissible: bool,
    pub lambda: f64,
    pub lambda_suggested: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMonotonicity {
    pub client: usize,
    pub report: MonotonicReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub estimates: AssumptionEstimates,
    pub tolerance: f64,
    pub rounds: Vec<RoundDiagnostic>,
    pub satisfied_fraction: Option<f64>,
    pub monotonicity: Vec<ClientMonotonicity>,
    pub note: String,
}

/// Evaluates every bound on consecutive rounds of each client in `traces`.
/// `E` for a round is the number of steps recorded for it.
pub fn diagnose(traces: &[RoundTrace], est: &AssumptionEstimates, tolerance: f64, window: usize) -> Result<Diagnostics> {
    est.validate()?;
    let mut by_client: BTreeMap<usize, Vec<&RoundTrace>> = BTreeMap::new();
    for t in traces {
        by_client.entry(t.client).or_default().push(t);
    }
    let mut rounds = Vec::new();
    let mut monotonicity = Vec::new();
    for (client, mut ts) in by_client {
        ts.sort_by_key(|t| t.round);
        let mut eta_ok = Vec::new();
        for pair in ts.windows(2) {
            let (cur, next) = (pair[0], pair[1]);
            if next.round != cur.round + 1 {
                continue;
            }
            let local_steps = cur.grad_norm_sq.len();
            if local_steps == 0 {
                return Err(Error::Usage(format!("round {} client {client} has no trace steps", cur.round)));
            }
            let check = one_round_decrease(cur, next, est, local_steps, tolerance)?;
            let eta_bound = if est.l1 > 0.0 { Some(step_size_bound(&cur.grad_norm_sq, est, cur.lambda, local_steps)?) } else { None };
            let admissible = eta_bound.is_some_and(|b| b.admissible && cur.eta < b.eta_max);
            eta_ok.push(admissible);
            rounds.push(RoundDiagnostic {
                round: cur.round,
                client,
                local_steps,
                bound_rhs_delta: check.bound_rhs_delta,
                empirical_delta: check.empirical_delta,
                satisfied: check.satisfied,
                eta: cur.eta,
                eta_max: eta_bound.map_or(f64::INFINITY, |b| b.eta_max),
                eta_admissible: admissible,
                lambda: cur.lambda,
                lambda_suggested: suggested_lambda(cur.grad_norm_sq[0], est, local_steps).ok(),
            });
        }
        let losses: Vec<f64> = ts.iter().map(|t| t.half_step_loss).collect();
        let contiguous = ts.windows(2).all(|p| p[1].round == p[0].round + 1);
        let report = check_monotonic_decrease(&losses, contiguous.then_some(eta_ok.as_slice()), window)?;
        monotonicity.push(ClientMonotonicity { client, report });
    }
    let satisfied_fraction = fraction(rounds.iter().map(|r| r.satisfied));
    Ok(Diagnostics {
        estimates: *est,
        tolerance,
        rounds,
        satisfied_fraction,
        monotonicity,
        note: "constants are empirical lower-bound estimates; verdicts are conditional on them".into(),
    })
}

/// Clients with shared curvature `A = diag(curvature)` and per-client centres:
/// `f_m(theta) = 1/2 (theta - c_m)^T A (theta - c_m)`.
///
/// With shared curvature, averaging the local iterates equals gradient descent
/// on the weighted global objective, so the one-round bound holds with the
/// analytic constants `L1 = max(A)`, `sigma2 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticToy {
    pub curvature: Vec<f64>,
    pub centres: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Standard deviation of isotropic Gaussian noise added to each local gradient.
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRound {
    /// Global objective at the broadcast model.
    pub loss: f64,
    /// `||grad L||^2` of the global objective at the averaged local iterate, per step.
    pub grad_norm_sq: Vec<f64>,
}

impl QuadraticToy {
    /// A fixed heterogeneous instance: `dim` coordinates, `clients` centres.
    pub fn standard(dim: usize, clients: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::label_key("quadratic-toy")]);
        let curvature = (0..dim).map(|i| 1.0 + i as f64 * 2.0 / dim.max(1) as f64).collect();
        let centres = (0..clients).map(|_| (0..dim).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let weights = (0..clients).map(|_| r.random_range(1.0..10.0)).collect();
        QuadraticToy { curvature, centres, weights, noise_std: 0.0 }
    }

    pub fn l1(&self) -> f64 {
        self.curvature.iter().copied().fold(0.0, f64::max)
    }

    pub fn analytic_estimates(&self) -> AssumptionEstimates {
        let sigma2 = self.noise_std * self.noise_std * self.curvature.len() as f64;
        AssumptionEstimates { l1: self.l1(), l2: 0.0, sigma2, v: 0.0, samples: 0 }
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let tw = self.total_weight();
        self.centres
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w / tw * 0.5 * theta.iter().zip(c).zip(&self.curvature).map(|((t, c), a)| a * (t - c) * (t - c)).sum::<f64>())
            .sum()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let tw = self.total_weight();
        let mut g = vec![0.0; theta.len()];
        for (c, w) in self.centres.iter().zip(&self.weights) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += w / tw * self.curvature[i] * (theta[i] - c[i]);
            }
        }
        g
    }

    /// Runs `rounds` rounds of FedAvg with `e` local gradient steps of size `eta`.
    /// Returns the per-round records and the final model.
    pub fn run(&self, theta0: &[f64], eta: f64, e: usize, rounds: usize, seed: u64) -> (Vec<ToyRound>, Vec<f64>) {
        let tw = self.total_weight();
        let mut theta = theta0.to_vec();
        let mut out = Vec::with_capacity(rounds);
        for r in 0..rounds {
            let loss = self.loss(&theta);
            let mut locals: Vec<Vec<f64>> = vec![theta.clone(); self.centres.len()];
            let mut grad_norm_sq = Vec::with_capacity(e);
            for step in 0..e {
                let mut avg = vec![0.0; theta.len()];
                for (m, local) in locals.iter().enumerate() {
                    for (a, x) in avg.iter_mut().zip(local) {
                        *a += self.weights[m] / tw * x;
                    }
                }
                grad_norm_sq.push(self.gradient(&avg).iter().map(|g| g * g).sum());
                for (m, local) in locals.iter_mut().enumerate() {
                    let mut noise = rng::stream(seed, &[rng::label_key("toy-noise"), r as u64, m as u64, step as u64]);
                    for (i, x) in local.iter_mut().enumerate() {
                        let n = if self.noise_std > 0.0 { self.noise_std * noise.sample::<f64, _>(StandardNormal) } else { 0.0 };
                        *x -= eta * (self.curvature[i] * (*x - self.centres[m][i]) + n);
                    }
                }
            }
            theta = vec![0.0; theta.len()];
            for (m, local) in locals.iter().enumerate() {
                for (t, x) in theta.iter_mut().zip(local) {
                    *t += self.weights[m] / tw * x;
                }
            }
            out.push(ToyRound { loss, grad_norm_sq });
        }
        (out, theta)
    }

    /// Traces in the form consumed by [`diagnose`], as a single pseudo-client.
    pub fn traces(&self, rounds: &[ToyRound], eta: f64) -> Vec<RoundTrace> {
        rounds
            .iter()
            .enumerate()
            .map(|(r, t)| RoundTrace { round: r + 1, client: 0, half_step_loss: t.loss, grad_norm_sq: t.grad_norm_sq.clone(), eta, lambda: 0.0 })
            .collect()
    }
}
