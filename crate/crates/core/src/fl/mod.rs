//! Federated orchestration: broadcast, local training, aggregation.
//!
//! Clients train independently between two barriers. Each client draws from
//! its own stream keyed by `(seed, client id, round)` and every server-side
//! reduction runs in ascending id order, so a round gives the same result on
//! any number of worker threads.

pub mod aggregate;
pub mod local;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::channel::ChannelConfig;
use crate::checkpoint::{self, Layer};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::Jscc;
use crate::optim::OptimizerKind;
use crate::params::ModelParams;
use crate::rng;
use crate::scalar::Real;

pub use aggregate::{Contribution, MissingDomainPolicy};
pub use local::{local_train, Broadcast, LocalOutcome, StepLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx {
        #[serde(default = "default_prox_mu")]
        mu: f64,
    },
    #[serde(rename = "moon")]
    Moon {
        #[serde(default = "default_moon_mu")]
        mu: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    #[serde(rename = "feddom")]
    FedDom {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_true")]
        domain_aware: bool,
    },
}

fn default_prox_mu() -> f64 {
    0.01
}
fn default_moon_mu() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.5
}
pub const DEFAULT_LAMBDA: f64 = 1.5;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_true() -> bool {
    true
}

impl Strategy {
    pub fn fedavg() -> Self {
        Strategy::FedAvg
    }

    pub fn fedprox() -> Self {
        Strategy::FedProx { mu: default_prox_mu() }
    }

    pub fn moon() -> Self {
        Strategy::Moon { mu: default_moon_mu(), tau: default_tau() }
    }

    pub fn feddom() -> Self {
        Strategy::FedDom { lambda: DEFAULT_LAMBDA, domain_aware: true }
    }

    /// Name used in result files.
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "FedAvg",
            Strategy::FedProx { .. } => "FedProx",
            Strategy::Moon { .. } => "MOON",
            Strategy::FedDom { .. } => "FedDoM",
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Strategy::FedDom { lambda, .. } => *lambda,
            _ => 0.0,
        }
    }

    pub fn domain_aware(&self) -> bool {
        matches!(self, Strategy::FedDom { domain_aware: true, .. })
    }
}

/// How `F_m^S` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Running mean of features seen during training, with the evolving model.
    #[default]
    PerStep,
    /// Mean over the local dataset with the final local model.
    PostHoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergencePolicy {
    /// Fail the round with the first divergence.
    #[default]
    Abort,
    /// Leave diverged clients out of this round's aggregation.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    #[serde(flatten)]
    pub kind: Strategy,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub feature_mode: FeatureMode,
    #[serde(default)]
    pub missing_domain: MissingDomainPolicy,
    #[serde(default)]
    pub on_divergence: DivergencePolicy,
}

fn default_epochs() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_rounds() -> usize {
    60
}
fn default_batch() -> usize {
    16
}

impl StrategyConfig {
    pub fn new(kind: Strategy) -> Self {
        StrategyConfig {
            kind,
            local_epochs: default_epochs(),
            lr: default_lr(),
            optimizer: OptimizerKind::default(),
            rounds: default_rounds(),
            batch_size: default_batch(),
            feature_mode: FeatureMode::default(),
            missing_domain: MissingDomainPolicy::default(),
            on_divergence: DivergencePolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            Strategy::FedProx { mu } if !(mu >= 0.0 && mu.is_finite()) => return bad(format!("FedProx mu must be >= 0, got {mu}")),
            Strategy::Moon { mu, .. } if !(mu >= 0.0 && mu.is_finite()) => return bad(format!("MOON mu must be >= 0, got {mu}")),
            Strategy::Moon { tau, .. } if !(tau > 0.0 && tau.is_finite()) => return bad(format!("MOON tau must be > 0, got {tau}")),
            Strategy::FedDom { lambda, .. } if !(lambda >= 0.0 && lambda.is_finite()) => {
                return bad(format!("lambda must be >= 0, got {lambda}"))
            }
            _ => {}
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-client state kept across rounds.
#[derive(Debug, Clone)]
pub struct ClientState<T: Real> {
    pub dataset: ClientDataset<T>,
    /// Local model after the client's last round.
    pub params: Option<ModelParams<T>>,
    /// Local model of the round before (the MOON negative anchor).
    pub prev_params: Option<ModelParams<T>>,
    /// Last reported `F_m^S`.
    pub feature: Option<Vec<f64>>,
}

impl<T: Real> ClientState<T> {
    pub fn new(dataset: ClientDataset<T>) -> Self {
        ClientState { dataset, params: None, prev_params: None, feature: None }
    }

    pub fn id(&self) -> usize {
        self.dataset.id
    }
}

#[derive(Debug, Clone)]
pub struct ServerState<T: Real> {
    pub global_params: ModelParams<T>,
    /// Absent until the first round has been aggregated.
    pub global_feature: Option<Vec<f64>>,
    /// Number of completed rounds.
    pub round: usize,
    /// Last per-domain models, for [`MissingDomainPolicy::ReusePrevious`].
    pub domain_models: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub client: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub eta: f64,
    pub lambda: f64,
    /// Set on the first step of a client's round when half-step tracing is on.
    pub half_step_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client: usize,
    pub domain: String,
    pub samples: usize,
    pub mean_loss: f64,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Unweighted mean over participating clients of their mean step loss.
    pub mean_loss: f64,
    pub param_variance: f64,
    /// `(1/M) sum_m ||G - F_m^S||^2` with this round's `G`.
    pub feature_dispersion: f64,
    pub clients: Vec<ClientReport>,
    pub trace: Vec<TraceRow>,
}

pub struct Federation<T: Real> {
    model: Jscc,
    strategy: StrategyConfig,
    channel: ChannelConfig,
    seed: u64,
    domains: Vec<String>,
    pool: rayon::ThreadPool,
    half_step: bool,
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
}

impl<T: Real> Federation<T> {
    /// Sets up a federation whose global model is initialised from `seed`.
    ///
    /// `domains` is the declared domain list used by domain-aware aggregation.
    pub fn new(
        model: Jscc,
        strategy: StrategyConfig,
        channel: ChannelConfig,
        datasets: Vec<ClientDataset<T>>,
        domains: Vec<String>,
        seed: u64,
        threads: usize,
    ) -> Result<Self> {
        strategy.validate()?;
        channel.validate()?;
        if datasets.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        let mut ids: Vec<usize> = datasets.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("client ids must be unique".into()));
        }
        if let Some(d) = datasets.iter().find(|d| !domains.contains(&d.domain)) {
            return Err(Error::Config(format!("client {} uses undeclared domain '{}'", d.id, d.domain)));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
        let global_params = model.init_params(&mut rng::stream(seed, &[rng::label_key("init")]));
        Ok(Federation {
            model,
            strategy,
            channel,
            seed,
            domains,
            pool,
            half_step: false,
            server: ServerState { global_params, global_feature: None, round: 0, domain_models: BTreeMap::new() },
            clients: datasets.into_iter().map(ClientState::new).collect(),
        })
    }

    /// Evaluates the full local objective at the broadcast model before training (for convergence analysis).
    pub fn trace_half_step(&mut self, on: bool) {
        self.half_step = on;
    }

    pub fn model(&self) -> &Jscc {
        &self.model
    }

    pub fn strategy(&self) -> &StrategyConfig {
        &self.strategy
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Runs one full round: broadcast, local training, aggregation, `G` update.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.server.round + 1;
        let g = match self.strategy.kind {
            Strategy::FedDom { .. } => self.server.global_feature.as_deref(),
            _ => None,
        };
        let broadcast = Broadcast {
            model: &self.model,
            strategy: &self.strategy,
            channel: &self.channel,
            global: &self.server.global_params,
            g,
            round,
            seed: self.seed,
            half_step: self.half_step,
        };
        let clients = &self.clients;
        let outcomes: Vec<Result<LocalOutcome<T>>> = self.pool.install(|| {
            clients.par_iter().map(|c| local_train(&broadcast, &c.dataset, c.prev_params.as_ref())).collect()
        });

        let mut reports = Vec::with_capacity(outcomes.len());
        let mut ok: Vec<(usize, LocalOutcome<T>)> = Vec::new();
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let c = &self.clients[i];
            match outcome {
                Ok(o) => {
                    reports.push(ClientReport {
                        client: c.id(),
                        domain: c.dataset.domain.clone(),
                        samples: o.samples,
                        mean_loss: o.mean_loss(),
                        diverged: None,
                    });
                    ok.push((i, o));
                }
                Err(e @ Error::Divergence { .. }) if self.strategy.on_divergence == DivergencePolicy::Exclude => {
                    log::warn!("round {round}: excluding client {}: {e}", c.id());
                    reports.push(ClientReport {
                        client: c.id(),
                        domain: c.dataset.domain.clone(),
                        samples: c.dataset.len(),
                        mean_loss: f64::NAN,
                        diverged: Some(e.to_string()),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if ok.is_empty() {
            return Err(Error::Divergence { round, client: 0, detail: "every client diverged".into() });
        }

        let contributions: Vec<Contribution<'_, T>> = ok
            .iter()
            .map(|(i, o)| Contribution {
                client_id: o.client_id,
                samples: o.samples,
                domain: &self.clients[*i].dataset.domain,
                params: &o.params,
            })
            .collect();
        let global = if self.strategy.kind.domain_aware() {
            aggregate::domain_aware(&contributions, &self.domains, self.strategy.missing_domain, &mut self.server.domain_models)?
        } else {
            aggregate::fedavg(&contributions)?
        };
        // keep reuse-previous models representable in the training scalar
        for v in self.server.domain_models.values_mut() {
            v.iter_mut().for_each(|x| *x = T::lit(*x).f64());
        }
        let features: Vec<(usize, Vec<f64>)> = ok.iter().map(|(_, o)| (o.client_id, o.feature.clone())).collect();
        let g_new: Vec<f64> = aggregate::global_representation(&features)?.into_iter().map(|x| T::lit(x).f64()).collect();
        let locals: Vec<&ModelParams<T>> = ok.iter().map(|(_, o)| &o.params).collect();
        let param_variance = aggregate::param_variance(&global, &locals)?;
        let feature_dispersion = aggregate::feature_dispersion(&g_new, &features)?;

        let lambda = alignment_lambda(&self.strategy, g);
        let mut trace = Vec::new();
        for (_, o) in &ok {
            for s in &o.steps {
                trace.push(TraceRow {
                    round,
                    client: o.client_id,
                    step: s.step,
                    loss: s.loss,
                    grad_norm_sq: s.grad_norm_sq,
                    eta: self.strategy.lr,
                    lambda,
                    half_step_loss: if s.step == 0 { o.half_step_loss } else { None },
                });
            }
        }
        let mean_loss = ok.iter().map(|(_, o)| o.mean_loss()).sum::<f64>() / ok.len() as f64;

        let keep_prev = matches!(self.strategy.kind, Strategy::Moon { .. });
        for (i, o) in ok {
            let c = &mut self.clients[i];
            c.feature = Some(o.feature);
            if keep_prev {
                c.prev_params = Some(o.params.clone());
            }
            c.params = Some(o.params);
        }
        self.server.global_params = global;
        self.server.global_feature = Some(g_new);
        self.server.round = round;
        Ok(RoundReport { round, mean_loss, param_variance, feature_dispersion, clients: reports, trace })
    }
}

const GLOBAL_PREFIX: &str = "global.";
const ROUND_LAYER: &str = "state.round";
const G_LAYER: &str = "state.g";
const DOMAIN_PREFIX: &str = "domain.";

fn vector_layer(name: String, v: &[f64]) -> Layer {
    Layer { name, shape: vec![v.len()], data: v.iter().map(|&x| x as f32).collect() }
}

impl<T: Real> Federation<T> {
    /// Server state plus the per-client models MOON needs, as checkpoint layers.
    ///
    /// Every stored value is already representable in the training scalar, so
    /// restoring and continuing reproduces an uninterrupted run exactly.
    pub fn state_layers(&self) -> Vec<Layer> {
        let mut layers = checkpoint::params_to_layers(GLOBAL_PREFIX, &self.server.global_params);
        layers.push(Layer { name: ROUND_LAYER.into(), shape: vec![1], data: vec![self.server.round as f32] });
        if let Some(g) = &self.server.global_feature {
            layers.push(vector_layer(G_LAYER.into(), g));
        }
        for (domain, v) in &self.server.domain_models {
            layers.push(vector_layer(format!("{DOMAIN_PREFIX}{domain}"), v));
        }
        for c in &self.clients {
            if let Some(p) = &c.prev_params {
                layers.extend(checkpoint::params_to_layers(&format!("prev.{}.", c.id()), p));
            }
        }
        layers
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        checkpoint::write_layers(path, &self.state_layers())
    }

    /// Restores what [`Federation::state_layers`] wrote.
    pub fn restore_layers(&mut self, layers: &[Layer], path: &Path) -> Result<()> {
        let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
        let global = checkpoint::params_from_layers(GLOBAL_PREFIX, layers, &self.server.global_params, path)?;
        let round = layers
            .iter()
            .find(|l| l.name == ROUND_LAYER)
            .and_then(|l| l.data.first())
            .ok_or_else(|| bad(format!("missing layer {ROUND_LAYER}")))?;
        if !(round.fract() == 0.0 && *round >= 0.0) {
            return Err(bad(format!("invalid round {round}")));
        }
        let g = layers.iter().find(|l| l.name == G_LAYER).map(|l| l.data.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
        if let Some(g) = &g {
            if g.len() != self.model.feature_dim() {
                return Err(bad(format!("global representation has {} entries, model has {}", g.len(), self.model.feature_dim())));
            }
        }
        let mut domain_models = BTreeMap::new();
        for l in layers {
            if let Some(d) = l.name.strip_prefix(DOMAIN_PREFIX) {
                domain_models.insert(d.to_string(), l.data.iter().map(|&x| f64::from(x)).collect());
            }
        }
        let mut prev = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let prefix = format!("prev.{}.", c.id());
            prev.push(if layers.iter().any(|l| l.name.starts_with(&prefix)) {
                Some(checkpoint::params_from_layers(&prefix, layers, &self.server.global_params, path)?)
            } else {
                None
            });
        }
        self.server.global_params = global;
        self.server.round = *round as usize;
        self.server.global_feature = g;
        self.server.domain_models = domain_models;
        for (c, p) in self.clients.iter_mut().zip(prev) {
            c.prev_params = p;
            c.params = None;
            c.feature = None;
        }
        Ok(())
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let layers = checkpoint::read_layers(path)?;
        self.restore_layers(&layers, path)
    }
}

fn alignment_lambda(strategy: &StrategyConfig, g: Option<&[f64]>) -> f64 {
    if g.is_some() {
        strategy.kind.lambda()
    } else {
        0.0
    }
}
