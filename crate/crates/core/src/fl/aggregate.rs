//! Server-side reductions: model averaging, the global representation and
//! the scalar regularisers used by the baselines.
//!
//! All reductions run in ascending client id (or domain name) order and
//! accumulate in `f64`, so the result does not depend on arrival order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Real;

/// One client's contribution to an aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a, T> {
    pub client_id: usize,
    pub samples: usize,
    pub domain: &'a str,
    pub params: &'a ModelParams<T>,
}

/// What to do with a declared domain that has no participating client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingDomainPolicy {
    /// Average over the domains that are present.
    #[default]
    Skip,
    /// Use the domain's model from the last round it participated in.
    ReusePrevious,
}

fn sorted<'a, 'b, T>(items: &'b [Contribution<'a, T>]) -> Result<Vec<&'b Contribution<'a, T>>> {
    let mut v: Vec<_> = items.iter().collect();
    v.sort_by_key(|c| c.client_id);
    if v.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Usage("duplicate client id in aggregation".into()));
    }
    Ok(v)
}

fn weighted_mean<T: Real>(items: &[&Contribution<'_, T>]) -> Result<Vec<f64>> {
    let total: usize = items.iter().map(|c| c.samples).sum();
    if total == 0 {
        return Err(Error::Usage("aggregation over zero samples".into()));
    }
    let weighted: Vec<(&ModelParams<T>, f64)> =
        items.iter().map(|c| (c.params, c.samples as f64 / total as f64)).collect();
    ModelParams::weighted_sum_f64(&weighted)
}

fn template<'a, T>(items: &[Contribution<'a, T>]) -> Result<&'a ModelParams<T>> {
    items.first().map(|c| c.params).ok_or_else(|| Error::Usage("aggregation over no clients".into()))
}

/// `sum_m (D_m / D) theta_m`.
pub fn fedavg<T: Real>(items: &[Contribution<'_, T>]) -> Result<ModelParams<T>> {
    let tmpl = template(items)?;
    let flat = weighted_mean(&sorted(items)?)?;
    tmpl.unflatten(&flat.into_iter().map(T::lit).collect::<Vec<_>>())
}

/// Two-stage average: sample-weighted within each domain, uniform across domains.
///
/// `previous` holds the last per-domain models and is refreshed with this
/// round's; it is consulted only under [`MissingDomainPolicy::ReusePrevious`].
pub fn domain_aware<T: Real>(
    items: &[Contribution<'_, T>],
    declared: &[String],
    policy: MissingDomainPolicy,
    previous: &mut BTreeMap<String, Vec<f64>>,
) -> Result<ModelParams<T>> {
    let tmpl = template(items)?;
    let ordered = sorted(items)?;
    if let Some(c) = ordered.iter().find(|c| !declared.iter().any(|d| d == c.domain)) {
        return Err(Error::Config(format!("client {} belongs to undeclared domain '{}'", c.client_id, c.domain)));
    }
    let mut names: Vec<&String> = declared.iter().collect();
    names.sort();
    names.dedup();
    let mut per_domain: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for name in names {
        let members: Vec<_> = ordered.iter().copied().filter(|c| c.domain == name.as_str()).collect();
        if members.is_empty() {
            match (policy, previous.get(name)) {
                (MissingDomainPolicy::ReusePrevious, Some(prev)) => per_domain.push(prev.clone()),
                _ => log::warn!("domain '{name}' has no participating clients; skipped"),
            }
            continue;
        }
        let theta_u = weighted_mean(&members)?;
        previous.insert(name.clone(), theta_u.clone());
        per_domain.push(theta_u);
    }
    let n = per_domain.len() as f64;
    let mut acc = vec![0.0f64; tmpl.total_count()];
    for theta_u in &per_domain {
        for (a, v) in acc.iter_mut().zip(theta_u) {
            *a += v / n;
        }
    }
    tmpl.unflatten(&acc.into_iter().map(T::lit).collect::<Vec<_>>())
}

/// Unweighted mean of client feature vectors, reduced in ascending id order.
pub fn global_representation(features: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut v: Vec<&(usize, Vec<f64>)> = features.iter().collect();
    v.sort_by_key(|(id, _)| *id);
    let dim = v.first().ok_or_else(|| Error::Usage("global representation of no features".into()))?.1.len();
    if v.iter().any(|(_, f)| f.len() != dim) {
        return Err(Error::shape("global_representation", "feature dimensions differ"));
    }
    let m = v.len() as f64;
    let mut g = vec![0.0; dim];
    for (_, f) in v {
        for (a, x) in g.iter_mut().zip(f) {
            *a += x;
        }
    }
    Ok(g.into_iter().map(|s| s / m).collect())
}

/// Mean squared difference between the global representation and a local feature.
pub fn generalization_loss(g: &[f64], f: &[f64]) -> Result<f64> {
    if g.len() != f.len() || g.is_empty() {
        return Err(Error::shape("generalization_loss", format!("{} vs {}", g.len(), f.len())));
    }
    Ok(g.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g.len() as f64)
}

/// `(mu / 2) * ||theta - theta_g||^2`.
pub fn fedprox_term<T: Real>(theta: &ModelParams<T>, theta_g: &ModelParams<T>, mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    mu / 2.0 * theta.sq_distance(theta_g)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Model-contrastive loss of one representation.
pub fn moon_loss(z: &[f64], z_glob: &[f64], z_prev: &[f64], tau: f64, mu: f64) -> Result<f64> {
    if z.len() != z_glob.len() || z.len() != z_prev.len() {
        return Err(Error::shape("moon_loss", "representation dimensions differ"));
    }
    if !(tau > 0.0) {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    if mu == 0.0 {
        return Ok(0.0);
    }
    let pos = cosine(z, z_glob) / tau;
    let neg = cosine(z, z_prev) / tau;
    // -log(e^pos / (e^pos + e^neg)) = log(1 + e^(neg - pos))
    Ok(mu * (neg - pos).exp().ln_1p())
}

/// `(1/M) sum_m ||theta_g - theta_m||_2`: a mean of distances, not squared.
pub fn param_variance<T: Real>(global: &ModelParams<T>, clients: &[&ModelParams<T>]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Usage("parameter variance over no clients".into()));
    }
    Ok(clients.iter().map(|c| global.distance(c)).sum::<f64>() / clients.len() as f64)
}

/// `(1/M) sum_m ||G - F_m||^2`.
pub fn feature_dispersion(g: &[f64], features: &[(usize, Vec<f64>)]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Usage("feature dispersion over no clients".into()));
    }
    let mut v: Vec<&(usize, Vec<f64>)> = features.iter().collect();
    v.sort_by_key(|(id, _)| *id);
    let mut total = 0.0;
    for (_, f) in v {
        if f.len() != g.len() {
            return Err(Error::shape("feature_dispersion", "feature dimensions differ"));
        }
        total += g.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn p(v: &[f64]) -> ModelParams<f64> {
        ModelParams::new(vec![("w".into(), Tensor::from_slice(v))])
    }

    fn c<'a>(id: usize, samples: usize, domain: &'a str, params: &'a ModelParams<f64>) -> Contribution<'a, f64> {
        Contribution { client_id: id, samples, domain, params }
    }

    #[test]
    fn fedavg_examples() {
        let (a, b) = (p(&[0.0]), p(&[4.0]));
        assert_eq!(fedavg(&[c(1, 1, "x", &a), c(2, 3, "x", &b)]).unwrap().flatten(), vec![3.0]);
        assert_eq!(fedavg(&[c(7, 5, "x", &b)]).unwrap(), b);
        assert!(fedavg(&[c(1, 1, "x", &a), c(1, 1, "x", &b)]).is_err());
    }

    #[test]
    fn domain_aware_example() {
        let (a1, a2, b1) = (p(&[2.0]), p(&[6.0]), p(&[1.0]));
        let declared = vec!["A".to_string(), "B".to_string()];
        let items = [c(1, 1, "A", &a1), c(2, 3, "A", &a2), c(3, 7, "B", &b1)];
        let mut prev = BTreeMap::new();
        let g = domain_aware(&items, &declared, MissingDomainPolicy::Skip, &mut prev).unwrap();
        assert_eq!(g.flatten(), vec![3.0]);
        assert_eq!(prev["A"], vec![5.0]);

        // domain B absent: skip renormalises, reuse keeps the old B model
        let only_a = &items[..2];
        let skip = domain_aware(only_a, &declared, MissingDomainPolicy::Skip, &mut prev.clone()).unwrap();
        assert_eq!(skip.flatten(), vec![5.0]);
        let reuse = domain_aware(only_a, &declared, MissingDomainPolicy::ReusePrevious, &mut prev).unwrap();
        assert_eq!(reuse.flatten(), vec![3.0]);
    }

    #[test]
    fn global_representation_examples() {
        let g = global_representation(&[(2, vec![4.0, 6.0]), (1, vec![0.0, 2.0])]).unwrap();
        assert_eq!(g, vec![2.0, 4.0]);
        assert!(global_representation(&[]).is_err());
        assert_eq!(generalization_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(feature_dispersion(&g, &[(1, vec![0.0, 2.0]), (2, vec![4.0, 6.0])]).unwrap(), 8.0);
    }

    #[test]
    fn regulariser_examples() {
        assert_eq!(fedprox_term(&p(&[1.0, 1.0]), &p(&[0.0, 0.0]), 2.0), 2.0);
        assert_eq!(fedprox_term(&p(&[1.0, 1.0]), &p(&[0.0, 0.0]), 0.0), 0.0);
        let sym = moon_loss(&[1.0, 0.0], &[1.0, 1.0], &[1.0, -1.0], 1.0, 1.0).unwrap();
        assert!((sym - std::f64::consts::LN_2).abs() < 1e-12);
        let ortho = moon_loss(&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0], 1.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((ortho - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((ortho - 0.3133).abs() < 1e-4);
        assert_eq!(moon_loss(&[1.0], &[1.0], &[1.0], 1.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn param_variance_examples() {
        let g = p(&[0.0, 0.0]);
        assert_eq!(param_variance(&g, &[&g]).unwrap(), 0.0);
        assert_eq!(param_variance(&g, &[&p(&[3.0, 4.0])]).unwrap(), 5.0);
        assert_eq!(param_variance(&g, &[&p(&[1.0, 0.0]), &p(&[0.0, 3.0])]).unwrap(), 2.0);
    }
}
