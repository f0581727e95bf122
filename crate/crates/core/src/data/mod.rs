//! Per-domain image pools and their assignment to clients.
//!
//! A pool is either generated procedurally or read from a directory of PPM
//! files. Each pool is split into train and test parts by a hash of the image
//! index (one fifth for test); client datasets are carved from the train part.

pub mod partition;
pub mod ppm;
pub mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Where a domain's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DomainSource {
    /// Built-in generator named after the domain. Without `count`, the pool is
    /// sized to fit the requested partition exactly.
    Synthetic {
        #[serde(default)]
        count: Option<usize>,
    },
    #[serde(alias = "dir")]
    Directory {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    #[serde(flatten)]
    pub source: DomainSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// `[height, width]` every image is fitted to.
    #[serde(default = "default_image_size")]
    pub image_size: [usize; 2],
    pub domains: Vec<DomainEntry>,
}

fn default_image_size() -> [usize; 2] {
    [32, 32]
}

impl DatasetManifest {
    /// Synthetic pools for the four built-in domains.
    pub fn synthetic() -> Self {
        DatasetManifest {
            image_size: default_image_size(),
            domains: synthetic::BUILTIN_DOMAINS
                .iter()
                .map(|d| DomainEntry { name: d.to_string(), source: DomainSource::Synthetic { count: None } })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("dataset manifest lists no domains".into()));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("image size {h}x{w} is empty")));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::Config(format!("domain '{}' listed twice", d.name)));
            }
            if matches!(d.source, DomainSource::Synthetic { .. }) && !synthetic::has_generator(&d.name) {
                return Err(Error::Config(format!(
                    "domain '{}' has no generator; expected one of {:?}",
                    d.name,
                    synthetic::BUILTIN_DOMAINS
                )));
            }
        }
        Ok(())
    }

    pub fn position(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == domain)
    }
}

/// Train/test images of one domain.
#[derive(Debug, Clone)]
pub struct DomainPool<T: Real> {
    pub domain: String,
    pub train: Vec<Tensor<T>>,
    pub test: Vec<Tensor<T>>,
    /// Non-PPM files skipped while scanning a directory source.
    pub skipped: Vec<PathBuf>,
}

/// Test-set size for a pool of `n` images.
pub fn test_count(n: usize) -> usize {
    n / 5
}

/// Smallest pool whose train part holds exactly `train` images.
pub fn pool_size_for_train(train: usize) -> usize {
    train + train / 4
}

/// Deterministic hash split of `0..n` into (train, test) index lists, each ascending.
pub fn split_indices(n: usize, seed: u64, domain: &str) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (rng::derive_seed(seed, &[rng::label_key("split"), rng::label_key(domain), i as u64]), i));
    let mut test = order[..test_count(n)].to_vec();
    let mut train = order[test_count(n)..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

fn to_tensor<T: Real>(raw: &[f64], h: usize, w: usize) -> Tensor<T> {
    Tensor::new(vec![3, h, w], raw.iter().map(|&v| T::lit(v)).collect()).expect("planar RGB image")
}

/// Builds the pool for one manifest entry.
///
/// `train_needed` is the number of train images the partition will consume;
/// synthetic sources without an explicit count are sized to it.
pub fn load_pool<T: Real>(entry: &DomainEntry, image_size: [usize; 2], seed: u64, train_needed: Option<usize>) -> Result<DomainPool<T>> {
    let [h, w] = image_size;
    let (raw, skipped) = match &entry.source {
        DomainSource::Synthetic { count } => {
            let n = match (count, train_needed) {
                (Some(n), _) => *n,
                (None, Some(t)) => pool_size_for_train(t),
                (None, None) => {
                    return Err(Error::Config(format!("synthetic domain '{}' needs a count", entry.name)));
                }
            };
            let raw = (0..n as u64).map(|i| synthetic::generate(&entry.name, h, w, seed, i)).collect::<Result<Vec<_>>>()?;
            (raw, Vec::new())
        }
        DomainSource::Directory { path } => {
            let scan = ppm::load_dir(path, h, w)?;
            (scan.images, scan.skipped)
        }
    };
    let (train_idx, test_idx) = split_indices(raw.len(), seed, &entry.name);
    if let Some(t) = train_needed {
        if train_idx.len() < t {
            return Err(Error::Config(format!(
                "domain '{}' has {} train images, partition needs {t}",
                entry.name,
                train_idx.len()
            )));
        }
    }
    Ok(DomainPool {
        domain: entry.name.clone(),
        train: train_idx.iter().map(|&i| to_tensor(&raw[i], h, w)).collect(),
        test: test_idx.iter().map(|&i| to_tensor(&raw[i], h, w)).collect(),
        skipped,
    })
}

/// Images owned by one client.
#[derive(Debug, Clone)]
pub struct ClientDataset<T: Real> {
    /// 1-based, in partition order.
    pub id: usize,
    pub domain: String,
    pub images: Vec<Tensor<T>>,
}

impl<T: Real> ClientDataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn find_pool<'a, T: Real>(pools: &'a [DomainPool<T>], domain: &str) -> Result<&'a DomainPool<T>> {
    pools
        .iter()
        .find(|p| p.domain == domain)
        .ok_or_else(|| Error::Config(format!("partition refers to unknown domain '{domain}'")))
}

/// Assigns consecutive train images to clients following an explicit count table.
pub fn assign_table<T: Real>(pools: &[DomainPool<T>], table: &[(String, Vec<usize>)]) -> Result<Vec<ClientDataset<T>>> {
    let mut clients = Vec::new();
    for (domain, counts) in table {
        if counts.contains(&0) {
            return Err(Error::Config(format!("domain '{domain}' has a client with zero images")));
        }
        let pool = find_pool(pools, domain)?;
        let need: usize = counts.iter().sum();
        if pool.train.len() < need {
            return Err(Error::Config(format!("domain '{domain}' has {} train images, table needs {need}", pool.train.len())));
        }
        for r in partition::ranges(counts) {
            clients.push(ClientDataset { id: clients.len() + 1, domain: domain.clone(), images: pool.train[r].to_vec() });
        }
    }
    Ok(clients)
}

/// Splits each domain's whole train pool over its clients with Dirichlet(alpha) proportions.
pub fn assign_dirichlet<T: Real>(
    pools: &[DomainPool<T>],
    clients_per_domain: &[(String, usize)],
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset<T>>> {
    let mut clients = Vec::new();
    for (domain, k) in clients_per_domain {
        let pool = find_pool(pools, domain)?;
        let mut r = rng::stream(seed, &[rng::label_key("dirichlet"), rng::label_key(domain)]);
        let counts = partition::dirichlet_counts(pool.train.len(), *k, alpha, &mut r)?;
        for range in partition::ranges(&counts) {
            clients.push(ClientDataset { id: clients.len() + 1, domain: domain.clone(), images: pool.train[range].to_vec() });
        }
    }
    Ok(clients)
}

/// Shuffled mini-batches of indices into a dataset of `n` items; the last batch may be short.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-channel intensity histogram with `bins` bins per channel, normalised to sum to one per channel.
pub fn color_histogram<T: Real>(img: &Tensor<T>, bins: usize) -> Vec<f64> {
    let plane = img.len() / 3;
    let mut hist = vec![0.0; 3 * bins];
    for (c, ch) in img.data().chunks(plane).enumerate().take(3) {
        for v in ch {
            let b = ((v.f64().clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            hist[c * bins + b] += 1.0 / plane as f64;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (train, test) = split_indices(53, 0, "photo");
        assert_eq!((train.len(), test.len()), (43, 10));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
        for t in [1, 2, 3, 4, 43, 358, 827] {
            assert_eq!(pool_size_for_train(t) - test_count(pool_size_for_train(t)), t);
        }
    }

    #[test]
    fn batches_keep_the_remainder() {
        let b = batch_indices(10, 4, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(batch_indices(3, 0, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn manifest_parses_both_sources() {
        let m: DatasetManifest = serde_json::from_str(
            r#"{"domains":[{"name":"photo","source":"synthetic"},{"name":"mine","source":"directory","path":"/tmp/x"}]}"#,
        )
        .unwrap();
        assert_eq!(m.image_size, [32, 32]);
        assert_eq!(m.domains[1].source, DomainSource::Directory { path: "/tmp/x".into() });
        m.validate().unwrap();
        let bad = DatasetManifest {
            domains: vec![DomainEntry { name: "xray".into(), source: DomainSource::Synthetic { count: Some(3) } }],
            ..DatasetManifest::synthetic()
        };
        assert!(bad.validate().is_err());
    }
}
