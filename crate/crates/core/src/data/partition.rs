//! Splitting per-domain sample pools across clients.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Attempts before a Dirichlet draw that leaves a client empty is reported.
pub const MAX_PARTITION_RETRIES: usize = 1000;

/// Per-client image counts with moderate skew, clients listed per domain.
pub const MODERATE_COUNTS: [(&str, &[usize]); 4] =
    [("photo", &[43, 358]), ("cartoon", &[87, 93, 383]), ("art", &[70, 303, 119]), ("sketch", &[827, 116])];

/// Per-client image counts with strong skew between domains.
pub const HIGH_SKEW_COUNTS: [(&str, &[usize]); 4] =
    [("photo", &[210, 58]), ("cartoon", &[82, 61, 232]), ("art", &[223, 85, 20]), ("sketch", &[666, 906])];

pub fn table_owned(table: &[(&str, &[usize])]) -> Vec<(String, Vec<usize>)> {
    table.iter().map(|(d, c)| (d.to_string(), c.to_vec())).collect()
}

/// Scales a count table, keeping every client at one image or more.
pub fn scale_table(table: &[(String, Vec<usize>)], factor: f64) -> Result<Vec<(String, Vec<usize>)>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Config(format!("table scale must be positive, got {factor}")));
    }
    Ok(table
        .iter()
        .map(|(d, counts)| (d.clone(), counts.iter().map(|&c| ((c as f64 * factor).round() as usize).max(1)).collect()))
        .collect())
}

/// Integer counts summing to `total`, proportional to `weights` (largest remainder, ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws Dirichlet(alpha) proportions for `clients` clients and converts them to counts of `total`.
///
/// Draws that leave a client empty are redrawn up to [`MAX_PARTITION_RETRIES`] times.
pub fn dirichlet_counts<R: Rng + ?Sized>(total: usize, clients: usize, alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(Error::Config("a domain needs at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if total < clients {
        return Err(Error::Config(format!("{total} samples cannot give each of {clients} clients one image")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("gamma({alpha}): {e}")))?;
    for _ in 0..MAX_PARTITION_RETRIES {
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        if draws.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let counts = largest_remainder(&draws, total);
        if counts.iter().all(|&c| c > 0) {
            return Ok(counts);
        }
    }
    Err(Error::Config(format!(
        "Dirichlet(alpha={alpha}) left a client empty in {MAX_PARTITION_RETRIES} draws ({total} samples, {clients} clients)"
    )))
}

/// Consecutive index ranges for `counts` over a pool.
pub fn ranges(counts: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn table_sums() {
        let t1: usize = MODERATE_COUNTS.iter().flat_map(|(_, c)| c.iter()).sum();
        let t5: usize = HIGH_SKEW_COUNTS.iter().flat_map(|(_, c)| c.iter()).sum();
        assert_eq!(t1, 43 + 358 + 87 + 93 + 383 + 70 + 303 + 119 + 827 + 116);
        assert_eq!(t5, 2543);
        assert_eq!(HIGH_SKEW_COUNTS.iter().map(|(_, c)| c.len()).sum::<usize>(), 10);
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.3, 0.2], 7), vec![4, 2, 1]);
    }

    #[test]
    fn dirichlet_is_reproducible_and_complete() {
        let a = dirichlet_counts(100, 3, 0.5, &mut rng::stream(4, &[])).unwrap();
        let b = dirichlet_counts(100, 3, 0.5, &mut rng::stream(4, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().sum::<usize>(), 100);
        assert!(a.iter().all(|&c| c > 0));
        assert!(dirichlet_counts(2, 3, 0.5, &mut rng::stream(4, &[])).is_err());
        assert!(dirichlet_counts(5, 2, 0.0, &mut rng::stream(4, &[])).is_err());
    }

    #[test]
    fn scaled_tables_keep_clients() {
        let t = scale_table(&table_owned(&HIGH_SKEW_COUNTS), 0.01).unwrap();
        assert!(t.iter().flat_map(|(_, c)| c.iter()).all(|&c| c >= 1));
        assert_eq!(t[0].1, vec![2, 1]);
    }
}
