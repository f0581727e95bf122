use std::collections::BTreeMap;
use std::path::Path;

use feddom_core::channel;
use feddom_core::checkpoint::{self, Layer};
use feddom_core::data::{self, partition};
use feddom_core::fl::aggregate::{self, Contribution, MissingDomainPolicy};
use feddom_core::metrics;
use feddom_core::params::ModelParams;
use feddom_core::Tensor;
use proptest::prelude::*;

const DOMAINS: [&str; 4] = ["photo", "art", "cartoon", "sketch"];

/// Two named tensors; `values` needs at least two entries so both are non-empty.
fn params_from(values: &[f64], split: usize) -> ModelParams<f64> {
    let split = split.clamp(1, values.len() - 1);
    ModelParams::new(vec![
        ("a".into(), Tensor::from_slice(&values[..split])),
        ("b".into(), Tensor::from_slice(&values[split..])),
    ])
}

/// Clients as (values, samples, domain index), all with the same parameter length.
fn clients() -> impl Strategy<Value = Vec<(Vec<f64>, usize, usize)>> {
    (2usize..8, 1usize..6).prop_flat_map(|(len, n)| {
        prop::collection::vec((prop::collection::vec(-10.0f64..10.0, len), 1usize..500, 0usize..4), n)
    })
}

fn aggregate_both(items: &[(Vec<f64>, usize, usize)], order: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let params: Vec<ModelParams<f64>> = items.iter().map(|(v, _, _)| params_from(v, 2)).collect();
    let contribs: Vec<Contribution<'_, f64>> = order
        .iter()
        .map(|&i| Contribution { client_id: i + 1, samples: items[i].1, domain: DOMAINS[items[i].2], params: &params[i] })
        .collect();
    let declared: Vec<String> = DOMAINS.iter().map(|d| d.to_string()).collect();
    let fa = aggregate::fedavg(&contribs).unwrap().flatten();
    let da = aggregate::domain_aware(&contribs, &declared, MissingDomainPolicy::Skip, &mut BTreeMap::new()).unwrap().flatten();
    (fa, da)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn image(values: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![3, 16, 16], values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trips(values in prop::collection::vec(-1e3f64..1e3, 2..50), split in 0usize..50) {
        let p = params_from(&values, split);
        let flat = p.flatten();
        prop_assert_eq!(&flat, &values);
        let back = p.unflatten(&flat).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn aggregation_ignores_client_order(items in clients(), seed in any::<u64>()) {
        let forward: Vec<usize> = (0..items.len()).collect();
        let mut shuffled = forward.clone();
        let k = items.len();
        shuffled.rotate_left((seed % k as u64) as usize);
        if seed % 2 == 1 {
            shuffled.reverse();
        }
        let (fa1, da1) = aggregate_both(&items, &forward);
        let (fa2, da2) = aggregate_both(&items, &shuffled);
        prop_assert!(close(&fa1, &fa2, 1e-12));
        prop_assert!(close(&da1, &da2, 1e-12));
    }

    #[test]
    fn aggregation_ignores_common_sample_scaling(items in clients(), factor in 2usize..20) {
        let order: Vec<usize> = (0..items.len()).collect();
        let scaled: Vec<_> = items.iter().map(|(v, n, d)| (v.clone(), n * factor, *d)).collect();
        let (fa1, da1) = aggregate_both(&items, &order);
        let (fa2, da2) = aggregate_both(&scaled, &order);
        prop_assert!(close(&fa1, &fa2, 1e-12));
        prop_assert!(close(&da1, &da2, 1e-12));
    }

    #[test]
    fn aggregates_stay_within_client_range(items in clients()) {
        let order: Vec<usize> = (0..items.len()).collect();
        let (fa, da) = aggregate_both(&items, &order);
        for j in 0..fa.len() {
            let lo = items.iter().map(|(v, _, _)| v[j]).fold(f64::INFINITY, f64::min);
            let hi = items.iter().map(|(v, _, _)| v[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fa[j] >= lo - 1e-9 && fa[j] <= hi + 1e-9);
            prop_assert!(da[j] >= lo - 1e-9 && da[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn psnr_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16)) {
        prop_assume!(a != b);
        let ab = metrics::psnr(&a, &b, 1.0).unwrap();
        let ba = metrics::psnr(&b, &a, 1.0).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn ms_ssim_is_bounded_and_symmetric(a in prop::collection::vec(0.0f64..1.0, 768), b in prop::collection::vec(0.0f64..1.0, 768)) {
        let (x, y) = (image(&a), image(&b));
        let xy = metrics::ms_ssim(&x, &y, 5, 1.0).unwrap();
        let yx = metrics::ms_ssim(&y, &x, 5, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&xy), "{}", xy);
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((metrics::ms_ssim(&x, &x, 5, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_normalization_hits_target(latent in prop::collection::vec(-100.0f64..100.0, 1..64).prop_map(|mut v| { if v.len() % 2 == 1 { v.push(1.0); } v }), power in 0.1f64..10.0) {
        prop_assume!(latent.iter().any(|v| *v != 0.0));
        let z = channel::power_normalize(&latent, power).unwrap();
        prop_assert!((channel::mean_symbol_power(&z) - power).abs() <= 1e-9 * power);
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), rows in 1usize..4) {
        let layers = vec![
            Layer { name: "w".into(), shape: vec![rows, values.len()], data: values.iter().cycle().take(rows * values.len()).copied().collect() },
            Layer { name: "state.round".into(), shape: vec![1], data: vec![3.0] },
        ];
        let bytes = checkpoint::encode(&layers).unwrap();
        prop_assert_eq!(checkpoint::decode(&bytes, Path::new("mem")).unwrap(), layers);
    }

    #[test]
    fn largest_remainder_sums_to_total(weights in prop::collection::vec(0.01f64..10.0, 1..10), total in 0usize..5000) {
        let counts = partition::largest_remainder(&weights, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        let sum: f64 = weights.iter().sum();
        for (c, w) in counts.iter().zip(&weights) {
            prop_assert!((*c as f64 - w / sum * total as f64).abs() < 1.0);
        }
    }

    #[test]
    fn dirichlet_counts_cover_pool(total in 10usize..2000, clients in 1usize..6, alpha in 0.3f64..5.0, seed in any::<u64>()) {
        let mut r = feddom_core::rng::stream(seed, &[]);
        let counts = partition::dirichlet_counts(total, clients, alpha, &mut r).unwrap();
        prop_assert_eq!(counts.len(), clients);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        prop_assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 0usize..400, seed in any::<u64>()) {
        let (train, test) = data::split_indices(n, seed, "art");
        prop_assert_eq!(test.len(), n / 5);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
