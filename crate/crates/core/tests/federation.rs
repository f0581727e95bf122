use feddom_core::channel::ChannelConfig;
use feddom_core::data::{self, ClientDataset, DatasetManifest};
use feddom_core::fl::{FeatureMode, Federation, Strategy, StrategyConfig};
use feddom_core::model::{Jscc, JsccConfig};

const DOMAINS: [&str; 3] = ["photo", "art", "sketch"];

fn clients(per_client: usize, seed: u64) -> Vec<ClientDataset<f32>> {
    let manifest = DatasetManifest::synthetic();
    let mut out = Vec::new();
    for d in DOMAINS {
        let entry = manifest.domains.iter().find(|e| e.name == d).unwrap();
        let pool = data::load_pool::<f32>(entry, [32, 32], seed, Some(2 * per_client)).unwrap();
        let table = vec![(d.to_string(), vec![per_client, per_client])];
        for mut c in data::assign_table(&[pool], &table).unwrap() {
            c.id = out.len() + 1;
            out.push(c);
        }
    }
    out
}

fn federation(kind: Strategy, threads: usize, seed: u64) -> Federation<f32> {
    let mut s = StrategyConfig::new(kind);
    s.lr = 0.5;
    s.batch_size = 4;
    let model = Jscc::new(JsccConfig::default()).unwrap();
    let domains = DOMAINS.iter().map(|d| d.to_string()).collect();
    Federation::new(model, s, ChannelConfig::default(), clients(6, seed), domains, seed, threads).unwrap()
}

fn bits(f: &Federation<f32>) -> Vec<u32> {
    f.server.global_params.flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn thread_count_does_not_change_results() {
    for kind in [Strategy::feddom(), Strategy::moon()] {
        let mut a = federation(kind, 1, 4);
        let mut b = federation(kind, 3, 4);
        for _ in 0..3 {
            let (ra, rb) = (a.run_round().unwrap(), b.run_round().unwrap());
            assert_eq!(ra, rb);
        }
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.server.global_feature, b.server.global_feature);
    }
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.fdm");
    let mut straight = federation(Strategy::moon(), 1, 8);
    let mut first = federation(Strategy::moon(), 1, 8);
    for _ in 0..2 {
        straight.run_round().unwrap();
        first.run_round().unwrap();
    }
    first.save_state(&path).unwrap();
    let mut resumed = federation(Strategy::moon(), 1, 8);
    resumed.load_state(&path).unwrap();
    assert_eq!(resumed.server.round, 2);
    for _ in 0..2 {
        assert_eq!(straight.run_round().unwrap(), resumed.run_round().unwrap());
    }
    assert_eq!(bits(&straight), bits(&resumed));
}

#[test]
fn loading_a_checkpoint_for_another_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.fdm");
    let mut f = federation(Strategy::fedavg(), 1, 1);
    f.run_round().unwrap();
    f.save_state(&path).unwrap();
    let cfg = JsccConfig { channel_widths: [16, 16], feature_dim: 16, ..JsccConfig::default() };
    let mut other = Federation::<f32>::new(
        Jscc::new(cfg).unwrap(),
        StrategyConfig::new(Strategy::fedavg()),
        ChannelConfig::default(),
        clients(2, 1),
        DOMAINS.iter().map(|d| d.to_string()).collect(),
        1,
        1,
    )
    .unwrap();
    assert!(other.load_state(&path).is_err());
}

#[test]
fn training_reduces_the_loss() {
    let mut f = federation(Strategy::feddom(), 1, 2);
    let first = f.run_round().unwrap().mean_loss;
    let mut last = first;
    for _ in 0..14 {
        last = f.run_round().unwrap().mean_loss;
    }
    assert!(last < 0.7 * first, "loss {first} -> {last}");
}

#[test]
fn feature_modes_both_produce_a_global_representation() {
    let mut per_step = federation(Strategy::feddom(), 1, 3);
    let mut post_hoc = federation(Strategy::feddom(), 1, 3);
    let mut s = post_hoc.strategy().clone();
    s.feature_mode = FeatureMode::PostHoc;
    post_hoc = Federation::new(
        post_hoc.model().clone(),
        s,
        ChannelConfig::default(),
        clients(6, 3),
        DOMAINS.iter().map(|d| d.to_string()).collect(),
        3,
        1,
    )
    .unwrap();
    per_step.run_round().unwrap();
    post_hoc.run_round().unwrap();
    let (a, b) = (per_step.server.global_feature.clone().unwrap(), post_hoc.server.global_feature.clone().unwrap());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().chain(&b).all(|v| v.is_finite()));
    assert_ne!(a, b);
    // Same local training, so the models agree; only the feature summary differs.
    assert_eq!(bits(&per_step), bits(&post_hoc));
}

#[test]
fn half_step_trace_marks_first_step_only() {
    let mut f = federation(Strategy::feddom(), 1, 5);
    f.trace_half_step(true);
    let report = f.run_round().unwrap();
    for c in 1..=6 {
        let rows: Vec<_> = report.trace.iter().filter(|t| t.client == c).collect();
        assert!(rows[0].half_step_loss.is_some());
        assert!(rows[1..].iter().all(|t| t.half_step_loss.is_none()));
        assert_eq!(rows.len(), 2);
    }
}
