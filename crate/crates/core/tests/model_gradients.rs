use feddom_core::channel;
use feddom_core::gradcheck::finite_diff_check;
use feddom_core::model::{Jscc, JsccConfig};
use feddom_core::rng;
use feddom_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn images(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng::stream(seed, &[]);
    (0..n).map(|_| Tensor::new(vec![3, 32, 32], (0..3072).map(|_| r.random::<f64>()).collect()).unwrap()).collect()
}

#[test]
fn full_pipeline_gradients_match_central_differences() {
    let model = Jscc::new(JsccConfig::default()).unwrap();
    let params = model.init_params::<f64, _>(&mut rng::stream(1, &[]));
    let imgs = images(5, 2);
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let snr = vec![7.0; 5];
    let mut nr = rng::stream(3, &[]);
    let noise: Vec<f64> = (0..5 * model.latent_len()).map(|_| { let v: f64 = StandardNormal.sample(&mut nr); 0.3 * v }).collect();
    let g: Vec<f64> = (0..model.feature_dim()).map(|i| 0.05 * i as f64).collect();
    let norm = channel::target_norm(model.symbols(), 1.0);
    let report = finite_diff_check(
        &params,
        |tape, p| {
            let x = model.images_var(tape, &refs)?;
            let enc = model.encode_graph(tape, p, x, &snr)?;
            let z = tape.row_normalize(enc.latent, norm)?;
            let received: Vec<f64> = tape.value(z).iter().zip(&noise).map(|(a, n)| a + n).collect();
            let y = tape.straight_through(z, received)?;
            let out = model.decode_graph(tape, p, y, &snr)?;
            let recon = tape.mse(x, out)?;
            let fm = tape.mean_rows(enc.features)?;
            let gt = tape.constant(&Tensor::new(vec![1, g.len()], g.clone())?);
            let lg = tape.mse(fm, gt)?;
            let lg = tape.scale(lg, 1.5);
            tape.add(recon, lg)
        },
        1e-4,
        200,
        &mut rng::stream(4, &[]),
    )
    .unwrap();
    println!("{report:?}");
    assert!(report.checked >= 150, "{report:?}");
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}
