//! Central-difference validation of tape gradients.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::tape::{KinkStats, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over checked entries.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Probes whose perturbation crossed (or sat on) a ReLU-family kink.
    pub excluded: usize,
    /// Flat index of the worst entry.
    pub worst_index: Option<usize>,
}

fn evaluate<F>(params: &ModelParams<f64>, loss_fn: &F) -> Result<(f64, KinkStats)>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks();
    let bound = params.bind(&mut tape, false);
    let loss = loss_fn(&mut tape, &bound)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    Ok((v, tape.kinks().expect("tracking enabled")))
}

/// Compares autodiff gradients of `loss_fn` against central differences on
/// `samples` randomly chosen parameter entries (all entries if fewer).
pub fn finite_diff_check<F, R>(
    params: &ModelParams<f64>,
    loss_fn: F,
    epsilon: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
    R: Rng + ?Sized,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Usage(format!("epsilon must be in (0, 1e-2], got {epsilon}")));
    }
    let mut tape = Tape::new();
    tape.track_kinks();
    let bound = params.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, &bound)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    let base_kinks = tape.kinks().expect("tracking enabled");
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::with_capacity(params.total_count());
    for ((_, t), &v) in params.entries().iter().zip(bound.vars()) {
        analytic.extend(grads.get_or_zeros(v, t.len()));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric { layer: "gradient".into() });
    }

    let total = params.total_count();
    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut v = index::sample(rng, total, samples).into_vec();
        v.sort_unstable();
        v
    };

    let flat = params.flatten();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, excluded: 0, worst_index: None };
    for i in picks {
        let mut probe = flat.clone();
        probe[i] = flat[i] + epsilon;
        let (plus, kp) = evaluate(&params.unflatten(&probe)?, &loss_fn)?;
        probe[i] = flat[i] - epsilon;
        let (minus, km) = evaluate(&params.unflatten(&probe)?, &loss_fn)?;
        if kp != base_kinks || km != base_kinks {
            report.excluded += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let ad = analytic[i];
        let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        report.checked += 1;
        if err > report.max_relative_error || report.worst_index.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
