//! Central finite-difference gradient checking.
//!
//! Runs in double precision: the analytic gradient of a scalar loss is
//! compared against `(f(x+h) - f(x-h)) / 2h` on a subsample of each
//! parameter's scalars.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Parameter;
use super::tape::Tape;
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffConfig {
    /// Central-difference step.
    pub step: f64,
    /// Scalars checked per parameter; 0 checks all of them.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        FiniteDiffConfig { step: 1e-5, samples_per_param: 0, seed: 0 }
    }
}

/// Maximum relative error per parameter, in input order.
///
/// `loss_fn` must rebuild the loss from the current parameter values each
/// time it is called; it receives a recording tape once for the analytic
/// gradients and non-recording tapes for every finite-difference probe.
pub fn finite_diff_check(
    params: &[(String, Parameter<f64>)],
    mut loss_fn: impl FnMut(&mut Tape<f64>) -> Result<Tensor<f64>>,
    cfg: &FiniteDiffConfig,
) -> Result<Vec<(String, f64)>> {
    for (_, p) in params {
        p.zero_grad();
    }
    let mut tape = Tape::recording();
    let loss = loss_fn(&mut tape)?;
    loss.scalar()?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad()).collect();

    let h = cfg.step;
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, p)) in params.iter().enumerate() {
        let count = p.count();
        let indices: Vec<usize> = if cfg.samples_per_param == 0 || cfg.samples_per_param >= count {
            (0..count).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(pi as u64));
            rand::seq::index::sample(&mut rng, count, cfg.samples_per_param).into_vec()
        };

        let mut max_err = 0.0f64;
        for i in indices {
            let orig = p.get(i);
            p.set_index(i, orig + h);
            let plus = loss_fn(&mut Tape::inference())?.scalar()?;
            p.set_index(i, orig - h);
            let minus = loss_fn(&mut Tape::inference())?.scalar()?;
            p.set_index(i, orig);
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            let denom = a.abs().max(fd.abs());
            let err = if denom < 1e-8 { (a - fd).abs() } else { (a - fd).abs() / denom };
            if err > max_err {
                max_err = err;
            }
        }
        report.push((name.clone(), max_err));
    }
    Ok(report)
}

/// Largest error in a [`finite_diff_check`] report.
pub fn max_report_error(report: &[(String, f64)]) -> f64 {
    report.iter().fold(0.0, |m, (_, e)| m.max(*e))
}
