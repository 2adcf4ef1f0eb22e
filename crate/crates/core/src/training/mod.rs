//! Minibatch training on the joint rate-distortion loss, validation, and the
//! three regimes: naive, estimated tradeoffs and tradeoff scheduling.

mod estimate;
mod log;
mod optim;
mod schedule;

pub use estimate::{estimate_lambdas_from_curves, fixed_width_curves, RdSample};
pub use log::{LogRecord, TrainLog};
pub use optim::{Adam, AdamConfig};
pub use schedule::{lambda_scheduling, run_scheduled, ScheduleParams, TrainState, XiRecord};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::entropy::uniform_open_half;
use crate::error::{Error, Result};
use crate::model::{LossTerms, RdPoint, SlimCae};
use crate::scalar::Scalar;
use crate::seed::derived_rng;
use crate::tensor::{Shape4, Tensor4};

/// Step counter, optimizer state and seed of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub seed: u64,
    pub step: u64,
    pub optimizer: Adam,
    /// Log the training loss every this many steps (0 disables).
    pub log_every: u64,
}

impl Trainer {
    pub fn new<S: Scalar>(model: &SlimCae<S>, config: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { seed, step: 0, optimizer: Adam::new(model.params(), config), log_every: 50 })
    }
}

/// Quantization-noise proxy for step `step`: uniform on (-1/2, 1/2).
pub fn training_noise<S: Scalar>(seed: u64, step: u64, shape: Shape4) -> Tensor4<S> {
    let mut rng = derived_rng(seed, "noise", step, 0);
    Tensor4::from_fn(shape, |_| S::of(uniform_open_half(&mut rng)))
}

/// `iterations` optimizer steps on the joint loss with tradeoffs `lambdas`.
///
/// Batches and noise depend only on the seed and the global step, so a run
/// split across calls matches an uninterrupted one. On a non-finite loss or
/// gradient the model is left at its last good state and an error returned.
pub fn sgd_train<S: Scalar>(
    model: &mut SlimCae<S>,
    trainer: &mut Trainer,
    data: &Dataset,
    lambdas: &[f64],
    iterations: usize,
    log: &mut TrainLog,
    phase: &str,
) -> Result<()> {
    if lambdas.len() != model.levels() {
        return Err(Error::config(format!("{} tradeoffs for {} levels", lambdas.len(), model.levels())));
    }
    for _ in 0..iterations {
        let x: Tensor4<S> = data.sample_batch(trainer.step).cast();
        let noise = training_noise::<S>(trainer.seed, trainer.step, model.noise_shape(x.shape()));
        let (loss, terms) = model.joint_gradients(&x, lambdas, &noise).map_err(|e| {
            Error::Numeric(format!("training diverged at step {}: {e}", trainer.step))
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {}", trainer.step)));
        }
        trainer.optimizer.step(model.params_mut())?;
        trainer.step += 1;
        if trainer.log_every > 0 && trainer.step % trainer.log_every == 0 {
            log.push(LogRecord::train(trainer.step, phase, lambdas, &terms));
        }
    }
    Ok(())
}

/// Naive regime: one tradeoff shared by every width.
pub fn train_naive<S: Scalar>(
    model: &mut SlimCae<S>,
    trainer: &mut Trainer,
    data: &Dataset,
    lambda: f64,
    iterations: usize,
    log: &mut TrainLog,
) -> Result<()> {
    let lambdas = vec![lambda; model.levels()];
    sgd_train(model, trainer, data, &lambdas, iterations, log, "naive")
}

/// Mean estimated bpp and mean PSNR per level over `val`, with hard rounding.
pub fn validate_rd<S: Scalar>(model: &SlimCae<S>, val: &[Tensor4<f64>]) -> Result<Vec<RdPoint>> {
    if val.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    (0..model.levels())
        .map(|level| {
            let (mut rate, mut psnr) = (0.0, 0.0);
            for x in val {
                let p = model.rd_point(&x.cast::<S>(), level)?;
                rate += p.rate;
                psnr += p.psnr;
            }
            let n = val.len() as f64;
            Ok(RdPoint { level, rate: rate / n, psnr: psnr / n })
        })
        .collect()
}

/// Largest minus smallest rate of a curve.
pub fn rate_spread(curve: &[RdPoint]) -> f64 {
    let max = curve.iter().map(|p| p.rate).fold(f64::NEG_INFINITY, f64::max);
    let min = curve.iter().map(|p| p.rate).fold(f64::INFINITY, f64::min);
    max - min
}

pub(crate) fn terms_rates(terms: &[LossTerms]) -> Vec<f64> {
    terms.iter().map(|t| t.rate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticKind;
    use crate::model::SlimCaeConfig;

    fn tiny() -> (SlimCae<f64>, Dataset) {
        let cfg = SlimCaeConfig::desk().with_widths(crate::slim::WidthSet::new(vec![2, 4]).unwrap());
        let model = SlimCae::new(cfg, 11).unwrap();
        let data = Dataset::synthetic(SyntheticKind::GaussianBlobs, 4, 16, 2, 11).unwrap();
        (model, data)
    }

    #[test]
    fn zero_iterations_leave_the_model_unchanged() {
        let (mut m, data) = tiny();
        let before = m.clone();
        let mut t = Trainer::new(&m, AdamConfig::default(), 1).unwrap();
        sgd_train(&mut m, &mut t, &data, &[0.01, 0.01], 0, &mut TrainLog::default(), "x").unwrap();
        assert!(m == before);
    }

    #[test]
    fn naive_equals_constant_tradeoffs() {
        let (m0, data) = tiny();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let mut ta = Trainer::new(&a, AdamConfig { lr: 1e-3, ..Default::default() }, 3).unwrap();
        let mut tb = ta.clone();
        train_naive(&mut a, &mut ta, &data, 0.02, 5, &mut TrainLog::default()).unwrap();
        sgd_train(&mut b, &mut tb, &data, &[0.02, 0.02], 5, &mut TrainLog::default(), "naive").unwrap();
        assert!(a == b);
    }

    #[test]
    fn split_runs_match_uninterrupted_runs() {
        let (m0, data) = tiny();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let mut ta = Trainer::new(&a, AdamConfig { lr: 1e-3, ..Default::default() }, 3).unwrap();
        let mut tb = ta.clone();
        sgd_train(&mut a, &mut ta, &data, &[0.02, 0.01], 6, &mut TrainLog::default(), "p").unwrap();
        sgd_train(&mut b, &mut tb, &data, &[0.02, 0.01], 2, &mut TrainLog::default(), "p").unwrap();
        let json = serde_json::to_string(&tb).unwrap();
        let mut tb: Trainer = serde_json::from_str(&json).unwrap();
        sgd_train(&mut b, &mut tb, &data, &[0.02, 0.01], 4, &mut TrainLog::default(), "p").unwrap();
        assert!(a == b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn validation_is_a_mean_over_images() {
        let (m, data) = tiny();
        let one = vec![data.images()[0].clone()];
        let two = vec![data.images()[0].clone(), data.images()[0].clone()];
        let a = validate_rd(&m, &one).unwrap();
        assert_eq!(a, validate_rd(&m, &two).unwrap());
        assert_eq!(a[1], m.rd_point(&data.images()[0], 1).unwrap());
        assert!(validate_rd(&m, &[]).is_err());
    }
}
