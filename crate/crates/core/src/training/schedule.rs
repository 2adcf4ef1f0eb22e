//! Tradeoff scheduling: alternate multiplying the tradeoffs of the smaller
//! widths by `kappa` with `T` optimizer steps, and freeze a level once the
//! slope between its validation point and the next level's stops falling.

use serde::{Deserialize, Serialize};

use super::{sgd_train, train_naive, validate_rd, LogRecord, TrainLog, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{RdPoint, SlimCae};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Tradeoff of the widest level, in the `D + lambda R` convention.
    pub lambda_top: f64,
    /// Multiplier applied to the tradeoffs of the levels being adjusted.
    pub kappa: f64,
    /// Optimizer steps between tradeoff updates.
    pub iterations: usize,
    /// Maximum tradeoff updates per level.
    pub max_steps: usize,
}

impl ScheduleParams {
    pub fn desk(lambda_top: f64) -> Self {
        ScheduleParams { lambda_top, kappa: 1.25, iterations: 200, max_steps: 7 }
    }

    /// Step count used with the five-width configuration.
    pub fn full(lambda_top: f64) -> Self {
        ScheduleParams { iterations: 2000, ..Self::desk(lambda_top) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_top > 0.0) || !self.lambda_top.is_finite() {
            return Err(Error::config("lambda_top must be positive"));
        }
        if !(self.kappa > 1.0) {
            return Err(Error::config("kappa must exceed 1"));
        }
        if self.iterations == 0 || self.max_steps == 0 {
            return Err(Error::config("schedule iterations and max_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiRecord {
    pub iteration: u64,
    /// Lower level of the segment, 0-based.
    pub level: usize,
    pub xi: f64,
}

/// Resumable scheduler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ScheduleParams,
    pub trainer: Trainer,
    pub lambdas: Vec<f64>,
    /// Highest level (0-based) whose tradeoff is still being raised.
    pub level: usize,
    /// Updates already applied at `level`.
    pub step_in_level: usize,
    /// Slope the next one is compared against.
    pub xi_prev: Option<f64>,
    pub xi_history: Vec<XiRecord>,
    pub history: Vec<(u64, Vec<RdPoint>)>,
    pub frozen: Vec<bool>,
    pub done: bool,
}

/// `(PSNR(i+1) - PSNR(i)) / (R(i+1) - R(i))`, or `None` when the rate
/// difference is not positive.
pub fn slope(curve: &[RdPoint], i: usize) -> Option<f64> {
    let dr = curve[i + 1].rate - curve[i].rate;
    (dr > 0.0).then(|| (curve[i + 1].psnr - curve[i].psnr) / dr)
}

impl TrainState {
    /// State right after naive training: every tradeoff at `lambda_top`, and
    /// the initial slope between the two widest levels.
    pub fn begin<S: Scalar>(
        model: &SlimCae<S>,
        trainer: Trainer,
        params: ScheduleParams,
        val: &[Tensor4<f64>],
        log: &mut TrainLog,
    ) -> Result<Self> {
        params.validate()?;
        let k = model.levels();
        let curve = validate_rd(model, val)?;
        let mut frozen = vec![false; k];
        frozen[k - 1] = true;
        let level = k.saturating_sub(2);
        let xi_prev = if k >= 2 { slope(&curve, level) } else { None };
        let lambdas = vec![params.lambda_top; k];
        log.push(LogRecord::val(trainer.step, "schedule", (k >= 2).then_some(level), &lambdas, &curve, xi_prev));
        Ok(TrainState {
            params,
            xi_history: xi_prev
                .map(|xi| vec![XiRecord { iteration: trainer.step, level, xi }])
                .unwrap_or_default(),
            history: vec![(trainer.step, curve)],
            trainer,
            lambdas,
            level,
            step_in_level: 0,
            xi_prev,
            frozen,
            done: k < 2,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::internal(format!("state serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::data(format!("train state: {e}")))
    }
}

/// Runs scheduling updates until every level is frozen, or until
/// `max_updates` updates have been applied in this call. Returns whether the
/// schedule finished. `state` can be serialized between calls.
pub fn lambda_scheduling<S: Scalar>(
    model: &mut SlimCae<S>,
    state: &mut TrainState,
    train: &Dataset,
    val: &[Tensor4<f64>],
    log: &mut TrainLog,
    max_updates: Option<usize>,
) -> Result<bool> {
    let p = state.params;
    let mut updates = 0;
    while !state.done {
        if max_updates.is_some_and(|m| updates >= m) {
            return Ok(false);
        }
        let i = state.level;
        for l in &mut state.lambdas[..=i] {
            *l *= p.kappa;
        }
        let lambdas = state.lambdas.clone();
        sgd_train(model, &mut state.trainer, train, &lambdas, p.iterations, log, "schedule")?;
        let curve = validate_rd(model, val)?;
        let it = state.trainer.step;
        state.step_in_level += 1;
        updates += 1;

        let mut fire = false;
        let mut xi_now = None;
        if curve[i + 1].rate > curve[i].rate {
            let xi = slope(&curve, i).expect("positive rate gap");
            state.xi_history.push(XiRecord { iteration: it, level: i, xi });
            fire = state.xi_prev.is_some_and(|prev| xi > prev);
            state.xi_prev = Some(xi);
            xi_now = Some(xi);
        }
        log.push(LogRecord::val(it, "schedule", Some(i), &lambdas, &curve, xi_now));
        state.history.push((it, curve.clone()));

        if fire || state.step_in_level == p.max_steps {
            if !fire {
                log::warn!("level {}: {} updates without the slope rising; freezing", i + 1, p.max_steps);
            }
            state.frozen[i] = true;
            state.step_in_level = 0;
            if i == 0 {
                state.done = true;
            } else {
                state.level = i - 1;
                state.xi_prev = slope(&curve, i - 1);
                if let Some(xi) = state.xi_prev {
                    state.xi_history.push(XiRecord { iteration: it, level: i - 1, xi });
                }
            }
        }
    }
    Ok(true)
}

/// Naive phase at `lambda_top`, scheduling, then fine-tuning with the final
/// tradeoffs fixed. Returns the final tradeoffs and the scheduler state.
#[allow(clippy::too_many_arguments)]
pub fn run_scheduled<S: Scalar>(
    model: &mut SlimCae<S>,
    mut trainer: Trainer,
    params: ScheduleParams,
    train: &Dataset,
    val: &[Tensor4<f64>],
    naive_iterations: usize,
    finetune_iterations: usize,
    log: &mut TrainLog,
) -> Result<(Vec<f64>, TrainState)> {
    params.validate()?;
    train_naive(model, &mut trainer, train, params.lambda_top, naive_iterations, log)?;
    let mut state = TrainState::begin(model, trainer, params, val, log)?;
    lambda_scheduling(model, &mut state, train, val, log, None)?;
    let lambdas = state.lambdas.clone();
    sgd_train(model, &mut state.trainer, train, &lambdas, finetune_iterations, log, "finetune")?;
    let curve = validate_rd(model, val)?;
    log.push(LogRecord::val(state.trainer.step, "finetune", None, &lambdas, &curve, None));
    state.history.push((state.trainer.step, curve));
    Ok((lambdas, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticKind;
    use crate::model::SlimCaeConfig;
    use crate::slim::WidthSet;
    use crate::training::AdamConfig;

    #[test]
    fn update_rule_scales_the_leading_levels() {
        let mut l = vec![0.01; 5];
        for x in &mut l[..4] {
            *x *= 1.25;
        }
        assert_eq!(l, vec![0.0125, 0.0125, 0.0125, 0.0125, 0.01]);
    }

    #[test]
    fn slope_is_psnr_gain_per_bit() {
        let c = [RdPoint { level: 0, rate: 0.5, psnr: 30.0 }, RdPoint { level: 1, rate: 1.0, psnr: 34.0 }];
        assert_eq!(slope(&c, 0), Some(8.0));
        let flat = [c[0], RdPoint { rate: 0.5, ..c[1] }];
        assert_eq!(slope(&flat, 0), None);
    }

    #[test]
    fn resumed_schedule_matches_uninterrupted() {
        let cfg = SlimCaeConfig::desk().with_widths(WidthSet::new(vec![2, 3, 4]).unwrap());
        let data = Dataset::synthetic(SyntheticKind::GaussianBlobs, 4, 16, 2, 5).unwrap();
        let val = crate::data::make_synthetic(SyntheticKind::GaussianBlobs, 2, 16, 99);
        let params = ScheduleParams { lambda_top: 0.01, kappa: 1.5, iterations: 2, max_steps: 2 };
        let m0 = SlimCae::<f64>::new(cfg, 5).unwrap();
        let t0 = Trainer::new(&m0, AdamConfig { lr: 1e-3, ..Default::default() }, 5).unwrap();

        let mut a = m0.clone();
        let mut sa = TrainState::begin(&a, t0.clone(), params, &val, &mut TrainLog::default()).unwrap();
        assert!(lambda_scheduling(&mut a, &mut sa, &data, &val, &mut TrainLog::default(), None).unwrap());

        let mut b = m0.clone();
        let mut sb = TrainState::begin(&b, t0, params, &val, &mut TrainLog::default()).unwrap();
        assert!(!lambda_scheduling(&mut b, &mut sb, &data, &val, &mut TrainLog::default(), Some(1)).unwrap());
        let mut sb = TrainState::from_json(&sb.to_json().unwrap()).unwrap();
        let bytes = crate::checkpoint::to_bytes(&b, crate::checkpoint::Storage::F64).unwrap();
        let mut b: SlimCae<f64> = crate::checkpoint::from_bytes(&bytes).unwrap();
        assert!(lambda_scheduling(&mut b, &mut sb, &data, &val, &mut TrainLog::default(), None).unwrap());

        assert_eq!(sa.lambdas, sb.lambdas);
        assert_eq!(sa, sb);
        assert!(a == b);
        assert!(sa.frozen.iter().all(|&f| f));
        assert!(sa.lambdas.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(sa.lambdas[2], 0.01);
    }
}
