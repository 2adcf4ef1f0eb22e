//! Tradeoffs estimated from independently trained fixed-width curves.

use serde::{Deserialize, Serialize};

use super::{train_naive, validate_rd, AdamConfig, TrainLog, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{SlimCae, SlimCaeConfig};
use crate::slim::WidthSet;
use crate::tensor::Tensor4;

/// One operating point of a fixed-width model: bpp and MSE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdSample {
    pub rate: f64,
    pub mse: f64,
}

/// MSE of `curve` at `rate`, linear in rate between samples. `None` outside
/// the sampled range.
fn interpolate(curve: &[RdSample], rate: f64) -> Option<f64> {
    let j = curve.windows(2).position(|w| w[0].rate <= rate && rate <= w[1].rate)?;
    let (a, b) = (curve[j], curve[j + 1]);
    if b.rate == a.rate {
        return Some(a.mse);
    }
    let t = (rate - a.rate) / (b.rate - a.rate);
    Some(a.mse + t * (b.mse - a.mse))
}

fn sorted(curve: &[RdSample]) -> Vec<RdSample> {
    let mut c = curve.to_vec();
    c.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    c
}

/// `curves[k]` holds the samples of width level `k`, narrowest first.
///
/// For each `k < K`, walks curve `k` upward in rate until its MSE exceeds
/// that of curve `k + 1` at the same rate by more than the relative gap
/// `delta`. The tradeoff is minus the slope of curve `k` at that crossing.
/// The widest level gets `lambda_top`.
pub fn estimate_lambdas_from_curves(curves: &[Vec<RdSample>], delta: f64, lambda_top: f64) -> Result<Vec<f64>> {
    if curves.is_empty() {
        return Err(Error::config("no curves given"));
    }
    if curves.iter().any(|c| c.len() < 3) {
        return Err(Error::config("every curve needs at least 3 points"));
    }
    let curves: Vec<Vec<RdSample>> = curves.iter().map(|c| sorted(c)).collect();
    let k = curves.len();
    let mut lambdas = vec![lambda_top; k];
    for level in 0..k - 1 {
        let (c, next) = (&curves[level], &curves[level + 1]);
        let gaps: Vec<Option<f64>> = c
            .iter()
            .map(|p| interpolate(next, p.rate).map(|d| (p.mse - d) / d))
            .collect();
        let mut found = None;
        for j in 1..c.len() {
            if let (Some(g0), Some(g1)) = (gaps[j - 1], gaps[j]) {
                if g0 <= delta && g1 > delta {
                    found = Some((j, (delta - g0) / (g1 - g0)));
                    break;
                }
            }
        }
        let (j, t) = found.ok_or_else(|| {
            Error::data(format!(
                "curves {} and {} never diverge by {delta} within the sampled rates; sweep a wider tradeoff range",
                level + 1,
                level + 2
            ))
        })?;
        // Slope of curve `level` at the crossing: blend the slopes of the
        // segments on either side of sample j-1 and j.
        let seg = |a: usize| -> f64 { -(c[a + 1].mse - c[a].mse) / (c[a + 1].rate - c[a].rate) };
        let s_mid = seg(j - 1);
        let s_lo = if j >= 2 { 0.5 * (seg(j - 2) + s_mid) } else { s_mid };
        let s_hi = if j + 1 < c.len() { 0.5 * (s_mid + seg(j)) } else { s_mid };
        lambdas[level] = s_lo + t * (s_hi - s_lo);
    }
    Ok(lambdas)
}

/// Trains one single-width model per (width, tradeoff) pair and returns
/// `curves[k]`, the validation samples of width `k` in tradeoff order.
/// MSE is recovered from the mean validation PSNR.
#[allow(clippy::too_many_arguments)]
pub fn fixed_width_curves(
    config: &SlimCaeConfig,
    lambdas: &[f64],
    iterations: usize,
    adam: AdamConfig,
    train: &Dataset,
    val: &[Tensor4<f64>],
    seed: u64,
    log: &mut TrainLog,
) -> Result<Vec<Vec<RdSample>>> {
    let mut curves = Vec::with_capacity(config.levels());
    for &w in config.widths.as_slice() {
        let single = config.clone().with_widths(WidthSet::new(vec![w])?);
        let mut curve = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let mut model = SlimCae::<f64>::new(single.clone(), seed)?;
            let mut trainer = Trainer::new(&model, adam, seed)?;
            train_naive(&mut model, &mut trainer, train, lambda, iterations, log)?;
            let p = validate_rd(&model, val)?[0];
            log::info!("width {w} lambda {lambda}: {:.4} bpp, {:.2} dB", p.rate, p.psnr);
            curve.push(RdSample { rate: p.rate, mse: 10f64.powf(-p.psnr / 10.0) });
        }
        curves.push(curve);
    }
    Ok(curves)
}
