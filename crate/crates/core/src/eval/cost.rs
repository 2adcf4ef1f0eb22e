//! Closed-form FLOP and memory accounting.
//!
//! A multiply-add is 2 FLOPs. A convolution costs `2 c_in c_out kh kw` per
//! output position; a transposed convolution the same per input position,
//! which is the number of products it forms. A (I)GDN layer costs `2 w^2`
//! per position for the normalization pool plus 2 each for the square root
//! and the division of every element.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::SlimCaeConfig;
use crate::ops::ConvGeometry;
use crate::slim::{GdnVariant, WidthSet};

/// Bytes per stored parameter or feature value.
pub const BYTES_PER_VALUE: u64 = 4;

/// Costs of level `k` at one input size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCost {
    pub level: usize,
    pub width: usize,
    pub flops: u64,
    /// Parameters read at this level.
    pub param_bytes: u64,
    pub encoder_feature_bytes: u64,
    pub decoder_feature_bytes: u64,
}

impl LevelCost {
    pub fn feature_bytes(&self) -> u64 {
        self.encoder_feature_bytes + self.decoder_feature_bytes
    }
}

struct Walk {
    flops: u64,
    enc_values: u64,
    dec_values: u64,
}

fn walk(config: &SlimCaeConfig, level: usize, h: usize, w: usize) -> Result<Walk> {
    config.validate()?;
    config.widths.check_level(level)?;
    let wk = config.widths.width(level) as u64;
    let (mut h, mut w) = config.padded_dims(h, w);
    let mut flops = 0u64;
    let mut enc_values = 0u64;
    let gdn = |hw: u64| 2 * wk * wk * hw + 4 * wk * hw;

    let mut cin = config.input_channels as u64;
    for s in 0..3 {
        let (k, st) = (config.kernels[s], config.strides[s]);
        let g = ConvGeometry::same(k, st);
        (h, w) = (g.conv_out(h, k)?, g.conv_out(w, k)?);
        let hw = (h * w) as u64;
        flops += 2 * cin * wk * (k * k) as u64 * hw;
        flops += gdn(hw);
        enc_values += 2 * wk * hw;
        cin = wk;
    }

    let mut dec_values = 0u64;
    let (dk, ds) = (config.decoder_kernels(), config.decoder_strides());
    for s in 0..3 {
        let (k, st) = (dk[s], ds[s]);
        let cout = if s == 2 { config.input_channels as u64 } else { wk };
        let hw_in = (h * w) as u64;
        flops += gdn(hw_in);
        dec_values += wk * hw_in;
        flops += 2 * wk * cout * (k * k) as u64 * hw_in;
        let g = ConvGeometry::same(k, st);
        (h, w) = (g.deconv_out(h, k)?, g.deconv_out(w, k)?);
        dec_values += cout * (h * w) as u64;
    }
    Ok(Walk { flops, enc_values, dec_values })
}

/// FLOPs of one forward pass (analysis and synthesis) at `level`.
pub fn flops_count(config: &SlimCaeConfig, level: usize, h: usize, w: usize) -> Result<u64> {
    Ok(walk(config, level, h, w)?.flops)
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// Parameters read at `level`.
pub fn active_params(config: &SlimCaeConfig, level: usize) -> usize {
    let w = config.widths.width(level);
    let c = config.input_channels;
    let [k1, k2, k3] = config.kernels;
    let convs = conv_params(c, w, k1) + conv_params(w, w, k2) + conv_params(w, w, k3);
    let deconvs = conv_params(w, w, k3) + conv_params(w, w, k2) + w * c * k1 * k1 + c;
    let gdn = 6 * ((w + 1) * w + if config.gdn_variant == GdnVariant::SlimPlus { 4 } else { 0 });
    convs + deconvs + gdn + w * 2 * config.entropy_support
}

/// Parameters stored by the model.
pub fn total_params(config: &SlimCaeConfig) -> usize {
    let w = config.widths.max();
    let c = config.input_channels;
    let [k1, k2, k3] = config.kernels;
    let convs = 2 * (conv_params(c, w, k1) + conv_params(w, w, k2) + conv_params(w, w, k3)) + c - w;
    let gdn = 6 * config.gdn_variant.param_count(config.widths.as_slice());
    let entropy: usize = config.widths.as_slice().iter().map(|&wk| wk * 2 * config.entropy_support).sum();
    convs + gdn + entropy
}

/// Total stored parameters of one independent single-width model per level.
pub fn independent_params(config: &SlimCaeConfig) -> Result<usize> {
    config
        .widths
        .as_slice()
        .iter()
        .map(|&w| {
            let single = config.clone().with_widths(WidthSet::new(vec![w])?).with_variant(GdnVariant::Switch);
            Ok(total_params(&single))
        })
        .sum()
}

/// Bytes of all (I)GDN parameters of the model.
pub fn gdn_param_bytes(widths: &WidthSet, variant: GdnVariant) -> u64 {
    6 * variant.param_count(widths.as_slice()) as u64 * BYTES_PER_VALUE
}

/// `(param_bytes, feature_bytes)` at `level`; features exclude the input image.
pub fn memory_footprint(config: &SlimCaeConfig, level: usize, h: usize, w: usize) -> Result<(u64, u64)> {
    let c = level_cost(config, level, h, w)?;
    Ok((c.param_bytes, c.feature_bytes()))
}

pub fn level_cost(config: &SlimCaeConfig, level: usize, h: usize, w: usize) -> Result<LevelCost> {
    let walk = walk(config, level, h, w)?;
    Ok(LevelCost {
        level,
        width: config.widths.width(level),
        flops: walk.flops,
        param_bytes: active_params(config, level) as u64 * BYTES_PER_VALUE,
        encoder_feature_bytes: walk.enc_values * BYTES_PER_VALUE,
        decoder_feature_bytes: walk.dec_values * BYTES_PER_VALUE,
    })
}

/// Costs of every level plus whole-model storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<LevelCost>,
    pub total_param_bytes: u64,
    pub independent_param_bytes: u64,
    pub gdn_param_bytes: u64,
}

pub fn cost_report(config: &SlimCaeConfig, h: usize, w: usize) -> Result<CostReport> {
    let levels = (0..config.levels()).map(|k| level_cost(config, k, h, w)).collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        height: h,
        width: w,
        levels,
        total_param_bytes: total_params(config) as u64 * BYTES_PER_VALUE,
        independent_param_bytes: independent_params(config)? as u64 * BYTES_PER_VALUE,
        gdn_param_bytes: gdn_param_bytes(&config.widths, config.gdn_variant),
    })
}
