//! Per-level rate-distortion sweep over an image set.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cost::level_cost;
use super::RdCurve;
use crate::codec::{decode_image, encode_image};
use crate::error::{Error, Result};
use crate::model::{psnr, SlimCae};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// One row per width level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// 1-based.
    pub level: usize,
    pub width: usize,
    pub lambda: f64,
    pub est_bpp: f64,
    pub actual_bpp: f64,
    pub psnr_db: f64,
    pub flops: u64,
    pub param_bytes: u64,
    pub feature_bytes: u64,
    pub enc_ms: f64,
    pub dec_ms: f64,
}

/// Latency measurement settings. Times cover the transforms only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { warmup: 3, runs: 20 }
    }
}

impl Timing {
    /// No timing; the ms columns are zero.
    pub const OFF: Timing = Timing { warmup: 0, runs: 0 };
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock milliseconds of `f` after warm-up.
pub fn median_ms(timing: Timing, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..timing.warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(timing.runs);
    for _ in 0..timing.runs {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Codes every image at every level. Rates and PSNR are means over images;
/// timing uses the first image.
pub fn rd_sweep<S: Scalar>(model: &SlimCae<S>, images: &[Tensor4<f64>], lambdas: &[f64], timing: Timing) -> Result<Vec<SweepRow>> {
    if images.is_empty() {
        return Err(Error::data("sweep needs at least one image"));
    }
    let k = model.levels();
    if lambdas.len() != k {
        return Err(Error::config(format!("{} lambdas for {k} levels", lambdas.len())));
    }
    let images: Vec<Tensor4<S>> = images.iter().map(|x| x.cast()).collect();
    let mut rows = Vec::with_capacity(k);
    for level in 0..k {
        let (mut est, mut actual, mut quality) = (0.0, 0.0, 0.0);
        for x in &images {
            est += model.rd_point(x, level)?.rate;
            let e = encode_image(x, model, level, false)?;
            actual += e.bpp();
            quality += psnr(x, &decode_image(&e.bytes, model, None)?)?;
        }
        let n = images.len() as f64;
        let first = &images[0];
        let s = first.shape();
        let (xp, _, _) = model.pad(first)?;
        let q = model.quantized_latent(first, level)?;
        let enc_ms = median_ms(timing, || model.encode_latent(&xp, level).map(drop))?;
        let dec_ms = median_ms(timing, || model.reconstruct(&q, level, s.h, s.w).map(drop))?;
        let cost = level_cost(model.config(), level, s.h, s.w)?;
        rows.push(SweepRow {
            level: level + 1,
            width: model.width(level),
            lambda: lambdas[level],
            est_bpp: est / n,
            actual_bpp: actual / n,
            psnr_db: quality / n,
            flops: cost.flops,
            param_bytes: cost.param_bytes,
            feature_bytes: cost.feature_bytes(),
            enc_ms,
            dec_ms,
        });
    }
    Ok(rows)
}

/// Rate-distortion curve of the rows, using actual coded rates.
pub fn sweep_curve(rows: &[SweepRow]) -> RdCurve {
    RdCurve::new(rows.iter().map(|r| r.actual_bpp).collect(), rows.iter().map(|r| r.psnr_db).collect())
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::internal(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::internal(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::internal(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .map_err(|e| Error::data(format!("bad sweep csv: {e}")))
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_rows(dir: &Path, stem: &str, rows: &[SweepRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), rows_to_csv(rows)?)?;
    let json = serde_json::to_string_pretty(rows).map_err(|e| Error::internal(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}
