//! Bjontegaard delta rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points of one rate-distortion curve; rates in bpp, distortion as PSNR in dB.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub rates: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl RdCurve {
    pub fn new(rates: Vec<f64>, psnr: Vec<f64>) -> Self {
        RdCurve { rates, psnr }
    }

    fn validate(&self) -> Result<()> {
        if self.rates.len() != self.psnr.len() {
            return Err(Error::config("rate and PSNR vectors differ in length"));
        }
        if self.rates.len() < 4 {
            return Err(Error::config(format!("BD-rate needs at least 4 points per curve, got {}", self.rates.len())));
        }
        if self.rates.iter().chain(&self.psnr).any(|v| !v.is_finite()) || self.rates.iter().any(|&r| r <= 0.0) {
            return Err(Error::config("BD-rate needs positive finite rates and finite PSNR"));
        }
        Ok(())
    }

    fn span(&self) -> (f64, f64) {
        let lo = self.psnr.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Least-squares cubic `ln R = c0 + c1 d + c2 d^2 + c3 d^3`.
fn fit_cubic(c: &RdCurve) -> Result<[f64; 4]> {
    let n = c.psnr.len();
    let a = DMatrix::from_fn(n, 4, |i, j| c.psnr[i].powi(j as i32));
    let b = DVector::from_iterator(n, c.rates.iter().map(|r| r.ln()));
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::numeric(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| p[0] * x + p[1] * x * x / 2.0 + p[2] * x.powi(3) / 3.0 + p[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average rate change of `a` relative to `b` in percent over the shared
/// PSNR interval; negative means `a` needs fewer bits.
pub fn bd_rate(a: &RdCurve, b: &RdCurve) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a == b {
        return Ok(0.0);
    }
    let (alo, ahi) = a.span();
    let (blo, bhi) = b.span();
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(hi > lo) {
        return Err(Error::config("curves have no overlapping PSNR range"));
    }
    let (pa, pb) = (fit_cubic(a)?, fit_cubic(b)?);
    let avg = (integral(&pa, lo, hi) - integral(&pb, lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(scale: f64) -> RdCurve {
        // PSNR = 10 log10(1 + 40 R): concave in R like real codecs
        let rates: Vec<f64> = [0.1, 0.2, 0.4, 0.8, 1.6].iter().map(|r| r * scale).collect();
        let psnr = [0.1, 0.2, 0.4, 0.8, 1.6].iter().map(|r: &f64| 20.0 + 10.0 * (1.0 + 40.0 * r).log10()).collect();
        RdCurve::new(rates, psnr)
    }

    #[test]
    fn identical_curves_give_zero() {
        assert_eq!(bd_rate(&curve(1.0), &curve(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_rate_scaling_is_recovered() {
        let d = bd_rate(&curve(0.9), &curve(1.0)).unwrap();
        assert!((d + 10.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn swapping_inverts_the_ratio() {
        let mut a = curve(1.0);
        a.psnr.iter_mut().enumerate().for_each(|(i, p)| *p += 0.3 + 0.05 * i as f64);
        let b = curve(1.0);
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        let expected = -ba / (1.0 + ba / 100.0);
        assert!((ab - expected).abs() < 0.05 * expected.abs().max(1.0), "{ab} vs {expected}");
    }

    #[test]
    fn disjoint_or_short_curves_are_errors() {
        let mut far = curve(1.0);
        far.psnr.iter_mut().for_each(|p| *p += 100.0);
        assert!(bd_rate(&far, &curve(1.0)).is_err());
        let short = RdCurve::new(vec![0.1, 0.2, 0.3], vec![20.0, 21.0, 22.0]);
        assert!(bd_rate(&short, &short).is_err());
    }
}
