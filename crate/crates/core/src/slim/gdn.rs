//! Generalized divisive normalization and its approximate inverse, in the
//! three width-switching variants.
//!
//! For an input `y` with `C` channels, at every spatial position
//!
//! ```text
//! norm_i = beta_i + sum_j gamma_ij * y_j^2
//! GDN:  out_i = y_i / sqrt(norm_i)
//! IGDN: out_i = y_i * sqrt(norm_i)
//! ```
//!
//! `beta > 0` and `gamma >= 0` are enforced by reparameterization: raw values
//! are squared, then lower-bounded (`beta >= 1e-6`). In the modulated variant
//! the per-level scale/bias is applied to the reparameterized values and the
//! bound is applied again afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{clamp_min, scale_shift, square, Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const BETA_MIN: f64 = 1e-6;
pub const GAMMA_MIN: f64 = 0.0;

const GAMMA_INIT: f64 = 0.1;
const GAMMA_OFFDIAG_RAW: f64 = 0.01;

fn check_params<S: Scalar>(channels: usize, gamma: &Tensor4<S>, beta: &Tensor4<S>) -> Result<()> {
    let gs = gamma.shape();
    let bs = beta.shape();
    if gs != Shape4::new(channels, channels, 1, 1) || bs != Shape4::new(channels, 1, 1, 1) {
        return Err(Error::config(format!(
            "GDN over {channels} channels needs gamma ({channels}, {channels}, 1, 1) and beta ({channels}, 1, 1, 1), got {gs} and {bs}"
        )));
    }
    Ok(())
}

/// `norm[n][i * plane + p]` for each batch item.
fn norms<S: Scalar>(y: &Tensor4<S>, gamma: &Tensor4<S>, beta: &Tensor4<S>) -> Result<Vec<Vec<S>>> {
    let s = y.shape();
    let plane = s.h * s.w;
    let c = s.c;
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let yd = &y.data()[n * c * plane..(n + 1) * c * plane];
        let sq: Vec<S> = yd.iter().map(|&v| v * v).collect();
        let mut norm = vec![S::zero(); c * plane];
        for i in 0..c {
            let row = &mut norm[i * plane..(i + 1) * plane];
            row.fill(beta.data()[i]);
            for j in 0..c {
                let g = gamma.data()[i * c + j];
                for (r, &q) in row.iter_mut().zip(&sq[j * plane..(j + 1) * plane]) {
                    *r += g * q;
                }
            }
        }
        if let Some(bad) = norm.iter().find(|v| !(**v > S::zero()) || !v.is_finite()) {
            return Err(Error::internal(format!("GDN denominator {bad} is not positive and finite")));
        }
        out.push(norm);
    }
    Ok(out)
}

/// GDN (or IGDN when `inverse`) with effective `gamma` `(C, C, 1, 1)` and `beta` `(C, 1, 1, 1)`.
pub fn gdn_forward<S: Scalar>(y: &Tensor4<S>, gamma: &Tensor4<S>, beta: &Tensor4<S>, inverse: bool) -> Result<Tensor4<S>> {
    check_params(y.shape().c, gamma, beta)?;
    let norms = norms(y, gamma, beta)?;
    let per = y.shape().c * y.shape().h * y.shape().w;
    let mut out = y.clone();
    for (n, norm) in norms.iter().enumerate() {
        for (o, &d) in out.data_mut()[n * per..(n + 1) * per].iter_mut().zip(norm) {
            let r = d.sqrt();
            *o = if inverse { *o * r } else { *o / r };
        }
    }
    Ok(out)
}

pub struct GdnGrads<S> {
    pub input: Tensor4<S>,
    pub gamma: Tensor4<S>,
    pub beta: Tensor4<S>,
}

pub fn gdn_backward<S: Scalar>(
    y: &Tensor4<S>,
    gamma: &Tensor4<S>,
    beta: &Tensor4<S>,
    inverse: bool,
    grad_out: &Tensor4<S>,
) -> Result<GdnGrads<S>> {
    check_params(y.shape().c, gamma, beta)?;
    grad_out.expect_shape(y.shape())?;
    let s = y.shape();
    let (c, plane) = (s.c, s.h * s.w);
    let half = S::of(0.5);
    let two = S::of(2.0);
    let norms = norms(y, gamma, beta)?;
    let mut gy = Tensor4::zeros(s);
    let mut gg = Tensor4::zeros(gamma.shape());
    let mut gb = Tensor4::zeros(beta.shape());
    for (n, norm) in norms.iter().enumerate() {
        let base = n * c * plane;
        let yd = &y.data()[base..base + c * plane];
        let up = &grad_out.data()[base..base + c * plane];
        // coef_i = d(loss)/d(norm_i)
        let mut coef = vec![S::zero(); c * plane];
        for e in 0..c * plane {
            let d = norm[e];
            let r = d.sqrt();
            coef[e] = if inverse {
                up[e] * yd[e] * half / r
            } else {
                -up[e] * yd[e] * half / (d * r)
            };
            gy.data_mut()[base + e] = if inverse { up[e] * r } else { up[e] / r };
        }
        for i in 0..c {
            let ci = &coef[i * plane..(i + 1) * plane];
            gb.data_mut()[i] += ci.iter().copied().sum::<S>();
            for j in 0..c {
                let yj = &yd[j * plane..(j + 1) * plane];
                let mut acc = S::zero();
                for (&a, &v) in ci.iter().zip(yj) {
                    acc += a * v * v;
                }
                gg.data_mut()[i * c + j] += acc;
                let g = gamma.data()[i * c + j];
                if g != S::zero() {
                    let dst = &mut gy.data_mut()[base + j * plane..base + (j + 1) * plane];
                    for ((d, &a), &v) in dst.iter_mut().zip(ci).zip(yj) {
                        *d += two * v * a * g;
                    }
                }
            }
        }
    }
    Ok(GdnGrads {
        input: gy,
        gamma: gg,
        beta: gb,
    })
}

/// How GDN parameters are shared across width levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdnVariant {
    /// Independent `gamma(k)`, `beta(k)` per level.
    Switch,
    /// One nested `gamma`, `beta`; level `k` uses the leading block.
    Slim,
    /// Nested shared parameters plus four per-level modulation scalars.
    SlimPlus,
}

impl GdnVariant {
    pub const ALL: [GdnVariant; 3] = [GdnVariant::Switch, GdnVariant::Slim, GdnVariant::SlimPlus];

    /// Stored parameter count of one layer over `widths`.
    pub fn param_count(self, widths: &[usize]) -> usize {
        let wmax = widths.last().copied().unwrap_or(0);
        match self {
            GdnVariant::Switch => widths.iter().map(|&w| (w + 1) * w).sum(),
            GdnVariant::Slim => (wmax + 1) * wmax,
            GdnVariant::SlimPlus => (wmax + 1) * wmax + 4 * widths.len(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GdnVariant::Switch => "switch",
            GdnVariant::Slim => "slim",
            GdnVariant::SlimPlus => "slim_plus",
        }
    }
}

impl std::str::FromStr for GdnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "switch" => Ok(GdnVariant::Switch),
            "slim" => Ok(GdnVariant::Slim),
            "slim_plus" | "slim+" => Ok(GdnVariant::SlimPlus),
            other => Err(Error::config(format!(
                "unknown GDN variant {other:?} (expected switch, slim or slim_plus)"
            ))),
        }
    }
}

impl std::fmt::Display for GdnVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-level modulation scalars of [`GdnVariant::SlimPlus`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Modulation {
    pub gamma_scale: ParamId,
    pub gamma_bias: ParamId,
    pub beta_scale: ParamId,
    pub beta_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum GdnParams {
    PerLevel { gamma: Vec<ParamId>, beta: Vec<ParamId> },
    Shared { gamma: ParamId, beta: ParamId, modulation: Option<Vec<Modulation>> },
}

/// A GDN or IGDN layer executable at every level of a width set.
#[derive(Clone, Debug, PartialEq)]
pub struct SlimGdn {
    pub name: String,
    variant: GdnVariant,
    inverse: bool,
    widths: Vec<usize>,
    params: GdnParams,
}

fn raw_gamma<S: Scalar, R: Rng>(w: usize, _rng: &mut R) -> Tensor4<S> {
    Tensor4::from_fn([w, w, 1, 1], |[i, j, _, _]| {
        S::of(if i == j { GAMMA_INIT.sqrt() } else { GAMMA_OFFDIAG_RAW })
    })
}

impl SlimGdn {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        variant: GdnVariant,
        inverse: bool,
        widths: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.windows(2).any(|p| p[0] >= p[1]) || widths[0] == 0 {
            return Err(Error::config(format!("{name}: widths must be positive and strictly increasing")));
        }
        let ones = |w: usize| Tensor4::<S>::full([w, 1, 1, 1], S::one());
        let params = match variant {
            GdnVariant::Switch => {
                let mut gamma = Vec::new();
                let mut beta = Vec::new();
                for (k, &w) in widths.iter().enumerate() {
                    gamma.push(store.insert(format!("{name}.k{}.gamma", k + 1), raw_gamma(w, rng))?);
                    beta.push(store.insert(format!("{name}.k{}.beta", k + 1), ones(w))?);
                }
                GdnParams::PerLevel { gamma, beta }
            }
            GdnVariant::Slim | GdnVariant::SlimPlus => {
                let wmax = *widths.last().unwrap();
                let gamma = store.insert(format!("{name}.gamma"), raw_gamma(wmax, rng))?;
                let beta = store.insert(format!("{name}.beta"), ones(wmax))?;
                let modulation = if variant == GdnVariant::SlimPlus {
                    let mut m = Vec::new();
                    for k in 0..widths.len() {
                        let mut scalar = |field: &str, v: f64| {
                            store.insert(format!("{name}.k{}.{field}", k + 1), Tensor4::scalar(S::of(v)))
                        };
                        m.push(Modulation {
                            gamma_scale: scalar("gamma_scale", 1.0)?,
                            gamma_bias: scalar("gamma_bias", 0.0)?,
                            beta_scale: scalar("beta_scale", 1.0)?,
                            beta_bias: scalar("beta_bias", 0.0)?,
                        });
                    }
                    Some(m)
                } else {
                    None
                };
                GdnParams::Shared { gamma, beta, modulation }
            }
        };
        Ok(SlimGdn {
            name: name.to_string(),
            variant,
            inverse,
            widths,
            params,
        })
    }

    pub fn variant(&self) -> GdnVariant {
        self.variant
    }

    pub fn is_inverse(&self) -> bool {
        self.inverse
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.widths[level]
    }

    /// Raw parameter ids read at `level`.
    pub fn param_ids(&self, level: usize) -> Vec<ParamId> {
        match &self.params {
            GdnParams::PerLevel { gamma, beta } => vec![gamma[level], beta[level]],
            GdnParams::Shared { gamma, beta, modulation } => {
                let mut ids = vec![*gamma, *beta];
                if let Some(m) = modulation {
                    let m = m[level];
                    ids.extend([m.gamma_scale, m.gamma_bias, m.beta_scale, m.beta_bias]);
                }
                ids
            }
        }
    }

    pub fn modulation(&self, level: usize) -> Option<Modulation> {
        match &self.params {
            GdnParams::Shared { modulation: Some(m), .. } => Some(m[level]),
            _ => None,
        }
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.levels() {
            return Err(Error::config(format!(
                "{}: width level {} out of range 1..={}",
                self.name,
                level + 1,
                self.levels()
            )));
        }
        Ok(())
    }

    fn raw_slices<S: Scalar>(&self, store: &ParamStore<S>, level: usize) -> Result<(Tensor4<S>, Tensor4<S>)> {
        let w = self.widths[level];
        let (gid, bid) = match &self.params {
            GdnParams::PerLevel { gamma, beta } => (gamma[level], beta[level]),
            GdnParams::Shared { gamma, beta, .. } => (*gamma, *beta),
        };
        Ok((
            store.value(gid).slice_leading(Shape4::new(w, w, 1, 1))?,
            store.value(bid).slice_leading(Shape4::new(w, 1, 1, 1))?,
        ))
    }

    /// Effective `(gamma, beta)` used at `level`, after reparameterization
    /// and (for SlimGDN+) modulation.
    pub fn effective<S: Scalar>(&self, store: &ParamStore<S>, level: usize) -> Result<(Tensor4<S>, Tensor4<S>)> {
        self.check_level(level)?;
        let (graw, braw) = self.raw_slices(store, level)?;
        let gmin = S::of(GAMMA_MIN);
        let bmin = S::of(BETA_MIN);
        let mut gamma = graw.map(square);
        let mut beta = braw.map(|v| clamp_min(square(v), bmin));
        if let Some(m) = self.modulation(level) {
            let s_g = store.value(m.gamma_scale).item()?;
            let b_g = store.value(m.gamma_bias).item()?;
            let s_b = store.value(m.beta_scale).item()?;
            let b_b = store.value(m.beta_bias).item()?;
            gamma = gamma.map(|v| clamp_min(scale_shift(v, s_g, b_g), gmin));
            beta = beta.map(|v| clamp_min(scale_shift(v, s_b, b_b), bmin));
        }
        Ok((gamma, beta))
    }

    pub fn record_effective<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, level: usize) -> Result<(NodeId, NodeId)> {
        self.check_level(level)?;
        let w = self.widths[level];
        let (gid, bid) = match &self.params {
            GdnParams::PerLevel { gamma, beta } => (gamma[level], beta[level]),
            GdnParams::Shared { gamma, beta, .. } => (*gamma, *beta),
        };
        let gfull = g.param(store, gid);
        let bfull = g.param(store, bid);
        let graw = g.slice_leading(gfull, Shape4::new(w, w, 1, 1))?;
        let braw = g.slice_leading(bfull, Shape4::new(w, 1, 1, 1))?;
        let mut gamma = g.square(graw);
        let bsq = g.square(braw);
        let mut beta = g.clamp_min(bsq, BETA_MIN);
        if let Some(m) = self.modulation(level) {
            let s_g = g.param(store, m.gamma_scale);
            let b_g = g.param(store, m.gamma_bias);
            let s_b = g.param(store, m.beta_scale);
            let b_b = g.param(store, m.beta_bias);
            let gm = g.scale_shift(gamma, s_g, b_g)?;
            gamma = g.clamp_min(gm, GAMMA_MIN);
            let bm = g.scale_shift(beta, s_b, b_b)?;
            beta = g.clamp_min(bm, BETA_MIN);
        }
        Ok((gamma, beta))
    }

    fn check_input(&self, channels: usize, level: usize) -> Result<()> {
        self.check_level(level)?;
        if channels != self.widths[level] {
            return Err(Error::config(format!(
                "{}: level {} expects {} channels, got {channels}",
                self.name,
                level + 1,
                self.widths[level]
            )));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, y: &Tensor4<S>, level: usize) -> Result<Tensor4<S>> {
        self.check_input(y.shape().c, level)?;
        let (gamma, beta) = self.effective(store, level)?;
        gdn_forward(y, &gamma, &beta, self.inverse)
    }

    pub fn record<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, y: NodeId, level: usize) -> Result<NodeId> {
        self.check_input(g.value(y).shape().c, level)?;
        let (gamma, beta) = self.record_effective(g, store, level)?;
        g.gdn(y, gamma, beta, self.inverse)
    }

    /// Parameters stored by this layer.
    pub fn param_count(&self) -> usize {
        self.variant.param_count(&self.widths)
    }

    /// Parameters read at `level`.
    pub fn active_param_count(&self, level: usize) -> usize {
        let w = self.widths[level];
        (w + 1) * w + if self.variant == GdnVariant::SlimPlus { 4 } else { 0 }
    }
}
