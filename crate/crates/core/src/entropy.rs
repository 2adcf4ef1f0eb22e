//! Per-level factorized entropy model.
//!
//! Every latent channel of every width level owns a piecewise-linear CDF with
//! one bin per integer symbol. Level `k` stores logits of shape
//! `(w(k), 2L, 1, 1)`; bin masses are the softmax of a row. Knots sit at
//! half-integers `-L - 1/2 + j` for `j = 0..=2L`, so symbol `q` in
//! `[-L, L-1]` has probability exactly `mass[q + L]`, and a continuous value
//! `v` gets `F(v + 1/2) - F(v - 1/2)`, a linear blend of two adjacent masses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slim::WidthSet;
use crate::tensor::{Shape4, Tensor4};

/// Probability floor applied to every likelihood.
pub const P_MIN: f64 = 1.0 / 65536.0;

/// Default half-width of the symbol support.
pub const DEFAULT_SUPPORT: usize = 32;

/// Clamp rate above which [`quantize`] logs a warning.
pub const CLAMP_WARN_RATE: f64 = 0.01;

fn softmax_row<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Softmax masses of every channel, `masses[c][j]`.
pub fn masses<S: Scalar>(logits: &Tensor4<S>) -> Vec<Vec<S>> {
    let s = logits.shape();
    let bins = s.c * s.h * s.w;
    logits.data().chunks(bins.max(1)).take(s.n).map(softmax_row).collect()
}

fn support_of<S: Scalar>(z: &Tensor4<S>, logits: &Tensor4<S>) -> Result<usize> {
    let ls = logits.shape();
    if ls.h != 1 || ls.w != 1 || ls.c == 0 || ls.c % 2 != 0 {
        return Err(Error::config(format!("entropy logits must have shape (channels, 2L, 1, 1), got {ls}")));
    }
    if z.shape().c != ls.n {
        return Err(Error::config(format!(
            "latent has {} channels but the entropy model covers {}",
            z.shape().c,
            ls.n
        )));
    }
    Ok(ls.c / 2)
}

/// Where `v` falls: lower bin, blend weight toward the upper bin, and whether
/// `v` was clamped into `[-L, L-1]`.
#[inline]
fn locate<S: Scalar>(v: S, support: usize) -> (usize, S, bool) {
    let lo = -(support as f64);
    let hi = support as f64 - 1.0;
    let vf = v.as_f64();
    let (vc, clamped) = if vf < lo {
        (lo, true)
    } else if vf > hi {
        (hi, true)
    } else {
        (vf, false)
    };
    let u = vc + support as f64;
    let j = (u.floor() as usize).min(2 * support - 1);
    let t = if clamped { S::zero() } else { v - S::of(j as f64 - support as f64) };
    (j, t, clamped)
}

#[inline]
fn blend<S: Scalar>(m: &[S], j: usize, t: S) -> S {
    let upper = if t > S::zero() { m[j + 1] } else { S::zero() };
    (S::one() - t) * m[j] + t * upper
}

/// Per-element likelihoods `max(F(v + 1/2) - F(v - 1/2), P_MIN)` and the number
/// of elements clamped into the support.
pub fn likelihood<S: Scalar>(z: &Tensor4<S>, logits: &Tensor4<S>) -> Result<(Tensor4<S>, usize)> {
    let support = support_of(z, logits)?;
    let m = masses(logits);
    let s = z.shape();
    let plane = s.h * s.w;
    let floor = S::of(P_MIN);
    let mut clamps = 0;
    let mut out = Tensor4::zeros(s);
    for (idx, (o, &v)) in out.data_mut().iter_mut().zip(z.data()).enumerate() {
        let c = (idx / plane) % s.c;
        let (j, t, clamped) = locate(v, support);
        clamps += clamped as usize;
        *o = blend(&m[c], j, t).max(floor);
    }
    Ok((out, clamps))
}

/// Total code length `-sum log2 p(v)` in bits and the clamp count.
pub fn bits_forward<S: Scalar>(z: &Tensor4<S>, logits: &Tensor4<S>) -> Result<(S, usize)> {
    let (p, clamps) = likelihood(z, logits)?;
    let total = p.data().iter().map(|&q| -q.log2()).sum::<S>();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("code length is not finite ({total})")));
    }
    Ok((total, clamps))
}

/// Gradients of `upstream * bits_forward(z, logits)` with respect to `z` and `logits`.
pub fn bits_backward<S: Scalar>(z: &Tensor4<S>, logits: &Tensor4<S>, upstream: S) -> Result<(Tensor4<S>, Tensor4<S>)> {
    let support = support_of(z, logits)?;
    let m = masses(logits);
    let s = z.shape();
    let plane = s.h * s.w;
    let bins = 2 * support;
    let floor = S::of(P_MIN);
    let ln2 = S::of(std::f64::consts::LN_2);
    let mut gz = Tensor4::zeros(s);
    // d(loss)/d(mass) per channel, then pushed through the softmax
    let mut gm = vec![vec![S::zero(); bins]; s.c];
    for (idx, (g, &v)) in gz.data_mut().iter_mut().zip(z.data()).enumerate() {
        let c = (idx / plane) % s.c;
        let (j, t, clamped) = locate(v, support);
        let p = blend(&m[c], j, t);
        if p < floor {
            continue;
        }
        let dp = -upstream / (p * ln2);
        gm[c][j] += dp * (S::one() - t);
        if t > S::zero() {
            gm[c][j + 1] += dp * t;
        }
        if !clamped {
            let upper = if j + 1 < bins { m[c][j + 1] } else { S::zero() };
            *g = dp * (upper - m[c][j]);
        }
    }
    let mut gl = Tensor4::zeros(logits.shape());
    for (c, (row, mc)) in gm.iter().zip(&m).enumerate() {
        let inner: S = row.iter().zip(mc).map(|(&g, &p)| g * p).sum();
        for j in 0..bins {
            gl.data_mut()[c * bins + j] = mc[j] * (row[j] - inner);
        }
    }
    Ok((gz, gl))
}

/// Estimated rate in bits per source pixel.
pub fn rate_estimate<S: Scalar>(z: &Tensor4<S>, logits: &Tensor4<S>, num_pixels: usize) -> Result<S> {
    if num_pixels == 0 {
        return Err(Error::config("rate needs a positive pixel count"));
    }
    let (bits, _) = bits_forward(z, logits)?;
    Ok(bits / S::of(num_pixels as f64))
}

/// `z + u` with `u` i.i.d. uniform on `(-1/2, 1/2)`.
pub fn add_uniform_noise<S: Scalar, R: Rng>(z: &Tensor4<S>, rng: &mut R) -> Tensor4<S> {
    let mut out = z.clone();
    for v in out.data_mut() {
        *v += S::of(uniform_open_half(rng));
    }
    out
}

/// Uniform sample on the open interval `(-1/2, 1/2)`.
pub fn uniform_open_half<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u > -0.5 {
            return u;
        }
    }
}

/// Hard-quantized latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quantized {
    pub shape: Shape4,
    /// Symbols in tensor order (channel-major, raster within channel for batch 1).
    pub symbols: Vec<i32>,
    pub clamped: usize,
}

impl Quantized {
    pub fn clamp_rate(&self) -> f64 {
        if self.symbols.is_empty() {
            0.0
        } else {
            self.clamped as f64 / self.symbols.len() as f64
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor4<S> {
        Tensor4::from_vec(self.shape, self.symbols.iter().map(|&q| S::of(q as f64)).collect())
            .expect("symbol count matches shape")
    }
}

/// Rounds half away from zero, then clamps into `[-support, support - 1]`.
pub fn quantize<S: Scalar>(z: &Tensor4<S>, support: usize) -> Quantized {
    let lo = -(support as i64);
    let hi = support as i64 - 1;
    let mut clamped = 0;
    let symbols = z
        .data()
        .iter()
        .map(|&v| {
            let r = v.as_f64().round();
            let q = if r.is_nan() { 0 } else { r.clamp(i64::MIN as f64, i64::MAX as f64) as i64 };
            if q < lo || q > hi {
                clamped += 1;
            }
            q.clamp(lo, hi) as i32
        })
        .collect();
    let out = Quantized {
        shape: z.shape(),
        symbols,
        clamped,
    };
    if out.clamp_rate() > CLAMP_WARN_RATE {
        log::warn!(
            "{} of {} latent symbols ({:.2}%) fell outside the coder support and were clamped",
            out.clamped,
            out.symbols.len(),
            100.0 * out.clamp_rate()
        );
    }
    out
}

/// Integer CDF of one channel, as consumed by the range coder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelCdf {
    /// `starts[j]` is the cumulative count before symbol `j`; `starts[2L] = 2^precision`.
    starts: Vec<u32>,
    precision: u32,
    support: usize,
}

impl ChannelCdf {
    /// Builds an integer table from bin masses that sum to one.
    ///
    /// Each symbol receives `1 + floor(m * (2^P - n))`; the remainder goes to
    /// the most probable symbol so the total is exactly `2^P`.
    pub fn from_masses(masses: &[f64], precision: u32) -> Result<Self> {
        if !(12..=16).contains(&precision) {
            return Err(Error::config(format!("CDF precision must be in 12..=16 bits, got {precision}")));
        }
        let n = masses.len();
        if n == 0 || n % 2 != 0 {
            return Err(Error::config("CDF needs an even, non-zero number of symbols"));
        }
        let total = 1u64 << precision;
        if n as u64 >= total {
            return Err(Error::config(format!(
                "{n} symbols do not fit a {precision}-bit table (each needs at least one count)"
            )));
        }
        let spare = (total - n as u64) as f64;
        let mut freq: Vec<u64> = masses.iter().map(|&m| 1 + (m.clamp(0.0, 1.0) * spare).floor() as u64).collect();
        let used: u64 = freq.iter().sum();
        let argmax = masses
            .iter()
            .enumerate()
            .fold(0, |best, (i, &m)| if m > masses[best] { i } else { best });
        if used > total {
            return Err(Error::internal(format!("CDF masses sum above one ({used} > {total})")));
        }
        freq[argmax] += total - used;
        let mut starts = Vec::with_capacity(n + 1);
        let mut acc = 0u64;
        for f in &freq {
            starts.push(acc as u32);
            acc += f;
        }
        starts.push(acc as u32);
        Ok(ChannelCdf {
            starts,
            precision,
            support: n / 2,
        })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn total(&self) -> u32 {
        1 << self.precision
    }

    pub fn symbols(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn starts(&self) -> &[u32] {
        &self.starts
    }

    /// Table index of symbol `q`, or `None` if outside the support.
    pub fn index(&self, q: i32) -> Option<usize> {
        let j = q as i64 + self.support as i64;
        (0..self.symbols() as i64).contains(&j).then_some(j as usize)
    }

    pub fn symbol(&self, index: usize) -> i32 {
        index as i32 - self.support as i32
    }

    /// `(start, freq)` of table index `j`.
    pub fn range(&self, j: usize) -> (u32, u32) {
        (self.starts[j], self.starts[j + 1] - self.starts[j])
    }

    /// Table index whose interval contains `value < total`.
    pub fn find(&self, value: u32) -> usize {
        self.starts.partition_point(|&s| s <= value) - 1
    }

    /// Ideal code length of symbol `q` under this table, in bits.
    pub fn cost_bits(&self, q: i32) -> Option<f64> {
        let (_, f) = self.range(self.index(q)?);
        Some(self.precision as f64 - (f as f64).log2())
    }
}

/// Little-endian `u16` dump of the cumulative starts of every channel.
///
/// The final total `2^precision` is implicit (it does not fit 16 bits at
/// precision 16), so each channel contributes `2L` values.
pub fn dump_tables(tables: &[ChannelCdf]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tables {
        for &s in &t.starts[..t.symbols()] {
            out.extend_from_slice(&(s as u16).to_le_bytes());
        }
    }
    out
}

/// Switchable factorized entropy model: independent logits per width level.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedEntropyModel {
    support: usize,
    logits: Vec<ParamId>,
    widths: Vec<usize>,
}

impl FactorizedEntropyModel {
    /// Initializes every channel to a discretized Laplacian of scale `init_scale`.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, widths: &WidthSet, support: usize, init_scale: f64) -> Result<Self> {
        if support == 0 {
            return Err(Error::config("entropy support must be positive"));
        }
        let mut logits = Vec::new();
        for k in 0..widths.levels() {
            let w = widths.width(k);
            let init = Tensor4::from_fn([w, 2 * support, 1, 1], |[_, j, _, _]| {
                let center = j as f64 - support as f64;
                S::of(-center.abs() / init_scale)
            });
            logits.push(store.insert(format!("entropy.k{}.logits", k + 1), init)?);
        }
        Ok(FactorizedEntropyModel {
            support,
            logits,
            widths: widths.as_slice().to_vec(),
        })
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn levels(&self) -> usize {
        self.logits.len()
    }

    pub fn logits_id(&self, level: usize) -> ParamId {
        self.logits[level]
    }

    pub fn param_count(&self) -> usize {
        self.widths.iter().map(|w| w * 2 * self.support).sum()
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.levels() {
            return Err(Error::config(format!(
                "width level {} out of range 1..={}",
                level + 1,
                self.levels()
            )));
        }
        Ok(())
    }

    pub fn logits<'a, S: Scalar>(&self, store: &'a ParamStore<S>, level: usize) -> Result<&'a Tensor4<S>> {
        self.check_level(level)?;
        Ok(store.value(self.logits[level]))
    }

    pub fn likelihood<S: Scalar>(&self, store: &ParamStore<S>, z: &Tensor4<S>, level: usize) -> Result<(Tensor4<S>, usize)> {
        likelihood(z, self.logits(store, level)?)
    }

    pub fn bits<S: Scalar>(&self, store: &ParamStore<S>, z: &Tensor4<S>, level: usize) -> Result<S> {
        Ok(bits_forward(z, self.logits(store, level)?)?.0)
    }

    pub fn record_bits<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, z: NodeId, level: usize) -> Result<NodeId> {
        self.check_level(level)?;
        let l = g.param(store, self.logits[level]);
        g.bits(z, l)
    }

    /// Integer tables for every channel of `level`, computed in `f64` so they
    /// depend only on the stored parameter values.
    pub fn cdf_tables<S: Scalar>(&self, store: &ParamStore<S>, level: usize, precision: u32) -> Result<Vec<ChannelCdf>> {
        let logits: Tensor4<f64> = self.logits(store, level)?.cast();
        masses(&logits)
            .iter()
            .map(|m| ChannelCdf::from_masses(m, precision))
            .collect()
    }
}
