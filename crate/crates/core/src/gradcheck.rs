//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{SlimCae, SlimCaeConfig};
use crate::ops::ConvGeometry;
use crate::param::{ParamId, ParamStore};
use crate::slim::{GdnVariant, SlimGdn, WidthSet};
use crate::tensor::Tensor4;

/// Largest number of elements probed per parameter tensor.
pub const MAX_PROBES_PER_PARAM: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    /// Parameters whose probing produced a non-finite loss.
    pub non_finite: Vec<String>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }
}

/// Compares the reverse-mode gradient of `loss` with central differences.
///
/// `loss` records a scalar on a fresh graph from the parameter values in the
/// given store. Tensors with more than [`MAX_PROBES_PER_PARAM`] elements are
/// probed at a seeded random subset. The error of one element is
/// `|a - n| / max(|a|, |n|, 1e-3 * g_max, 1e-6 * max(|L|, 1))` with `g_max`
/// the largest analytic magnitude in the same tensor and `L` the loss value.
/// The last term keeps gradients that are buried in the rounding noise of
/// the difference quotient (about `1e-10 |L|`) from being judged relatively.
pub fn finite_diff_check<F>(store: &ParamStore<f64>, loss: F, tolerance: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    let loss_value = g.value(root).item()?;
    g.backward(root)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    g.accumulate_param_grads(&mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let r = loss(&mut g, s)?;
        g.value(r).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradReport {
        params: Vec::new(),
        non_finite: Vec::new(),
        tolerance,
    };
    let ids: Vec<(ParamId, String, usize)> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (id, name, len) in ids {
        let grad = analytic.grad(id).clone();
        let gmax = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let picks: Vec<usize> = if len <= MAX_PROBES_PER_PARAM {
            (0..len).collect()
        } else {
            (0..MAX_PROBES_PER_PARAM).map(|_| rng.random_range(0..len)).collect()
        };
        let mut worst = 0.0f64;
        let mut finite = true;
        for &i in &picks {
            let v = store.value(id).data()[i];
            let eps = 1e-6 * v.abs().max(1.0);
            work.value_mut(id).data_mut()[i] = v + eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = v - eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = v;
            if !up.is_finite() || !down.is_finite() {
                finite = false;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * gmax).max(1e-6 * loss_value.abs().max(1.0));
            worst = worst.max((a - numeric).abs() / denom);
        }
        if !finite {
            report.non_finite.push(name.clone());
        }
        report.params.push(ParamCheck {
            name,
            probed: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Ops that can be probed on random instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeOp {
    Conv2d,
    Deconv2d,
    Gdn { variant: GdnVariant, inverse: bool },
    Likelihood,
    JointLoss,
    /// Hard rounding; has no useful derivative and is rejected.
    Quantize,
}

impl ProbeOp {
    /// Every differentiable op, including all GDN/IGDN variants.
    pub fn differentiable() -> Vec<ProbeOp> {
        let mut ops = vec![ProbeOp::Conv2d, ProbeOp::Deconv2d];
        for variant in GdnVariant::ALL {
            for inverse in [false, true] {
                ops.push(ProbeOp::Gdn { variant, inverse });
            }
        }
        ops.push(ProbeOp::Likelihood);
        ops.push(ProbeOp::JointLoss);
        ops
    }

    pub fn label(&self) -> String {
        match self {
            ProbeOp::Conv2d => "conv2d".into(),
            ProbeOp::Deconv2d => "deconv2d".into(),
            ProbeOp::Gdn { variant, inverse } => format!("{}_{variant}", if *inverse { "igdn" } else { "gdn" }),
            ProbeOp::Likelihood => "likelihood".into(),
            ProbeOp::JointLoss => "joint_loss".into(),
            ProbeOp::Quantize => "quantize".into(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Builds a random instance of `op` from `seed` and checks it.
pub fn probe(op: ProbeOp, seed: u64, tolerance: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        ProbeOp::Quantize => Err(Error::config(
            "quantize (hard rounding) has zero or undefined derivative and cannot be probed",
        )),
        ProbeOp::Conv2d | ProbeOp::Deconv2d => {
            let transposed = op == ProbeOp::Deconv2d;
            let cin: usize = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let k: usize = rng.random_range(1..4);
            let stride: usize = rng.random_range(1..3);
            let pad = rng.random_range(0..k.div_ceil(2));
            let geom = ConvGeometry::new(stride, pad).with_output_padding(if transposed { stride - 1 } else { 0 });
            let h = rng.random_range(k.max(2)..6);
            let mut store = ParamStore::new();
            let x = store.insert("x", uniform(&mut rng, [2, cin, h, h + 1], -1.0, 1.0))?;
            let kshape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
            let kernel = store.insert("kernel", uniform(&mut rng, kshape, -1.0, 1.0))?;
            let bias = store.insert("bias", uniform(&mut rng, [cout, 1, 1, 1], -0.5, 0.5))?;
            finite_diff_check(
                &store,
                |g, s| {
                    let (xn, kn, bn) = (g.param(s, x), g.param(s, kernel), g.param(s, bias));
                    let y = if transposed { g.deconv2d(xn, kn, bn, geom)? } else { g.conv2d(xn, kn, bn, geom)? };
                    let sq = g.square(y);
                    Ok(g.sum(sq))
                },
                tolerance,
                seed,
            )
        }
        ProbeOp::Gdn { variant, inverse } => {
            let widths = vec![2, 3, 5];
            let level = rng.random_range(0..widths.len());
            let mut store = ParamStore::new();
            let layer = SlimGdn::new(&mut store, "g", variant, inverse, widths.clone(), &mut rng)?;
            let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            for id in ids {
                let name = store.get(id).name.clone();
                let shape = store.shape(id);
                let v = if name.ends_with("beta") {
                    Tensor4::from_fn(shape, |_| rng.random_range(0.5..1.5))
                } else if name.ends_with("gamma") {
                    Tensor4::from_fn(shape, |_| rng.random_range(0.05..0.8))
                } else if name.ends_with("scale") {
                    Tensor4::from_fn(shape, |_| rng.random_range(0.5..1.5))
                } else {
                    Tensor4::from_fn(shape, |_| rng.random_range(0.0..0.2))
                };
                *store.value_mut(id) = v;
            }
            let w = widths[level];
            let y = store.insert("y", uniform(&mut rng, [2, w, 3, 2], -2.0, 2.0))?;
            let weights = uniform(&mut rng, [2, w, 3, 2], -1.0, 1.0);
            finite_diff_check(
                &store,
                |g, s| {
                    let yn = g.param(s, y);
                    let out = layer.record(g, s, yn, level)?;
                    let r = g.constant(weights.clone());
                    let m = g.mul(out, r)?;
                    Ok(g.sum(m))
                },
                tolerance,
                seed,
            )
        }
        ProbeOp::Likelihood => {
            let support = rng.random_range(2..6);
            let c = rng.random_range(1..4);
            let mut store = ParamStore::new();
            let logits = store.insert("logits", uniform(&mut rng, [c, 2 * support, 1, 1], -1.5, 1.5))?;
            let lim = support as f64 - 1.2;
            let zv = Tensor4::from_fn([1, c, 3, 3], |_| loop {
                let v: f64 = rng.random_range(-lim..lim);
                let f = v - v.floor();
                if f > 0.01 && f < 0.99 {
                    break v;
                }
            });
            let z = store.insert("z", zv)?;
            finite_diff_check(
                &store,
                |g, s| {
                    let (zn, ln) = (g.param(s, z), g.param(s, logits));
                    g.bits(zn, ln)
                },
                tolerance,
                seed,
            )
        }
        ProbeOp::JointLoss => {
            let config = SlimCaeConfig::desk().with_widths(WidthSet::new(vec![2, 3])?).with_variant(
                GdnVariant::ALL[rng.random_range(0..3)],
            );
            let model = SlimCae::<f64>::new(config, seed)?;
            let x = uniform(&mut rng, [1, 3, 12, 16], 0.0, 1.0);
            let noise = uniform(&mut rng, model.noise_shape(x.shape()).dims(), -0.5, 0.5);
            let lambdas = [rng.random_range(0.01..1.0), rng.random_range(0.01..1.0)];
            let model_ref = &model;
            finite_diff_check(
                model.params(),
                |g, s| {
                    let mut m = model_ref.clone();
                    *m.params_mut() = s.clone();
                    let xn = g.constant(x.clone());
                    let mut total = None;
                    for (k, &l) in lambdas.iter().enumerate() {
                        let (loss, _, _) = m.record_loss(g, xn, k, l, &noise)?;
                        total = Some(match total {
                            None => loss,
                            Some(t) => g.add(t, loss)?,
                        });
                    }
                    Ok(total.expect("two levels"))
                },
                tolerance,
                seed,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_and_gdn_probes_pass() {
        for seed in 0..3 {
            assert!(probe(ProbeOp::Conv2d, seed, 1e-3).unwrap().passed());
            let r = probe(
                ProbeOp::Gdn {
                    variant: GdnVariant::SlimPlus,
                    inverse: false,
                },
                seed,
                1e-3,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn every_differentiable_op_passes_once() {
        for op in ProbeOp::differentiable() {
            let r = probe(op, 100, 1e-3).unwrap();
            assert!(r.passed(), "{}: {r:?}", op.label());
        }
    }

    #[test]
    fn quantize_is_rejected() {
        assert!(matches!(probe(ProbeOp::Quantize, 0, 1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // sum(x^2) recorded as sum(x * x0) with x0 a detached copy: gradient off by 2x
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor4::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let r = finite_diff_check(
            &store,
            |g, s| {
                let xn = g.param(s, x);
                let c = g.constant(s.value(x).clone());
                let m = g.mul(xn, c)?;
                Ok(g.sum(m))
            },
            1e-3,
            0,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
