//! The slimmable compressive autoencoder.
//!
//! Encoder: three (conv, GDN) stages. Decoder: three (IGDN, deconv) stages,
//! mirrored, so the reconstruction leaves the last deconvolution directly.
//! Every hidden layer and the latent run at `w(k)` channels at level `k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{quantize, FactorizedEntropyModel, Quantized, DEFAULT_SUPPORT};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::slim::{GdnVariant, SlimConv, SlimGdn, WidthSet};
use crate::tensor::{Shape4, Tensor4};

/// PSNR reported for (near-)lossless reconstructions.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;
const OUTPUT_INIT_SCALE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlimCaeConfig {
    pub widths: WidthSet,
    pub input_channels: usize,
    /// Encoder kernel sizes, stage 1 to 3. The decoder uses them in reverse.
    pub kernels: [usize; 3],
    /// Encoder strides, stage 1 to 3. The decoder uses them in reverse.
    pub strides: [usize; 3],
    pub gdn_variant: GdnVariant,
    /// Symbols are coded in `[-L, L-1]`.
    pub entropy_support: usize,
    /// Scale of the discretized Laplacian the entropy model starts from.
    pub entropy_init_scale: f64,
}

impl SlimCaeConfig {
    /// Small configuration used for training on a desk: widths {4, 8, 16}.
    pub fn desk() -> Self {
        SlimCaeConfig {
            widths: WidthSet::new(vec![4, 8, 16]).expect("valid"),
            input_channels: 3,
            kernels: [5, 3, 3],
            strides: [4, 2, 2],
            gdn_variant: GdnVariant::SlimPlus,
            entropy_support: DEFAULT_SUPPORT,
            entropy_init_scale: 2.0,
        }
    }

    /// Five-width configuration with widths up to 192.
    pub fn full() -> Self {
        SlimCaeConfig {
            widths: WidthSet::new(vec![48, 72, 96, 144, 192]).expect("valid"),
            kernels: [9, 5, 5],
            ..Self::desk()
        }
    }

    pub fn with_widths(mut self, widths: WidthSet) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_variant(mut self, variant: GdnVariant) -> Self {
        self.gdn_variant = variant;
        self
    }

    pub fn levels(&self) -> usize {
        self.widths.levels()
    }

    /// Product of the encoder strides.
    pub fn downsampling(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn decoder_kernels(&self) -> [usize; 3] {
        let [a, b, c] = self.kernels;
        [c, b, a]
    }

    pub fn decoder_strides(&self) -> [usize; 3] {
        let [a, b, c] = self.strides;
        [c, b, a]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        if self.kernels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::config("kernel sizes and strides must be positive"));
        }
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if s + 2 * ((k - 1) / 2) < k {
                return Err(Error::config(format!(
                    "kernel {k} with stride {s} cannot be inverted by a same-size transposed convolution"
                )));
            }
        }
        if self.entropy_support == 0 {
            return Err(Error::config("entropy_support must be positive"));
        }
        if !(self.entropy_init_scale > 0.0) {
            return Err(Error::config("entropy_init_scale must be positive"));
        }
        Ok(())
    }

    /// Padded size of an `h x w` image.
    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let f = self.downsampling();
        (h.div_ceil(f) * f, w.div_ceil(f) * f)
    }
}

/// Per-level rate/distortion values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub level: usize,
    pub lambda: f64,
    /// Mean squared error on `[0, 1]` pixels.
    pub distortion: f64,
    /// Estimated bits per source pixel.
    pub rate: f64,
}

impl LossTerms {
    pub fn loss(&self) -> f64 {
        self.distortion + self.lambda * self.rate
    }
}

/// Rate and quality of one image at one level, using hard quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub level: usize,
    pub rate: f64,
    pub psnr: f64,
}

pub struct SlimCae<S: Scalar> {
    config: SlimCaeConfig,
    store: ParamStore<S>,
    encoder: Vec<SlimConv>,
    encoder_gdn: Vec<SlimGdn>,
    decoder_gdn: Vec<SlimGdn>,
    decoder: Vec<SlimConv>,
    entropy: FactorizedEntropyModel,
}

impl<S: Scalar> Clone for SlimCae<S> {
    fn clone(&self) -> Self {
        SlimCae {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            encoder_gdn: self.encoder_gdn.clone(),
            decoder_gdn: self.decoder_gdn.clone(),
            decoder: self.decoder.clone(),
            entropy: self.entropy.clone(),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for SlimCae<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlimCae")
            .field("config", &self.config)
            .field("params", &self.store.numel())
            .finish()
    }
}

/// Equal configs and bitwise-equal parameters.
impl<S: Scalar> PartialEq for SlimCae<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.store.len() == other.store.len()
            && self.store.iter().zip(other.store.iter()).all(|((_, a), (_, b))| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

impl<S: Scalar> SlimCae<S> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: SlimCaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = config.widths.as_slice().to_vec();
        let k = widths.len();
        let image = vec![config.input_channels; k];
        let variant = config.gdn_variant;

        let mut encoder = Vec::new();
        let mut encoder_gdn = Vec::new();
        for s in 0..3 {
            let cin = if s == 0 { image.clone() } else { widths.clone() };
            let name = format!("enc{}", s + 1);
            encoder.push(SlimConv::new(
                &mut store,
                &name,
                cin,
                widths.clone(),
                config.kernels[s],
                config.strides[s],
                false,
                &mut rng,
            )?);
            encoder_gdn.push(SlimGdn::new(&mut store, &format!("{name}.gdn"), variant, false, widths.clone(), &mut rng)?);
        }
        let mut decoder_gdn = Vec::new();
        let mut decoder = Vec::new();
        let (dk, ds) = (config.decoder_kernels(), config.decoder_strides());
        for s in 0..3 {
            let name = format!("dec{}", s + 1);
            decoder_gdn.push(SlimGdn::new(&mut store, &format!("{name}.igdn"), variant, true, widths.clone(), &mut rng)?);
            let cout = if s == 2 { image.clone() } else { widths.clone() };
            decoder.push(SlimConv::new(&mut store, &name, widths.clone(), cout, dk[s], ds[s], true, &mut rng)?);
        }
        // small output layer, mid-gray output bias
        let [out_kernel, out_bias] = decoder[2].param_ids();
        let scaled = store.value(out_kernel).map(|v| v * S::of(OUTPUT_INIT_SCALE));
        *store.value_mut(out_kernel) = scaled;
        let shape = store.shape(out_bias);
        *store.value_mut(out_bias) = Tensor4::full(shape, S::of(0.5));
        let entropy = FactorizedEntropyModel::new(&mut store, &config.widths, config.entropy_support, config.entropy_init_scale)?;
        Ok(SlimCae {
            config,
            store,
            encoder,
            encoder_gdn,
            decoder_gdn,
            decoder,
            entropy,
        })
    }

    pub fn config(&self) -> &SlimCaeConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn width(&self, level: usize) -> usize {
        self.config.widths.width(level)
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn entropy(&self) -> &FactorizedEntropyModel {
        &self.entropy
    }

    pub fn encoder_layers(&self) -> (&[SlimConv], &[SlimGdn]) {
        (&self.encoder, &self.encoder_gdn)
    }

    pub fn decoder_layers(&self) -> (&[SlimGdn], &[SlimConv]) {
        (&self.decoder_gdn, &self.decoder)
    }

    fn check_level(&self, level: usize) -> Result<()> {
        self.config.widths.check_level(level)
    }

    fn check_padded(&self, x: &Tensor4<S>) -> Result<()> {
        let s = x.shape();
        let f = self.config.downsampling();
        if s.c != self.config.input_channels {
            return Err(Error::config(format!(
                "model expects {} input channels, got {}",
                self.config.input_channels, s.c
            )));
        }
        if s.h == 0 || s.w == 0 || s.h % f != 0 || s.w % f != 0 {
            return Err(Error::internal(format!(
                "input {}x{} is not padded to a multiple of {f}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Zero-pads `x` at the bottom/right to a multiple of the downsampling
    /// factor; returns the padding amounts.
    pub fn pad(&self, x: &Tensor4<S>) -> Result<(Tensor4<S>, usize, usize)> {
        let s = x.shape();
        let (h, w) = self.config.padded_dims(s.h, s.w);
        Ok((x.pad_spatial(h, w)?, h - s.h, w - s.w))
    }

    /// `z = f(x)` at `level`; `x` must already be padded.
    pub fn encode_latent(&self, x: &Tensor4<S>, level: usize) -> Result<Tensor4<S>> {
        self.check_level(level)?;
        self.check_padded(x)?;
        let mut h = x.clone();
        for (conv, gdn) in self.encoder.iter().zip(&self.encoder_gdn) {
            h = conv.forward(&self.store, &h, level)?;
            h = gdn.forward(&self.store, &h, level)?;
        }
        Ok(h)
    }

    /// `x_hat = g(z)` at `level`, unclipped.
    pub fn decode_latent(&self, z: &Tensor4<S>, level: usize) -> Result<Tensor4<S>> {
        self.check_level(level)?;
        let mut h = z.clone();
        for (gdn, deconv) in self.decoder_gdn.iter().zip(&self.decoder) {
            h = gdn.forward(&self.store, &h, level)?;
            h = deconv.forward(&self.store, &h, level)?;
        }
        Ok(h)
    }

    pub fn record_encode(&self, g: &mut Graph<S>, x: NodeId, level: usize) -> Result<NodeId> {
        self.check_level(level)?;
        self.check_padded(g.value(x))?;
        let mut h = x;
        for (conv, gdn) in self.encoder.iter().zip(&self.encoder_gdn) {
            h = conv.record(g, &self.store, h, level)?;
            h = gdn.record(g, &self.store, h, level)?;
        }
        Ok(h)
    }

    pub fn record_decode(&self, g: &mut Graph<S>, z: NodeId, level: usize) -> Result<NodeId> {
        self.check_level(level)?;
        let mut h = z;
        for (gdn, deconv) in self.decoder_gdn.iter().zip(&self.decoder) {
            h = gdn.record(g, &self.store, h, level)?;
            h = deconv.record(g, &self.store, h, level)?;
        }
        Ok(h)
    }

    /// Records `D + lambda R` at `level` for an unpadded batch `x` already
    /// placed on the graph. `noise` covers the widest latent and is sliced to
    /// `w(level)` channels. Returns the loss, distortion and rate nodes.
    pub fn record_loss(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        level: usize,
        lambda: f64,
        noise: &Tensor4<S>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let xs = g.value(x).shape();
        let (ph, pw) = self.config.padded_dims(xs.h, xs.w);
        let xp = if (ph, pw) == (xs.h, xs.w) {
            x
        } else {
            let padded = g.value(x).pad_spatial(ph, pw)?;
            g.constant(padded)
        };
        let z = self.record_encode(g, xp, level)?;
        let zs = g.value(z).shape();
        let n = g.constant(noise.slice_leading(zs)?);
        let z_noisy = g.add(z, n)?;
        let bits = self.entropy.record_bits(g, &self.store, z_noisy, level)?;
        let rate = g.scale(bits, 1.0 / (xs.n * xs.h * xs.w) as f64);
        let xh = self.record_decode(g, z_noisy, level)?;
        let xh = g.slice_leading(xh, xs)?;
        let diff = g.sub(xh, x)?;
        let sq = g.square(diff);
        let sse = g.sum(sq);
        let dist = g.scale(sse, 1.0 / xs.len() as f64);
        let weighted = g.scale(rate, lambda);
        let loss = g.add(dist, weighted)?;
        Ok((loss, dist, rate))
    }

    /// Noise-tensor shape matching the widest latent of an unpadded batch shape.
    pub fn noise_shape(&self, x: Shape4) -> Shape4 {
        let (ph, pw) = self.config.padded_dims(x.h, x.w);
        let f = self.config.downsampling();
        Shape4::new(x.n, self.config.widths.max(), ph / f, pw / f)
    }

    /// `loss_single`: `D + lambda R` at one level under the additive-noise proxy.
    pub fn loss_single(&self, x: &Tensor4<S>, level: usize, lambda: f64, noise: &Tensor4<S>) -> Result<LossTerms> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (_, d, r) = self.record_loss(&mut g, xn, level, lambda, noise)?;
        let terms = LossTerms {
            level,
            lambda,
            distortion: g.value(d).item()?.as_f64(),
            rate: g.value(r).item()?.as_f64(),
        };
        check_finite(&terms)?;
        Ok(terms)
    }

    /// `loss_joint`: sum over all levels of `D(k) + lambda(k) R(k)`, sharing one
    /// noise realization. Returns the graph, the total loss node and the terms.
    pub fn record_joint(&self, x: &Tensor4<S>, lambdas: &[f64], noise: &Tensor4<S>) -> Result<(Graph<S>, NodeId, Vec<LossTerms>)> {
        if lambdas.len() != self.levels() {
            return Err(Error::config(format!(
                "{} tradeoffs given for {} width levels",
                lambdas.len(),
                self.levels()
            )));
        }
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let mut total: Option<NodeId> = None;
        let mut terms = Vec::new();
        for (level, &lambda) in lambdas.iter().enumerate() {
            let (l, d, r) = self.record_loss(&mut g, xn, level, lambda, noise)?;
            let t = LossTerms {
                level,
                lambda,
                distortion: g.value(d).item()?.as_f64(),
                rate: g.value(r).item()?.as_f64(),
            };
            check_finite(&t)?;
            terms.push(t);
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok((g, total.expect("at least one level"), terms))
    }

    pub fn loss_joint(&self, x: &Tensor4<S>, lambdas: &[f64], noise: &Tensor4<S>) -> Result<(f64, Vec<LossTerms>)> {
        let (g, total, terms) = self.record_joint(x, lambdas, noise)?;
        Ok((g.value(total).item()?.as_f64(), terms))
    }

    /// Evaluates the joint loss and replaces every parameter gradient with its
    /// derivative.
    pub fn joint_gradients(&mut self, x: &Tensor4<S>, lambdas: &[f64], noise: &Tensor4<S>) -> Result<(f64, Vec<LossTerms>)> {
        let (mut g, total, terms) = self.record_joint(x, lambdas, noise)?;
        g.backward(total)?;
        self.store.zero_grads();
        g.accumulate_param_grads(&mut self.store)?;
        Ok((g.value(total).item()?.as_f64(), terms))
    }

    /// Hard-quantized latent of an unpadded image.
    pub fn quantized_latent(&self, x: &Tensor4<S>, level: usize) -> Result<Quantized> {
        let (xp, _, _) = self.pad(x)?;
        let z = self.encode_latent(&xp, level)?;
        Ok(quantize(&z, self.config.entropy_support))
    }

    /// Reconstruction of `q` cropped to `h x w`, clipped to `[0, 1]`.
    pub fn reconstruct(&self, q: &Quantized, level: usize, h: usize, w: usize) -> Result<Tensor4<S>> {
        let xh = self.decode_latent(&q.to_tensor(), level)?;
        let s = xh.shape();
        Ok(xh
            .slice_leading(Shape4::new(s.n, s.c, h, w))?
            .map(|v| v.max(S::zero()).min(S::one())))
    }

    /// Estimated bpp (model likelihood of the hard symbols) and PSNR of `x`.
    pub fn rd_point(&self, x: &Tensor4<S>, level: usize) -> Result<RdPoint> {
        let s = x.shape();
        let q = self.quantized_latent(x, level)?;
        let bits = self.entropy.bits(&self.store, &q.to_tensor(), level)?.as_f64();
        let xh = self.reconstruct(&q, level, s.h, s.w)?;
        Ok(RdPoint {
            level,
            rate: bits / (s.n * s.h * s.w) as f64,
            psnr: psnr(x, &xh)?,
        })
    }

    /// Standalone single-width model holding exactly the parameters level
    /// `level` reads.
    pub fn extract_level(&self, level: usize) -> Result<SlimCae<S>> {
        self.check_level(level)?;
        let config = self
            .config
            .clone()
            .with_widths(WidthSet::new(vec![self.width(level)])?);
        let mut out = SlimCae::<S>::new(config, 0)?;
        let tag = format!(".k{}.", level + 1);
        let names: Vec<(String, Shape4)> = out.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape())).collect();
        for (name, shape) in names {
            let src_name = name.replace(".k1.", &tag);
            let src = self
                .store
                .id(&src_name)
                .ok_or_else(|| Error::internal(format!("no source parameter {src_name}")))?;
            let value = self.store.value(src).slice_leading(shape)?;
            let dst = out.store.id(&name).expect("listed above");
            *out.store.value_mut(dst) = value;
        }
        Ok(out)
    }

    /// Same model with parameters converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> SlimCae<T> {
        let mut store = ParamStore::<T>::new();
        for (_, p) in self.store.iter() {
            store.insert(p.name.clone(), p.value.cast()).expect("names are unique");
        }
        SlimCae {
            config: self.config.clone(),
            store,
            encoder: self.encoder.clone(),
            encoder_gdn: self.encoder_gdn.clone(),
            decoder_gdn: self.decoder_gdn.clone(),
            decoder: self.decoder.clone(),
            entropy: self.entropy.clone(),
        }
    }

    /// Rebuilds a model around loaded parameter values, checking names and shapes.
    pub fn from_params(config: SlimCaeConfig, params: Vec<(String, Tensor4<S>)>) -> Result<Self> {
        let mut model = SlimCae::new(config, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} parameters, the configuration needs {}",
                params.len(),
                model.store.len()
            )));
        }
        for (i, (name, value)) in params.into_iter().enumerate() {
            let expected = model.store.iter().nth(i).map(|(id, p)| (id, p.name.clone(), p.value.shape()));
            let (id, ename, eshape) = expected.expect("length checked");
            if name != ename || value.shape() != eshape {
                return Err(Error::config(format!(
                    "checkpoint parameter {name} {} does not match expected {ename} {eshape}",
                    value.shape()
                )));
            }
            *model.store.value_mut(id) = value;
        }
        Ok(model)
    }
}

fn check_finite(t: &LossTerms) -> Result<()> {
    if !t.distortion.is_finite() || !t.rate.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at level {}: distortion {}, rate {}",
            t.level + 1,
            t.distortion,
            t.rate
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` on `[0, 1]` images, capped at 100 dB.
pub fn psnr<S: Scalar>(x: &Tensor4<S>, y: &Tensor4<S>) -> Result<f64> {
    let diff = x.zip_map(y, |a, b| a - b)?;
    let mse = diff.data().iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>() / diff.len().max(1) as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn([1, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn sixteen_pixel_input_gives_one_latent_pixel() {
        let m = SlimCae::<f64>::new(SlimCaeConfig::desk(), 1).unwrap();
        let z = m.encode_latent(&image(0, 16, 16), 0).unwrap();
        assert_eq!(z.shape(), Shape4::new(1, 4, 1, 1));
        let z = m.encode_latent(&image(0, 16, 32), 2).unwrap();
        assert_eq!(z.shape(), Shape4::new(1, 16, 1, 2));
        assert_eq!(m.decode_latent(&z, 2).unwrap().shape(), Shape4::new(1, 3, 16, 32));
    }

    #[test]
    fn unpadded_input_and_level_mismatch_are_rejected() {
        let m = SlimCae::<f64>::new(SlimCaeConfig::desk(), 1).unwrap();
        assert!(matches!(m.encode_latent(&image(0, 24, 24), 0), Err(Error::Internal(_))));
        let z = m.encode_latent(&image(0, 32, 32), 0).unwrap();
        assert!(m.decode_latent(&z, 1).is_err());
    }

    #[test]
    fn psnr_reference_values() {
        let x = image(3, 4, 4);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = x.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&x, &y).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn untrained_model_gives_finite_positive_psnr() {
        let m = SlimCae::<f64>::new(SlimCaeConfig::desk(), 2).unwrap();
        let x = image(4, 24, 24);
        for level in 0..3 {
            let p = m.rd_point(&x, level).unwrap();
            assert!(p.psnr.is_finite() && p.psnr > 0.0);
        }
    }

    #[test]
    fn joint_loss_is_sum_of_single_losses() {
        let m = SlimCae::<f64>::new(SlimCaeConfig::desk(), 5).unwrap();
        let x = Tensor4::stack(&[image(1, 24, 24), image(2, 24, 24)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = Tensor4::from_fn(m.noise_shape(x.shape()), |_| rng.random_range(-0.5..0.5));
        let lambdas = [0.1, 0.05, 0.01];
        let (total, terms) = m.loss_joint(&x, &lambdas, &noise).unwrap();
        let mut sum = 0.0;
        for (k, &l) in lambdas.iter().enumerate() {
            let t = m.loss_single(&x, k, l, &noise).unwrap();
            assert_eq!(t, terms[k]);
            sum += t.loss();
        }
        assert!((total - sum).abs() <= 1e-12 * sum.abs());
    }

    #[test]
    fn extracted_level_matches_bitwise() {
        for variant in GdnVariant::ALL {
            let m = SlimCae::<f64>::new(SlimCaeConfig::desk().with_variant(variant), 8).unwrap();
            let x = image(9, 32, 32);
            for level in 0..3 {
                let s = m.extract_level(level).unwrap();
                let z = m.encode_latent(&x, level).unwrap();
                assert_eq!(z, s.encode_latent(&x, 0).unwrap());
                assert_eq!(m.decode_latent(&z, level).unwrap(), s.decode_latent(&z, 0).unwrap());
            }
        }
    }

    #[test]
    fn single_level_gradients_vanish_outside_the_slice() {
        let mut m = SlimCae::<f64>::new(SlimCaeConfig::desk().with_variant(GdnVariant::Slim), 3).unwrap();
        let x = image(7, 16, 16);
        let noise = Tensor4::zeros(m.noise_shape(x.shape()));
        let lambdas = [0.1, 0.0, 0.0];
        // level 1 alone: zero out the other levels by using a one-level graph
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (l, _, _) = m.record_loss(&mut g, xn, 0, lambdas[0], &noise).unwrap();
        g.backward(l).unwrap();
        m.params_mut().zero_grads();
        g.accumulate_param_grads(m.params_mut()).unwrap();
        let id = m.params().id("enc2.kernel").unwrap();
        let grad = m.params().grad(id);
        let s = grad.shape();
        for o in 0..s.n {
            for i in 0..s.c {
                let outside = o >= 4 || i >= 4;
                let nz = (0..s.h).any(|y| (0..s.w).any(|xx| grad.at(o, i, y, xx) != 0.0));
                if outside {
                    assert!(!nz, "gradient leaked into ({o}, {i})");
                }
            }
        }
        let e3 = m.params().id("entropy.k3.logits").unwrap();
        assert!(m.params().grad(e3).data().iter().all(|&v| v == 0.0));
    }
}
