use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{conv2d, deconv2d, ConvGeometry};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Convolution or transposed convolution whose level-`k` instance uses the
/// leading `[0:out(k), 0:in(k)]` block of one full-width kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SlimConv {
    pub name: String,
    kernel: ParamId,
    bias: ParamId,
    in_channels: Vec<usize>,
    out_channels: Vec<usize>,
    kernel_size: usize,
    geom: ConvGeometry,
    transposed: bool,
}

impl SlimConv {
    /// `in_channels[k]` / `out_channels[k]` give the channel counts at level `k`;
    /// both must be non-decreasing in `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: Vec<usize>,
        out_channels: Vec<usize>,
        kernel_size: usize,
        stride: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels.len() != out_channels.len() || in_channels.is_empty() {
            return Err(Error::config(format!("{name}: per-level channel lists differ in length")));
        }
        let monotone = |v: &[usize]| v.windows(2).all(|p| p[0] <= p[1]) && v[0] > 0;
        if !monotone(&in_channels) || !monotone(&out_channels) {
            return Err(Error::config(format!("{name}: channel counts must be positive and non-decreasing")));
        }
        if kernel_size == 0 || stride == 0 {
            return Err(Error::config(format!("{name}: kernel size and stride must be positive")));
        }
        let cin = *in_channels.last().unwrap();
        let cout = *out_channels.last().unwrap();
        let kshape = if transposed {
            Shape4::new(cin, cout, kernel_size, kernel_size)
        } else {
            Shape4::new(cout, cin, kernel_size, kernel_size)
        };
        // He-uniform on the fan-in each output sees; a transposed kernel
        // touches each output with about k*k/s^2 taps per input channel.
        let taps = if transposed {
            ((kernel_size * kernel_size) as f64 / (stride * stride) as f64).max(1.0)
        } else {
            (kernel_size * kernel_size) as f64
        };
        let bound = (6.0 / (cin as f64 * taps)).sqrt();
        let kernel_init = Tensor4::from_fn(kshape, |_| S::of(rng.random_range(-bound..bound)));
        let kernel = store.insert(format!("{name}.kernel"), kernel_init)?;
        let bias = store.insert(format!("{name}.bias"), Tensor4::zeros([cout, 1, 1, 1]))?;
        Ok(SlimConv {
            name: name.to_string(),
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            geom: ConvGeometry::same(kernel_size, stride),
            transposed,
        })
    }

    pub fn levels(&self) -> usize {
        self.in_channels.len()
    }

    pub fn in_channels(&self, level: usize) -> usize {
        self.in_channels[level]
    }

    pub fn out_channels(&self, level: usize) -> usize {
        self.out_channels[level]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.geom.stride
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.kernel, self.bias]
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

    fn slice_shapes(&self, level: usize) -> (Shape4, Shape4) {
        let (cin, cout) = (self.in_channels[level], self.out_channels[level]);
        let k = self.kernel_size;
        let kshape = if self.transposed {
            Shape4::new(cin, cout, k, k)
        } else {
            Shape4::new(cout, cin, k, k)
        };
        (kshape, Shape4::new(cout, 1, 1, 1))
    }

    /// Kernel and bias of the standalone layer equivalent to level `level`.
    pub fn sliced<S: Scalar>(&self, store: &ParamStore<S>, level: usize) -> Result<(Tensor4<S>, Tensor4<S>)> {
        self.check_level(level)?;
        let (ks, bs) = self.slice_shapes(level);
        Ok((
            store.value(self.kernel).slice_leading(ks)?,
            store.value(self.bias).slice_leading(bs)?,
        ))
    }

    fn check_input(&self, channels: usize, level: usize) -> Result<()> {
        self.check_level(level)?;
        if channels != self.in_channels[level] {
            return Err(Error::config(format!(
                "{}: level {} expects {} input channels, got {channels}",
                self.name,
                level + 1,
                self.in_channels[level]
            )));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor4<S>, level: usize) -> Result<Tensor4<S>> {
        self.check_input(x.shape().c, level)?;
        let (k, b) = self.sliced(store, level)?;
        if self.transposed {
            deconv2d(x, &k, Some(b.data()), self.geom)
        } else {
            conv2d(x, &k, Some(b.data()), self.geom)
        }
    }

    pub fn record<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId, level: usize) -> Result<NodeId> {
        self.check_input(g.value(x).shape().c, level)?;
        let (ks, bs) = self.slice_shapes(level);
        let kfull = g.param(store, self.kernel);
        let bfull = g.param(store, self.bias);
        let k = g.slice_leading(kfull, ks)?;
        let b = g.slice_leading(bfull, bs)?;
        if self.transposed {
            g.deconv2d(x, k, b, self.geom)
        } else {
            g.conv2d(x, k, b, self.geom)
        }
    }

    /// Parameters touched at `level` (kernel slice plus bias slice).
    pub fn param_count(&self, level: usize) -> usize {
        let (ks, bs) = self.slice_shapes(level);
        ks.len() + bs.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(store: &mut ParamStore<f64>, transposed: bool) -> SlimConv {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (i, o) = if transposed { (vec![6, 12], vec![4, 8]) } else { (vec![4, 8], vec![6, 12]) };
        let l = SlimConv::new(store, "c", i, o, 3, 2, transposed, &mut rng).unwrap();
        let bias = Tensor4::from_fn(store.shape(l.bias), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        *store.value_mut(l.bias) = bias;
        l
    }

    #[test]
    fn level_slice_matches_standalone_layer_bitwise() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::from_fn([1, 4, 8, 8], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let y = l.forward(&store, &x, 0).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 6, 4, 4));
        let (k, b) = l.sliced(&store, 0).unwrap();
        let standalone = conv2d(&x, &k, Some(b.data()), l.geometry()).unwrap();
        assert_eq!(y.max_abs_diff(&standalone).unwrap(), 0.0);
    }

    #[test]
    fn full_level_is_the_full_layer() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, true);
        let x = Tensor4::full([1, 6, 3, 3], 0.5);
        let y = l.forward(&store, &x, 0).unwrap();
        let full = deconv2d(&x, store.value(l.kernel), Some(store.value(l.bias).data()), l.geometry());
        assert!(full.is_err(), "full kernel expects 12 channels");
        let x = Tensor4::full([1, 12, 3, 3], 0.5);
        let y2 = l.forward(&store, &x, 1).unwrap();
        let full = deconv2d(&x, store.value(l.kernel), Some(store.value(l.bias).data()), l.geometry()).unwrap();
        assert_eq!(y2, full);
        assert!(y.shape().c == 4);
    }

    #[test]
    fn wrong_level_or_channels_rejected() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, false);
        assert!(l.forward(&store, &Tensor4::zeros([1, 4, 8, 8]), 2).is_err());
        assert!(l.forward(&store, &Tensor4::zeros([1, 5, 8, 8]), 0).is_err());
    }
}
