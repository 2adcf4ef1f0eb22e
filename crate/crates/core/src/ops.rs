//! Convolution kernels and their reverse-mode derivatives.
//!
//! Convolution is cross-correlation with zero padding. `deconv2d` is the exact
//! adjoint of `conv2d` for a shared kernel, so each one serves as the input
//! gradient of the other.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Stride and padding of a (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    /// Extra rows/cols appended to a transposed convolution's output; ignored by `conv2d`.
    pub output_padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry {
            stride,
            pad,
            output_padding: 0,
        }
    }

    pub const fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    /// "Same"-style geometry for kernel `k` and stride `s`: maps `h` to `h / s`
    /// when `h` is a multiple of `s` (and back, for the transposed direction).
    pub const fn same(kernel: usize, stride: usize) -> Self {
        ConvGeometry {
            stride,
            pad: (kernel - 1) / 2,
            output_padding: (stride + 2 * ((kernel - 1) / 2)).saturating_sub(kernel),
        }
    }

    fn check(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        Ok(())
    }

    pub fn conv_out(&self, input: usize, kernel: usize) -> Result<usize> {
        self.check()?;
        let padded = input + 2 * self.pad;
        if padded < kernel {
            return Err(Error::config(format!(
                "kernel extent {kernel} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn deconv_out(&self, input: usize, kernel: usize) -> Result<usize> {
        self.check()?;
        if input == 0 {
            return Err(Error::config("transposed convolution of an empty input"));
        }
        let full = (input - 1) * self.stride + kernel + self.output_padding;
        full.checked_sub(2 * self.pad)
            .ok_or_else(|| Error::config(format!("padding {} too large for transposed convolution", self.pad)))
    }
}

fn check_bias<S>(bias: Option<&[S]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::config(format!(
            "bias has {} entries, expected {channels}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Range of output positions `o` with `0 <= o*s + k - p < len`.
fn valid_range(out: usize, len: usize, k: usize, s: usize, p: usize) -> std::ops::Range<usize> {
    let off = k as isize - p as isize;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let hi = if (len as isize) <= off { 0 } else { ((len as isize - off - 1) as usize) / s + 1 };
    lo.min(out)..hi.min(out)
}

/// Patch matrix: row `(c, ky, kx)`, column `(n, oy, ox)` holds
/// `x[n, c, oy*s + ky - p, ox*s + kx - p]`, or zero outside the input.
fn im2col<S: Scalar>(x: &Tensor4<S>, kh: usize, kw: usize, geom: ConvGeometry, oh: usize, ow: usize) -> Vec<S> {
    let xs = x.shape();
    let (s, p) = (geom.stride, geom.pad);
    let cols = xs.n * oh * ow;
    let mut col = vec![S::zero(); xs.c * kh * kw * cols];
    let xd = x.data();
    for c in 0..xs.c {
        for ky in 0..kh {
            let ys = valid_range(oh, xs.h, ky, s, p);
            for kx in 0..kw {
                let xr = valid_range(ow, xs.w, kx, s, p);
                let row = &mut col[((c * kh + ky) * kw + kx) * cols..][..cols];
                for n in 0..xs.n {
                    let plane = &xd[(n * xs.c + c) * xs.h * xs.w..][..xs.h * xs.w];
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let src = &plane[iy * xs.w..][..xs.w];
                        let dst = &mut row[(n * oh + oy) * ow..][..ow];
                        for ox in xr.clone() {
                            dst[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates patch rows back onto an `oh x ow` image
/// with `c` channels. `ih x iw` is the patch grid.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(col: &[S], n: usize, c: usize, kh: usize, kw: usize, geom: ConvGeometry, ih: usize, iw: usize, out: &mut Tensor4<S>) {
    let (s, p) = (geom.stride, geom.pad);
    let os = out.shape();
    let cols = n * ih * iw;
    let od = out.data_mut();
    for ch in 0..c {
        for ky in 0..kh {
            let ys = valid_range(ih, os.h, ky, s, p);
            for kx in 0..kw {
                let xr = valid_range(iw, os.w, kx, s, p);
                let row = &col[((ch * kh + ky) * kw + kx) * cols..][..cols];
                for b in 0..n {
                    let plane = &mut od[(b * c + ch) * os.h * os.w..][..os.h * os.w];
                    for y in ys.clone() {
                        let oy = y * s + ky - p;
                        let src = &row[(b * ih + y) * iw..][..iw];
                        let dst = &mut plane[oy * os.w..][..os.w];
                        for x in xr.clone() {
                            dst[x * s + kx - p] += src[x];
                        }
                    }
                }
            }
        }
    }
}

/// Channel-major copy: row `c`, column `(n, y, x)`.
fn to_rows<S: Scalar>(x: &Tensor4<S>) -> Vec<S> {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let mut m = vec![S::zero(); x.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            m[(c * xs.n + n) * plane..][..plane].copy_from_slice(&x.data()[(n * xs.c + c) * plane..][..plane]);
        }
    }
    m
}

/// Inverse of [`to_rows`].
fn from_rows<S: Scalar>(m: &[S], shape: Shape4) -> Tensor4<S> {
    let plane = shape.h * shape.w;
    let mut out = Tensor4::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            out.data_mut()[(n * shape.c + c) * plane..][..plane].copy_from_slice(&m[(c * shape.n + n) * plane..][..plane]);
        }
    }
    out
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (a, b) in (&mut xc).zip(&mut yc) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut tail = S::zero();
    for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += *a * *b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `kernel` has shape `(c_out, c_in, kh, kw)`.
pub fn conv2d<S: Scalar>(x: &Tensor4<S>, kernel: &Tensor4<S>, bias: Option<&[S]>, geom: ConvGeometry) -> Result<Tensor4<S>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if ks.c != xs.c {
        return Err(Error::config(format!(
            "conv2d: input has {} channels but kernel {} expects {}",
            xs.c, ks, ks.c
        )));
    }
    check_bias(bias, ks.n)?;
    let oh = geom.conv_out(xs.h, ks.h)?;
    let ow = geom.conv_out(xs.w, ks.w)?;
    let col = im2col(x, ks.h, ks.w, geom, oh, ow);
    let cols = xs.n * oh * ow;
    let patch = ks.c * ks.h * ks.w;
    let kd = kernel.data();
    let mut m = vec![S::zero(); ks.n * cols];
    for (o, orow) in m.chunks_exact_mut(cols).enumerate() {
        if let Some(b) = bias {
            orow.fill(b[o]);
        }
        for (j, &w) in kd[o * patch..][..patch].iter().enumerate() {
            axpy(w, &col[j * cols..][..cols], orow);
        }
    }
    Ok(from_rows(&m, Shape4::new(xs.n, ks.n, oh, ow)))
}

/// Transposed convolution; `kernel` has shape `(c_in, c_out, kh, kw)`, the same
/// layout as the `conv2d` kernel it is adjoint to.
pub fn deconv2d<S: Scalar>(x: &Tensor4<S>, kernel: &Tensor4<S>, bias: Option<&[S]>, geom: ConvGeometry) -> Result<Tensor4<S>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if ks.n != xs.c {
        return Err(Error::config(format!(
            "deconv2d: input has {} channels but kernel {} expects {}",
            xs.c, ks, ks.n
        )));
    }
    check_bias(bias, ks.c)?;
    let oh = geom.deconv_out(xs.h, ks.h)?;
    let ow = geom.deconv_out(xs.w, ks.w)?;
    Ok(deconv_sized(x, kernel, bias, geom, oh, ow))
}

/// Transposed convolution onto an explicit `oh x ow` output; positions
/// that fall outside are dropped.
fn deconv_sized<S: Scalar>(x: &Tensor4<S>, kernel: &Tensor4<S>, bias: Option<&[S]>, geom: ConvGeometry, oh: usize, ow: usize) -> Tensor4<S> {
    let xs = x.shape();
    let ks = kernel.shape();
    let xm = to_rows(x);
    let cols = xs.n * xs.h * xs.w;
    let patch = ks.c * ks.h * ks.w;
    let kd = kernel.data();
    let mut col = vec![S::zero(); patch * cols];
    for i in 0..ks.n {
        let xrow = &xm[i * cols..][..cols];
        for (j, &w) in kd[i * patch..][..patch].iter().enumerate() {
            axpy(w, xrow, &mut col[j * cols..][..cols]);
        }
    }
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ks.c, oh, ow));
    if let Some(b) = bias {
        let plane = oh * ow;
        for n in 0..xs.n {
            for (o, &bv) in b.iter().enumerate() {
                out.data_mut()[(n * ks.c + o) * plane..][..plane].fill(bv);
            }
        }
    }
    col2im(&col, xs.n, ks.c, ks.h, ks.w, geom, xs.h, xs.w, &mut out);
    out
}

/// `out[a, b, ky, kx] = Σ dense[n, a, y, x] · strided[n, b, y·s+ky−p, x·s+kx−p]`.
///
/// Kernel gradient of `conv2d` (strided = input, dense = output gradient) and,
/// with the roles swapped, of `deconv2d`.
fn kernel_correlation<S: Scalar>(
    strided: &Tensor4<S>,
    dense: &Tensor4<S>,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
) -> Tensor4<S> {
    let ss = strided.shape();
    let ds = dense.shape();
    let col = im2col(strided, kh, kw, geom, ds.h, ds.w);
    let dm = to_rows(dense);
    let cols = ds.n * ds.h * ds.w;
    let patch = ss.c * kh * kw;
    let mut out = Tensor4::zeros(Shape4::new(ds.c, ss.c, kh, kw));
    let od = out.data_mut();
    for a in 0..ds.c {
        let drow = &dm[a * cols..][..cols];
        for j in 0..patch {
            od[a * patch + j] = dot(drow, &col[j * cols..][..cols]);
        }
    }
    out
}

fn channel_sums<S: Scalar>(t: &Tensor4<S>) -> Vec<S> {
    let s = t.shape();
    let plane = s.h * s.w;
    let mut sums = vec![S::zero(); s.c];
    for n in 0..s.n {
        for (c, sum) in sums.iter_mut().enumerate() {
            let base = (n * s.c + c) * plane;
            *sum += t.data()[base..base + plane].iter().copied().sum::<S>();
        }
    }
    sums
}

/// Gradients of a convolution.
pub struct ConvGrads<S> {
    /// `None` when the caller did not ask for it.
    pub input: Option<Tensor4<S>>,
    pub kernel: Tensor4<S>,
    pub bias: Vec<S>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor4<S>,
    kernel: &Tensor4<S>,
    grad_out: &Tensor4<S>,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<ConvGrads<S>> {
    let ks = kernel.shape();
    let xs = x.shape();
    let go = grad_out.shape();
    if go.h != geom.conv_out(xs.h, ks.h)? || go.w != geom.conv_out(xs.w, ks.w)? || go.c != ks.n || go.n != xs.n {
        return Err(Error::internal("conv2d_backward: inconsistent spatial sizes"));
    }
    let input = if need_input {
        Some(deconv_sized(grad_out, kernel, None, geom, xs.h, xs.w))
    } else {
        None
    };
    let kgrad = kernel_correlation(x, grad_out, ks.h, ks.w, geom);
    Ok(ConvGrads {
        input,
        kernel: kgrad,
        bias: channel_sums(grad_out),
    })
}

pub fn deconv2d_backward<S: Scalar>(
    x: &Tensor4<S>,
    kernel: &Tensor4<S>,
    grad_out: &Tensor4<S>,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<ConvGrads<S>> {
    let ks = kernel.shape();
    let input = if need_input {
        let gx = conv2d(grad_out, kernel, None, ConvGeometry::new(geom.stride, geom.pad))?;
        if gx.shape() != x.shape() {
            return Err(Error::internal("deconv2d_backward: inconsistent spatial sizes"));
        }
        Some(gx)
    } else {
        None
    };
    // kernel layout (c_in, c_out, ...): first index runs over x's channels
    let kgrad = kernel_correlation(grad_out, x, ks.h, ks.w, geom);
    Ok(ConvGrads {
        input,
        kernel: kgrad,
        bias: channel_sums(grad_out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 5, 4], &mut rng);
        let k = Tensor4::full([1, 1, 1, 1], 1.0);
        let geom = ConvGeometry::new(1, 0);
        assert_eq!(conv2d(&x, &k, Some(&[0.0]), geom).unwrap(), x);
        assert_eq!(deconv2d(&x, &k, None, geom).unwrap(), x);
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &k, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn shape_arithmetic() {
        let x = Tensor4::<f64>::zeros([1, 3, 16, 16]);
        let k = Tensor4::<f64>::zeros([8, 3, 4, 4]);
        let y = conv2d(&x, &k, None, ConvGeometry::new(4, 0)).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 8, 4, 4));
        let back = deconv2d(&y, &k, None, ConvGeometry::new(4, 0)).unwrap();
        assert_eq!(back.shape(), Shape4::new(1, 3, 16, 16));
    }

    #[test]
    fn same_geometry_round_trips_sizes() {
        for (k, s) in [(9, 4), (5, 2), (3, 2), (5, 4)] {
            let g = ConvGeometry::same(k, s);
            for h in [16usize, 32, 48] {
                let o = g.conv_out(h, k).unwrap();
                assert_eq!(o, h / s, "k={k} s={s}");
                assert_eq!(g.deconv_out(o, k).unwrap(), h, "k={k} s={s}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_dims() {
        let x = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        let k = Tensor4::<f64>::zeros([1, 3, 1, 1]);
        let err = conv2d(&x, &k, None, ConvGeometry::new(1, 0)).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
        assert!(conv2d(&x, &Tensor4::zeros([1, 2, 1, 1]), None, ConvGeometry::new(0, 0)).is_err());
    }

    #[test]
    fn adjoint_identity_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let k = rng.random_range(1..6);
            let s = rng.random_range(1..4);
            let geom = ConvGeometry::same(k.max(s), s);
            let kk = k.max(s);
            let h = s * rng.random_range(2..5);
            let x = random([2, cin, h, h], &mut rng);
            let kern = random([cout, cin, kk, kk], &mut rng);
            let y = conv2d(&x, &kern, None, geom).unwrap();
            let v = random([2, cout, y.shape().h, y.shape().w], &mut rng);
            let xt = deconv2d(&v, &kern, None, geom).unwrap();
            let lhs = y.dot(&v).unwrap();
            let rhs = x.dot(&xt).unwrap();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1e-12), "{lhs} vs {rhs}");
        }
    }
}
