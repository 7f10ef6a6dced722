//! 2-D convolution and transposed convolution over NCHW batches.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::optim::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape {
            op,
            detail: format!("{what} must be rank 4, got {:?}", t.shape()),
        }),
    }
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Range of output positions whose receptive tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [n, c, h, w] = dims4(x, "conv2d", "input")?;
    let [o, kc, kh, kw] = dims4(kernel, "conv2d", "kernel")?;
    if kc != c {
        return Err(Error::Dimension {
            op: "conv2d (input channels, axis 1)",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Argument("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::Dimension {
            op: "conv2d (kernel larger than padded input, axes 2-3)",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: conv_out_len(h, kh, stride, pad),
        ow: conv_out_len(w, kw, stride, pad),
        stride,
        pad,
    })
}

/// Unfolds `x` into columns: row `(c, ki, kj)` holds, for every sample and
/// output position, the input value under that kernel tap (zero in padding).
fn im2col<T: Scalar>(xd: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let cols_w = g.n * plane;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * cols_w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.h, g.oh, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.w, g.ow, kj, g.stride, g.pad);
                let row = ((c * g.kh + ki) * g.kw + kj) * cols_w;
                for n in 0..g.n {
                    let xin = &xd[(n * g.c + c) * g.h * g.w..];
                    let dst = &mut cols[row + n * plane..row + (n + 1) * plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let xrow = &xin[ih * g.w..(ih + 1) * g.w];
                        let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                        for ow in ow_lo..ow_hi {
                            drow[ow] = xrow[ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let cols_w = g.n * plane;
    let mut gx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.h, g.oh, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.w, g.ow, kj, g.stride, g.pad);
                let row = ((c * g.kh + ki) * g.kw + kj) * cols_w;
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    let src = &cols[row + n * plane..row + (n + 1) * plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let grow = &mut gx[base + ih * g.w..base + (ih + 1) * g.w];
                        let srow = &src[oh * g.ow..(oh + 1) * g.ow];
                        for ow in ow_lo..ow_hi {
                            grow[ow * g.stride + kj - g.pad] += srow[ow];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

/// Batched convolution: `x` is `[N, C, H, W]`, `kernel` is `[O, C, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: vec![g.o],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let cols = im2col(x.data(), &g);
    let wd = kernel.data();
    let plane = g.oh * g.ow;
    let cols_w = g.n * plane;
    let rows = g.c * g.kh * g.kw;
    // out[o, (n, p)] = sum_r w[o, r] * cols[r, (n, p)]
    let mut acc = vec![T::zero(); g.o * cols_w];
    for o in 0..g.o {
        let y = &mut acc[o * cols_w..(o + 1) * cols_w];
        if let Some(b) = bias {
            y.fill(b.data()[o]);
        }
        for r in 0..rows {
            let wv = wd[o * rows + r];
            if wv != T::zero() {
                axpy(wv, &cols[r * cols_w..(r + 1) * cols_w], y);
            }
        }
    }
    let mut out = vec![T::zero(); g.n * g.o * plane];
    for o in 0..g.o {
        for n in 0..g.n {
            out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane]
                .copy_from_slice(&acc[o * cols_w + n * plane..o * cols_w + (n + 1) * plane]);
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geom(x, kernel, stride, padding)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::Dimension {
            op: "conv2d backward (grad_out)",
            lhs: vec![g.n, g.o, g.oh, g.ow],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let cols = im2col(x.data(), &g);
    let wd = kernel.data();
    let plane = g.oh * g.ow;
    let cols_w = g.n * plane;
    let rows = g.c * g.kh * g.kw;
    // grad_out regrouped as [O, (n, p)]
    let mut gy = vec![T::zero(); g.o * cols_w];
    for o in 0..g.o {
        for n in 0..g.n {
            gy[o * cols_w + n * plane..o * cols_w + (n + 1) * plane]
                .copy_from_slice(&grad_out.data()[(n * g.o + o) * plane..(n * g.o + o + 1) * plane]);
        }
    }
    let mut gw = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.o];
    let mut gcols = vec![T::zero(); rows * cols_w];
    for o in 0..g.o {
        let gyo = &gy[o * cols_w..(o + 1) * cols_w];
        gb[o] = gyo.iter().copied().sum::<T>();
        for r in 0..rows {
            let cr = &cols[r * cols_w..(r + 1) * cols_w];
            gw[o * rows + r] = dot(gyo, cr);
            let wv = wd[o * rows + r];
            if wv != T::zero() {
                axpy(wv, gyo, &mut gcols[r * cols_w..(r + 1) * cols_w]);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), col2im(&gcols, &g))?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::new(vec![g.o], gb)?,
    ))
}

/// Unbatched convolution of a `C x H x W` input with an `O x C x k x k` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("input must be C x H x W, got {:?}", input.shape()),
        });
    }
    let y = conv2d_forward(&input.unsqueeze0(), kernel, None, stride, padding)?;
    let shape = y.shape()[1..].to_vec();
    y.reshape(&shape)
}

/// Transposed convolution with no padding: `x` is `[N, Ci, H, W]`, `kernel`
/// is `[Ci, Co, k, k]`, output is `[N, Co, (H-1)*s + k, (W-1)*s + k]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [n, ci, h, w] = dims4(x, "conv_transpose2d", "input")?;
    let [kci, co, kh, kw] = dims4(kernel, "conv_transpose2d", "kernel")?;
    if kci != ci {
        return Err(Error::Dimension {
            op: "conv_transpose2d (input channels, axis 1)",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Argument("conv_transpose2d stride must be >= 1".into()));
    }
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let plane = oh * ow;
    let xd = x.data();
    let wd = kernel.data();
    let mut out = vec![T::zero(); n * co * plane];
    for b in 0..n {
        for o in 0..co {
            let y = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
            if let Some(bias) = bias {
                y.fill(bias.data()[o]);
            }
            for c in 0..ci {
                let xin = &xd[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wd[((c * co + o) * kh + ki) * kw + kj];
                        for ih in 0..h {
                            let yrow = (ih * stride + ki) * ow;
                            for iw in 0..w {
                                y[yrow + iw * stride + kj] += wv * xin[ih * w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, ci, h, w] = dims4(x, "conv_transpose2d backward", "input")?;
    let [_, co, kh, kw] = dims4(kernel, "conv_transpose2d backward", "kernel")?;
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    if grad_out.shape() != [n, co, oh, ow] {
        return Err(Error::Dimension {
            op: "conv_transpose2d backward (grad_out)",
            lhs: vec![n, co, oh, ow],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let plane = oh * ow;
    let xd = x.data();
    let wd = kernel.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); co];
    for b in 0..n {
        for o in 0..co {
            let gyp = &gy[(b * co + o) * plane..(b * co + o + 1) * plane];
            gb[o] += gyp.iter().copied().sum::<T>();
            for c in 0..ci {
                let base = (b * ci + c) * h * w;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ((c * co + o) * kh + ki) * kw + kj;
                        let wv = wd[widx];
                        let mut acc = T::zero();
                        for ih in 0..h {
                            let yrow = (ih * stride + ki) * ow;
                            for iw in 0..w {
                                let gv = gyp[yrow + iw * stride + kj];
                                acc += xd[base + ih * w + iw] * gv;
                                gx[base + ih * w + iw] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::new(vec![co], gb)?,
    ))
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let g: f64 = StandardNormal.sample(rng);
        T::lit(g * std)
    })
}

/// Convolution layer with cached input for backpropagation.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Parameter::new(he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[out_ch]))),
            stride,
            padding,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.padding,
        )
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Protocol("Conv2d::backward without forward_train".into()))?;
        let (gx, gw, gb) = conv2d_backward(&x, &self.weight.value, grad_out, self.stride, self.padding)?;
        self.weight.grad.add_assign(&gw)?;
        if let Some(b) = self.bias.as_mut() {
            b.grad.add_assign(&gb)?;
        }
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = self.bias.as_ref() {
            v.push(b);
        }
        v
    }
}

/// Transposed-convolution upsampling layer (kernel = stride, no padding).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, factor: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::new(he_normal(&[in_ch, out_ch, factor, factor], in_ch, rng)),
            bias: Parameter::new(Tensor::zeros(&[out_ch])),
            stride: factor,
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d_forward(x, &self.weight.value, Some(&self.bias.value), self.stride)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| {
            Error::Protocol("ConvTranspose2d::backward without forward_train".into())
        })?;
        let (gx, gw, gb) = conv_transpose2d_backward(&x, &self.weight.value, grad_out, self.stride)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn hand_convolution() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f64>::zeros(&[2, 3, 7, 6]);
        let k = Tensor::zeros(&[5, 3, 3, 3]);
        let y = conv2d_forward(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 3]);
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d_forward(&x, &k, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        let big = Tensor::zeros(&[2, 3, 7, 7]);
        assert!(conv2d_forward(&x, &big, None, 1, 1).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)] {
            let x = random_tensor(&[2, 3, 6, 5], &mut rng);
            let w = random_tensor(&[4, 3, k, k], &mut rng);
            let b = random_tensor(&[4], &mut rng);
            let probe = random_tensor(
                &[2, 4, conv_out_len(6, k, stride, pad), conv_out_len(5, k, stride, pad)],
                &mut rng,
            );
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                conv2d_forward(x, w, Some(b), stride, pad).unwrap().dot(&probe).unwrap()
            };
            let (gx, gw, gb) = conv2d_backward(&x, &w, &probe, stride, pad).unwrap();
            check_gradient(&x, &gx, |x| loss(x, &w, &b), 1e-6);
            check_gradient(&w, &gw, |w| loss(&x, w, &b), 1e-6);
            check_gradient(&b, &gb, |b| loss(&x, &w, b), 1e-6);
        }
    }

    #[test]
    fn transposed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 3, 3, 4], &mut rng);
        let w = random_tensor(&[3, 2, 2, 2], &mut rng);
        let b = random_tensor(&[2], &mut rng);
        let probe = random_tensor(&[2, 2, 6, 8], &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            conv_transpose2d_forward(x, w, Some(b), 2).unwrap().dot(&probe).unwrap()
        };
        let (gx, gw, gb) = conv_transpose2d_backward(&x, &w, &probe, 2).unwrap();
        check_gradient(&x, &gx, |x| loss(x, &w, &b), 1e-6);
        check_gradient(&w, &gw, |w| loss(&x, w, &b), 1e-6);
        check_gradient(&b, &gb, |b| loss(&x, &w, b), 1e-6);
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[1, 2, 5, 5], &mut rng);
        let y = random_tensor(&[1, 2, 5, 5], &mut rng);
        let w = random_tensor(&[3, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d_forward(&x.lin_comb(a, &y, b).unwrap(), &w, None, 1, 1).unwrap();
        let rhs = conv2d_forward(&x, &w, None, 1, 1)
            .unwrap()
            .lin_comb(a, &conv2d_forward(&y, &w, None, 1, 1).unwrap(), b)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }
}
