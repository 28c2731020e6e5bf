//! 2-D convolution via im2col and a strided GEMM.
//!
//! Each batch entry is lowered to a `(C·k·k) × (Ho·Wo)` column matrix and
//! multiplied by the `O × (C·k·k)` weight matrix. Entries are processed
//! one at a time, so a sample's output never depends on its batch position.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a convolution: stride, zero padding and dilation (atrous rate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn dilated(rate: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: rate,
            dilation: rate,
        }
    }

    /// `floor((in + 2·padding − dilation·(k − 1) − 1) / stride) + 1`.
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 unpadded convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Calls `f(row, col, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Conv2dSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        let (h, w) = (self.h as isize, self.w as isize);
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let in_row = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            f(row, oy * self.wo + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<E: Scalar>(&self, input: &[E], cols: &mut [E]) {
        cols.fill(E::zero());
        let ncols = self.cols();
        self.for_each_tap(|r, c, i| cols[r * ncols + c] = input[i]);
    }

    fn col2im_add<E: Scalar>(&self, cols: &[E], input_grad: &mut [E]) {
        let ncols = self.cols();
        self.for_each_tap(|r, c, i| input_grad[i] = input_grad[i] + cols[r * ncols + c]);
    }
}

/// Row-major GEMM, `c = a·b + beta·c`, with optional transposition of `a` or `b`.
#[allow(clippy::too_many_arguments)]
fn gemm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    a_t: bool,
    b: &[E],
    b_t: bool,
    beta: E,
    c: &mut [E],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched for these
    // dimensions and strides.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Conv2d<E: Scalar> {
    input: Tensor<E>,
    weight: Tensor<E>,
    bias: Option<Tensor<E>>,
    geom: Geometry,
}

impl<E: Scalar> BackwardOp<E> for Conv2d<E> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        let mut v = vec![&self.input, &self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn backward(&self, output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let geom = self.geom;
        let n = self.input.shape().n();
        let o = output.shape().c();
        let (rows, ncols) = (geom.rows(), geom.cols());
        let in_per = geom.c * geom.h * geom.w;
        let out_per = o * ncols;
        let want_x = self.input.requires_grad();
        let want_w = self.weight.requires_grad();

        let mut dx = want_x.then(|| vec![E::zero(); self.input.shape().numel()]);
        let mut dw = want_w.then(|| vec![E::zero(); self.weight.shape().numel()]);
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![E::zero(); rows * ncols] };
        let mut dcols = if geom.is_pointwise() || !want_x { Vec::new() } else { vec![E::zero(); rows * ncols] };

        for s in 0..n {
            let gy = &g[s * out_per..(s + 1) * out_per];
            let x = &self.input.data()[s * in_per..(s + 1) * in_per];
            if let Some(dw) = dw.as_mut() {
                let lowered: &[E] = if geom.is_pointwise() {
                    x
                } else {
                    geom.im2col(x, &mut cols);
                    &cols
                };
                gemm(o, ncols, rows, gy, false, lowered, true, E::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_per..(s + 1) * in_per];
                if geom.is_pointwise() {
                    gemm(rows, o, ncols, self.weight.data(), true, gy, false, E::zero(), dxs);
                } else {
                    gemm(rows, o, ncols, self.weight.data(), true, gy, false, E::zero(), &mut dcols);
                    geom.col2im_add(&dcols, dxs);
                }
            }
        }

        let db = self.bias.as_ref().filter(|b| b.requires_grad()).map(|_| {
            let mut db = vec![E::zero(); o];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    let base = (s * o + oc) * ncols;
                    *acc = g[base..base + ncols].iter().fold(*acc, |a, &v| a + v);
                }
            }
            db
        });

        let mut out = vec![dx, dw];
        if self.bias.is_some() {
            out.push(db);
        }
        out
    }
}

/// Convolves an `(N, C, H, W)` input with an `(O, C, k, k)` kernel, `k ∈ {1, 3}`.
///
/// `bias`, when present, has shape `(1, O, 1, 1)`.
pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv2dSpec,
) -> Result<Tensor<E>> {
    let xs = input.shape();
    let ws = weight.shape();
    let [o, wc, kh, kw] = ws.0;
    if wc != xs.c() {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels vs weight)",
            left: xs,
            right: ws,
        });
    }
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::invalid(format!("conv2d: kernel must be 1x1 or 3x3, got weight {ws}")));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::invalid("conv2d: stride and dilation must be positive"));
    }
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, o, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias vs output channels)",
                left: b.shape(),
                right: ws,
            });
        }
    }
    let (Some(ho), Some(wo)) = (spec.output_size(xs.h(), kh), spec.output_size(xs.w(), kw)) else {
        return Err(Error::invalid(format!(
            "conv2d: input {xs} too small for kernel {kh} with {spec:?}"
        )));
    };

    let geom = Geometry {
        c: xs.c(),
        h: xs.h(),
        w: xs.w(),
        k: kh,
        ho,
        wo,
        spec,
    };
    let (rows, ncols) = (geom.rows(), geom.cols());
    let in_per = xs.c() * xs.plane();
    let out_shape = Shape::new(xs.n(), o, ho, wo);
    let mut out = vec![E::zero(); out_shape.numel()];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![E::zero(); rows * ncols] };

    for (s, ys) in out.chunks_exact_mut(o * ncols).enumerate() {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let lowered: &[E] = if geom.is_pointwise() {
            x
        } else {
            geom.im2col(x, &mut cols);
            &cols
        };
        gemm(o, rows, ncols, weight.data(), false, lowered, false, E::zero(), ys);
        if let Some(b) = bias {
            for (plane, &bv) in ys.chunks_exact_mut(ncols).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }

    Ok(Tensor::from_op(
        out_shape,
        out,
        Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testing::{check_gradient, random_tensor};

    /// Direct six-loop convolution (batch, out-channel, y, x, in-channel, tap).
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: Conv2dSpec) -> (Shape, Vec<f64>) {
        let [n, c, h, wd] = x.shape().0;
        let [o, _, k, _] = w.shape().0;
        let ho = (h + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (Shape::new(n, o, ho, wo), out)
    }

    #[test]
    fn scaling_identity() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_with_padding() {
        let x = random_tensor::<f32>(Shape::new(1, 1, 5, 4), 3);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(Shape::new(1, 1, 3, 3), k).unwrap();
        let y = conv2d(&x, &w, None, Conv2dSpec::new(1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_naive_loops() {
        let x = random_tensor::<f32>(Shape::new(2, 3, 8, 8), 10);
        let w = random_tensor::<f32>(Shape::new(4, 3, 3, 3), 11);
        let b = random_tensor::<f32>(Shape::new(1, 4, 1, 1), 12);
        let (xd, wd) = (x.cast::<f64>(), w.cast::<f64>());
        let bd: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        for spec in [
            Conv2dSpec::new(1, 1),
            Conv2dSpec::new(2, 1),
            Conv2dSpec::new(1, 0),
            Conv2dSpec::dilated(2),
        ] {
            let y = conv2d(&x, &w, Some(&b), spec).unwrap();
            let (shape, expected) = naive_conv(&xd, &wd, &bd, spec);
            assert_eq!(y.shape(), shape);
            for (a, e) in y.data().iter().zip(&expected) {
                assert!((*a as f64 - e).abs() < 1e-5, "{spec:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn pointwise_matches_naive_loops() {
        let x = random_tensor::<f64>(Shape::new(2, 5, 3, 4), 20);
        let w = random_tensor::<f64>(Shape::new(6, 5, 1, 1), 21);
        let y = conv2d(&x, &w, None, Conv2dSpec::default()).unwrap();
        let (_, expected) = naive_conv(&x, &w, &[0.0; 6], Conv2dSpec::default());
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn output_size_formula() {
        let spec = Conv2dSpec::new(2, 1);
        assert_eq!(spec.output_size(64, 3), Some(32));
        assert_eq!(spec.output_size(7, 3), Some(4));
        assert_eq!(Conv2dSpec::dilated(6).output_size(16, 3), Some(16));
    }

    #[test]
    fn rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(3, 5, 3, 3));
        let msg = conv2d(&x, &w, None, Conv2dSpec::new(1, 1)).unwrap_err().to_string();
        assert!(msg.contains("(1, 2, 4, 4)") && msg.contains("(3, 5, 3, 3)"), "{msg}");
    }

    #[test]
    fn rejects_unsupported_kernels() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 8, 8));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        assert!(conv2d(&x, &w, None, Conv2dSpec::new(1, 2)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = Shape::new(2, 3, 6, 6);
        for (seed, spec) in [
            (1, Conv2dSpec::new(1, 1)),
            (2, Conv2dSpec::new(2, 1)),
            (3, Conv2dSpec::dilated(2)),
        ] {
            let w = random_tensor::<f64>(Shape::new(4, 3, 3, 3), seed + 10);
            let b = random_tensor::<f64>(Shape::new(1, 4, 1, 1), seed + 20);
            check_gradient(s, seed, |x| conv2d(x, &w, Some(&b), spec).unwrap());
            let x = random_tensor::<f64>(s, seed + 30);
            check_gradient(w.shape(), seed + 40, |w| conv2d(&x, w, Some(&b), spec).unwrap());
            check_gradient(b.shape(), seed + 50, |b| conv2d(&x, &w, Some(b), spec).unwrap());
        }
        let w1 = random_tensor::<f64>(Shape::new(2, 3, 1, 1), 60);
        check_gradient(s, 61, |x| conv2d(x, &w1, None, Conv2dSpec::default()).unwrap());
        let x = random_tensor::<f64>(s, 62);
        check_gradient(w1.shape(), 63, |w| conv2d(&x, w, None, Conv2dSpec::default()).unwrap());
    }
}
