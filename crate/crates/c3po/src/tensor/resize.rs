//! Bilinear resizing with the half-pixel (align-corners = false) convention.

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, frac)` for each output coordinate along one axis.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct Resize<E: Scalar> {
    input: Tensor<E>,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl<E: Scalar> BackwardOp<E> for Resize<E> {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let s = self.input.shape();
        let (h, w) = (s.h(), s.w());
        let (ho, wo) = (output.shape().h(), output.shape().w());
        let mut dx = vec![E::zero(); s.numel()];
        for (plane, gp) in g.chunks_exact(ho * wo).enumerate() {
            let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                let (fy, gy) = (E::from_f64_lossy(fy), E::from_f64_lossy(1.0 - fy));
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let (fx, gx) = (E::from_f64_lossy(fx), E::from_f64_lossy(1.0 - fx));
                    let v = gp[oy * wo + ox];
                    dxp[y0 * w + x0] = dxp[y0 * w + x0] + v * gy * gx;
                    dxp[y0 * w + x1] = dxp[y0 * w + x1] + v * gy * fx;
                    dxp[y1 * w + x0] = dxp[y1 * w + x0] + v * fy * gx;
                    dxp[y1 * w + x1] = dxp[y1 * w + x1] + v * fy * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Resizes every plane to `out_h × out_w` by bilinear interpolation.
pub fn resize_bilinear<E: Scalar>(input: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::invalid(format!("resize_bilinear: cannot resize {s} to {out_h}x{out_w}")));
    }
    let rows = taps(s.h(), out_h);
    let cols = taps(s.w(), out_w);
    let (h, w) = (s.h(), s.w());
    let shape = Shape::new(s.n(), s.c(), out_h, out_w);
    let mut out = Vec::with_capacity(shape.numel());
    for p in input.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &rows {
            let (fy, gy) = (E::from_f64_lossy(fy), E::from_f64_lossy(1.0 - fy));
            for &(x0, x1, fx) in &cols {
                let (fx, gx) = (E::from_f64_lossy(fx), E::from_f64_lossy(1.0 - fx));
                let top = p[y0 * w + x0] * gx + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * gx + p[y1 * w + x1] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_op(
        shape,
        out,
        Resize {
            input: input.clone(),
            rows,
            cols,
        },
    ))
}

/// Bilinear upsampling by a factor of 2 or 4.
pub fn bilinear_upsample<E: Scalar>(input: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if !matches!(factor, 2 | 4) {
        return Err(Error::invalid(format!("bilinear_upsample: factor must be 2 or 4, got {factor}")));
    }
    let s = input.shape();
    resize_bilinear(input, s.h() * factor, s.w() * factor)
}

/// Upsampling by a power-of-two factor as a chain of 2× bilinear steps.
/// A factor of 1 returns the input unchanged.
pub fn upsample_pow2<E: Scalar>(input: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if !factor.is_power_of_two() {
        return Err(Error::invalid(format!("upsample_pow2: factor {factor} is not a power of two")));
    }
    let mut x = input.clone();
    let mut f = factor;
    while f > 1 {
        x = bilinear_upsample(&x, 2)?;
        f /= 2;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testing::{check_gradient, random_tensor};

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f32>::full(Shape::new(1, 2, 3, 5), 0.75);
        for factor in [2, 4] {
            let y = bilinear_upsample(&x, factor).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 2, 3 * factor, 5 * factor));
            assert!(y.data().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn half_pixel_interpolation_by_hand() {
        // Output centres map to source coordinates -0.25, 0.25, 0.75, 1.25;
        // the ends clamp to the border samples.
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rejects_other_factors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(bilinear_upsample(&x, 3).is_err());
        assert!(bilinear_upsample(&x, 8).is_err());
        assert!(upsample_pow2(&x, 6).is_err());
        assert_eq!(upsample_pow2(&x, 8).unwrap().shape(), Shape::new(1, 1, 16, 16));
    }

    #[test]
    fn gradient_of_sum_matches_finite_differences() {
        check_gradient(Shape::new(2, 3, 3, 4), 1, |x| bilinear_upsample(x, 2).unwrap());
        check_gradient(Shape::new(1, 2, 3, 3), 2, |x| bilinear_upsample(x, 4).unwrap());
        check_gradient(Shape::new(1, 2, 2, 3), 3, |x| upsample_pow2(x, 8).unwrap());
    }

    #[test]
    fn sum_gradient_is_exact_for_factor_two() {
        // Every input sample receives total weight factor² under 2× upsampling
        // except for clamped borders, which absorb the extrapolated weight.
        let x = random_tensor::<f64>(Shape::new(1, 1, 4, 4), 5);
        let x = Tensor::parameter(x.shape(), x.to_vec()).unwrap();
        crate::tensor::sum(&bilinear_upsample(&x, 2).unwrap()).backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 4.0).abs() < 1e-12);
        }
    }
}
