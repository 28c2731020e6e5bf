use super::{check_same_shape, BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

struct Relu<E: Scalar> {
    input: Tensor<E>,
}

impl<E: Scalar> BackwardOp<E> for Relu<E> {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let zero = E::zero();
        let dx = self
            .input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > zero { g } else { zero })
            .collect();
        vec![Some(dx)]
    }
}

/// Elementwise `max(x, 0)`; the gradient is 1 where `x > 0` and 0 elsewhere.
pub fn relu<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    let zero = E::zero();
    let data = input.data().iter().map(|&x| if x > zero { x } else { zero }).collect();
    Tensor::from_op(input.shape(), data, Relu { input: input.clone() })
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Max,
    Min,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Max => "max",
            Binary::Min => "min",
        }
    }
}

struct BinaryOp<E: Scalar> {
    kind: Binary,
    a: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Scalar> BackwardOp<E> for BinaryOp<E> {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, _output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let zero = E::zero();
        let want_a = self.a.requires_grad();
        let want_b = self.b.requires_grad();
        match self.kind {
            Binary::Add => vec![want_a.then(|| g.to_vec()), want_b.then(|| g.to_vec())],
            Binary::Sub => vec![want_a.then(|| g.to_vec()), want_b.then(|| g.iter().map(|&v| -v).collect())],
            Binary::Mul => {
                let times = |other: &Tensor<E>| other.data().iter().zip(g).map(|(&o, &g)| o * g).collect();
                vec![want_a.then(|| times(&self.b)), want_b.then(|| times(&self.a))]
            }
            Binary::Max | Binary::Min => {
                // Ties route to the first operand.
                let first_wins = |x: E, y: E| match self.kind {
                    Binary::Max => x >= y,
                    _ => x <= y,
                };
                let mut ga = vec![zero; g.len()];
                let mut gb = vec![zero; g.len()];
                for (i, (&x, &y)) in self.a.data().iter().zip(self.b.data()).enumerate() {
                    if first_wins(x, y) {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![want_a.then_some(ga), want_b.then_some(gb)]
            }
        }
    }
}

fn binary<E: Scalar>(kind: Binary, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(kind.name(), a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
            Binary::Min => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
        })
        .collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        BinaryOp {
            kind,
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(Binary::Add, a, b)
}

pub fn sub<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(Binary::Sub, a, b)
}

pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(Binary::Mul, a, b)
}

pub fn max<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(Binary::Max, a, b)
}

pub fn min<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(Binary::Min, a, b)
}

struct Scale<E: Scalar> {
    input: Tensor<E>,
    factor: E,
}

impl<E: Scalar> BackwardOp<E> for Scale<E> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        vec![Some(g.iter().map(|&v| v * self.factor).collect())]
    }
}

pub fn scale<E: Scalar>(input: &Tensor<E>, factor: E) -> Tensor<E> {
    let data = input.data().iter().map(|&v| v * factor).collect();
    Tensor::from_op(
        input.shape(),
        data,
        Scale {
            input: input.clone(),
            factor,
        },
    )
}

struct Sum<E: Scalar> {
    input: Tensor<E>,
}

impl<E: Scalar> BackwardOp<E> for Sum<E> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        vec![Some(vec![g[0]; self.input.shape().numel()])]
    }
}

/// Sum of all elements as a scalar tensor (accumulated in `f64`).
pub fn sum<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    let total: f64 = input.data().iter().map(|v| v.to_f64_lossy()).sum();
    Tensor::from_op(Shape::SCALAR, vec![E::from_f64_lossy(total)], Sum { input: input.clone() })
}

#[derive(Clone, Copy)]
enum Axis {
    Batch,
    Channel,
}

struct Concat<E: Scalar> {
    axis: Axis,
    inputs: Vec<Tensor<E>>,
}

impl<E: Scalar> BackwardOp<E> for Concat<E> {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        self.inputs.iter().collect()
    }

    fn backward(&self, output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let out = output.shape();
        let mut offset = 0;
        self.inputs
            .iter()
            .map(|t| {
                let s = t.shape();
                let len = match self.axis {
                    Axis::Batch => s.n(),
                    Axis::Channel => s.c(),
                };
                let grad = t.requires_grad().then(|| slice_axis(g, out, self.axis, offset, len));
                offset += len;
                grad
            })
            .collect()
    }
}

fn slice_axis<E: Scalar>(data: &[E], shape: Shape, axis: Axis, start: usize, len: usize) -> Vec<E> {
    match axis {
        Axis::Batch => {
            let per = shape.c() * shape.plane();
            data[start * per..(start + len) * per].to_vec()
        }
        Axis::Channel => {
            let plane = shape.plane();
            let mut out = Vec::with_capacity(shape.n() * len * plane);
            for n in 0..shape.n() {
                let base = (n * shape.c() + start) * plane;
                out.extend_from_slice(&data[base..base + len * plane]);
            }
            out
        }
    }
}

fn concat<E: Scalar>(axis: Axis, inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty tensor list"))?;
    let s0 = first.shape();
    for t in &inputs[1..] {
        let s = t.shape();
        let compatible = match axis {
            Axis::Batch => s.c() == s0.c() && s.h() == s0.h() && s.w() == s0.w(),
            Axis::Channel => s.n() == s0.n() && s.h() == s0.h() && s.w() == s0.w(),
        };
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: s0,
                right: s,
            });
        }
    }
    if inputs.len() == 1 {
        return Ok(first.clone());
    }
    let shape = match axis {
        Axis::Batch => Shape::new(inputs.iter().map(|t| t.shape().n()).sum(), s0.c(), s0.h(), s0.w()),
        Axis::Channel => Shape::new(s0.n(), inputs.iter().map(|t| t.shape().c()).sum(), s0.h(), s0.w()),
    };
    let mut data = Vec::with_capacity(shape.numel());
    match axis {
        Axis::Batch => inputs.iter().for_each(|t| data.extend_from_slice(t.data())),
        Axis::Channel => {
            let plane = s0.plane();
            for n in 0..s0.n() {
                for t in inputs {
                    let per = t.shape().c() * plane;
                    data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        shape,
        data,
        Concat {
            axis,
            inputs: inputs.to_vec(),
        },
    ))
}

/// Concatenates along the channel axis; batch and spatial dims must agree.
pub fn concat_channels<E: Scalar>(inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
    concat(Axis::Channel, inputs)
}

pub fn concat_batch<E: Scalar>(inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
    concat(Axis::Batch, inputs)
}

struct Narrow<E: Scalar> {
    axis: Axis,
    input: Tensor<E>,
    start: usize,
}

impl<E: Scalar> BackwardOp<E> for Narrow<E> {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let s = self.input.shape();
        let mut dx = vec![E::zero(); s.numel()];
        let o = output.shape();
        match self.axis {
            Axis::Batch => {
                let per = s.c() * s.plane();
                dx[self.start * per..self.start * per + g.len()].copy_from_slice(g);
            }
            Axis::Channel => {
                let plane = s.plane();
                let chunk = o.c() * plane;
                for n in 0..s.n() {
                    let base = (n * s.c() + self.start) * plane;
                    dx[base..base + chunk].copy_from_slice(&g[n * chunk..(n + 1) * chunk]);
                }
            }
        }
        vec![Some(dx)]
    }
}

fn narrow<E: Scalar>(axis: Axis, input: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    let extent = match axis {
        Axis::Batch => s.n(),
        Axis::Channel => s.c(),
    };
    if len == 0 || start + len > extent {
        return Err(Error::invalid(format!(
            "narrow [{start}, {}) out of range for shape {s}",
            start + len
        )));
    }
    let shape = match axis {
        Axis::Batch => Shape::new(len, s.c(), s.h(), s.w()),
        Axis::Channel => Shape::new(s.n(), len, s.h(), s.w()),
    };
    let data = slice_axis(input.data(), s, axis, start, len);
    Ok(Tensor::from_op(
        shape,
        data,
        Narrow {
            axis,
            input: input.clone(),
            start,
        },
    ))
}

/// Channels `[start, start + len)`.
pub fn narrow_channels<E: Scalar>(input: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    narrow(Axis::Channel, input, start, len)
}

/// Batch entries `[start, start + len)`.
pub fn narrow_batch<E: Scalar>(input: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    narrow(Axis::Batch, input, start, len)
}

struct GlobalAvgPool<E: Scalar> {
    input: Tensor<E>,
}

impl<E: Scalar> BackwardOp<E> for GlobalAvgPool<E> {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, _output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let s = self.input.shape();
        let plane = s.plane();
        let inv = E::one() / E::from_usize(plane).expect("plane size");
        let mut dx = Vec::with_capacity(s.numel());
        for &gv in g {
            dx.extend(std::iter::repeat_n(gv * inv, plane));
        }
        vec![Some(dx)]
    }
}

/// Mean over each spatial plane: `(n, c, h, w)` to `(n, c, 1, 1)`.
pub fn global_avg_pool<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    let plane = s.plane();
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| E::from_f64_lossy(p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::from_op(
        Shape::new(s.n(), s.c(), 1, 1),
        data,
        GlobalAvgPool { input: input.clone() },
    )
}

struct BroadcastSpatial<E: Scalar> {
    input: Tensor<E>,
}

impl<E: Scalar> BackwardOp<E> for BroadcastSpatial<E> {
    fn name(&self) -> &'static str {
        "broadcast_spatial"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.input]
    }

    fn backward(&self, output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let plane = output.shape().plane();
        let dx = g
            .chunks_exact(plane)
            .map(|p| p.iter().fold(E::zero(), |acc, &v| acc + v))
            .collect();
        vec![Some(dx)]
    }
}

/// Repeats a `(n, c, 1, 1)` tensor over an `h x w` plane.
pub fn broadcast_spatial<E: Scalar>(input: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    if s.h() != 1 || s.w() != 1 {
        return Err(Error::invalid(format!("broadcast_spatial expects 1x1 planes, got {s}")));
    }
    let mut data = Vec::with_capacity(s.n() * s.c() * h * w);
    for &v in input.data() {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Ok(Tensor::from_op(
        Shape::new(s.n(), s.c(), h, w),
        data,
        BroadcastSpatial { input: input.clone() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testing::{check_gradient, random_tensor};

    fn t(data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, 1, data.len()), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        assert_eq!(relu(&t(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_of_negative_has_zero_gradient() {
        let x = Tensor::<f32>::parameter(Shape::new(1, 2, 2, 2), vec![-0.5; 8]).unwrap();
        let y = relu(&x);
        assert!(y.data().iter().all(|&v| v == 0.0));
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn relu_sum_of_parts_is_abs() {
        let x = random_tensor::<f32>(Shape::new(2, 3, 5, 5), 7);
        let neg = scale(&x, -1.0);
        let lhs = add(&relu(&x), &relu(&neg)).unwrap();
        for (a, b) in lhs.data().iter().zip(x.data()) {
            assert_eq!(*a, b.abs());
        }
    }

    #[test]
    fn max_min_small_cases() {
        assert_eq!(max(&t(&[1.0, 5.0]), &t(&[3.0, 2.0])).unwrap().data(), &[3.0, 5.0]);
        let x = t(&[0.3, -1.5, 2.0]);
        let d = sub(&max(&x, &x).unwrap(), &min(&x, &x).unwrap()).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let err = add(&t(&[1.0, 2.0]), &t(&[1.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 1, 1, 2)") && msg.contains("(1, 1, 1, 1)"), "{msg}");
    }

    #[test]
    fn max_tie_routes_gradient_to_first() {
        let a = Tensor::<f64>::parameter(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::parameter(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        sum(&max(&a, &b).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0, 1.0]);

        let a = Tensor::<f64>::parameter(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let b = Tensor::<f64>::parameter(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        sum(&min(&a, &b).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn concat_single_is_identity() {
        let x = random_tensor::<f32>(Shape::new(1, 3, 2, 2), 1);
        let y = concat_channels(std::slice::from_ref(&x)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn concat_four_pyramid_maps() {
        let maps: Vec<_> = (0..4).map(|i| random_tensor::<f32>(Shape::new(1, 256, 4, 4), i)).collect();
        let y = concat_channels(&maps).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1024, 4, 4));
        for (i, m) in maps.iter().enumerate() {
            assert_eq!(narrow_channels(&y, i * 256, 256).unwrap().data(), m.data());
        }
    }

    #[test]
    fn concat_round_trip_by_slicing() {
        let a = random_tensor::<f32>(Shape::new(2, 1, 3, 3), 2);
        let b = random_tensor::<f32>(Shape::new(2, 4, 3, 3), 3);
        let y = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(narrow_channels(&y, 0, 1).unwrap().data(), a.data());
        assert_eq!(narrow_channels(&y, 1, 4).unwrap().data(), b.data());
        let z = concat_batch(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(narrow_batch(&z, 2, 2).unwrap().data(), a.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(matches!(concat_channels(&[a, b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = Shape::new(2, 3, 4, 4);
        let other = random_tensor::<f64>(s, 11);
        check_gradient(s, 1, |x| relu(x));
        check_gradient(s, 2, |x| add(x, &other).unwrap());
        check_gradient(s, 3, |x| sub(&other, x).unwrap());
        check_gradient(s, 12, |x| mul(x, &other).unwrap());
        check_gradient(s, 4, |x| max(x, &other).unwrap());
        check_gradient(s, 5, |x| min(&other, x).unwrap());
        check_gradient(s, 6, |x| concat_channels(&[other.clone(), x.clone()]).unwrap());
        check_gradient(s, 7, |x| narrow_channels(x, 1, 2).unwrap());
        check_gradient(s, 8, |x| narrow_batch(x, 1, 1).unwrap());
        check_gradient(s, 9, |x| global_avg_pool(x));
        check_gradient(Shape::new(2, 3, 1, 1), 10, |x| broadcast_spatial(x, 3, 2).unwrap());
    }
}
