//! Dense NCHW tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] is an immutable, reference-counted node. Operations that
//! touch a tensor with `requires_grad` record a [`BackwardOp`] holding their
//! inputs, so the graph is implicit in the `Arc` links and always acyclic.
//! [`Tensor::backward`] walks it once from a scalar loss and deposits
//! gradients on the tracked leaves.
//!
//! The element type is generic over [`Scalar`] (`f32` for training, `f64`
//! for tight finite-difference checks).

mod conv;
mod loss;
mod ops;
mod resize;
#[cfg(test)]
pub(crate) mod testing;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv2d, Conv2dSpec};
pub use loss::{softmax, softmax_cross_entropy};
pub use ops::{
    add, broadcast_spatial, concat_batch, concat_channels, global_avg_pool, max, min, mul,
    narrow_batch, narrow_channels, relu, scale, sub, sum,
};
pub use resize::{bilinear_upsample, resize_bilinear, upsample_pow2};

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a @ b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers must be valid for every index addressed by the given
    /// dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Spatial plane size `h * w`.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// Gradient rule of a recorded operation.
pub trait BackwardOp<E: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<&Tensor<E>>;

    /// Gradients w.r.t. each entry of [`inputs`](Self::inputs), in order;
    /// `None` for inputs that do not require a gradient.
    fn backward(&self, output: &Tensor<E>, grad_output: &[E]) -> Vec<Option<Vec<E>>>;
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread while alive.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node<E: Scalar> {
    id: usize,
    shape: Shape,
    data: Vec<E>,
    requires_grad: bool,
    op: Option<Box<dyn BackwardOp<E>>>,
    grad: Mutex<Option<Vec<E>>>,
    consumed: AtomicBool,
}

#[derive(Clone)]
pub struct Tensor<E: Scalar = f32> {
    node: Arc<Node<E>>,
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &E::NAME)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.op.as_ref().map(|op| op.name()))
            .finish()
    }
}

impl<E: Scalar> Tensor<E> {
    fn build(shape: Shape, data: Vec<E>, requires_grad: bool, op: Option<Box<dyn BackwardOp<E>>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                op,
                grad: Mutex::new(None),
                consumed: AtomicBool::new(false),
            }),
        }
    }

    /// Creates an untracked tensor. Fails when `data` does not fill `shape`.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self::build(shape, data, false, None))
    }

    /// Creates a leaf that accumulates gradients during [`backward`](Self::backward).
    pub fn parameter(shape: Shape, data: Vec<E>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.node.shape, t.into_data(), true, None))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::build(shape, vec![E::zero(); shape.numel()], false, None)
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Self::build(shape, vec![value; shape.numel()], false, None)
    }

    pub fn from_f32(shape: Shape, data: &[f32]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64_lossy(v as f64)).collect())
    }

    /// Result of an operation. The op is recorded only when grad mode is on
    /// and at least one input is tracked.
    pub(crate) fn from_op(shape: Shape, data: Vec<E>, op: impl BackwardOp<E> + 'static) -> Self {
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if track {
            Self::build(shape, data, true, Some(Box::new(op)))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> Shape {
        self.node.shape
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.node.data.iter().map(|v| v.to_f64_lossy() as f32).collect()
    }

    /// Consumes the handle, avoiding a copy when it is the last reference.
    pub fn into_data(self) -> Vec<E> {
        match Arc::try_unwrap(self.node) {
            Ok(node) => node.data,
            Err(node) => node.data.clone(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// An untracked tensor sharing nothing with the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape, self.node.data.clone(), false, None)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.node.data.len() != 1 {
            return Err(Error::invalid(format!("item() on non-scalar tensor {}", self.shape())));
        }
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub fn same_node(&self, other: &Tensor<E>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        let data = self.node.data.iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect();
        Tensor::build(self.node.shape, data, false, None)
    }

    pub(crate) fn id(&self) -> usize {
        self.node.id
    }

    /// Back-propagates from this scalar to every tracked leaf reachable from it.
    ///
    /// Leaf gradients accumulate across calls on different graphs until
    /// [`zero_grad`](Self::zero_grad). A graph can be walked only once.
    pub fn backward(&self) -> Result<()> {
        if self.shape().numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward("loss does not depend on any tracked tensor".into()));
        }
        if self.node.consumed.swap(true, Ordering::SeqCst) {
            return Err(Error::Backward("backward already called on this graph".into()));
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.node.op {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let input_grads = op.backward(t, &g);
                    for (input, ig) in op.inputs().into_iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.shape().numel(), "{}", op.name());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, inputs before consumers.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, inputs already pushed)
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn check_same_shape<E: Scalar>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("(1, 1, 2, 2)"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f32>::parameter(Shape::new(1, 2, 2, 2), (0..8).map(|v| v as f32).collect()).unwrap();
        let loss = sum(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let x = Tensor::<f32>::parameter(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let loss = sum(&x);
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::parameter(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = relu(&x);
        assert!(matches!(y.backward(), Err(Error::Backward(_))));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let x = Tensor::<f64>::parameter(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let y = add(&x, &x).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_guard_skips_recording() {
        let x = Tensor::<f32>::parameter(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = {
            let _g = NoGradGuard::new();
            relu(&x)
        };
        assert!(!y.requires_grad());
        assert!(relu(&x).requires_grad());
    }
}
