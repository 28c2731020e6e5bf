pub(crate) use crate::gradcheck::random_tensor;
use crate::gradcheck::check_indices;
use crate::tensor::{mul, sum, Shape, Tensor};

/// Checks `d/dx sum(r ⊙ f(x))` for a random projection `r` (or the output
/// itself when `project` is false) against central differences in `f64`.
pub(crate) fn check_gradient_with(
    shape: Shape,
    seed: u64,
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    project: bool,
) {
    let x0 = random_tensor::<f64>(shape, seed);
    let x = Tensor::parameter(shape, x0.to_vec()).unwrap();
    let out = f(&x);
    let r = random_tensor::<f64>(out.shape(), seed ^ 0x5eed);
    let loss_of = |y: &Tensor<f64>| if project { sum(&mul(y, &r).unwrap()) } else { sum(y) };
    loss_of(&out).backward().unwrap();
    let analytic = x.grad().expect("input gradient populated");

    let indices: Vec<usize> = (0..shape.numel()).collect();
    let report = check_indices(x0.data(), &analytic, &indices, 1e-6, 1e-6, |v| {
        let probe = Tensor::from_vec(shape, v.to_vec()).unwrap();
        loss_of(&f(&probe)).item().unwrap()
    });
    let worst = report.worst().unwrap();
    assert!(
        worst.rel_error < 1e-5,
        "gradient mismatch at {}: analytic {} vs numeric {}",
        worst.index,
        worst.analytic,
        worst.numeric
    );
}

pub(crate) fn check_gradient(shape: Shape, seed: u64, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    check_gradient_with(shape, seed, f, true)
}
