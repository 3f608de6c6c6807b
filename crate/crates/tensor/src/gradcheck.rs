//! Central finite-difference gradient checking.

use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute difference norm when
    /// both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = norm(&self.analytic);
        let nn = norm(&self.numeric);
        let denom = na.max(nn);
        if denom < 1e-12 {
            diff
        } else {
            diff / denom
        }
    }

    /// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
    pub fn max_elementwise_error(&self, floor: f64) -> f64 {
        self.analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares the autodiff gradient of the scalar `f(x)` with central
/// differences of step `h` at every coordinate of `x`.
pub fn check_gradient(f: impl Fn(&Var) -> Var, x: &Tensor, h: f64) -> GradCheck {
    check_gradient_at(f, x, h, None)
}

/// Like [`check_gradient`] but only at the listed flat coordinates (other
/// entries of both tensors are zero).
pub fn check_gradient_at(
    f: impl Fn(&Var) -> Var,
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> GradCheck {
    let leaf = Var::leaf(x.clone());
    let y = f(&leaf);
    assert_eq!(y.value().numel(), 1, "gradient check needs a scalar function");
    y.backward();
    let full = leaf.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let all: Vec<usize> = (0..x.numel()).collect();
    let coords = coords.unwrap_or(&all);
    let mut analytic = Tensor::zeros(x.shape());
    let mut numeric = Tensor::zeros(x.shape());
    let eval = |t: Tensor| f(&Var::constant(t)).item();
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(plus) - eval(minus)) / (2.0 * h);
        analytic.data_mut()[i] = full.data()[i];
    }
    GradCheck { analytic, numeric }
}
