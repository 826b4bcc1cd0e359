/// A scalar function of a flat parameter vector together with its gradient.
pub trait Objective {
    /// Number of parameters.
    fn dim(&self) -> usize;

    /// Returns `f(theta)` and overwrites `grad` with `∇f(theta)`.
    fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, theta: &[f64]) -> f64 {
        let mut grad = vec![0.0; self.dim()];
        self.evaluate(theta, &mut grad)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        (**self).evaluate(theta, grad)
    }

    fn value(&self, theta: &[f64]) -> f64 {
        (**self).value(theta)
    }
}

/// Adapts a closure `|theta, grad| -> value` into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(theta, grad)
    }
}
