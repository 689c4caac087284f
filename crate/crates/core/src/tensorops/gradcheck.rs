use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{ComputeGraph, Var};
use super::tensor::{Element, Tensor};

/// Coordinates sampled per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

/// Floor of the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// A scalar function of a list of parameter tensors that can also report its
/// own analytic gradient.
pub trait LossFunction<T> {
    fn value(&mut self, params: &[Tensor<T>]) -> Result<T>;

    fn gradient(&mut self, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>;
}

/// Adapts a graph-building closure into a [`LossFunction`]. The closure is
/// handed one parameter leaf per tensor and must return a scalar node.
pub struct GraphLoss<F> {
    build: F,
}

impl<F> GraphLoss<F> {
    pub fn new(build: F) -> Self {
        Self { build }
    }
}

impl<T, F> LossFunction<T> for GraphLoss<F>
where
    T: Element,
    F: FnMut(&mut ComputeGraph<T>, &[Var]) -> Result<Var>,
{
    fn value(&mut self, params: &[Tensor<T>]) -> Result<T> {
        let mut g = ComputeGraph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    }

    fn gradient(&mut self, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut g = ComputeGraph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        let mut grads = g.backward(out)?;
        Ok(vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// (tensor index, flat coordinate, analytic, numeric) at the worst point.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Compares analytic gradients against central differences
/// `(L(p+h) − L(p−h)) / 2h` on up to [`MAX_COORDS_PER_TENSOR`] sampled
/// coordinates per tensor. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<T: Element, L: LossFunction<T>>(
    loss_fn: &mut L,
    params: &[Tensor<T>],
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h = {h} must be positive")));
    }
    let base = loss_fn.value(params)?;
    let again = loss_fn.value(params)?;
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(Error::Determinism(format!(
            "repeated evaluation gave {base} then {again}"
        )));
    }
    let analytic = loss_fn.gradient(params)?;
    check_against_differences(loss_fn, params, &analytic, h, tolerance, seed)
}

/// Like [`finite_difference_check`] but with the analytic gradient supplied
/// by the caller, e.g. from a lower-precision build of the same loss.
pub fn check_against_differences<T: Element, L: LossFunction<T>>(
    loss_fn: &mut L,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h = {h} must be positive")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (a, p) in analytic.iter().zip(params) {
        if a.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for parameter {:?}",
                a.shape(),
                p.shape()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst: None,
        tolerance,
    };
    for (ti, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = param.data()[c];
            let plus = orig + T::of(h);
            let minus = orig - T::of(h);
            work[ti].data_mut()[c] = plus;
            let lp = loss_fn.value(&work)?;
            work[ti].data_mut()[c] = minus;
            let lm = loss_fn.value(&work)?;
            work[ti].data_mut()[c] = orig;

            let numeric = (lp.as_f64() - lm.as_f64()) / (plus.as_f64() - minus.as_f64());
            let ana = analytic[ti].data()[c].as_f64();
            let denom = ana.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (ana - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((ti, c, ana, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut loss = GraphLoss::new(|g: &mut ComputeGraph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            let c = g.constant(Tensor::vector(vec![1.5, -0.5, 2.0]));
            let lin = g.mul(v[0], c)?;
            let a = g.sum(sq)?;
            let b = g.sum(lin)?;
            g.weighted_sum(&[(a, 0.5), (b, 1.0)])
        });
        let p = vec![Tensor::vector(vec![0.3, -1.2, 4.0])];
        let r = finite_difference_check(&mut loss, &p, 1e-3, 1e-8, 0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coords_checked, 3);
    }

    struct Flaky(u32);

    impl LossFunction<f64> for Flaky {
        fn value(&mut self, _: &[Tensor<f64>]) -> Result<f64> {
            self.0 += 1;
            Ok(self.0 as f64)
        }
        fn gradient(&mut self, p: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            Ok(p.iter().map(|t| Tensor::zeros(t.shape())).collect())
        }
    }

    #[test]
    fn nondeterministic_loss_detected() {
        let p = vec![Tensor::scalar(1.0)];
        let err = finite_difference_check(&mut Flaky(0), &p, 1e-3, 1e-6, 0).unwrap_err();
        assert!(matches!(err, Error::Determinism(_)));
    }

    #[test]
    fn softmax_cross_entropy_gradients() {
        let mut loss = GraphLoss::new(|g: &mut ComputeGraph<f64>, v: &[Var]| {
            let z = g.matmul(v[0], v[1])?;
            let p = g.softmax_rows(z)?;
            g.cross_entropy(p, &[2, 0])
        });
        let a = Tensor::matrix(2, 3, vec![0.2, -0.4, 1.1, 0.7, 0.05, -0.9]).unwrap();
        let b = Tensor::matrix(3, 3, vec![0.3, -0.2, 0.8, 1.0, 0.1, -0.5, -0.7, 0.4, 0.25]).unwrap();
        let r = finite_difference_check(&mut loss, &[a, b], 1e-3, 1e-4, 7).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut loss = GraphLoss::new(|g: &mut ComputeGraph<f64>, v: &[Var]| g.sum(v[0]));
        let p = vec![Tensor::scalar(1.0)];
        assert!(finite_difference_check(&mut loss, &p, 0.0, 1e-6, 0).is_err());
    }
}
