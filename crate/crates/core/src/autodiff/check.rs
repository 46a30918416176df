use rand::Rng as _;

use super::{AutodiffError, Graph, Tensor, Var};
use crate::{seed, Scalar};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
    /// A one-sided difference disagreed with its mirror, i.e. the point sat
    /// on a kink; the check was retried at a jittered point.
    pub kink_detected: bool,
    pub attempts: usize,
}

const MAX_ATTEMPTS: usize = 4;

/// Checks the graph gradient of `f` at `point`.
///
/// Per component the error is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = 1e-3 * max_j |n_j|` (plus a tiny absolute term), so components
/// that are numerically zero relative to the gradient scale are compared
/// against that scale instead of against themselves.
pub fn gradient_check<T, F>(f: F, point: &Tensor<T>, h: T, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, AutodiffError>,
{
    let value = |x: &Tensor<T>| -> Result<T, AutodiffError> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };
    let analytic = |x: &Tensor<T>| -> Result<Tensor<T>, AutodiffError> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.backward(out)?.wrt(&g, v))
    };
    compare_gradients(value, analytic, point, h, tol)
}

/// Same as [`gradient_check`] with the analytic gradient supplied by the
/// caller, which lets a hand-written backward rule be validated.
pub fn compare_gradients<T, V, A>(value: V, analytic: A, point: &Tensor<T>, h: T, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    T: Scalar,
    V: Fn(&Tensor<T>) -> Result<T, AutodiffError>,
    A: Fn(&Tensor<T>) -> Result<Tensor<T>, AutodiffError>,
{
    let mut x = point.clone();
    let mut kink_detected = false;
    let mut jitter = seed::rng(0x6b69_6e6b);
    for attempt in 1..=MAX_ATTEMPTS {
        let a = analytic(&x)?;
        let f0 = value(&x)?;
        let mut numeric = Vec::with_capacity(x.len());
        let mut kink = false;
        for i in 0..x.len() {
            let shifted = |d: T| -> Result<T, AutodiffError> {
                let mut data = x.data().to_vec();
                data[i] = data[i] + d;
                value(&Tensor::from_parts(x.shape().to_vec(), data))
            };
            let fp = shifted(h)?;
            let fm = shifted(-h)?;
            let fwd = ((fp - f0) / h).as_f64();
            let bwd = ((f0 - fm) / h).as_f64();
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
                kink = true;
            }
            numeric.push(((fp - fm) / (T::lit(2.0) * h)).as_f64());
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = 1e-3 * scale + 1e-12;
        let (mut worst, mut worst_index) = (0.0f64, 0usize);
        for (i, (&n, &av)) in numeric.iter().zip(a.data()).enumerate() {
            let av = av.as_f64();
            let err = (av - n).abs() / av.abs().max(n.abs()).max(floor);
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        let passed = worst <= tol;
        if passed || !kink || attempt == MAX_ATTEMPTS {
            if kink {
                log::warn!("gradient check: kink detected near component {worst_index}");
            }
            return Ok(GradCheckReport {
                max_rel_error: worst,
                worst_index,
                passed,
                kink_detected: kink || kink_detected,
                attempts: attempt,
            });
        }
        kink_detected = true;
        let data = x
            .data()
            .iter()
            .map(|&v| v + T::lit(jitter.random_range(-1.0..1.0) * 1e-3 * (1.0 + v.as_f64().abs())))
            .collect();
        x = Tensor::from_parts(x.shape().to_vec(), data);
    }
    unreachable!("loop returns on the final attempt")
}
