//! Central-difference gradient verification.
//!
//! Used by the test suites to pin every custom layer and loss to its
//! analytic backward pass at f64.

use super::{Graph, Var};
use ndarray::ArrayD;

/// Outcome of a finite-difference check over one input tensor.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input tensor index, flat element index, analytic, numeric) at the
    /// worst relative error.
    pub worst: (usize, usize, f64, f64),
}

/// Compare analytic gradients of `build` (inputs -> scalar root) against
/// central differences with step `h`, elementwise over every input.
///
/// Relative error uses max(|analytic|, |numeric|, `abs_floor`) as the
/// denominator: gradient components below the floor are compared
/// absolutely, since the difference quotient cannot resolve them.
pub fn check<B>(inputs: &[ArrayD<f64>], h: f64, abs_floor: f64, build: B) -> CheckReport
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |arrs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = arrs.iter().map(|a| g.leaf(a.clone())).collect();
        let root = build(&mut g, &vars);
        g.scalar(root)
    };

    // Analytic gradients.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root);

    let mut report = CheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zero = ArrayD::zeros(inputs[ti].raw_dim());
        let analytic = grads.get(*var).cloned().unwrap_or(zero);
        let n = inputs[ti].len();
        for k in 0..n {
            let orig = work[ti].as_slice().unwrap()[k];
            work[ti].as_slice_mut().unwrap()[k] = orig + h;
            let up = eval(&work);
            work[ti].as_slice_mut().unwrap()[k] = orig - h;
            let down = eval(&work);
            work[ti].as_slice_mut().unwrap()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[k];
            let denom = a.abs().max(numeric.abs()).max(abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, k, a, numeric);
            }
        }
    }
    report
}

/// Convenience wrapper with the step and floor used throughout the suite.
pub fn check_default<B>(inputs: &[ArrayD<f64>], build: B) -> CheckReport
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    check(inputs, 1e-5, 1e-6, build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil;

    #[test]
    fn composite_elementwise_ops_pass() {
        let mut rng = rngutil::rng_from(11, "gradcheck-elem");
        let a = rngutil::normal_array::<f64>(&mut rng, &[3, 4], 1.0);
        let b = rngutil::normal_array::<f64>(&mut rng, &[3, 4], 1.0);
        let rep = check_default(&[a, b], |g, vars| {
            let t = g.tanh(vars[0]);
            let s = g.sigmoid(vars[1]);
            let m = g.mul(t, s);
            let e = g.exp(m);
            g.mean_all(e)
        });
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn conv_and_norm_pass() {
        let mut rng = rngutil::rng_from(12, "gradcheck-conv");
        let x = rngutil::normal_array::<f64>(&mut rng, &[2, 4, 4], 1.0);
        let w = rngutil::normal_array::<f64>(&mut rng, &[3, 2, 3, 3], 0.5);
        let b = rngutil::normal_array::<f64>(&mut rng, &[3], 0.5);
        let rep = check_default(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1);
            let n = g.instance_norm(y, 1e-5);
            let r = g.leaky_relu(n, 0.2);
            g.mean_all(r)
        });
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn pooling_and_softmax_pass() {
        let mut rng = rngutil::rng_from(13, "gradcheck-pool");
        let x = rngutil::normal_array::<f64>(&mut rng, &[2, 4, 4], 1.0);
        let labels =
            ndarray::Array2::from_shape_vec((2, 2), vec![0usize, 1, 1, 0]).unwrap();
        let rep = check_default(&[x], move |g, v| {
            let p = g.max_pool2(v[0]);
            let sm = g.softmax_ch(p);
            let sel = g.select_class(sm, &labels);
            let ln = g.ln_clamped(sel, 1e-8);
            let m = g.mean_all(ln);
            g.scale(m, -1.0)
        });
        assert!(rep.max_rel_err < 1e-5, "rel err {}", rep.max_rel_err);
    }
}
