//! Central finite-difference gradient checking in `f64`.
//!
//! The checker only ever evaluates forward values; it never looks at the
//! backward rules it is validating. Non-scalar outputs are reduced with a
//! fixed random weighting so every output element contributes.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative tolerance on `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    /// Denominator floor; makes the test absolute for gradients near zero.
    pub floor: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_coords: Some(48),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], weights: &Option<Tensor<f64>>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    Ok(match weights {
        None => v.item(),
        Some(w) => v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
    })
}

/// Compare autodiff gradients of `f` with central differences at `inputs`.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Xoshiro256StarStar::seed_from_u64(opts.seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out).to_vec();
    let weights = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        let n = out_shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Some(Tensor::new(&out_shape, w)?)
    };
    let root = match &weights {
        None => out,
        Some(w) => {
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            g.sum(prod)
        }
    };
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + opts.step;
            let plus = evaluate(&probe, &weights, &f)?;
            probe[which].data_mut()[idx] = orig - opts.step;
            let minus = evaluate(&probe, &weights, &f)?;
            probe[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[which].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradients() {
        let x = Tensor::from_f64(&[2, 3], &[0.3, -0.2, 0.9, 1.1, -0.7, 0.05]).unwrap();
        let report = check_gradients(
            &[x],
            |g, v| {
                let e = g.exp(v[0]);
                let y = g.mul(e, v[0])?;
                g.softmax(y, 1)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn detects_wrong_gradients() {
        // relu has no gradient at exactly 0; a finite step sees slope 1/2
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let report = check_gradients(&[x], |g, v| Ok(g.relu(v[0])), &GradCheckOptions::default())
            .unwrap();
        assert!(!report.passed(1e-4));
    }
}
