//! Central finite-difference checks for the tape's backward rules.
//!
//! Each registered [`OpCase`] builds a small expression around one op; the
//! checker projects the output onto a fixed random tensor, differentiates
//! with the tape, and compares against `(f(x+h) - f(x-h)) / 2h` per entry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub type BuildFn = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub build: BuildFn,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error between two gradients, measured in the max norm and
/// normalized by the finite-difference gradient's magnitude.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = numeric.max_abs().max(analytic.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Every tape op, each wrapped in the smallest expression that exercises it.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: vec![vec![3, 4], vec![3, 4]], build: |v| v[0].add(v[1]) },
        OpCase { name: "sub", inputs: vec![vec![3, 4], vec![3, 4]], build: |v| v[0].sub(v[1]) },
        OpCase { name: "mul", inputs: vec![vec![3, 4], vec![3, 4]], build: |v| v[0].mul(v[1]) },
        OpCase { name: "neg", inputs: vec![vec![5]], build: |v| v[0].neg() },
        OpCase { name: "scale_const", inputs: vec![vec![5]], build: |v| v[0].scale(-2.5) },
        OpCase { name: "add_const", inputs: vec![vec![5]], build: |v| v[0].add_const(0.75) },
        OpCase { name: "scale_by", inputs: vec![vec![2, 3], vec![]], build: |v| v[0].scale_by(v[1]) },
        OpCase {
            name: "div",
            inputs: vec![vec![], vec![]],
            build: |v| v[0].div(v[1].mul(v[1])?.add_const(1.0)?),
        },
        OpCase { name: "relu", inputs: vec![vec![4, 4, 2]], build: |v| v[0].relu() },
        OpCase { name: "sigmoid", inputs: vec![vec![4, 4, 2]], build: |v| v[0].sigmoid() },
        OpCase { name: "softplus", inputs: vec![vec![4, 4, 2]], build: |v| v[0].softplus() },
        OpCase { name: "sum", inputs: vec![vec![3, 3, 2]], build: |v| v[0].sum() },
        OpCase { name: "mean", inputs: vec![vec![3, 3, 2]], build: |v| v[0].mean() },
        OpCase { name: "dot", inputs: vec![vec![3, 3, 2], vec![3, 3, 2]], build: |v| v[0].dot(v[1]) },
        OpCase {
            name: "concat_channels",
            inputs: vec![vec![3, 2, 1], vec![3, 2, 3]],
            build: |v| Var::concat_channels(v),
        },
        OpCase { name: "max_pool2", inputs: vec![vec![4, 6, 2]], build: |v| v[0].max_pool2() },
        OpCase { name: "avg_pool", inputs: vec![vec![4, 6, 2]], build: |v| v[0].avg_pool(2) },
        OpCase { name: "upsample2", inputs: vec![vec![3, 2, 2]], build: |v| v[0].upsample2() },
        OpCase {
            name: "conv2d",
            inputs: vec![vec![5, 4, 2], vec![3, 3, 2, 3]],
            build: |v| v[0].conv2d(v[1]),
        },
        OpCase {
            name: "conv2d_kernel_grad",
            inputs: vec![vec![4, 5, 2], vec![4, 5, 3]],
            build: |v| v[0].conv2d_kernel_grad(v[1], 3),
        },
        OpCase {
            name: "add_bias",
            inputs: vec![vec![3, 3, 4], vec![4]],
            build: |v| v[0].add_bias(v[1]),
        },
    ]
}

fn evaluate(case: &OpCase, inputs: &[Tensor], projection: Option<&Tensor>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&vars)?;
    match projection {
        Some(p) => out.value().dot(p),
        None => Ok(out.value().data()[0]),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Checks one op at a random point with step `h`; `tol` bounds the
/// relative error of every input's gradient.
pub fn check_case(case: &OpCase, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case.inputs.iter().map(|s| random_tensor(&mut rng, s)).collect();

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&vars)?;
    let projection = (out.value().len() > 1).then(|| random_tensor(&mut rng, out.value().shape()));
    let loss = match &projection {
        Some(p) => out.dot(tape.constant(p.clone()))?,
        None => out,
    };
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fp = evaluate(case, &plus, projection.as_ref())?;
            let fm = evaluate(case, &minus, projection.as_ref())?;
            numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(relative_error(&grads.wrt(*var), &numeric));
    }
    Ok(GradCheckReport {
        name: case.name.to_string(),
        max_rel_error: worst,
        passed: worst <= tol,
    })
}

/// Runs every registered op case for each of `seeds`.
pub fn check_all_ops(seeds: &[u64], h: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for case in op_cases() {
        let mut worst = GradCheckReport {
            name: case.name.to_string(),
            max_rel_error: 0.0,
            passed: true,
        };
        for &seed in seeds {
            let r = check_case(&case, seed, h, tol)?;
            if r.max_rel_error >= worst.max_rel_error {
                worst.max_rel_error = r.max_rel_error;
            }
            worst.passed &= r.passed;
        }
        reports.push(worst);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        let reports = check_all_ops(&[1, 2, 3], 1e-5, 1e-6).unwrap();
        for r in &reports {
            assert!(r.passed, "{}: rel err {:e}", r.name, r.max_rel_error);
        }
        assert_eq!(reports.len(), op_cases().len());
    }
}
