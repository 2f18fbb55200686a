//! Central finite-difference verification of analytic gradients.
//!
//! The checker only ever evaluates the forward function, so it is an
//! oracle independent of every backward rule it verifies.

use rand::seq::index::sample;

use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Gradient norm below which errors are measured absolutely. Parameters
/// cancelled by a following normalization have an exact zero gradient, and
/// their central differences are pure rounding noise (~1e-11).
pub const ZERO_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, ZERO_FLOOR)` over
    /// the checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.rel_error <= tol)
    }

    pub fn failures(&self, tol: f64) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| t.rel_error > tol).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (`None` = all).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Compare the graph gradient of the scalar `f(inputs)` with central
/// differences for every named input tensor.
pub fn check<F>(inputs: &[(String, Tensor)], f: F, opts: CheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        assert_eq!(
            g.value(out).numel(),
            1,
            "gradient check needs a scalar output"
        );
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
        let total = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < total => {
                let mut r = rng::stream(opts.seed, name, i as u64);
                let mut picked = sample(&mut r, total, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..total).collect(),
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &c in &coords {
            let orig = tensor.data()[c];
            values[i].data_mut()[c] = orig + opts.step;
            let plus = eval(&values);
            values[i].data_mut()[c] = orig - opts.step;
            let minus = eval(&values);
            values[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[c];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(ZERO_FLOOR);
        report.tensors.push(TensorCheck {
            name: name.clone(),
            rel_error: diff2.sqrt() / denom,
            max_abs_error: max_abs,
            checked: coords.len(),
            total,
        });
    }
    report
}
