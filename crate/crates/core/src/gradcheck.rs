//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only evaluates the closure on untracked tensors, so it
//! never touches the backward rules it is checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::Module;
use crate::tensor::{no_grad, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many entries per input (all when `None`).
    pub max_entries: Option<usize>,
    /// Seed for choosing the checked entries.
    pub sample_seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_entries: None,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// max |a - n| / (|a| + |n| + 1e-6) over checked entries.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    #[track_caller]
    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.passes(tol),
            "gradient check failed: rel error {:.3e} >= {tol:e} at input {} entry {} \
             (analytic {:.6e}, numeric {:.6e}, {} entries checked)",
            self.max_rel_error,
            self.worst_input,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric,
            self.checked
        );
    }
}

/// The 1e-6 floor keeps gradients that are zero up to rounding noise from
/// counting as relative failures.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-6)
}

/// Uniform values in [-1, 1] for each shape.
pub fn random_inputs(shapes: &[Shape], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|&s| {
            let data = (0..s.numel()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            Tensor::new(s, data).expect("shape-consistent data")
        })
        .collect()
}

/// Checks `f` at random inputs in [-1, 1]. `f` must return a single-element tensor.
pub fn check_gradients<F>(shapes: &[Shape], seed: u64, cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    check_gradients_at(&random_inputs(shapes, seed), cfg, f)
}

/// Checks `f` at the given input values.
pub fn check_gradients_at<F>(inputs: &[Tensor], cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    f(&tracked)?.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let mut report = GradReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tracked[k].grad().unwrap_or_else(|| vec![0.0; input.numel()]);
        let len = input.numel();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in entries {
            let numeric = central_difference(inputs, k, i, cfg.step, &f)?;
            report.record(k, i, analytic[i], numeric);
        }
    }
    Ok(report)
}

fn central_difference<F>(inputs: &[Tensor], k: usize, i: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut xs: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
        let mut data = inputs[k].to_vec();
        data[i] += delta;
        xs[k] = Tensor::new(inputs[k].shape(), data)?;
        f(&xs)?.item()
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

impl GradReport {
    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if self.checked == 1 || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_input = input;
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// Checks the gradients of `f` with respect to both `inputs` and every
/// parameter of `module`. Parameters are numbered after the inputs in
/// `worst_input`, in [`Module::parameters`] order.
pub fn check_module_gradients<M, F>(module: &M, inputs: &[Tensor], cfg: &GradCheck, f: F) -> Result<GradReport>
where
    M: Module + ?Sized,
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut report = check_gradients_at(inputs, cfg, &f)?;
    let params = module.parameters();
    module.zero_grad();
    let xs: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    f(&xs)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed ^ 0x9e37_79b9);
    for (k, (_, p)) in params.iter().enumerate() {
        let original = p.get().to_vec();
        let len = original.len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in entries {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = original.clone();
                data[i] += delta;
                p.set_data(data)?;
                no_grad(|| f(&xs))?.item()
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            report.record(inputs.len() + k, i, analytic[k][i], numeric);
        }
        p.set_data(original)?;
    }
    Ok(report)
}
