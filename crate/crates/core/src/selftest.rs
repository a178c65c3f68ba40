//! Built-in oracle suite: gradient checks of every differentiable operation,
//! convolution equivalences and the reference operation counts.

use crate::conv::{self, ConvSpec, ConvWeights};
use crate::cost::{ops_separable, ops_standard};
use crate::error::Result;
use crate::gradcheck::{check_gradients, check_module_gradients, random_inputs, GradCheck, GradReport};
use crate::loss::bce_loss;
use crate::model::{Model, ModelConfig};
use crate::norm::BatchNorm;
use crate::ops;
use crate::param::Init;
use crate::se::{se_forward, SeWeights};
use crate::tensor::{Shape, Tensor};

/// Relative-error bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    /// Relative gradient error, absolute difference, or count mismatch.
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance && self.measured.is_finite()
    }

    fn new(name: &str, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_string(),
            measured,
            tolerance,
        }
    }
}

fn rand(shape: Shape, seed: u64) -> Tensor {
    random_inputs(&[shape], seed).remove(0)
}

/// Weighted sum, so that every output entry carries a distinct gradient.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(ops::sum(&ops::mul(y, &rand(y.shape(), seed))?))
}

fn gradient(name: &str, report: Result<GradReport>, tolerance: f64) -> Check {
    Check::new(name, report.map_or(f64::INFINITY, |r| r.max_rel_error), tolerance)
}

/// Gradient checks of each differentiable operation against central
/// differences.
pub fn operation_gradients() -> Vec<Check> {
    let cfg = GradCheck::default();
    let x = Shape::new(2, 3, 6, 6);
    let spec = ConvSpec::new(3, 4, 3).with_dilation(2).same();
    let mut checks = vec![
        gradient(
            "grad conv2d (dilated)",
            check_gradients(&[x, Shape::new(4, 3, 3, 3), Shape::new(1, 4, 1, 1)], 1, &cfg, |v| {
                let w = ConvWeights::standard(v[1].clone(), Some(v[2].clone()));
                project(&conv::conv2d(&v[0], &w, &spec)?, 101)
            }),
            OP_TOLERANCE,
        ),
        gradient(
            "grad depthwise conv",
            check_gradients(&[x, Shape::new(3, 1, 3, 3)], 2, &cfg, |v| {
                let w = ConvWeights::separable(v[1].clone(), Tensor::zeros(Shape::new(1, 3, 1, 1)), None);
                project(&conv::depthwise_conv2d(&v[0], &w, &spec.with_stride(2))?, 102)
            }),
            OP_TOLERANCE,
        ),
        gradient(
            "grad pointwise conv",
            check_gradients(&[x, Shape::new(4, 3, 1, 1), Shape::new(1, 4, 1, 1)], 3, &cfg, |v| {
                let w = ConvWeights::pointwise(v[1].clone(), Some(v[2].clone()));
                project(&conv::pointwise_conv2d(&v[0], &w)?, 103)
            }),
            OP_TOLERANCE,
        ),
        gradient(
            "grad separable conv",
            check_gradients(
                &[x, Shape::new(3, 1, 3, 3), Shape::new(4, 3, 1, 1), Shape::new(1, 4, 1, 1)],
                4,
                &cfg,
                |v| {
                    let w = ConvWeights::separable(v[1].clone(), v[2].clone(), Some(v[3].clone()));
                    project(&conv::depthwise_dilated_separable(&v[0], &w, &spec)?, 104)
                },
            ),
            OP_TOLERANCE,
        ),
        gradient(
            "grad channel concat",
            check_gradients(&[x, Shape::new(2, 2, 6, 6)], 5, &cfg, |v| {
                project(&ops::concat_channels(&[v[0].clone(), v[1].clone()])?, 105)
            }),
            OP_TOLERANCE,
        ),
        gradient(
            "grad global average pool",
            check_gradients(&[x], 6, &cfg, |v| project(&ops::global_avg_pool(&v[0])?, 106)),
            OP_TOLERANCE,
        ),
        gradient(
            "grad bilinear upsample",
            check_gradients(&[Shape::new(1, 2, 3, 4)], 7, &cfg, |v| {
                project(&ops::bilinear_upsample(&v[0], 4)?, 107)
            }),
            OP_TOLERANCE,
        ),
        gradient(
            "grad sigmoid and relu",
            check_gradients(&[x], 8, &cfg, |v| project(&ops::sigmoid(&ops::relu(&v[0])), 108)),
            OP_TOLERANCE,
        ),
    ];

    let bn = BatchNorm::identity(3);
    let _ = bn.gamma.set_data(rand(Shape::new(1, 3, 1, 1), 9).to_vec());
    let input = rand(x, 10);
    checks.push(gradient(
        "grad batch norm",
        check_module_gradients(&bn, &[input], &cfg, |v| project(&bn.forward(&v[0], true)?, 109)),
        OP_TOLERANCE,
    ));

    let se = SeWeights::init(8, 2, &mut Init::new(11));
    let input = rand(Shape::new(2, 8, 4, 4), 12);
    checks.push(match se {
        Ok(se) => gradient(
            "grad squeeze-excitation",
            check_module_gradients(&se, &[input], &cfg, |v| project(&se_forward(&v[0], &se)?, 110)),
            OP_TOLERANCE,
        ),
        Err(_) => Check::new("grad squeeze-excitation", f64::INFINITY, OP_TOLERANCE),
    });

    let logits = rand(Shape::new(2, 1, 4, 4), 13);
    let target = Tensor::from_fn(Shape::new(2, 1, 4, 4), |n, _, y, x| f64::from((n + y + x) % 3 == 0));
    checks.push(gradient(
        "grad binary cross-entropy",
        crate::gradcheck::check_gradients_at(&[logits], &cfg, |v| bce_loss(&ops::sigmoid(&v[0]), &target)),
        OP_TOLERANCE,
    ));
    checks
}

/// End-to-end gradient check of a model, sampling a few entries of the
/// input and of every parameter tensor.
pub fn model_gradient(cfg: &ModelConfig, size: usize, seed: u64) -> Check {
    let run = || -> Result<GradReport> {
        let m = Model::new(cfg.clone(), seed)?;
        let x = rand(Shape::new(2, 3, size, size), seed + 1);
        let w = rand(Shape::new(2, cfg.num_classes, size, size), seed + 2);
        let check = GradCheck {
            max_entries: Some(6),
            ..GradCheck::default()
        };
        check_module_gradients(&m, &[x], &check, |v| Ok(ops::sum(&ops::mul(&m.forward(&v[0], true)?, &w)?)))
    };
    gradient("grad toy model end to end", run(), MODEL_TOLERANCE)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A dilated kernel spread out with `d - 1` zeros between taps.
fn zero_stuffed(w: &Tensor, d: usize) -> Tensor {
    let s = w.shape();
    let k = (s.h - 1) * d + 1;
    Tensor::from_fn(Shape::new(s.n, s.c, k, k), |o, i, y, x| {
        if y % d == 0 && x % d == 0 {
            w.at(o, i, y / d, x / d)
        } else {
            0.0
        }
    })
}

/// Dilated convolution against an undilated one with a zero-stuffed kernel,
/// and separable convolution against a standard one with the factorized
/// kernel `pw[o, c] * dw[c, y, x]`. Both at d = 1 and larger rates.
pub fn convolution_equivalences() -> Vec<Check> {
    let mut checks = Vec::new();
    let x = rand(Shape::new(2, 3, 9, 9), 20);
    let w = rand(Shape::new(4, 3, 3, 3), 21);
    let dw = rand(Shape::new(3, 1, 3, 3), 22);
    let pw = rand(Shape::new(4, 3, 1, 1), 23);
    for d in [1, 2, 3] {
        let spec = ConvSpec::new(3, 4, 3).with_dilation(d).with_bias(false).same();
        let stuffed = zero_stuffed(&w, d);
        let plain = ConvSpec::new(3, 4, stuffed.shape().h).with_bias(false).same();
        let diff = (|| -> Result<f64> {
            let a = conv::conv2d(&x, &ConvWeights::standard(w.clone(), None), &spec)?;
            let b = conv::conv2d(&x, &ConvWeights::standard(stuffed.clone(), None), &plain)?;
            Ok(max_abs_diff(a.data(), b.data()))
        })();
        checks.push(Check::new(
            &format!("dilated conv d={d} equals zero-stuffed conv"),
            diff.unwrap_or(f64::INFINITY),
            1e-12,
        ));

        let factored = Tensor::from_fn(Shape::new(4, 3, 3, 3), |o, c, y, x| pw.at(o, c, 0, 0) * dw.at(c, 0, y, x));
        let diff = (|| -> Result<f64> {
            let a = conv::depthwise_dilated_separable(
                &x,
                &ConvWeights::separable(dw.clone(), pw.clone(), None),
                &spec,
            )?;
            let b = conv::conv2d(&x, &ConvWeights::standard(factored, None), &spec)?;
            Ok(max_abs_diff(a.data(), b.data()))
        })();
        checks.push(Check::new(
            &format!("separable conv d={d} equals factorized standard conv"),
            diff.unwrap_or(f64::INFINITY),
            1e-10,
        ));
    }
    checks
}

/// The 512 x 512, 3 x 3, 3 -> 64 separable counts and the product formula
/// for the standard count.
pub fn operation_counts() -> Vec<Check> {
    let mismatch = |a: Option<u128>, b: u128| if a == Some(b) { 0.0 } else { 1.0 };
    let sep = ops_separable(512, 512, 3, 3, 64).ok();
    vec![
        Check::new("depthwise count 7,077,888", mismatch(sep.map(|s| s.0), 7_077_888), 0.0),
        Check::new("pointwise count 50,331,648", mismatch(sep.map(|s| s.1), 50_331_648), 0.0),
        Check::new("separable count 57,409,536", mismatch(sep.map(|s| s.2), 57_409_536), 0.0),
        Check::new(
            "standard count equals H*W*K*K*C_in*C_out",
            mismatch(ops_standard(512, 512, 3, 3, 64).ok(), 512 * 512 * 3 * 3 * 3 * 64),
            0.0,
        ),
    ]
}

/// Everything, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut checks = operation_gradients();
    checks.push(model_gradient(&ModelConfig::toy(), 32, 30));
    checks.extend(convolution_equivalences());
    checks.extend(operation_counts());
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operation_gradients_pass() {
        for c in operation_gradients() {
            assert!(c.passed(), "{} measured {:e}", c.name, c.measured);
        }
    }

    #[test]
    fn equivalences_and_counts_pass() {
        for c in convolution_equivalences().into_iter().chain(operation_counts()) {
            assert!(c.passed(), "{} measured {:e}", c.name, c.measured);
        }
    }

    #[test]
    fn zero_stuffing_layout() {
        let w = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (1 + y * 2 + x) as f64);
        assert_eq!(zero_stuffed(&w, 3).data(), &[1., 0., 0., 2., 0., 0., 0., 0., 0., 0., 0., 0., 3., 0., 0., 4.]);
    }

    #[test]
    fn failures_are_reported() {
        assert!(!Check::new("x", f64::NAN, 1.0).passed());
        assert!(!Check::new("x", 2.0, 1.0).passed());
    }
}
