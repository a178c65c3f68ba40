//! Per-channel batch normalization.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::param::{join, Entry, Module, Param};
use crate::tensor::{Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running mean/variance used in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Learnable scale/shift, each `(1, c, 1, 1)`, plus running statistics.
///
/// Running statistics are updated in place by training-mode forwards, so
/// one `BatchNorm` must stay on the thread that runs its graph.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running: RefCell<RunningStats>,
}

impl BatchNorm {
    pub fn new(gamma: Tensor, beta: Tensor, running: RunningStats) -> Result<Self> {
        let c = gamma.shape().c;
        let per_channel = Shape::new(1, c, 1, 1);
        if gamma.shape() != per_channel || beta.shape() != per_channel {
            return Err(Error::shape(format!(
                "batch norm scale {} / shift {} must both be (1, c, 1, 1)",
                gamma.shape(),
                beta.shape()
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("running statistics length differs from channels"));
        }
        Ok(BatchNorm {
            gamma: Param::new(gamma),
            beta: Param::new(beta),
            running: RefCell::new(running),
        })
    }

    /// Unit scale, zero shift, fresh statistics.
    pub fn identity(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm {
            gamma: Param::new(Tensor::full(s, 1.0)),
            beta: Param::new(Tensor::zeros(s)),
            running: RefCell::new(RunningStats::new(channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        batch_norm(x, &self.gamma.get(), &self.beta.get(), &self.running, training)
    }
}

impl Module for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        f(join(prefix, "gamma"), Entry::Param(&self.gamma));
        f(join(prefix, "beta"), Entry::Param(&self.beta));
        f(join(prefix, "running"), Entry::Stats(&self.running));
    }
}

/// Normalizes each channel of `x`.
///
/// In training mode, batch statistics (biased variance) normalize the input and
/// the running statistics move toward them with momentum [`BN_MOMENTUM`].
/// In inference mode the running statistics are used and left untouched.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RefCell<RunningStats>,
    training: bool,
) -> Result<Tensor> {
    let s = x.shape();
    let per_channel = Shape::new(1, s.c, 1, 1);
    if gamma.shape() != per_channel || beta.shape() != per_channel {
        return Err(Error::shape(format!(
            "batch norm parameters {} / {} do not match input {s}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = s.n * s.plane();
    if training && m < 2 {
        return Err(Error::domain(format!(
            "batch norm in training mode needs at least 2 values per channel, input {s}"
        )));
    }
    let plane = s.plane();
    let xd = x.data();

    let (mean, var) = if training {
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut acc = 0.0;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                acc += xd[base..base + plane].iter().sum::<f64>();
            }
            let mu = acc / m as f64;
            let mut sq = 0.0;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                sq += xd[base..base + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[c] = mu;
            var[c] = sq / m as f64;
        }
        let mut r = running.borrow_mut();
        for c in 0..s.c {
            r.mean[c] = BN_MOMENTUM * r.mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            r.var[c] = BN_MOMENTUM * r.var[c] + (1.0 - BN_MOMENTUM) * var[c];
        }
        (mean, var)
    } else {
        let r = running.borrow();
        if r.mean.len() != s.c || r.var.len() != s.c {
            return Err(Error::shape("running statistics length differs from channels"));
        }
        (r.mean.clone(), r.var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; s.numel()];
    let mut out = vec![0.0; s.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gd[c] * h + bd[c];
            }
        }
    }

    let gamma_c = gamma.clone();
    Ok(Tensor::from_op(
        s,
        out,
        "batch_norm",
        &[x, gamma, beta],
        Box::new(move |g, needs| {
            let gd = gamma_c.data();
            let mut dgamma = vec![0.0; s.c];
            let mut dbeta = vec![0.0; s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    for i in base..base + plane {
                        dbeta[c] += g[i];
                        dgamma[c] += g[i] * xhat[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        let k = gd[c] * inv_std[c];
                        for i in base..base + plane {
                            dx[i] = if training {
                                k * (g[i] - (dbeta[c] + xhat[i] * dgamma[c]) / m as f64)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::ops;

    #[test]
    fn normalized_input_passes_through() {
        // two samples per channel: -1 and 1 have mean 0, biased variance 1
        let x = Tensor::new(Shape::new(2, 1, 1, 1), vec![-1.0, 1.0]).unwrap();
        let bn = BatchNorm::identity(1);
        let y = bn.forward(&x, true).unwrap();
        let expect = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_input_gives_shift() {
        let x = Tensor::full(Shape::new(2, 2, 3, 3), 4.0);
        let bn = BatchNorm::new(
            Tensor::full(Shape::new(1, 2, 1, 1), 3.0),
            Tensor::new(Shape::new(1, 2, 1, 1), vec![0.5, -2.0]).unwrap(),
            RunningStats::new(2),
        )
        .unwrap();
        let y = bn.forward(&x, true).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.5));
        assert!(y.data()[9..18].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let bn = BatchNorm::identity(1);
        bn.forward(&x, true).unwrap();
        let r = bn.running.borrow().clone();
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
        // inference leaves them alone
        bn.forward(&x, false).unwrap();
        assert_eq!(*bn.running.borrow(), r);
    }

    #[test]
    fn too_few_values_in_training_is_domain_error() {
        let x = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let bn = BatchNorm::identity(3);
        assert!(matches!(bn.forward(&x, true), Err(Error::Domain(_))));
        assert!(bn.forward(&x, false).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = crate::gradcheck::random_inputs(&[Shape::new(2, 3, 3, 3)], 99).remove(0);
        for training in [true, false] {
            let running = RefCell::new(RunningStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 0.8],
            });
            check_gradients(
                &[Shape::new(2, 3, 3, 3), Shape::new(1, 3, 1, 1), Shape::new(1, 3, 1, 1)],
                7,
                &GradCheck::default(),
                |xs| {
                    let y = batch_norm(&xs[0], &xs[1], &xs[2], &running, training)?;
                    Ok(ops::sum(&ops::mul(&y, &w)?))
                },
            )
            .unwrap()
            .assert_within(1e-4);
        }
    }
}
