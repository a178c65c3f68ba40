//! Squeeze-and-excitation channel attention.

use crate::conv::ConvWeights;
use crate::error::{Error, Result};
use crate::ops;
use crate::param::{join, Entry, Init, Module, Param};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;

/// Bias-free gating weights: `w1` is `(C/r, C, 1, 1)`, `w2` is `(C, C/r, 1, 1)`.
#[derive(Debug)]
pub struct SeWeights {
    pub w1: Param,
    pub w2: Param,
    pub reduction: usize,
}

/// `max(1, ceil(C / r))`.
pub fn hidden_channels(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction).max(1)
}

impl SeWeights {
    pub fn new(w1: Tensor, w2: Tensor, reduction: usize) -> Result<Self> {
        let (a, b) = (w1.shape(), w2.shape());
        let c = a.c;
        let hidden = a.n;
        if a.h != 1 || a.w != 1 || b != Shape::new(c, hidden, 1, 1) {
            return Err(Error::shape(format!(
                "excitation weights {a} and {b} are not (C/r, C, 1, 1) and (C, C/r, 1, 1)"
            )));
        }
        if reduction == 0 || hidden != hidden_channels(c, reduction) {
            return Err(Error::shape(format!(
                "{hidden} hidden channels do not match C = {c}, r = {reduction}"
            )));
        }
        Ok(SeWeights {
            w1: Param::new(w1),
            w2: Param::new(w2),
            reduction,
        })
    }

    pub fn init(channels: usize, reduction: usize, init: &mut Init) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::config("channels and reduction ratio must be positive"));
        }
        let hidden = hidden_channels(channels, reduction);
        Ok(SeWeights {
            w1: init.he_uniform(Shape::new(hidden, channels, 1, 1), channels)?,
            w2: init.he_uniform(Shape::new(channels, hidden, 1, 1), hidden)?,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape().c
    }

    pub fn forward(&self, d: &Tensor) -> Result<Tensor> {
        se_forward(d, self)
    }
}

impl Module for SeWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        f(join(prefix, "w1"), Entry::Param(&self.w1));
        f(join(prefix, "w2"), Entry::Param(&self.w2));
    }
}

/// Per-channel spatial mean, `(n, C, 1, 1)`.
pub fn squeeze(d: &Tensor) -> Result<Tensor> {
    ops::global_avg_pool(d)
}

/// `sigmoid(W2 relu(W1 z))`.
pub fn excite(z: &Tensor, w: &SeWeights) -> Result<Tensor> {
    let s = z.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!("excitation input {s} is not (n, C, 1, 1)")));
    }
    if s.c != w.channels() {
        return Err(Error::shape(format!(
            "excitation weights expect {} channels, got {}",
            w.channels(),
            s.c
        )));
    }
    let h = ops::relu(&crate::conv::pointwise_conv2d(z, &ConvWeights::pointwise(w.w1.get(), None))?);
    let e = crate::conv::pointwise_conv2d(&h, &ConvWeights::pointwise(w.w2.get(), None))?;
    Ok(ops::sigmoid(&e))
}

/// Multiplies channel `c` of `d` by `e[c]`.
pub fn scale(d: &Tensor, e: &Tensor) -> Result<Tensor> {
    let (ds, es) = (d.shape(), e.shape());
    if es != Shape::new(ds.n, ds.c, 1, 1) {
        return Err(Error::shape(format!("scale factors {es} do not fit features {ds}")));
    }
    ops::mul(d, e)
}

pub fn se_forward(d: &Tensor, w: &SeWeights) -> Result<Tensor> {
    scale(d, &excite(&squeeze(d)?, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module_gradients, random_inputs, GradCheck};
    use proptest::prelude::*;

    fn weights(c: usize, r: usize, seed: u64) -> SeWeights {
        SeWeights::init(c, r, &mut Init::new(seed)).unwrap()
    }

    #[test]
    fn squeeze_values() {
        let seven = Tensor::full(Shape::new(1, 1, 3, 3), 7.0);
        assert_eq!(squeeze(&seven).unwrap().data(), &[7.0]);
        let d = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(squeeze(&d).unwrap().data(), &[1.0]);
        let x = random_inputs(&[Shape::new(2, 3, 4, 5)], 1).remove(0);
        let a = squeeze(&ops::scale(&x, 2.0)).unwrap();
        let b = squeeze(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - 2.0 * q).abs() < 1e-15);
        }
        assert!(matches!(
            squeeze(&Tensor::zeros(Shape::new(1, 1, 0, 3))),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_weights_give_one_half() {
        let w = weights(4, 2, 0);
        w.w1.set_data(vec![0.0; 8]).unwrap();
        w.w2.set_data(vec![0.0; 8]).unwrap();
        let z = random_inputs(&[Shape::new(2, 4, 1, 1)], 3).remove(0);
        assert!(excite(&z, &w).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn excite_matches_matvec_oracle() {
        let (c, r) = (6, 2);
        let w = weights(c, r, 4);
        let hidden = hidden_channels(c, r);
        let z = random_inputs(&[Shape::new(2, c, 1, 1)], 5).remove(0);
        let got = excite(&z, &w).unwrap();
        let (w1, w2) = (w.w1.get(), w.w2.get());
        for n in 0..2 {
            let zn = &z.data()[n * c..(n + 1) * c];
            let h: Vec<f64> = (0..hidden)
                .map(|j| (0..c).map(|i| w1.data()[j * c + i] * zn[i]).sum::<f64>().max(0.0))
                .collect();
            for i in 0..c {
                let e: f64 = (0..hidden).map(|j| w2.data()[i * hidden + j] * h[j]).sum();
                let s = 1.0 / (1.0 + (-e).exp());
                assert!((got.data()[n * c + i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_values() {
        let d = random_inputs(&[Shape::new(1, 3, 2, 2)], 6).remove(0);
        let ones = Tensor::full(Shape::new(1, 3, 1, 1), 1.0);
        assert_eq!(scale(&d, &ones).unwrap().data(), d.data());
        let zeros = Tensor::zeros(Shape::new(1, 3, 1, 1));
        assert!(scale(&d, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let eight = Tensor::full(Shape::new(1, 1, 3, 3), 8.0);
        let quarter = Tensor::full(Shape::new(1, 1, 1, 1), 0.25);
        assert!(scale(&eight, &quarter).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(matches!(scale(&d, &quarter), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_the_three_step_composition() {
        let w = weights(4, 2, 7);
        let d = random_inputs(&[Shape::new(2, 4, 3, 3)], 8).remove(0);
        let manual = scale(&d, &excite(&squeeze(&d).unwrap(), &w).unwrap()).unwrap();
        assert_eq!(se_forward(&d, &w).unwrap().data(), manual.data());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let w = weights(4, 2, 0);
        let d = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(matches!(se_forward(&d, &w), Err(Error::Shape(_))));
        let bad = SeWeights::new(Tensor::zeros(Shape::new(2, 4, 1, 1)), Tensor::zeros(Shape::new(4, 3, 1, 1)), 2);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn zero_weights_remove_cross_channel_influence() {
        let w = weights(3, 2, 9);
        w.w1.set_data(vec![0.0; w.w1.numel()]).unwrap();
        w.w2.set_data(vec![0.0; w.w2.numel()]).unwrap();
        let d = random_inputs(&[Shape::new(1, 3, 4, 4)], 10).remove(0);
        let mut bumped = d.to_vec();
        for v in &mut bumped[16..32] {
            *v += 1.0;
        }
        let a = se_forward(&d, &w).unwrap();
        let b = se_forward(&Tensor::new(d.shape(), bumped).unwrap(), &w).unwrap();
        assert_eq!(a.data()[..16], b.data()[..16]);
        assert_eq!(a.data()[32..], b.data()[32..]);
    }

    #[test]
    fn gradients() {
        let w = weights(4, 2, 11);
        let d = random_inputs(&[Shape::new(2, 4, 3, 3)], 12).remove(0);
        let g = random_inputs(&[Shape::new(2, 4, 3, 3)], 13).remove(0);
        check_module_gradients(&w, &[d], &GradCheck::default(), |xs| {
            Ok(ops::sum(&ops::mul(&se_forward(&xs[0], &w)?, &g)?))
        })
        .unwrap()
        .assert_within(1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shape_and_bounds(n in 1usize..3, c in 1usize..7, h in 1usize..5, w in 1usize..5, r in 1usize..5, seed in 0u64..500) {
            let sw = weights(c, r, seed);
            let d = random_inputs(&[Shape::new(n, c, h, w)], seed + 1).remove(0);
            let e = excite(&squeeze(&d).unwrap(), &sw).unwrap();
            prop_assert!(e.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let y = se_forward(&d, &sw).unwrap();
            prop_assert_eq!(y.shape(), d.shape());
            let max_in = d.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let max_out = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(max_out <= max_in);
            // ratio is constant across each channel plane
            let plane = h * w;
            for p in 0..n * c {
                let k = e.data()[p];
                for i in 0..plane {
                    prop_assert_eq!(y.data()[p * plane + i], d.data()[p * plane + i] * k);
                }
            }
        }

        #[test]
        fn channel_permutation_equivariance(seed in 0u64..500) {
            let (c, r) = (5, 2);
            let sw = weights(c, r, seed);
            let hidden = hidden_channels(c, r);
            let d = random_inputs(&[Shape::new(1, c, 3, 3)], seed + 7).remove(0);
            let perm = [3usize, 0, 4, 1, 2];
            let permute_channels = |t: &[f64], plane: usize| -> Vec<f64> {
                perm.iter().flat_map(|&p| t[p * plane..(p + 1) * plane].to_vec()).collect()
            };
            let (w1, w2) = (sw.w1.get().to_vec(), sw.w2.get().to_vec());
            // columns of W1 and rows of W2 follow the channel permutation
            let pw1: Vec<f64> = (0..hidden)
                .flat_map(|j| perm.iter().map(move |&p| (j, p)))
                .map(|(j, p)| w1[j * c + p])
                .collect();
            let pw2: Vec<f64> = perm.iter().flat_map(|&p| w2[p * hidden..(p + 1) * hidden].to_vec()).collect();
            let psw = SeWeights::new(
                Tensor::new(sw.w1.shape(), pw1).unwrap(),
                Tensor::new(sw.w2.shape(), pw2).unwrap(),
                r,
            ).unwrap();
            let pd = Tensor::new(d.shape(), permute_channels(d.data(), 9)).unwrap();
            let y = se_forward(&d, &sw).unwrap();
            let py = se_forward(&pd, &psw).unwrap();
            let expect = permute_channels(y.data(), 9);
            for (a, b) in py.data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
