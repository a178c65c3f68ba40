//! Elementwise and structural tensor operations.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// How the right-hand operand of a binary op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `(1, c, 1, 1)`: one value per channel shared by the batch.
    Channel,
    /// `(n, c, 1, 1)`: one value per sample and channel.
    SampleChannel,
}

fn broadcast_rule(a: Shape, b: Shape) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.c == a.c && b.h == 1 && b.w == 1 && b.n == 1 {
        Ok(Broadcast::Channel)
    } else if b.c == a.c && b.h == 1 && b.w == 1 && b.n == a.n {
        Ok(Broadcast::SampleChannel)
    } else {
        Err(Error::shape(format!("cannot broadcast {b} onto {a}")))
    }
}

/// Index into `b` for each flat index of `a`.
fn b_index(rule: Broadcast, a: Shape, i: usize) -> usize {
    match rule {
        Broadcast::Same => i,
        Broadcast::Channel => (i / a.plane()) % a.c,
        Broadcast::SampleChannel => i / a.plane(),
    }
}

/// Sums `g` (shaped like `a`) down to the shape of `b`.
fn reduce_to_b(rule: Broadcast, a: Shape, b: Shape, g: &[f64]) -> Vec<f64> {
    match rule {
        Broadcast::Same => g.to_vec(),
        _ => {
            let mut out = vec![0.0; b.numel()];
            for (i, v) in g.iter().enumerate() {
                out[b_index(rule, a, i)] += v;
            }
            out
        }
    }
}

/// `a + b`, where `b` may be per-channel `(1, c, 1, 1)` or `(n, c, 1, 1)`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let rule = broadcast_rule(sa, sb)?;
    let bd = b.data();
    let data: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + bd[b_index(rule, sa, i)])
        .collect();
    Ok(Tensor::from_op(
        sa,
        data,
        "add",
        &[a, b],
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| reduce_to_b(rule, sa, sb, g)),
            ]
        }),
    ))
}

/// `a * b` elementwise, with the same broadcasting as [`add`].
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let rule = broadcast_rule(sa, sb)?;
    let data: Vec<f64> = {
        let bd = b.data();
        a.data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bd[b_index(rule, sa, i)])
            .collect()
    };
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        sa,
        data,
        "mul",
        &[a, b],
        Box::new(move |g, needs| {
            let (ad, bd) = (ac.data(), bc.data());
            let ga = needs[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bd[b_index(rule, sa, i)])
                    .collect()
            });
            let gb = needs[1].then(|| {
                let prod: Vec<f64> = g.iter().zip(ad).map(|(gi, x)| gi * x).collect();
                reduce_to_b(rule, sa, sb, &prod)
            });
            vec![ga, gb]
        }),
    ))
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * factor).collect();
    Tensor::from_op(
        x.shape(),
        data,
        "scale",
        &[x],
        Box::new(move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape(),
        data,
        "relu",
        &[x],
        Box::new(move |g, _| {
            let gx = g
                .iter()
                .zip(xc.data())
                .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let out = data.clone();
    Tensor::from_op(
        x.shape(),
        data,
        "sigmoid",
        &[x],
        Box::new(move |g, _| {
            let gx = g
                .iter()
                .zip(&out)
                .map(|(gi, s)| gi * s * (1.0 - s))
                .collect();
            vec![Some(gx)]
        }),
    )
}

/// Sum of all entries as a `(1, 1, 1, 1)` tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(
        Shape::scalar(),
        vec![total],
        "sum",
        &[x],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(Error::domain("mean of an empty tensor"));
    }
    Ok(scale(&sum(x), 1.0 / x.numel() as f64))
}

/// Concatenates along the channel axis; part `k` occupies a contiguous slab
/// of channels in input order.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of an empty list"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!(
                "concat parts disagree: {first} vs {s}"
            )));
        }
    }
    let channels: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
    let total_c: usize = channels.iter().sum();
    let out_shape = first.with_channels(total_c);
    let plane = first.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for (p, &c) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::from_op(
        out_shape,
        data,
        "concat",
        &refs,
        Box::new(move |g, needs| {
            let mut offset = 0;
            channels
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(first.n * c * plane);
                        for n in 0..first.n {
                            let base = (n * total_c + start) * plane;
                            gp.extend_from_slice(&g[base..base + c * plane]);
                        }
                        gp
                    })
                })
                .collect()
        }),
    ))
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let out_shape = s.with_channels(len);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        "slice",
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; s.numel()];
            for n in 0..s.n {
                let base = (n * s.c + start) * plane;
                gx[base..base + len * plane]
                    .copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Per-channel spatial mean, `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let plane = s.plane();
    if plane == 0 {
        return Err(Error::domain(format!(
            "global average pool over zero spatial extent {s}"
        )));
    }
    let inv = 1.0 / plane as f64;
    let data: Vec<f64> = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() * inv)
        .collect();
    Ok(Tensor::from_op(
        Shape::new(s.n, s.c, 1, 1),
        data,
        "global_avg_pool",
        &[x],
        Box::new(move |g, _| {
            let mut gx = Vec::with_capacity(s.numel());
            for gi in g {
                gx.extend(std::iter::repeat_n(gi * inv, plane));
            }
            vec![Some(gx)]
        }),
    ))
}

/// Source taps for one output coordinate under the half-pixel convention:
/// `src = (i + 0.5) / factor - 0.5`, clamped at the low edge.
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (align-corners = false).
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::domain("upsample factor must be at least 1"));
    }
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let out_shape = s.with_spatial(oh, ow);
    if s.numel() == 0 {
        return Ok(Tensor::from_op(
            out_shape,
            vec![],
            "bilinear_upsample",
            &[x],
            Box::new(move |_, _| vec![Some(vec![0.0; s.numel()])]),
        ));
    }
    let ty = bilinear_taps(oh, s.h, factor);
    let tx = bilinear_taps(ow, s.w, factor);
    let mut data = vec![0.0; out_shape.numel()];
    for (plane_in, plane_out) in x.data().chunks(s.plane()).zip(data.chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (r0, r1) = (&plane_in[y0 * s.w..], &plane_in[y1 * s.w..]);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                let bottom = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                plane_out[oy * ow + ox] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        "bilinear_upsample",
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; s.numel()];
            for (gin, gout) in gx.chunks_mut(s.plane()).zip(g.chunks(oh * ow)) {
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let v = gout[oy * ow + ox];
                        gin[y0 * s.w + x0] += v * (1.0 - ly) * (1.0 - lx);
                        gin[y0 * s.w + x1] += v * (1.0 - ly) * lx;
                        gin[y1 * s.w + x0] += v * ly * (1.0 - lx);
                        gin[y1 * s.w + x1] += v * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Repeats a `(n, c, 1, 1)` tensor over an `h x w` plane.
pub fn broadcast_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!("broadcast_spatial expects (n, c, 1, 1), got {s}")));
    }
    add(&Tensor::zeros(s.with_spatial(h, w)), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item().unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_derivative_at_zero_matches_central_difference() {
        let x = Tensor::param(Shape::scalar(), vec![0.0]).unwrap();
        sigmoid(&x).backward().unwrap();
        let analytic = x.grad().unwrap()[0];
        let h = 1e-5;
        let numeric = (sigmoid_scalar(h) - sigmoid_scalar(-h)) / (2.0 * h);
        assert!((analytic - 0.25).abs() < 1e-15);
        assert!((analytic - numeric).abs() < 1e-8);
    }

    #[test]
    fn add_rejects_unbroadcastable_shapes() {
        let a = Tensor::zeros(Shape::new(2, 3, 4, 4));
        assert!(add(&a, &Tensor::zeros(Shape::new(1, 2, 1, 1))).is_err());
        assert!(add(&a, &Tensor::zeros(Shape::new(2, 3, 4, 3))).is_err());
        assert!(add(&a, &Tensor::zeros(Shape::new(1, 3, 1, 1))).is_ok());
        assert!(mul(&a, &Tensor::zeros(Shape::new(2, 3, 1, 1))).is_ok());
    }

    #[test]
    fn concat_shapes_and_identity() {
        let a = Tensor::full(Shape::new(1, 3, 8, 8), 1.0);
        let b = Tensor::full(Shape::new(1, 5, 8, 8), 2.0);
        assert_eq!(concat_channels(&[a.clone(), b]).unwrap().shape(), Shape::new(1, 8, 8, 8));
        let single = concat_channels(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.data(), a.data());
        assert!(concat_channels(&[]).is_err());
        let c = Tensor::zeros(Shape::new(1, 2, 4, 8));
        assert!(concat_channels(&[a, c]).is_err());
    }

    #[test]
    fn concat_backward_routes_ones() {
        let a = Tensor::param(Shape::new(2, 2, 3, 3), vec![0.3; 36]).unwrap();
        let b = Tensor::param(Shape::new(2, 1, 3, 3), vec![-0.1; 18]).unwrap();
        sum(&concat_channels(&[a.clone(), b.clone()]).unwrap())
            .backward()
            .unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 36]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 18]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::from_fn(Shape::new(2, 2, 3, 2), |n, c, y, x| (n * 100 + c * 10 + y * 3 + x) as f64 * 0.37);
        let b = Tensor::from_fn(Shape::new(2, 3, 3, 2), |n, c, y, x| -((n + c + y + x) as f64).sqrt());
        let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(slice_channels(&cat, 0, 2).unwrap().data(), a.data());
        assert_eq!(slice_channels(&cat, 2, 3).unwrap().data(), b.data());
    }

    #[test]
    fn global_avg_pool_values() {
        let x = t(Shape::new(1, 2, 2, 2), &[7.0, 7.0, 7.0, 7.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[7.0, 2.5]);
        assert!(global_avg_pool(&Tensor::zeros(Shape::new(1, 2, 0, 3))).is_err());

        let p = Tensor::param(Shape::new(1, 1, 3, 2), vec![1.0; 6]).unwrap();
        sum(&global_avg_pool(&p).unwrap()).backward().unwrap();
        for g in p.grad().unwrap() {
            assert!((g - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 4), |_, c, y, x| (c * 12 + y * 4 + x) as f64);
        assert_eq!(bilinear_upsample(&x, 1).unwrap().data(), x.data());
        let k = Tensor::full(Shape::new(1, 1, 3, 5), 4.25);
        let up = bilinear_upsample(&k, 4).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 12, 20));
        assert!(up.data().iter().all(|&v| (v - 4.25).abs() < 1e-15));
        assert!(bilinear_upsample(&k, 0).is_err());
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        // 1-D ramp [0, 1] upsampled x2: samples at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let x = t(Shape::new(1, 1, 1, 2), &[0.0, 1.0]);
        let up = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_sized_tensors_propagate() {
        let x = Tensor::zeros(Shape::new(0, 3, 4, 4));
        assert_eq!(relu(&x).shape(), x.shape());
        assert_eq!(bilinear_upsample(&x, 2).unwrap().shape(), Shape::new(0, 3, 8, 8));
        assert_eq!(concat_channels(&[x.clone(), x]).unwrap().shape(), Shape::new(0, 6, 4, 4));
    }

    #[test]
    fn elementwise_gradients() {
        let cfg = GradCheck::default();
        let shape = Shape::new(2, 3, 2, 2);
        let ch = Shape::new(1, 3, 1, 1);
        check_gradients(&[shape, ch], 11, &cfg, |xs| {
            let y = mul(&add(&xs[0], &xs[1])?, &sigmoid(&xs[0]))?;
            Ok(sum(&mul(&y, &relu(&add(&xs[0], &xs[1])?))?))
        })
        .unwrap()
        .assert_within(1e-4);
    }

    #[test]
    fn upsample_and_pool_gradients() {
        let cfg = GradCheck::default();
        let w = Tensor::from_fn(Shape::new(1, 2, 6, 9), |_, c, y, x| ((c * 7 + y * 3 + x) as f64).sin());
        check_gradients(&[Shape::new(1, 2, 2, 3), Shape::new(1, 2, 3, 3)], 5, &cfg, |xs| {
            let up = bilinear_upsample(&xs[0], 3)?;
            let pooled = global_avg_pool(&xs[1])?;
            let mixed = mul(&up, &pooled)?;
            let part = mul(&mixed, &slice_channels(&w, 0, 2)?)?;
            add(&sum(&part), &sum(&mul(&xs[1], &xs[1])?))
        })
        .unwrap()
        .assert_within(1e-4);
    }
}
