//! Multiply-accumulate counts for standard and depthwise separable
//! convolutions, per layer and for whole models. Bias adds and normalization
//! are not counted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::ConvKind;
use crate::model::{layer_plan, ModelConfig, PlannedKind, PlannedLayer};

fn check_positive(dims: [u64; 5]) -> Result<()> {
    if dims.contains(&0) {
        let [h, w, k, ci, co] = dims;
        return Err(Error::domain(format!(
            "operation counts need positive dimensions, got H={h} W={w} K={k} C_in={ci} C_out={co}"
        )));
    }
    Ok(())
}

/// `H * W * K * K * C_in * C_out`.
pub fn ops_standard(h: u64, w: u64, k: u64, c_in: u64, c_out: u64) -> Result<u128> {
    check_positive([h, w, k, c_in, c_out])?;
    Ok(h as u128 * w as u128 * k as u128 * k as u128 * c_in as u128 * c_out as u128)
}

/// Depthwise `H * W * K * K * C_in`, pointwise `H * W * C_in * C_out`, and
/// their sum.
pub fn ops_separable(h: u64, w: u64, k: u64, c_in: u64, c_out: u64) -> Result<(u128, u128, u128)> {
    check_positive([h, w, k, c_in, c_out])?;
    let plane = h as u128 * w as u128 * c_in as u128;
    let depthwise = plane * k as u128 * k as u128;
    let pointwise = plane * c_out as u128;
    Ok((depthwise, pointwise, depthwise + pointwise))
}

/// Both counts for one layer and their ratio.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub h: u64,
    pub w: u64,
    pub k: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub standard: u128,
    pub depthwise: u128,
    pub pointwise: u128,
    pub separable: u128,
    /// separable / standard.
    pub ratio: f64,
}

pub fn layer_cost(h: u64, w: u64, k: u64, c_in: u64, c_out: u64) -> Result<LayerCost> {
    let standard = ops_standard(h, w, k, c_in, c_out)?;
    let (depthwise, pointwise, separable) = ops_separable(h, w, k, c_in, c_out)?;
    Ok(LayerCost {
        h,
        w,
        k,
        c_in,
        c_out,
        standard,
        depthwise,
        pointwise,
        separable,
        ratio: separable as f64 / standard as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub layer_label: String,
    pub multiply_accumulates: u128,
    pub parameters: u64,
    /// Count the layer would have as a standard convolution; equal to
    /// `multiply_accumulates` for every other kind of layer.
    pub standard_equivalent: u128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Profile {
    pub layers: Vec<OpCount>,
    pub total_multiply_accumulates: u128,
    pub total_parameters: u64,
    pub total_standard_equivalent: u128,
}

impl Profile {
    /// Multiply-accumulates and standard equivalents of layers whose label
    /// starts with `prefix`.
    pub fn stage(&self, prefix: &str) -> (u128, u128) {
        self.layers
            .iter()
            .filter(|l| l.layer_label.starts_with(prefix))
            .fold((0, 0), |(a, s), l| (a + l.multiply_accumulates, s + l.standard_equivalent))
    }

    /// Fraction of the standard-equivalent count saved by separable layers.
    pub fn savings(&self) -> f64 {
        if self.total_standard_equivalent == 0 {
            return 0.0;
        }
        1.0 - self.total_multiply_accumulates as f64 / self.total_standard_equivalent as f64
    }
}

fn layer_count(layer: &PlannedLayer) -> Result<OpCount> {
    let (h, w) = (layer.out_hw.0 as u64, layer.out_hw.1 as u64);
    let (macs, standard) = match &layer.kind {
        PlannedKind::Conv(kind, s) => {
            let (k, ci, co) = (s.kernel_size as u64, s.in_channels as u64, s.out_channels as u64);
            match kind {
                ConvKind::Standard => {
                    let n = ops_standard(h, w, k, ci, co)?;
                    (n, n)
                }
                ConvKind::Separable => (ops_separable(h, w, k, ci, co)?.2, ops_standard(h, w, k, ci, co)?),
                ConvKind::Pointwise => {
                    let n = ops_standard(h, w, 1, ci, co)?;
                    (n, n)
                }
            }
        }
        PlannedKind::Norm(_) => (0, 0),
        PlannedKind::Matrix { rows, cols } => {
            let n = *rows as u128 * *cols as u128;
            (n, n)
        }
    };
    Ok(OpCount {
        layer_label: layer.label.clone(),
        multiply_accumulates: macs,
        parameters: layer.parameters() as u64,
        standard_equivalent: standard,
    })
}

/// Counts for an explicit list of layers.
pub fn profile_plan(plan: &[PlannedLayer]) -> Result<Profile> {
    let layers = plan.iter().map(layer_count).collect::<Result<Vec<_>>>()?;
    Ok(Profile {
        total_multiply_accumulates: layers.iter().map(|l| l.multiply_accumulates).sum(),
        total_parameters: layers.iter().map(|l| l.parameters).sum(),
        total_standard_equivalent: layers.iter().map(|l| l.standard_equivalent).sum(),
        layers,
    })
}

/// Counts for one `h x w` image through the whole model.
pub fn profile_model(cfg: &ModelConfig, h: usize, w: usize) -> Result<Profile> {
    profile_plan(&layer_plan(cfg, h, w)?)
}

/// Aligned text table with a totals row.
pub fn render_table(profile: &Profile) -> String {
    let label_w = profile
        .layers
        .iter()
        .map(|l| l.layer_label.len())
        .chain(std::iter::once(5))
        .max()
        .unwrap_or(5);
    let mut out = format!(
        "{:<label_w$}  {:>16}  {:>12}  {:>16}\n",
        "layer", "MACs", "params", "standard MACs"
    );
    let mut row = |label: &str, macs: u128, params: u64, standard: u128| {
        out.push_str(&format!(
            "{label:<label_w$}  {:>16}  {:>12}  {:>16}\n",
            group_digits(macs),
            group_digits(params as u128),
            group_digits(standard)
        ));
    };
    for l in &profile.layers {
        row(&l.layer_label, l.multiply_accumulates, l.parameters, l.standard_equivalent);
    }
    row(
        "total",
        profile.total_multiply_accumulates,
        profile.total_parameters,
        profile.total_standard_equivalent,
    );
    out.push_str(&format!("separable savings: {:.2}%\n", 100.0 * profile.savings()));
    out
}

/// `151165440` as `151,165,440`.
pub fn group_digits(n: u128) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvSpec;
    use crate::model::PyramidConfig;
    use proptest::prelude::*;

    #[test]
    fn discussion_case() {
        let (dw, pw, total) = ops_separable(512, 512, 3, 3, 64).unwrap();
        assert_eq!((dw, pw, total), (7_077_888, 50_331_648, 57_409_536));
        // the literal product; see the separable/standard ratio identity below
        assert_eq!(ops_standard(512, 512, 3, 3, 64).unwrap(), 452_984_832);
    }

    #[test]
    fn layer_cost_ratio() {
        let c = layer_cost(512, 512, 3, 3, 64).unwrap();
        assert_eq!(c.separable, 57_409_536);
        assert!((c.ratio - (1.0 / 64.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(ops_standard(1, 1, 1, 1, 1).unwrap(), 1);
        assert_eq!(ops_standard(7, 5, 1, 3, 4).unwrap(), 7 * 5 * 3 * 4);
        let (dw, pw, total) = ops_separable(7, 5, 1, 3, 4).unwrap();
        assert_eq!(dw, 7 * 5 * 3);
        assert_eq!(pw, 4 * dw);
        assert_eq!(total, 7 * 5 * 3 * (1 + 4));
        assert!(matches!(ops_standard(0, 1, 1, 1, 1), Err(Error::Domain(_))));
        assert!(matches!(ops_separable(1, 1, 1, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn no_overflow_at_2_pow_16() {
        let m = 1u64 << 16;
        assert_eq!(ops_standard(m, m, m, m, m).unwrap(), 1u128 << 96);
    }

    #[test]
    fn grouped_digits() {
        assert_eq!(group_digits(151_165_440), "151,165,440");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
        assert_eq!(group_digits(0), "0");
    }

    fn single(kind: ConvKind, spec: ConvSpec, hw: (usize, usize)) -> PlannedLayer {
        PlannedLayer {
            label: "only".into(),
            kind: PlannedKind::Conv(kind, spec),
            out_hw: hw,
        }
    }

    #[test]
    fn single_layer_model_matches_the_formula() {
        let spec = ConvSpec::new(3, 64, 3).same();
        let p = profile_plan(&[single(ConvKind::Standard, spec, (512, 512))]).unwrap();
        assert_eq!(p.total_multiply_accumulates, ops_standard(512, 512, 3, 3, 64).unwrap());
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.total_parameters, 3 * 64 * 9 + 64);
    }

    #[test]
    fn norm_rows_cost_nothing() {
        let plan = layer_plan(&ModelConfig::toy(), 64, 64).unwrap();
        let p = profile_plan(&plan).unwrap();
        for l in p.layers.iter().filter(|l| l.layer_label.ends_with(".bn")) {
            assert_eq!(l.multiply_accumulates, 0);
            assert!(l.parameters > 0);
        }
    }

    #[test]
    fn profile_parameters_match_the_model() {
        let cfg = ModelConfig::toy();
        let p = profile_model(&cfg, 64, 64).unwrap();
        assert_eq!(p.total_parameters as usize, crate::model::count_parameters(&cfg).unwrap());
    }

    #[test]
    fn cascade_layers_use_grown_channels() {
        let cfg = ModelConfig::toy();
        let PyramidConfig::Dense(d) = &cfg.pyramid else { panic!("toy is dense") };
        let c0 = cfg.backbone.high_channels() as u64;
        let g = d.growth_channels as u64;
        let hw = 64 / cfg.backbone.high_output_stride as u64;
        let p = profile_model(&cfg, 64, 64).unwrap();
        let cascade: Vec<&OpCount> = p
            .layers
            .iter()
            .filter(|l| l.layer_label.starts_with("pyramid.layer") && !l.layer_label.ends_with(".bn"))
            .collect();
        assert_eq!(cascade.len(), d.dilation_rates.len());
        for (l, layer) in cascade.iter().enumerate() {
            let ci = c0 + l as u64 * g;
            assert_eq!(layer.multiply_accumulates, ops_separable(hw, hw, 3, ci, g).unwrap().2);
        }
    }

    #[test]
    fn swapping_to_standard_scales_each_layer_by_the_inverse_ratio() {
        let cfg = ModelConfig::default();
        let plan = layer_plan(&cfg, 64, 64).unwrap();
        let swapped: Vec<PlannedLayer> = plan
            .iter()
            .map(|l| match &l.kind {
                PlannedKind::Conv(ConvKind::Separable, s) => PlannedLayer {
                    kind: PlannedKind::Conv(ConvKind::Standard, *s),
                    ..l.clone()
                },
                _ => l.clone(),
            })
            .collect();
        let (a, b) = (profile_plan(&plan).unwrap(), profile_plan(&swapped).unwrap());
        for ((x, y), l) in a.layers.iter().zip(&b.layers).zip(&plan) {
            if let PlannedKind::Conv(ConvKind::Separable, s) = &l.kind {
                // standard / separable = 1 / (1/C_out + 1/K^2) = C_out K^2 / (K^2 + C_out)
                let (k2, co) = ((s.kernel_size * s.kernel_size) as u128, s.out_channels as u128);
                assert_eq!(y.multiply_accumulates * (k2 + co), x.multiply_accumulates * k2 * co);
            } else {
                assert_eq!(x, y);
            }
        }
        let (sep, standard) = a.stage("pyramid");
        assert_eq!(b.stage("pyramid"), (standard, standard));
        assert!(sep < standard);
    }

    #[test]
    fn dilation_leaves_counts_unchanged() {
        let base = ConvSpec::new(16, 32, 3).same();
        for kind in [ConvKind::Standard, ConvKind::Separable] {
            let counts: Vec<Profile> = [1, 2, 6, 12]
                .iter()
                .map(|&d| profile_plan(&[single(kind, base.with_dilation(d).same(), (32, 32))]).unwrap())
                .collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn table_has_a_row_per_layer_and_totals() {
        let p = profile_model(&ModelConfig::toy(), 64, 64).unwrap();
        let t = render_table(&p);
        assert_eq!(t.lines().count(), p.layers.len() + 3);
        assert!(t.lines().any(|l| l.starts_with("total")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn ratio_identity(h in 1u64..2048, w in 1u64..2048, k in 1u64..12, ci in 1u64..1024, co in 1u64..1024) {
            let standard = ops_standard(h, w, k, ci, co).unwrap();
            let (_, _, sep) = ops_separable(h, w, k, ci, co).unwrap();
            // sep / standard == 1/C_out + 1/K^2, cross-multiplied
            let k2 = (k * k) as u128;
            prop_assert_eq!(sep * co as u128 * k2, standard * (k2 + co as u128));
        }
    }
}
