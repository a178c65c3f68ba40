//! Miniature Xception-style encoder and the encoder-decoder segmentation
//! model built around a pyramid module and a squeeze-and-excitation decoder.

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result, StageExt};
use crate::layers::{ConvKind, ConvLayer};
use crate::ops;
use crate::param::{join, Entry, Init, Module};
use crate::pyramid::{Aspp, AsppConfig, DenseDdsspp, DenseDdssppConfig};
use crate::se::{SeWeights, DEFAULT_REDUCTION};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Separable convolutions on the main path; the last one carries the stride.
    pub sepconvs: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockConfig>,
    /// Index of the block whose output is the low-level feature map.
    pub low_tap_index: usize,
    /// Index of the block whose output feeds the pyramid; must be the last block.
    pub high_tap_index: usize,
    pub low_output_stride: usize,
    pub high_output_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::with_widths(16, [32, 64, 128], 2)
    }
}

impl BackboneConfig {
    /// Stem at stride 2 and three stride-2 blocks, tapped after the first
    /// (stride 4) and the last (stride 16).
    pub fn with_widths(stem: usize, widths: [usize; 3], sepconvs: usize) -> Self {
        BackboneConfig {
            stem_channels: stem,
            stem_stride: 2,
            blocks: widths
                .iter()
                .map(|&w| BlockConfig {
                    sepconvs,
                    out_channels: w,
                    stride: 2,
                })
                .collect(),
            low_tap_index: 0,
            high_tap_index: 2,
            low_output_stride: 4,
            high_output_stride: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stem_stride == 0 {
            return Err(Error::config("stem channels and stride must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.sepconvs == 0 || b.out_channels == 0 || b.stride == 0 {
                return Err(Error::config(format!(
                    "block {i}: sepconvs, out_channels and stride must be positive"
                )));
            }
        }
        if self.low_tap_index >= self.high_tap_index {
            return Err(Error::config(format!(
                "low tap {} must precede high tap {}",
                self.low_tap_index, self.high_tap_index
            )));
        }
        if self.high_tap_index + 1 != self.blocks.len() {
            return Err(Error::config(format!(
                "high tap {} must be the last of {} blocks",
                self.high_tap_index,
                self.blocks.len()
            )));
        }
        let low = self.stride_after(self.low_tap_index);
        let high = self.stride_after(self.high_tap_index);
        if low != self.low_output_stride || high != self.high_output_stride {
            return Err(Error::config(format!(
                "tap strides are {low} and {high}, declared {} and {}",
                self.low_output_stride, self.high_output_stride
            )));
        }
        Ok(())
    }

    /// Cumulative stride at the output of block `i`.
    pub fn stride_after(&self, i: usize) -> usize {
        self.blocks[..=i.min(self.blocks.len().saturating_sub(1))]
            .iter()
            .fold(self.stem_stride, |s, b| s * b.stride)
    }

    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_channels
        } else {
            self.blocks[i - 1].out_channels
        }
    }

    pub fn low_channels(&self) -> usize {
        self.blocks[self.low_tap_index].out_channels
    }

    pub fn high_channels(&self) -> usize {
        self.blocks[self.high_tap_index].out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PyramidConfig {
    Dense(DenseDdssppConfig),
    Aspp(AsppConfig),
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            PyramidConfig::Dense(c) => c.validate(),
            PyramidConfig::Aspp(c) => c.validate(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            PyramidConfig::Dense(c) => c.projection_channels,
            PyramidConfig::Aspp(c) => c.projection_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pyramid: PyramidConfig,
    pub se_reduction: usize,
    pub decoder_channels: usize,
    /// Width of the 1x1 projection applied to the low-level features.
    pub low_proj_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            pyramid: PyramidConfig::Dense(DenseDdssppConfig::default()),
            se_reduction: DEFAULT_REDUCTION,
            decoder_channels: 256,
            low_proj_channels: 48,
            num_classes: 1,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for desk-scale training runs: backbone
    /// widths 16/32/64, dense rates {3, 6, 12} with growth 8.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::with_widths(8, [16, 32, 64], 2),
            pyramid: PyramidConfig::Dense(DenseDdssppConfig {
                dilation_rates: vec![3, 6, 12],
                growth_channels: 8,
                projection_channels: 32,
                kernel_size: 3,
            }),
            se_reduction: 2,
            decoder_channels: 32,
            low_proj_channels: 16,
            num_classes: 1,
        }
    }

    /// The same model with an ASPP pyramid of matching rates and widths.
    pub fn with_aspp_pyramid(&self) -> Self {
        let pyramid = match &self.pyramid {
            PyramidConfig::Dense(d) => PyramidConfig::Aspp(AsppConfig {
                dilation_rates: d.dilation_rates.clone(),
                branch_channels: d.growth_channels,
                include_image_pooling: false,
                projection_channels: d.projection_channels,
            }),
            other => other.clone(),
        };
        ModelConfig {
            pyramid,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pyramid.validate()?;
        if self.num_classes != 1 {
            return Err(Error::config(format!(
                "only a single-channel road head is supported, got num_classes = {}",
                self.num_classes
            )));
        }
        if self.se_reduction == 0 || self.decoder_channels == 0 || self.low_proj_channels == 0 {
            return Err(Error::config(
                "se_reduction, decoder_channels and low_proj_channels must be positive",
            ));
        }
        let (lo, hi) = (self.backbone.low_output_stride, self.backbone.high_output_stride);
        if hi % lo != 0 {
            return Err(Error::config(format!(
                "high stride {hi} is not a multiple of low stride {lo}"
            )));
        }
        Ok(())
    }

    /// Channels entering the squeeze-and-excitation block.
    pub fn decoder_concat_channels(&self) -> usize {
        self.pyramid.out_channels() + self.low_proj_channels
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.backbone.high_output_stride;
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::shape(format!(
                "input {h}x{w} is not a positive multiple of the output stride {s}"
            )));
        }
        Ok(())
    }
}

fn sep(ci: usize, co: usize, stride: usize) -> ConvSpec {
    ConvSpec::new(ci, co, 3).with_stride(stride).with_bias(false).same()
}

/// Separable convolutions with a strided 1x1 shortcut:
/// `relu(bn(sep_k(...relu(bn(sep_1(x)))...)) + bn(conv1x1(x)))`.
#[derive(Debug)]
pub struct XceptionBlock {
    pub main: Vec<ConvLayer>,
    /// `None` when input and output shapes already agree.
    pub shortcut: Option<ConvLayer>,
}

impl XceptionBlock {
    pub fn new(ci: usize, cfg: &BlockConfig, init: &mut Init) -> Result<Self> {
        let co = cfg.out_channels;
        let main = (0..cfg.sepconvs)
            .map(|i| {
                let last = i + 1 == cfg.sepconvs;
                let spec = sep(if i == 0 { ci } else { co }, co, if last { cfg.stride } else { 1 });
                ConvLayer::init(ConvKind::Separable, spec, true, !last, init)
            })
            .collect::<Result<Vec<_>>>()?;
        let shortcut = if ci != co || cfg.stride != 1 {
            let spec = ConvSpec::new(ci, co, 1).with_stride(cfg.stride).with_bias(false);
            Some(ConvLayer::init(ConvKind::Standard, spec, true, false, init)?)
        } else {
            None
        };
        Ok(XceptionBlock { main, shortcut })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for layer in &self.main {
            y = layer.forward(&y, training)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, training)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&y, &skip)?))
    }
}

impl Module for XceptionBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        for (i, l) in self.main.iter().enumerate() {
            l.visit(&join(prefix, &format!("sepconv{}", i + 1)), f);
        }
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvLayer,
    pub blocks: Vec<XceptionBlock>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let stem_spec = ConvSpec::new(3, config.stem_channels, 3)
            .with_stride(config.stem_stride)
            .with_bias(false)
            .same();
        let stem = ConvLayer::init(ConvKind::Standard, stem_spec, true, true, init)?;
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| XceptionBlock::new(config.block_in_channels(i), b, init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone { config, stem, blocks })
    }

    /// Low-level (stride 4) and high-level (stride 16) feature maps.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, Tensor)> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::shape(format!("expected an RGB input, got {s}")));
        }
        let stride = self.config.high_output_stride;
        if !s.h.is_multiple_of(stride) || !s.w.is_multiple_of(stride) || s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!(
                "input {}x{} is not a positive multiple of the output stride {stride}",
                s.h, s.w
            )));
        }
        let mut y = self.stem.forward(x, training)?;
        let mut low = None;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(&y, training)?;
            if i == self.config.low_tap_index {
                low = Some(y.clone());
            }
        }
        let low = low.ok_or_else(|| Error::config("low tap index beyond the last block"))?;
        Ok((low, y))
    }
}

impl Module for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), f);
        }
    }
}

#[derive(Debug)]
pub enum Pyramid {
    Dense(DenseDdsspp),
    Aspp(Aspp),
}

impl Pyramid {
    pub fn new(config: &PyramidConfig, in_channels: usize, init: &mut Init) -> Result<Self> {
        Ok(match config {
            PyramidConfig::Dense(c) => Pyramid::Dense(DenseDdsspp::new(c.clone(), in_channels, init)?),
            PyramidConfig::Aspp(c) => Pyramid::Aspp(Aspp::new(c.clone(), in_channels, init)?),
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            Pyramid::Dense(p) => p.forward(x, training),
            Pyramid::Aspp(p) => p.forward(x, training),
        }
    }
}

impl Module for Pyramid {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        match self {
            Pyramid::Dense(p) => p.visit(prefix, f),
            Pyramid::Aspp(p) => p.visit(prefix, f),
        }
    }
}

/// Encoder, pyramid, decoder concatenation, channel attention, two 3x3
/// convolutions, a 1x1 head, bilinear upsampling to input size and a sigmoid.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub low_proj: ConvLayer,
    pub se: SeWeights,
    pub decoder: [ConvLayer; 2],
    pub head: ConvLayer,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let init = &mut init;
        let backbone = Backbone::new(config.backbone.clone(), init)?;
        let pyramid = Pyramid::new(&config.pyramid, config.backbone.high_channels(), init)?;
        let low_proj = ConvLayer::init(
            ConvKind::Pointwise,
            ConvSpec::new(config.backbone.low_channels(), config.low_proj_channels, 1).with_bias(false),
            true,
            true,
            init,
        )?;
        let cat = config.decoder_concat_channels();
        let se = SeWeights::init(cat, config.se_reduction, init)?;
        let dc = config.decoder_channels;
        let decoder = [
            ConvLayer::init(ConvKind::Standard, ConvSpec::new(cat, dc, 3).with_bias(false).same(), true, true, init)?,
            ConvLayer::init(ConvKind::Standard, ConvSpec::new(dc, dc, 3).with_bias(false).same(), true, true, init)?,
        ];
        let head = ConvLayer::init(ConvKind::Pointwise, ConvSpec::new(dc, config.num_classes, 1), false, false, init)?;
        Ok(Model {
            config,
            backbone,
            pyramid,
            low_proj,
            se,
            decoder,
            head,
        })
    }

    /// Pre-sigmoid scores at input resolution.
    pub fn forward_logits(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (low, high) = self.backbone.forward(x, training).stage("backbone")?;
        let context = self.pyramid.forward(&high, training).stage("pyramid")?;
        let b = &self.config.backbone;
        let up = ops::bilinear_upsample(&context, b.high_output_stride / b.low_output_stride)
            .stage("decoder upsample")?;
        let low = self.low_proj.forward(&low, training).stage("low-level projection")?;
        let cat = ops::concat_channels(&[up, low]).stage("decoder concat")?;
        let mut y = self.se.forward(&cat).stage("channel attention")?;
        for layer in &self.decoder {
            y = layer.forward(&y, training).stage("decoder conv")?;
        }
        let y = self.head.forward(&y, training).stage("head")?;
        ops::bilinear_upsample(&y, b.low_output_stride).stage("output upsample")
    }

    /// Road probabilities, `(n, 1, h, w)`.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.forward_logits(x, training)?))
    }

    /// Inference-mode probabilities for an image of any size. The input is
    /// edge-replicated up to a multiple of the encoder stride and the output
    /// cropped back.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!("cannot predict on an empty input {s}")));
        }
        let m = self.config.backbone.high_output_stride;
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        if (ph, pw) == (s.h, s.w) {
            return no_grad(|| self.forward(x, false));
        }
        let padded = Tensor::from_fn(s.with_spatial(ph, pw), |n, c, y, u| x.at(n, c, y.min(s.h - 1), u.min(s.w - 1)));
        let p = no_grad(|| self.forward(&padded, false))?;
        Ok(Tensor::from_fn(p.shape().with_spatial(s.h, s.w), |n, c, y, u| p.at(n, c, y, u)))
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.pyramid.visit(&join(prefix, "pyramid"), f);
        self.low_proj.visit(&join(prefix, "low_proj"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.decoder[0].visit(&join(prefix, "decoder1"), f);
        self.decoder[1].visit(&join(prefix, "decoder2"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// One convolution (or normalization) layer of a model, as laid out for
/// counting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedLayer {
    pub label: String,
    pub kind: PlannedKind,
    /// Output spatial size.
    pub out_hw: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlannedKind {
    Conv(ConvKind, ConvSpec),
    /// Batch norm over this many channels.
    Norm(usize),
    /// Bias-free 1x1 gating matrix applied to pooled features.
    Matrix { rows: usize, cols: usize },
}

impl PlannedLayer {
    pub fn parameters(&self) -> usize {
        match &self.kind {
            PlannedKind::Conv(ConvKind::Standard, s) => s.standard_params(),
            PlannedKind::Conv(ConvKind::Separable, s) => s.separable_params(),
            PlannedKind::Conv(ConvKind::Pointwise, s) => {
                s.in_channels * s.out_channels + if s.has_bias { s.out_channels } else { 0 }
            }
            PlannedKind::Norm(c) => 2 * c,
            PlannedKind::Matrix { rows, cols } => rows * cols,
        }
    }
}

/// Every parameterized layer of the model for an `h x w` input, in forward
/// order. Derived from the configuration alone.
pub fn layer_plan(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<PlannedLayer>> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let mut plan = Vec::new();
    let mut push = |label: String, kind: ConvKind, spec: ConvSpec, hw: (usize, usize), norm: bool| {
        let c = spec.out_channels;
        plan.push(PlannedLayer {
            label: label.clone(),
            kind: PlannedKind::Conv(kind, spec),
            out_hw: hw,
        });
        if norm {
            plan.push(PlannedLayer {
                label: format!("{label}.bn"),
                kind: PlannedKind::Norm(c),
                out_hw: hw,
            });
        }
    };
    let b = &cfg.backbone;
    let mut hw = (h / b.stem_stride, w / b.stem_stride);
    push(
        "stem".into(),
        ConvKind::Standard,
        ConvSpec::new(3, b.stem_channels, 3).with_stride(b.stem_stride).with_bias(false).same(),
        hw,
        true,
    );
    for (i, blk) in b.blocks.iter().enumerate() {
        let ci = b.block_in_channels(i);
        let co = blk.out_channels;
        for k in 0..blk.sepconvs {
            let last = k + 1 == blk.sepconvs;
            if last {
                hw = (hw.0 / blk.stride, hw.1 / blk.stride);
            }
            let spec = sep(if k == 0 { ci } else { co }, co, if last { blk.stride } else { 1 });
            push(format!("block{}.sepconv{}", i + 1, k + 1), ConvKind::Separable, spec, hw, true);
        }
        if ci != co || blk.stride != 1 {
            let spec = ConvSpec::new(ci, co, 1).with_stride(blk.stride).with_bias(false);
            push(format!("block{}.shortcut", i + 1), ConvKind::Standard, spec, hw, true);
        }
    }
    let high_hw = hw;
    let c_high = b.high_channels();
    match &cfg.pyramid {
        PyramidConfig::Dense(d) => {
            for l in 0..d.num_layers() {
                push(format!("pyramid.layer{l}"), ConvKind::Separable, d.layer_spec(c_high, l), high_hw, true);
            }
            let spec = ConvSpec::new(d.concat_channels(c_high), d.projection_channels, 1).with_bias(false);
            push("pyramid.projection".into(), ConvKind::Pointwise, spec, high_hw, true);
        }
        PyramidConfig::Aspp(a) => {
            for (i, &d) in a.dilation_rates.iter().enumerate() {
                let spec = ConvSpec::new(c_high, a.branch_channels, 3).with_dilation(d).with_bias(false).same();
                push(format!("pyramid.branch{i}"), ConvKind::Standard, spec, high_hw, true);
            }
            if a.include_image_pooling {
                let spec = ConvSpec::new(c_high, a.branch_channels, 1);
                push("pyramid.image_pool".into(), ConvKind::Pointwise, spec, (1, 1), false);
            }
            let spec = ConvSpec::new(a.concat_channels(), a.projection_channels, 1).with_bias(false);
            push("pyramid.projection".into(), ConvKind::Pointwise, spec, high_hw, true);
        }
    }
    let low_hw = (h / b.low_output_stride, w / b.low_output_stride);
    let spec = ConvSpec::new(b.low_channels(), cfg.low_proj_channels, 1).with_bias(false);
    push("low_proj".into(), ConvKind::Pointwise, spec, low_hw, true);
    let cat = cfg.decoder_concat_channels();
    let hidden = crate::se::hidden_channels(cat, cfg.se_reduction);
    let dc = cfg.decoder_channels;
    push("decoder1".into(), ConvKind::Standard, ConvSpec::new(cat, dc, 3).with_bias(false).same(), low_hw, true);
    push("decoder2".into(), ConvKind::Standard, ConvSpec::new(dc, dc, 3).with_bias(false).same(), low_hw, true);
    push("head".into(), ConvKind::Pointwise, ConvSpec::new(dc, cfg.num_classes, 1), low_hw, false);
    // the attention matrices act on pooled features
    let at = plan.iter().position(|l| l.label == "decoder1").expect("decoder planned");
    plan.insert(
        at,
        PlannedLayer {
            label: "se.w1".into(),
            kind: PlannedKind::Matrix { rows: hidden, cols: cat },
            out_hw: (1, 1),
        },
    );
    plan.insert(
        at + 1,
        PlannedLayer {
            label: "se.w2".into(),
            kind: PlannedKind::Matrix { rows: cat, cols: hidden },
            out_hw: (1, 1),
        },
    );
    Ok(plan)
}

/// Exact trainable scalar count, computed from the configuration without
/// building the model.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    let s = cfg.backbone.high_output_stride;
    Ok(layer_plan(cfg, s, s)?.iter().map(PlannedLayer::parameters).sum())
}
