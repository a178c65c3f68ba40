//! Convolution layers with optional batch norm and ReLU, as used by the
//! pyramid modules and the encoder-decoder.

use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::norm::BatchNorm;
use crate::ops;
use crate::param::{join, Entry, Init, Module, Param};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    /// Depthwise (dilated) followed by pointwise.
    Separable,
    /// 1x1 only; kernel size, dilation and stride of the spec are ignored.
    Pointwise,
}

/// conv -> batch norm (optional) -> ReLU (optional).
#[derive(Debug)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub spec: ConvSpec,
    pub standard: Option<Param>,
    pub depthwise: Option<Param>,
    pub pointwise: Option<Param>,
    pub bias: Option<Param>,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl ConvLayer {
    /// He-uniform weights, zero bias, identity batch norm.
    pub fn init(kind: ConvKind, spec: ConvSpec, norm: bool, relu: bool, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let (ci, co, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
        let mut layer = ConvLayer {
            kind,
            spec,
            standard: None,
            depthwise: None,
            pointwise: None,
            bias: None,
            norm: norm.then(|| BatchNorm::identity(co)),
            relu,
        };
        match kind {
            ConvKind::Standard => {
                layer.standard = Some(init.he_uniform(Shape::new(co, ci, k, k), ci * k * k)?)
            }
            ConvKind::Separable => {
                layer.depthwise = Some(init.he_uniform(Shape::new(ci, 1, k, k), k * k)?);
                layer.pointwise = Some(init.he_uniform(Shape::new(co, ci, 1, 1), ci)?);
            }
            ConvKind::Pointwise => {
                layer.pointwise = Some(init.he_uniform(Shape::new(co, ci, 1, 1), ci)?)
            }
        }
        if spec.has_bias {
            layer.bias = Some(init.constant(Shape::new(1, co, 1, 1), 0.0));
        }
        Ok(layer)
    }

    /// Wraps explicit weights, checking them against the spec.
    pub fn from_weights(
        kind: ConvKind,
        spec: ConvSpec,
        weights: ConvWeights,
        norm: Option<BatchNorm>,
        relu: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let (ci, co, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
        let expect = |t: &Option<Tensor>, shape: Shape, what: &str| -> Result<Option<Param>> {
            match t {
                Some(t) if t.shape() == shape => Ok(Some(Param::new(t.clone()))),
                Some(t) => Err(Error::shape(format!(
                    "{what} weight {} should be {shape}",
                    t.shape()
                ))),
                None => Err(Error::shape(format!("missing {what} weight"))),
            }
        };
        let mut layer = ConvLayer {
            kind,
            spec,
            standard: None,
            depthwise: None,
            pointwise: None,
            bias: None,
            norm,
            relu,
        };
        match kind {
            ConvKind::Standard => {
                layer.standard = expect(&weights.standard, Shape::new(co, ci, k, k), "standard")?
            }
            ConvKind::Separable => {
                layer.depthwise = expect(&weights.depthwise, Shape::new(ci, 1, k, k), "depthwise")?;
                layer.pointwise = expect(&weights.pointwise, Shape::new(co, ci, 1, 1), "pointwise")?;
            }
            ConvKind::Pointwise => {
                layer.pointwise = expect(&weights.pointwise, Shape::new(co, ci, 1, 1), "pointwise")?
            }
        }
        if spec.has_bias {
            layer.bias = expect(&weights.bias, Shape::new(1, co, 1, 1), "bias")?;
        }
        if let Some(bn) = &layer.norm {
            if bn.channels() != co {
                return Err(Error::shape(format!(
                    "batch norm has {} channels, layer outputs {co}",
                    bn.channels()
                )));
            }
        }
        Ok(layer)
    }

    pub fn weights(&self) -> ConvWeights {
        ConvWeights {
            standard: self.standard.as_ref().map(Param::get),
            depthwise: self.depthwise.as_ref().map(Param::get),
            pointwise: self.pointwise.as_ref().map(Param::get),
            bias: self.bias.as_ref().map(Param::get),
        }
    }

    /// The convolution alone, before normalization and activation.
    pub fn conv(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weights();
        match self.kind {
            ConvKind::Standard => conv::conv2d(x, &w, &self.spec),
            ConvKind::Separable => conv::depthwise_dilated_separable(x, &w, &self.spec),
            ConvKind::Pointwise => conv::pointwise_conv2d(x, &w),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = self.conv(x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(&y, training)?;
        }
        if self.relu {
            y = ops::relu(&y);
        }
        Ok(y)
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }
}

impl Module for ConvLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        let named = [
            ("weight", &self.standard),
            ("depthwise", &self.depthwise),
            ("pointwise", &self.pointwise),
            ("bias", &self.bias),
        ];
        for (name, p) in named {
            if let Some(p) = p {
                f(join(prefix, name), Entry::Param(p));
            }
        }
        self.norm.visit(&join(prefix, "bn"), f);
    }
}
