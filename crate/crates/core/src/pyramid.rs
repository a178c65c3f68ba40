//! Multi-rate context aggregation: the parallel ASPP baseline and the dense
//! cascade of depthwise dilated separable layers.

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::layers::{ConvKind, ConvLayer};
use crate::ops;
use crate::param::{join, Entry, Init, Module};
use crate::tensor::Tensor;

fn check_rates(rates: &[usize], what: &str) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::config(format!("{what}: dilation rate list is empty")));
    }
    if rates.contains(&0) {
        return Err(Error::config(format!("{what}: dilation rates must be positive")));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "{what}: dilation rates must be strictly increasing, got {rates:?}"
        )));
    }
    Ok(())
}

fn positive(v: usize, what: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::config(format!("{what} must be positive")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsppConfig {
    pub dilation_rates: Vec<usize>,
    pub branch_channels: usize,
    pub include_image_pooling: bool,
    pub projection_channels: usize,
}

impl Default for AsppConfig {
    fn default() -> Self {
        AsppConfig {
            dilation_rates: vec![6, 12, 18, 24],
            branch_channels: 64,
            include_image_pooling: false,
            projection_channels: 256,
        }
    }
}

impl AsppConfig {
    pub fn validate(&self) -> Result<()> {
        check_rates(&self.dilation_rates, "aspp")?;
        positive(self.branch_channels, "aspp branch_channels")?;
        positive(self.projection_channels, "aspp projection_channels")
    }

    pub fn num_branches(&self) -> usize {
        self.dilation_rates.len() + usize::from(self.include_image_pooling)
    }

    /// Channels entering the 1x1 projection.
    pub fn concat_channels(&self) -> usize {
        self.branch_channels * self.num_branches()
    }

    /// Largest single-branch receptive field; branches run in parallel, so
    /// fields do not compose.
    pub fn receptive_field(&self) -> usize {
        self.dilation_rates
            .iter()
            .map(|&d| ConvSpec::new(1, 1, 3).with_dilation(d).effective_extent())
            .max()
            .unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseDdssppConfig {
    pub dilation_rates: Vec<usize>,
    pub growth_channels: usize,
    pub projection_channels: usize,
    pub kernel_size: usize,
}

impl Default for DenseDdssppConfig {
    fn default() -> Self {
        DenseDdssppConfig {
            dilation_rates: vec![3, 6, 12, 18],
            growth_channels: 64,
            projection_channels: 256,
            kernel_size: 3,
        }
    }
}

impl DenseDdssppConfig {
    pub fn validate(&self) -> Result<()> {
        check_rates(&self.dilation_rates, "dense pyramid")?;
        positive(self.growth_channels, "growth_channels")?;
        positive(self.projection_channels, "projection_channels")?;
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("dense pyramid kernel_size must be odd"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.dilation_rates.len()
    }

    /// Input channels of cascade layer `l` (0-based): `C_0 + l * g`.
    pub fn layer_in_channels(&self, c0: usize, l: usize) -> usize {
        c0 + l * self.growth_channels
    }

    /// Channels entering the 1x1 projection: `C_0 + L * g`.
    pub fn concat_channels(&self, c0: usize) -> usize {
        self.layer_in_channels(c0, self.num_layers())
    }

    pub fn layer_spec(&self, c0: usize, l: usize) -> ConvSpec {
        ConvSpec::new(self.layer_in_channels(c0, l), self.growth_channels, self.kernel_size)
            .with_dilation(self.dilation_rates[l])
            .with_bias(false)
            .same()
    }
}

/// Receptive field of the deepest path through the cascade:
/// `1 + sum(extent(d_l) - 1)`.
pub fn cascade_receptive_field(cfg: &DenseDdssppConfig) -> usize {
    let chain: Vec<ConvSpec> = (0..cfg.num_layers()).map(|l| cfg.layer_spec(1, l)).collect();
    crate::conv::receptive_field(&chain).0
}

/// Parallel dilated 3x3 branches over one input, concatenated and projected.
#[derive(Debug)]
pub struct Aspp {
    pub config: AsppConfig,
    pub in_channels: usize,
    pub branches: Vec<ConvLayer>,
    /// Global average pool, 1x1 conv and ReLU, broadcast back to the input size.
    pub image_pool: Option<ConvLayer>,
    pub projection: ConvLayer,
}

impl Aspp {
    pub fn new(config: AsppConfig, in_channels: usize, init: &mut Init) -> Result<Self> {
        config.validate()?;
        positive(in_channels, "aspp input channels")?;
        let b = config.branch_channels;
        let branches = config
            .dilation_rates
            .iter()
            .map(|&d| {
                let spec = ConvSpec::new(in_channels, b, 3).with_dilation(d).with_bias(false).same();
                ConvLayer::init(ConvKind::Standard, spec, true, true, init)
            })
            .collect::<Result<Vec<_>>>()?;
        let image_pool = if config.include_image_pooling {
            Some(ConvLayer::init(ConvKind::Pointwise, ConvSpec::new(in_channels, b, 1), false, true, init)?)
        } else {
            None
        };
        let projection = ConvLayer::init(
            ConvKind::Pointwise,
            ConvSpec::new(config.concat_channels(), config.projection_channels, 1).with_bias(false),
            true,
            true,
            init,
        )?;
        Ok(Aspp {
            config,
            in_channels,
            branches,
            image_pool,
            projection,
        })
    }

    /// Branch outputs concatenated in rate order, image pooling last.
    pub fn forward_features(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let s = x.shape();
        let mut parts = self
            .branches
            .iter()
            .map(|b| b.forward(x, training))
            .collect::<Result<Vec<_>>>()?;
        if let Some(pool) = &self.image_pool {
            let z = pool.forward(&ops::global_avg_pool(x)?, training)?;
            parts.push(ops::broadcast_spatial(&z, s.h, s.w)?);
        }
        ops::concat_channels(&parts)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.projection.forward(&self.forward_features(x, training)?, training)
    }

    pub fn out_channels(&self) -> usize {
        self.config.projection_channels
    }
}

impl Module for Aspp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
        self.image_pool.visit(&join(prefix, "image_pool"), f);
        self.projection.visit(&join(prefix, "projection"), f);
    }
}

/// Cascade of separable layers with ascending rates. Layer `l` sees
/// `[Y_{l-1}, ..., Y_1, x]` and contributes `g` new channels.
#[derive(Debug)]
pub struct DenseDdsspp {
    pub config: DenseDdssppConfig,
    pub in_channels: usize,
    pub layers: Vec<ConvLayer>,
    pub projection: ConvLayer,
}

impl DenseDdsspp {
    pub fn new(config: DenseDdssppConfig, in_channels: usize, init: &mut Init) -> Result<Self> {
        config.validate()?;
        positive(in_channels, "dense pyramid input channels")?;
        let layers = (0..config.num_layers())
            .map(|l| ConvLayer::init(ConvKind::Separable, config.layer_spec(in_channels, l), true, true, init))
            .collect::<Result<Vec<_>>>()?;
        let projection = ConvLayer::init(
            ConvKind::Pointwise,
            ConvSpec::new(config.concat_channels(in_channels), config.projection_channels, 1)
                .with_bias(false),
            true,
            true,
            init,
        )?;
        Ok(DenseDdsspp {
            config,
            in_channels,
            layers,
            projection,
        })
    }

    /// Assembles a cascade from prebuilt layers, checking the channel schedule.
    pub fn from_layers(
        config: DenseDdssppConfig,
        in_channels: usize,
        layers: Vec<ConvLayer>,
        projection: ConvLayer,
    ) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.num_layers() {
            return Err(Error::shape(format!(
                "{} cascade layers for {} dilation rates",
                layers.len(),
                config.num_layers()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (ci, co) = (config.layer_in_channels(in_channels, l), config.growth_channels);
            if layer.spec.in_channels != ci || layer.spec.out_channels != co {
                return Err(Error::shape(format!(
                    "cascade layer {l} maps {} -> {} channels, schedule needs {ci} -> {co}",
                    layer.spec.in_channels, layer.spec.out_channels
                )));
            }
        }
        let cc = config.concat_channels(in_channels);
        if projection.spec.in_channels != cc || projection.spec.out_channels != config.projection_channels {
            return Err(Error::shape(format!(
                "projection maps {} -> {}, schedule needs {cc} -> {}",
                projection.spec.in_channels, projection.spec.out_channels, config.projection_channels
            )));
        }
        Ok(DenseDdsspp {
            config,
            in_channels,
            layers,
            projection,
        })
    }

    /// The full concatenation `[Y_L, ..., Y_1, x]` before projection.
    pub fn forward_features(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        if x.shape().c != self.in_channels {
            return Err(Error::shape(format!(
                "dense pyramid expects {} input channels, got {}",
                self.in_channels,
                x.shape().c
            )));
        }
        let mut features = x.clone();
        for layer in &self.layers {
            let y = layer.forward(&features, training)?;
            features = ops::concat_channels(&[y, features])?;
        }
        Ok(features)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.projection.forward(&self.forward_features(x, training)?, training)
    }

    pub fn out_channels(&self) -> usize {
        self.config.projection_channels
    }

    pub fn receptive_field(&self) -> usize {
        cascade_receptive_field(&self.config)
    }
}

impl Module for DenseDdsspp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{l}")), f);
        }
        self.projection.visit(&join(prefix, "projection"), f);
    }
}
