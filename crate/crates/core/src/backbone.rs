//! Small strided CNN producing the `[H, W, C]` feature maps the heads consume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, NodeId, ParamId, ParamSet, Tensor};

/// One conv + relu stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<Stage>,
}

impl Default for BackboneConfig {
    /// 64x64 RGB to 16x16x32.
    fn default() -> Self {
        BackboneConfig {
            input_height: 64,
            input_width: 64,
            stages: vec![
                Stage { out_channels: 16, kernel: 3, stride: 2 },
                Stage { out_channels: 32, kernel: 3, stride: 2 },
            ],
        }
    }
}

fn strided(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

impl BackboneConfig {
    /// `(H, W, C)` of the produced feature maps.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, 3);
        for s in &self.stages {
            h = strided(h, s.stride);
            w = strided(w, s.stride);
            c = s.out_channels;
        }
        (h, w, c)
    }

    /// Checks kernel/stride sanity and that the feature maps can hold a
    /// `min_side`-sized square region.
    pub fn validate(&self, min_side: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("backbone input size must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel % 2 == 0 {
                return Err(Error::Config(format!("stage {i}: kernel {} is not odd", s.kernel)));
            }
            if s.stride == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!("stage {i}: stride and channels must be positive")));
            }
        }
        let (h, w, _) = self.feature_shape();
        let need = min_side.max(3);
        if h < need || w < need {
            return Err(Error::Config(format!(
                "feature maps are {h}x{w}, smaller than the required side {need}"
            )));
        }
        Ok(())
    }
}

/// Backbone weights live in a shared [`ParamSet`]; this holds their ids.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    /// He-style fan-in initialisation, zero biases.
    pub fn init(config: BackboneConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let mut layers = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            let fan_in = (s.kernel * s.kernel * cin) as f64;
            let w = params.push_normal(
                format!("backbone.{i}.weight"),
                &[s.kernel, s.kernel, cin, s.out_channels],
                (2.0 / fan_in).sqrt(),
                rng,
            );
            let b = params.push(format!("backbone.{i}.bias"), Tensor::zeros(&[s.out_channels]));
            layers.push((w, b));
            cin = s.out_channels;
        }
        Backbone { config, layers }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, image: NodeId) -> Result<NodeId> {
        let expected = [self.config.input_height, self.config.input_width, 3];
        if g.shape(image) != expected {
            return Err(Error::Shape {
                node: image.index(),
                op: "backbone_forward",
                expected: format!("{expected:?}"),
                actual: format!("{:?}", g.shape(image)),
            });
        }
        let mut x = image;
        for (stage, &(w, b)) in self.config.stages.iter().zip(&self.layers) {
            let y = g.conv2d(x, bound.node(w), Some(bound.node(b)), stage.stride)?;
            x = g.relu(y)?;
        }
        Ok(x)
    }

    /// Feature maps for one image, without keeping the graph.
    pub fn features(&self, params: &ParamSet, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.input(image.clone());
        let f = self.forward(&mut g, &bound, x)?;
        Ok(g.value(f).clone())
    }
}
