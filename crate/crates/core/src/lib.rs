//! Multi-view feature augmentation for fine-grained image classification.
//!
//! A CNN backbone produces feature maps; an auxiliary 1x1-conv head yields a
//! label-free attention map (AdaCAM) whose strongest positions anchor
//! square crops. Each crop is average-pooled into a local view, and a main
//! head is trained on, and ensembles over, all views.

pub mod adacam;
pub mod backbone;
pub mod datalab;
pub mod error;
pub mod heads;
pub mod numerics;
pub mod sampler;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, Stage};
pub use datalab::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use heads::{HeadKind, MainHead, MlpVariant, Prediction, ProtoLoss};
pub use numerics::{Graph, NodeId, ParamSet, Tensor};
pub use sampler::{AnchorSet, Coord, Region, RegionSizes};
pub use trainer::{Mode, Model, TrainConfig};
