//! Manipulation-localization network.
//!
//! Dual non-causal state-space backbones over the RGB image and its
//! constrained-convolution noise map, fused pyramid features, guided graph
//! blocks on the top-down pathway, a pyramid-pooling detection head, and an
//! upsampling localization head.

mod error;
pub mod gnn;
pub mod layers;
pub mod model;
pub mod params;
pub mod util;
pub mod vssd;

pub use error::{NetError, Result};
pub use gnn::{
    build_knn_graph, downsample_mask, max_relative_conv, partition_pnh, triplet_level_loss,
    triplet_loss, GgnnBlock, GnnWeights, GuidedMask, NodeGraph,
};
pub use layers::{
    bayar_conv, bayar_project, fpn_topdown, BayarFilterBank, Conv2dLayer, DetectionHead,
    FuseLevels, LayerNorm, LevelFeatures, LinearLayer, LocalizationHead, Ppm,
};
pub use model::{bce_loss, composite_loss, dice_loss, ImlModel, LossWeights, ModelConfig, ModelOutput};
pub use params::{named_params, param_count, Params};
pub use vssd::{
    compute_erf, discretize, nc_ssd_aggregate, nc_ssd_aggregate_naive, Backbone, BackboneConfig,
    SsdTokenParams, VssdBlock,
};
