//! Forward-backward camera-to-BEV view transformation.
//!
//! The forward path lifts per-camera features along their rays with a
//! categorical depth distribution and sum-pools them into a bird's-eye-view
//! grid ([`fvtm`]). A foreground mask ([`frpn`]) picks the cells worth
//! refining, and a single depth-aware backward pass ([`bvtm`]) projects those
//! cells back into the cameras and fills them with depth-consistency-weighted
//! deformable samples. [`pipeline`] runs the whole chain on ray-cast
//! synthetic scenes.

pub mod bvtm;
pub mod depth;
pub mod error;
pub mod feature;
pub mod frpn;
pub mod fvtm;
pub mod geometry;
pub mod io;
pub mod pipeline;

pub use nalgebra;

pub use bvtm::{
    deformable_sample, project_refs, reference_points, refine, sca, sca_da, BackwardConfig,
    DeformableParams, HeightSampling, Linear, Normalization, RefHit,
};
pub use depth::{
    consistency, oracle_distribution, two_hot, DepthBins, DepthDistMap, DepthDistribution, TwoHot,
};
pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use frpn::{
    bce_loss, dice_loss, mask_head, rasterize_gt_mask, select_queries, BevQuery, Box3D,
    ForegroundMask, MaskHeadWeights,
};
pub use fvtm::{
    forward_vtm, lift, occupancy_stats, splat_naive, splat_pooled, splat_pooled_with_workers,
    BevGrid, BevSpec, ForwardProjector, LiftedPoints, SparsityReport,
};
pub use geometry::{build_frustum, Camera, FrustumPoints, ProjectionHit, Rig};
pub use pipeline::{
    nds, render_depth, render_features, run_pipeline, warp_and_stack, EgoPose, PipelineConfig,
    PipelineOutput, Scene, SceneObject, TpErrors,
};
