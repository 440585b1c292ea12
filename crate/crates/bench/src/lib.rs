//! Deterministic workloads for the kernel benchmarks.

use fbvt_core::io::reference_rig;
use fbvt_core::pipeline::{render_inputs, CameraInputs, ORACLE_MASK_LOGIT};
use fbvt_core::{
    rasterize_gt_mask, select_queries, splat_pooled, BevGrid, BevQuery, BevSpec, DeformableParams,
    DepthBins, DepthDistMap, DepthDistribution, FeatureMap, ForegroundMask, ForwardProjector,
    LiftedPoints, Rig, Scene,
};

pub const CHANNELS: usize = 16;
pub const HALF_EXTENT: f64 = 51.2;

/// Reference-rig pixels lifted with a uniform depth distribution and a
/// fixed pseudo-random feature pattern.
pub fn lifted_points(rig: &Rig, channels: usize) -> LiftedPoints {
    let bins = DepthBins::default();
    let uniform = DepthDistribution::uniform(bins.count());
    let mut features = Vec::new();
    let mut depths = Vec::new();
    for (ci, c) in rig.cameras().iter().enumerate() {
        let (w, h) = c.feature_size();
        let data = (0..w * h * channels)
            .map(|i| ((i * 7919 + ci * 104_729) as f64 * 0.618_033_988_7).fract() - 0.5)
            .collect();
        features
            .push(FeatureMap::new(w, h, channels, c.feature_stride(), data).expect("sizes agree"));
        depths.push(DepthDistMap::constant(bins, w, h, &uniform).expect("sizes agree"));
    }
    ForwardProjector::new(rig, bins)
        .lift_all(&features, &depths)
        .expect("inputs match the rig")
}

pub fn spec(size: usize, channels: usize) -> BevSpec {
    BevSpec::square(HALF_EXTENT, size, channels).expect("valid BEV spec")
}

/// Everything one backward refinement pass needs.
pub struct RefineWorkload {
    pub scene: Scene,
    pub inputs: CameraInputs,
    pub bev: BevGrid,
    pub queries: Vec<BevQuery>,
    pub params: DeformableParams,
}

/// A seeded street scene with `boxes` cars, forward-projected at `size`,
/// with the oracle foreground mask selecting the queries.
pub fn refine_workload(size: usize, boxes: usize, seed: u64) -> RefineWorkload {
    let bins = DepthBins::default();
    let scene = Scene::random(reference_rig(), boxes, CHANNELS, 0.0, seed).expect("valid scene");
    let inputs = render_inputs(&scene, &bins, 0.5).expect("rendering succeeds");
    let spec = spec(size, CHANNELS);
    let points = ForwardProjector::new(scene.rig(), bins)
        .lift_all(&inputs.features, &inputs.depths)
        .expect("inputs match the rig");
    let bev = splat_pooled(&points, &spec).expect("channels agree");
    let gt = rasterize_gt_mask(&scene.boxes(), &spec);
    let mask =
        ForegroundMask::from_binary(size, size, &gt, ORACLE_MASK_LOGIT).expect("sizes agree");
    let queries = select_queries(&bev, &mask, 0.4).expect("valid threshold");
    let params = DeformableParams::random(CHANNELS, 8, 4, 0.5, seed).expect("valid params");
    RefineWorkload {
        scene,
        inputs,
        bev,
        queries,
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbvt_core::splat_naive;

    #[test]
    fn workloads_are_consistent() {
        let rig = reference_rig();
        let pts = lifted_points(&rig, 4);
        assert_eq!(pts.len(), 6 * 44 * 16 * 118);
        let s = spec(64, 4);
        assert_eq!(
            splat_naive(&pts, &s).unwrap(),
            splat_pooled(&pts, &s).unwrap()
        );
        let w = refine_workload(64, 3, 1);
        assert!(!w.queries.is_empty());
        assert_eq!(w.bev.spec().grid_w, 64);
    }
}
