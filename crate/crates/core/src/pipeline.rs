//! End-to-end forward-backward view transformation on synthetic scenes.
//!
//! Learned components are replaced by oracles: image features and depth come
//! from ray casting a scene of oriented boxes over an optional ground plane,
//! depth distributions from [`oracle_distribution`] around the rendered depth,
//! and (unless mask-head weights are supplied) the foreground mask from the
//! rasterized ground-truth boxes.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bvtm::{refine, BackwardConfig, DeformableParams};
use crate::depth::{oracle_distribution, DepthBins, DepthDistMap};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::frpn::{
    mask_head, rasterize_gt_mask, select_queries, BevQuery, Box3D, ForegroundMask, MaskHeadWeights,
    DEFAULT_THRESHOLD,
};
use crate::fvtm::{occupancy_stats, BevGrid, BevSpec, ForwardProjector, SparsityReport};
use crate::geometry::{Camera, Rig};

/// Logit magnitude of the oracle foreground mask.
pub const ORACLE_MASK_LOGIT: f64 = 10.0;

/// A box with the feature vector its visible surfaces render.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    rig: Rig,
    objects: Vec<SceneObject>,
    ground_z: Option<f64>,
    channels: usize,
    seed: u64,
}

impl Scene {
    pub fn new(
        rig: Rig,
        objects: Vec<SceneObject>,
        ground_z: Option<f64>,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParams(
                "scene needs at least one channel".into(),
            ));
        }
        if let Some(o) = objects.iter().find(|o| o.feature.len() != channels) {
            return Err(Error::shape("object feature", channels, o.feature.len()));
        }
        Ok(Self {
            rig,
            objects,
            ground_z,
            channels,
            seed,
        })
    }

    /// Random car-sized boxes resting on the ground around the ego vehicle.
    /// Identical arguments give an identical scene.
    pub fn random(
        rig: Rig,
        boxes: usize,
        channels: usize,
        ground_z: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objects = (0..boxes)
            .map(|_| {
                let range = rng.random_range(8.0..35.0);
                let bearing = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let size = [
                    rng.random_range(3.5..5.0),
                    rng.random_range(1.6..2.1),
                    rng.random_range(1.4..1.9),
                ];
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let center = Vector3::new(
                    range * bearing.cos(),
                    range * bearing.sin(),
                    ground_z + 0.5 * size[2],
                );
                let feature = (0..channels).map(|_| rng.random_range(0.1..1.0)).collect();
                Ok(SceneObject {
                    bbox: Box3D::new(center, size, yaw)?,
                    feature,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rig, objects, Some(ground_z), channels, seed)
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn ground_z(&self) -> Option<f64> {
        self.ground_z
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_rig(mut self, rig: Rig) -> Self {
        self.rig = rig;
        self
    }
}

/// What a single ray sees first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Object(usize),
    Ground,
    Sky,
}

/// Nearest positive ray parameter at which `origin + t * dir` enters (or, from
/// inside, leaves) the box.
pub fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let rel = origin - b.center;
    let o = [c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z];
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in 0..3 {
        let half = 0.5 * b.size[axis];
        if d[axis] == 0.0 {
            if o[axis].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[axis]) / d[axis];
        let t2 = (half - o[axis]) / d[axis];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    if t_far < t_near || t_far <= 0.0 {
        return None;
    }
    Some(if t_near > 0.0 { t_near } else { t_far })
}

fn cast(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, Surface) {
    let mut best = (f64::INFINITY, Surface::Sky);
    if let Some(g) = scene.ground_z {
        if dir.z != 0.0 {
            let t = (g - origin.z) / dir.z;
            if t > 0.0 {
                best = (t, Surface::Ground);
            }
        }
    }
    for (i, o) in scene.objects.iter().enumerate() {
        if let Some(t) = ray_box(origin, dir, &o.bbox) {
            if t < best.0 {
                best = (t, Surface::Object(i));
            }
        }
    }
    best
}

/// Casts the center ray of every feature cell; row-major `(depth, surface)`.
/// Depth is camera-frame depth, `+inf` when nothing is hit.
pub fn render(scene: &Scene, camera: &Camera) -> Vec<(f64, Surface)> {
    let (fw, fh) = camera.feature_size();
    let stride = camera.feature_stride() as f64;
    let origin = camera.center();
    (0..fw * fh)
        .into_par_iter()
        .map(|cell| {
            let (x, y) = (cell % fw, cell / fw);
            let dir = camera.ray_direction((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            cast(scene, &origin, &dir)
        })
        .collect()
}

/// Oracle depth at feature-map resolution, row-major.
pub fn render_depth(scene: &Scene, camera: &Camera) -> Vec<f64> {
    render(scene, camera).into_iter().map(|(d, _)| d).collect()
}

/// Feature of the first object each cell's ray hits; zero for ground and sky.
pub fn render_features(scene: &Scene, camera: &Camera) -> FeatureMap {
    let (fw, fh) = camera.feature_size();
    features_from(scene, camera, &render(scene, camera), fw, fh)
}

fn features_from(
    scene: &Scene,
    camera: &Camera,
    hits: &[(f64, Surface)],
    fw: usize,
    fh: usize,
) -> FeatureMap {
    let mut map = FeatureMap::zeros(fw, fh, scene.channels, camera.feature_stride());
    for (cell, (_, surface)) in hits.iter().enumerate() {
        if let Surface::Object(i) = surface {
            map.at_mut(cell % fw, cell / fw)
                .copy_from_slice(&scene.objects[*i].feature);
        }
    }
    map
}

/// Rendered per-camera inputs to the view transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraInputs {
    pub features: Vec<FeatureMap>,
    pub depths: Vec<DepthDistMap>,
}

/// Renders features and oracle depth distributions for every camera.
pub fn render_inputs(scene: &Scene, bins: &DepthBins, sigma: f64) -> Result<CameraInputs> {
    let mut features = Vec::with_capacity(scene.rig.len());
    let mut depths = Vec::with_capacity(scene.rig.len());
    for camera in scene.rig.cameras() {
        let (fw, fh) = camera.feature_size();
        let hits = render(scene, camera);
        features.push(features_from(scene, camera, &hits, fw, fh));
        let cells = hits
            .iter()
            .map(|&(d, _)| oracle_distribution(d, bins, sigma));
        depths.push(DepthDistMap::from_cells(*bins, fw, fh, cells)?);
    }
    Ok(CameraInputs { features, depths })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub spec: BevSpec,
    pub bins: DepthBins,
    /// Standard deviation of the oracle depth distributions, meters.
    pub sigma: f64,
    pub threshold: f64,
    pub weight_floor: f64,
    pub backward: BackwardConfig,
}

impl PipelineConfig {
    /// 128x128 cells over +-51.2 m, default bins, t_f = 0.4, sigma = 0.5 m.
    pub fn with_channels(channels: usize) -> Self {
        Self {
            spec: BevSpec::square(51.2, 128, channels).expect("default BEV spec"),
            bins: DepthBins::default(),
            sigma: 0.5,
            threshold: DEFAULT_THRESHOLD,
            weight_floor: 0.0,
            backward: BackwardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Forward-projected BEV features.
    pub bev: BevGrid,
    pub mask: ForegroundMask,
    pub gt_mask: Vec<bool>,
    pub queries: Vec<BevQuery>,
    /// Refined BEV features.
    pub refined: BevGrid,
    pub before: SparsityReport,
    pub after: SparsityReport,
}

/// Forward projection, foreground proposal, query selection and one
/// depth-aware backward refinement pass.
pub fn run_pipeline(
    scene: &Scene,
    config: &PipelineConfig,
    params: &DeformableParams,
    weights: Option<&MaskHeadWeights>,
) -> Result<PipelineOutput> {
    let spec = config.spec;
    if spec.channels != scene.channels {
        return Err(Error::shape("BEV channels", scene.channels, spec.channels));
    }
    let inputs = render_inputs(scene, &config.bins, config.sigma)?;
    let projector =
        ForwardProjector::new(&scene.rig, config.bins).with_weight_floor(config.weight_floor);
    let lifted = projector.lift_all(&inputs.features, &inputs.depths)?;
    let bev = crate::fvtm::splat_pooled(&lifted, &spec)?;
    let before = occupancy_stats(&bev).with_camera_hits(&lifted, &spec, scene.rig.len());

    let gt_mask = rasterize_gt_mask(&scene.boxes(), &spec);
    let mask = match weights {
        Some(w) => mask_head(&bev, w)?,
        None => ForegroundMask::from_binary(spec.grid_w, spec.grid_h, &gt_mask, ORACLE_MASK_LOGIT)?,
    };
    let queries = select_queries(&bev, &mask, config.threshold)?;
    let refined = refine(
        &bev,
        &queries,
        &scene.rig,
        &inputs.features,
        &inputs.depths,
        params,
        &config.backward,
    )?;
    let after = occupancy_stats(&refined);
    Ok(PipelineOutput {
        bev,
        mask,
        gt_mask,
        queries,
        refined,
        before,
        after,
    })
}

/// Ego pose in the global frame (ego-to-global).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl EgoPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if dev.is_nan() || dev > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "ego rotation not orthonormal (deviation {dev:.3e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    pub fn identity() -> Self {
        Self::planar(0.0, 0.0, 0.0)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

/// Warps the previous frame's BEV into the current ego frame (planar x, y,
/// yaw) and stacks it after the current features: output channels are
/// `[current, warped previous]`. Bilinear resampling; taps outside the
/// previous grid read zero.
pub fn warp_and_stack(
    current: &BevGrid,
    previous: &BevGrid,
    pose_current: &EgoPose,
    pose_previous: &EgoPose,
) -> Result<BevGrid> {
    let spec = *current.spec();
    let prev_spec = *previous.spec();
    if spec != prev_spec {
        return Err(Error::shape(
            "stacked BEV specs",
            format!("{spec:?}"),
            format!("{prev_spec:?}"),
        ));
    }
    let c = spec.channels;
    let out_spec = spec.with_channels(2 * c);
    let (yc, yp) = (pose_current.yaw(), pose_previous.yaw());
    let (sc, cc) = yc.sin_cos();
    let (sp, cp) = yp.sin_cos();
    let (dx, dy) = (spec.cell_size_x(), spec.cell_size_y());

    let mut features = vec![0.0; spec.num_cells() * 2 * c];
    let mut occupied = vec![false; spec.num_cells()];
    for row in 0..spec.grid_h {
        for col in 0..spec.grid_w {
            let flat = spec.flat_index(col, row);
            let dst = &mut features[flat * 2 * c..(flat + 1) * 2 * c];
            dst[..c].copy_from_slice(current.cell(flat));
            let mut occ = current.occupied()[flat];

            let (x, y) = spec.cell_center(col, row);
            let gx = cc * x - sc * y + pose_current.translation.x - pose_previous.translation.x;
            let gy = sc * x + cc * y + pose_current.translation.y - pose_previous.translation.y;
            let px = cp * gx + sp * gy;
            let py = -sp * gx + cp * gy;
            if px >= spec.x_min && px < spec.x_max && py >= spec.y_min && py < spec.y_max {
                let fx = (px - spec.x_min) / dx - 0.5;
                let fy = (py - spec.y_min) / dy - 0.5;
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                let taps = [
                    (x0, y0, (1.0 - ax) * (1.0 - ay)),
                    (x0 + 1.0, y0, ax * (1.0 - ay)),
                    (x0, y0 + 1.0, (1.0 - ax) * ay),
                    (x0 + 1.0, y0 + 1.0, ax * ay),
                ];
                for (tx, ty, w) in taps {
                    if w == 0.0 || tx < 0.0 || ty < 0.0 {
                        continue;
                    }
                    let (tx, ty) = (tx as usize, ty as usize);
                    if tx >= spec.grid_w || ty >= spec.grid_h {
                        continue;
                    }
                    let src = spec.flat_index(tx, ty);
                    for (d, s) in dst[c..].iter_mut().zip(previous.cell(src)) {
                        *d += w * s;
                    }
                    occ |= previous.occupied()[src];
                }
            }
            occupied[flat] = occ;
        }
    }
    BevGrid::from_parts(out_spec, features, occupied)
}

/// True-positive error terms, in the fixed order
/// translation, scale, orientation, velocity, attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpErrors {
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

impl TpErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }
}

/// Composite detection score `(5 mAP + sum(1 - min(1, err))) / 10`.
pub fn nds(map: f64, tp: &TpErrors) -> f64 {
    let tp_score: f64 = tp.as_array().iter().map(|&e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp_score) / 10.0
}
