//! Forward view transformation: lift image features along camera rays with
//! their depth weights, then sum-pool ("splat") the lifted points into BEV
//! cells.
//!
//! Two pooling kernels are provided. [`splat_naive`] scatters points in input
//! order and is the reference. [`splat_pooled`] groups points by cell with a
//! stable counting sort and reduces each cell's interval independently, in
//! input order, so its output is bit-identical to the reference for any
//! number of worker threads.

use rayon::prelude::*;

use crate::depth::{DepthBins, DepthDistMap};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::{build_frustum, FrustumPoints, Rig};

/// Metric extent and resolution of the BEV plane.
///
/// Columns run along ego `x`, rows along ego `y`; cell `(col, row)` covers
/// `[x_min + col * dx, x_min + (col + 1) * dx)` and likewise in `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl BevSpec {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
    ) -> Result<Self> {
        let spec = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            grid_h,
            grid_w,
            channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square `size x size` grid over `[-half_extent, half_extent)` in x and y.
    pub fn square(half_extent: f64, size: usize, channels: usize) -> Result<Self> {
        Self::new(
            -half_extent,
            half_extent,
            -half_extent,
            half_extent,
            size,
            size,
            channels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::InvalidBevSpec(format!(
                "extent x [{}, {}), y [{}, {}) is empty or non-finite",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return Err(Error::InvalidBevSpec(format!(
                "grid {}x{}x{} has a zero dimension",
                self.grid_h, self.grid_w, self.channels
            )));
        }
        Ok(())
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    pub fn cell_size_x(&self) -> f64 {
        (self.x_max - self.x_min) / self.grid_w as f64
    }

    pub fn cell_size_y(&self) -> f64 {
        (self.y_max - self.y_min) / self.grid_h as f64
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Half-open binning of a metric position; `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let col = ((x - self.x_min) / self.cell_size_x()).floor() as usize;
        let row = ((y - self.y_min) / self.cell_size_y()).floor() as usize;
        (col < self.grid_w && row < self.grid_h).then_some((col, row))
    }

    pub fn flat_index(&self, col: usize, row: usize) -> usize {
        row * self.grid_w + col
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_size_x(),
            self.y_min + (row as f64 + 0.5) * self.cell_size_y(),
        )
    }
}

/// BEV feature grid, row-major `grid_h x grid_w x channels`, plus per-cell
/// occupancy flags.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    spec: BevSpec,
    features: Vec<f64>,
    occupied: Vec<bool>,
}

impl BevGrid {
    pub fn zeros(spec: BevSpec) -> Self {
        Self {
            spec,
            features: vec![0.0; spec.num_cells() * spec.channels],
            occupied: vec![false; spec.num_cells()],
        }
    }

    /// Assembles a grid, checking that unoccupied cells carry zero features.
    pub fn from_parts(spec: BevSpec, features: Vec<f64>, occupied: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if features.len() != spec.num_cells() * spec.channels {
            return Err(Error::shape(
                "BEV features",
                spec.num_cells() * spec.channels,
                features.len(),
            ));
        }
        if occupied.len() != spec.num_cells() {
            return Err(Error::shape(
                "BEV occupancy",
                spec.num_cells(),
                occupied.len(),
            ));
        }
        let grid = Self {
            spec,
            features,
            occupied,
        };
        for cell in 0..spec.num_cells() {
            if !grid.occupied[cell] && grid.cell(cell).iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidParams(format!(
                    "cell {cell} is unoccupied but has non-zero features"
                )));
            }
        }
        Ok(grid)
    }

    pub fn spec(&self) -> &BevSpec {
        &self.spec
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    pub fn cell(&self, flat: usize) -> &[f64] {
        let c = self.spec.channels;
        &self.features[flat * c..(flat + 1) * c]
    }

    pub fn feature(&self, col: usize, row: usize) -> &[f64] {
        self.cell(self.spec.flat_index(col, row))
    }

    pub fn is_occupied(&self, col: usize, row: usize) -> bool {
        self.occupied[self.spec.flat_index(col, row)]
    }

    pub(crate) fn cell_mut(&mut self, flat: usize) -> (&mut [f64], &mut bool) {
        let c = self.spec.channels;
        (
            &mut self.features[flat * c..(flat + 1) * c],
            &mut self.occupied[flat],
        )
    }
}

/// Lifted points: an ego-frame position and depth weight per (pixel, bin),
/// sharing one feature row per source pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiftedPoints {
    channels: usize,
    positions: Vec<[f64; 3]>,
    weights: Vec<f64>,
    sources: Vec<u32>,
    table: Vec<f64>,
    table_camera: Vec<u32>,
}

impl LiftedPoints {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            ..Default::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Registers a feature row and returns its id for [`Self::push_shared`].
    pub fn add_feature(&mut self, feature: &[f64], camera: usize) -> u32 {
        assert_eq!(feature.len(), self.channels, "feature length != channels");
        let id = self.table_camera.len() as u32;
        self.table.extend_from_slice(feature);
        self.table_camera.push(camera as u32);
        id
    }

    pub fn push_shared(&mut self, position: [f64; 3], feature_id: u32, weight: f64) {
        assert!((feature_id as usize) < self.table_camera.len());
        self.positions.push(position);
        self.weights.push(weight);
        self.sources.push(feature_id);
    }

    /// Adds a point with its own feature row.
    pub fn push(&mut self, position: [f64; 3], feature: &[f64], weight: f64) {
        let id = self.add_feature(feature, 0);
        self.push_shared(position, id, weight);
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let s = self.sources[i] as usize;
        &self.table[s * self.channels..(s + 1) * self.channels]
    }

    pub fn camera(&self, i: usize) -> usize {
        self.table_camera[self.sources[i] as usize] as usize
    }

    /// Appends `other`, keeping its points after ours.
    pub fn extend(&mut self, other: &LiftedPoints) {
        assert_eq!(self.channels, other.channels, "channel mismatch");
        let base = self.table_camera.len() as u32;
        self.positions.extend_from_slice(&other.positions);
        self.weights.extend_from_slice(&other.weights);
        self.sources.extend(other.sources.iter().map(|s| s + base));
        self.table.extend_from_slice(&other.table);
        self.table_camera.extend_from_slice(&other.table_camera);
    }

    /// Multiplies every weight by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
    }
}

/// Lifts one camera's features onto its frustum points.
///
/// Each (pixel, bin) becomes a point carrying the pixel feature and the
/// pixel's weight for that bin. Points with weight below `weight_floor` are
/// dropped; the default floor of 0 keeps everything.
pub fn lift(
    features: &FeatureMap,
    depth: &DepthDistMap,
    frustum: &FrustumPoints,
    camera_index: usize,
    weight_floor: f64,
) -> Result<LiftedPoints> {
    let (fw, fh) = (frustum.feature_width(), frustum.feature_height());
    if (features.width(), features.height()) != (fw, fh) {
        return Err(Error::shape(
            "lift feature map",
            format!("{fw}x{fh}"),
            format!("{}x{}", features.width(), features.height()),
        ));
    }
    if (depth.width(), depth.height()) != (fw, fh) {
        return Err(Error::shape(
            "lift depth map",
            format!("{fw}x{fh}"),
            format!("{}x{}", depth.width(), depth.height()),
        ));
    }
    if depth.bins().count() != frustum.bins() {
        return Err(Error::shape(
            "lift depth bins",
            frustum.bins(),
            depth.bins().count(),
        ));
    }
    let mut out = LiftedPoints::new(features.channels());
    for y in 0..fh {
        for x in 0..fw {
            let dist = depth.cell(x, y);
            if dist.iter().all(|&w| w < weight_floor) {
                continue;
            }
            let id = out.add_feature(features.at(x, y), camera_index);
            for (k, &w) in dist.iter().enumerate() {
                if w >= weight_floor {
                    let p = frustum.point(x, y, k);
                    out.push_shared([p.x, p.y, p.z], id, w);
                }
            }
        }
    }
    Ok(out)
}

fn check_channels(points: &LiftedPoints, spec: &BevSpec) -> Result<()> {
    spec.validate()?;
    if !points.is_empty() && points.channels != spec.channels {
        return Err(Error::shape(
            "splat channels",
            spec.channels,
            points.channels,
        ));
    }
    Ok(())
}

/// Reference sum pooling: scatter every in-extent point in input order.
pub fn splat_naive(points: &LiftedPoints, spec: &BevSpec) -> Result<BevGrid> {
    check_channels(points, spec)?;
    let mut grid = BevGrid::zeros(*spec);
    for i in 0..points.len() {
        let [x, y, _] = points.positions[i];
        let Some((col, row)) = spec.cell_of(x, y) else {
            continue;
        };
        let w = points.weights[i];
        let (dst, occupied) = grid.cell_mut(spec.flat_index(col, row));
        for (d, f) in dst.iter_mut().zip(points.feature(i)) {
            *d += w * f;
        }
        if w > 0.0 {
            *occupied = true;
        }
    }
    Ok(grid)
}

/// Interval-pooled sum pooling on the global rayon pool.
pub fn splat_pooled(points: &LiftedPoints, spec: &BevSpec) -> Result<BevGrid> {
    check_channels(points, spec)?;
    Ok(pooled_kernel(points, spec))
}

/// Interval-pooled sum pooling on a dedicated pool of `workers` threads.
pub fn splat_pooled_with_workers(
    points: &LiftedPoints,
    spec: &BevSpec,
    workers: usize,
) -> Result<BevGrid> {
    check_channels(points, spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    Ok(pool.install(|| pooled_kernel(points, spec)))
}

const OUTSIDE: u32 = u32::MAX;

fn pooled_kernel(points: &LiftedPoints, spec: &BevSpec) -> BevGrid {
    let n_cells = spec.num_cells();
    let keys: Vec<u32> = points
        .positions
        .par_iter()
        .map(|&[x, y, _]| match spec.cell_of(x, y) {
            Some((col, row)) => spec.flat_index(col, row) as u32,
            None => OUTSIDE,
        })
        .collect();

    // stable counting sort of point indices by cell
    let mut offsets = vec![0usize; n_cells + 1];
    for &k in &keys {
        if k != OUTSIDE {
            offsets[k as usize + 1] += 1;
        }
    }
    for c in 0..n_cells {
        offsets[c + 1] += offsets[c];
    }
    let mut cursor = offsets.clone();
    let mut order = vec![0u32; offsets[n_cells]];
    for (i, &k) in keys.iter().enumerate() {
        if k != OUTSIDE {
            order[cursor[k as usize]] = i as u32;
            cursor[k as usize] += 1;
        }
    }

    let mut grid = BevGrid::zeros(*spec);
    let channels = spec.channels;
    grid.features
        .par_chunks_mut(channels)
        .zip(grid.occupied.par_iter_mut())
        .enumerate()
        .for_each(|(cell, (dst, occupied))| {
            for &i in &order[offsets[cell]..offsets[cell + 1]] {
                let i = i as usize;
                let w = points.weights[i];
                for (d, f) in dst.iter_mut().zip(points.feature(i)) {
                    *d += w * f;
                }
                if w > 0.0 {
                    *occupied = true;
                }
            }
        });
    grid
}

/// Precomputed frusta for a rig, reused across frames.
#[derive(Debug, Clone)]
pub struct ForwardProjector {
    bins: DepthBins,
    frusta: Vec<FrustumPoints>,
    weight_floor: f64,
}

impl ForwardProjector {
    pub fn new(rig: &Rig, bins: DepthBins) -> Self {
        let frusta = rig
            .cameras()
            .par_iter()
            .map(|c| build_frustum(c, &bins))
            .collect();
        Self {
            bins,
            frusta,
            weight_floor: 0.0,
        }
    }

    pub fn with_weight_floor(mut self, floor: f64) -> Self {
        self.weight_floor = floor;
        self
    }

    pub fn bins(&self) -> &DepthBins {
        &self.bins
    }

    pub fn frusta(&self) -> &[FrustumPoints] {
        &self.frusta
    }

    /// Lifts every camera and concatenates the results in rig order.
    pub fn lift_all(
        &self,
        features: &[FeatureMap],
        depths: &[DepthDistMap],
    ) -> Result<LiftedPoints> {
        if features.len() != self.frusta.len() {
            return Err(Error::shape(
                "feature maps per camera",
                self.frusta.len(),
                features.len(),
            ));
        }
        if depths.len() != self.frusta.len() {
            return Err(Error::shape(
                "depth maps per camera",
                self.frusta.len(),
                depths.len(),
            ));
        }
        if let Some(d) = depths.iter().find(|d| *d.bins() != self.bins) {
            return Err(Error::shape(
                "depth bins",
                format!("{:?}", self.bins),
                format!("{:?}", d.bins()),
            ));
        }
        let per_camera = self
            .frusta
            .par_iter()
            .zip(features.par_iter().zip(depths.par_iter()))
            .enumerate()
            .map(|(i, (frustum, (f, d)))| lift(f, d, frustum, i, self.weight_floor))
            .collect::<Result<Vec<_>>>()?;
        let channels = features.first().map_or(0, FeatureMap::channels);
        let mut all = LiftedPoints::new(channels);
        for p in &per_camera {
            all.extend(p);
        }
        Ok(all)
    }

    pub fn project(
        &self,
        features: &[FeatureMap],
        depths: &[DepthDistMap],
        spec: &BevSpec,
    ) -> Result<BevGrid> {
        splat_pooled(&self.lift_all(features, depths)?, spec)
    }
}

/// Forward view transformation: lift every camera, then pool into BEV.
pub fn forward_vtm(
    rig: &Rig,
    features: &[FeatureMap],
    depths: &[DepthDistMap],
    spec: &BevSpec,
) -> Result<BevGrid> {
    let bins = depths
        .first()
        .map(|d| *d.bins())
        .ok_or_else(|| Error::shape("depth maps per camera", rig.len(), 0))?;
    ForwardProjector::new(rig, bins).project(features, depths, spec)
}

/// Occupancy summary of a BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub total_cells: usize,
    pub occupied_cells: usize,
    pub occupancy_rate: f64,
    /// Positive-weight lifted points landing inside the extent, per camera.
    /// Empty when the report was computed from a grid alone.
    pub per_camera_hits: Vec<usize>,
}

impl SparsityReport {
    pub fn blank_rate(&self) -> f64 {
        1.0 - self.occupancy_rate
    }

    pub fn blank_cells(&self) -> usize {
        self.total_cells - self.occupied_cells
    }

    pub fn with_camera_hits(
        mut self,
        points: &LiftedPoints,
        spec: &BevSpec,
        cameras: usize,
    ) -> Self {
        self.per_camera_hits = camera_hits(points, spec, cameras);
        self
    }
}

pub fn occupancy_stats(grid: &BevGrid) -> SparsityReport {
    let total_cells = grid.occupied.len();
    let occupied_cells = grid.occupied.iter().filter(|&&o| o).count();
    SparsityReport {
        total_cells,
        occupied_cells,
        occupancy_rate: occupied_cells as f64 / total_cells as f64,
        per_camera_hits: Vec::new(),
    }
}

pub fn camera_hits(points: &LiftedPoints, spec: &BevSpec, cameras: usize) -> Vec<usize> {
    let mut hits = vec![0; cameras];
    for i in 0..points.len() {
        let [x, y, _] = points.positions[i];
        if points.weights[i] > 0.0 && spec.cell_of(x, y).is_some() {
            if let Some(h) = hits.get_mut(points.camera(i)) {
                *h += 1;
            }
        }
    }
    hits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DepthDistribution;
    use crate::geometry::Camera;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn spec4() -> BevSpec {
        BevSpec::square(2.0, 4, 2).unwrap()
    }

    #[test]
    fn spec_validation_and_cells() {
        assert!(BevSpec::square(0.0, 4, 1).is_err());
        assert!(BevSpec::square(1.0, 0, 1).is_err());
        let s = BevSpec::square(51.2, 128, 1).unwrap();
        let (cx, cy) = s.cell_center(0, 0);
        assert!((cx + 50.8).abs() < 1e-12 && (cy + 50.8).abs() < 1e-12);
        assert_eq!(s.cell_of(-51.2, -51.2), Some((0, 0)));
        assert_eq!(s.cell_of(51.2, 0.0), None);
        assert_eq!(s.cell_of(51.199, 0.0), Some((127, 64)));
        assert_eq!(s.cell_of(f64::NAN, 0.0), None);
    }

    #[test]
    fn empty_input_gives_empty_grid() {
        let g = splat_naive(&LiftedPoints::new(2), &spec4()).unwrap();
        assert!(g.features().iter().all(|&v| v == 0.0));
        assert_eq!(occupancy_stats(&g).occupancy_rate, 0.0);
    }

    #[test]
    fn same_cell_sums() {
        let mut p = LiftedPoints::new(2);
        p.push([0.5, 0.5, 0.0], &[1.0, 2.0], 1.0);
        p.push([0.6, 0.7, 3.0], &[10.0, 20.0], 1.0);
        let g = splat_naive(&p, &spec4()).unwrap();
        assert_eq!(g.feature(2, 2), &[11.0, 22.0]);
        assert!(g.is_occupied(2, 2));
        assert_eq!(occupancy_stats(&g).occupied_cells, 1);
        assert_eq!(splat_pooled(&p, &spec4()).unwrap(), g);
    }

    #[test]
    fn boundary_point_skipped() {
        let mut p = LiftedPoints::new(2);
        p.push([2.0, 0.0, 0.0], &[1.0, 1.0], 1.0);
        p.push([0.0, 2.0, 0.0], &[1.0, 1.0], 1.0);
        let g = splat_naive(&p, &spec4()).unwrap();
        assert_eq!(occupancy_stats(&g).occupied_cells, 0);
    }

    #[test]
    fn zero_weight_does_not_occupy() {
        let mut p = LiftedPoints::new(2);
        p.push([0.5, 0.5, 0.0], &[1.0, 1.0], 0.0);
        let g = splat_naive(&p, &spec4()).unwrap();
        assert!(!g.is_occupied(2, 2));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut p = LiftedPoints::new(3);
        p.push([0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 1.0);
        assert!(splat_naive(&p, &spec4()).is_err());
        assert!(splat_pooled(&p, &spec4()).is_err());
    }

    #[test]
    fn half_occupied_rate() {
        let spec = BevSpec::square(1.0, 2, 1).unwrap();
        let mut p = LiftedPoints::new(1);
        p.push([-0.5, -0.5, 0.0], &[1.0], 0.5);
        p.push([0.5, 0.5, 0.0], &[1.0], 0.5);
        let r = occupancy_stats(&splat_naive(&p, &spec).unwrap());
        assert_eq!(r.occupancy_rate, 0.5);
        assert_eq!(r.blank_rate(), 0.5);
    }

    fn one_pixel_camera() -> Camera {
        // looks along ego +x from the origin; a single 1x1 pixel
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        Camera::new(
            "one",
            1,
            1,
            Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0),
            r,
            nalgebra::Vector3::zeros(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn lift_examples() {
        let bins = DepthBins::new(1.0, 0.5, 2).unwrap();
        let cam = one_pixel_camera();
        let frustum = build_frustum(&cam, &bins);
        let f = FeatureMap::new(1, 1, 2, 1, vec![3.0, 4.0]).unwrap();
        let d = DepthDistMap::new(bins, 1, 1, vec![0.3, 0.7]).unwrap();

        let p = lift(&f, &d, &frustum, 0, 0.0).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p.weight(0), p.weight(1)), (0.3, 0.7));
        assert_eq!(p.feature(0), &[3.0, 4.0]);
        assert_eq!(p.feature(1), &[3.0, 4.0]);
        assert!((p.position(0)[0] - 1.0).abs() < 1e-12);
        assert!((p.position(1)[0] - 1.5).abs() < 1e-12);

        let p = lift(&f, &d, &frustum, 0, 0.5).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.weight(0), 0.7);

        let bad = FeatureMap::new(2, 1, 2, 1, vec![0.0; 4]).unwrap();
        assert!(lift(&bad, &d, &frustum, 0, 0.0).is_err());
    }

    #[test]
    fn one_hot_pixel_occupies_one_cell() {
        let bins = DepthBins::new(1.0, 0.5, 4).unwrap();
        let rig = Rig::new(vec![one_pixel_camera()]).unwrap();
        let f = FeatureMap::new(1, 1, 1, 1, vec![2.0]).unwrap();
        let dist = DepthDistribution::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let d = DepthDistMap::constant(bins, 1, 1, &dist).unwrap();
        let spec = BevSpec::square(4.0, 8, 1).unwrap();
        let g = forward_vtm(&rig, &[f], &[d], &spec).unwrap();
        let r = occupancy_stats(&g);
        assert_eq!(r.occupied_cells, 1);
        // unprojected point is (2, 0, 0)
        let (col, row) = spec.cell_of(2.0, 0.0).unwrap();
        assert!(g.is_occupied(col, row));
        assert_eq!(g.feature(col, row), &[2.0]);
    }

    fn arb_points(max: usize) -> impl Strategy<Value = LiftedPoints> {
        prop::collection::vec(
            (
                prop_oneof![-2.5f64..2.5, Just(-2.0), Just(2.0), Just(0.0), Just(1.0)],
                prop_oneof![-2.5f64..2.5, Just(-2.0), Just(2.0), Just(-1.0)],
                -3.0f64..3.0,
                prop_oneof![0.0f64..1.0, Just(0.0)],
            ),
            0..max,
        )
        .prop_map(|raw| {
            let mut p = LiftedPoints::new(2);
            for (x, y, f, w) in raw {
                p.push([x, y, 0.0], &[f, -f * 0.3], w);
            }
            p
        })
    }

    proptest! {
        #[test]
        fn pooled_matches_naive(p in arb_points(200)) {
            let spec = spec4();
            prop_assert_eq!(splat_pooled(&p, &spec).unwrap(), splat_naive(&p, &spec).unwrap());
        }

        #[test]
        fn splat_is_linear(a in arb_points(60), b in arb_points(60)) {
            let spec = spec4();
            let mut ab = a.clone();
            ab.extend(&b);
            let ga = splat_naive(&a, &spec).unwrap();
            let gb = splat_naive(&b, &spec).unwrap();
            let gab = splat_naive(&ab, &spec).unwrap();
            for i in 0..gab.features().len() {
                prop_assert!((gab.features()[i] - ga.features()[i] - gb.features()[i]).abs() < 1e-9);
            }
            for c in 0..spec.num_cells() {
                prop_assert_eq!(gab.occupied()[c], ga.occupied()[c] || gb.occupied()[c]);
            }
        }

        #[test]
        fn scaling_weights_scales_features(p in arb_points(80), lambda in 0.1f64..10.0) {
            let spec = spec4();
            let g = splat_naive(&p, &spec).unwrap();
            let mut q = p.clone();
            q.scale_weights(lambda);
            let gq = splat_naive(&q, &spec).unwrap();
            prop_assert_eq!(g.occupied(), gq.occupied());
            for (a, b) in g.features().iter().zip(gq.features()) {
                prop_assert!((a * lambda - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
