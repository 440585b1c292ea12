//! Depth-aware backward projection.
//!
//! Each selected BEV query is lifted to a column of reference points at fixed
//! heights, projected into every camera, and used to deformably sample the
//! image features around each projection. Plain spatial cross-attention sums
//! the samples over valid (camera, height) hits; the depth-aware variant
//! multiplies every sample by the depth consistency between the reference
//! point's projected depth and the camera's predicted depth distribution at
//! that pixel. The aggregated vector is added residually onto the query cell.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::depth::DepthDistMap;
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::frpn::BevQuery;
use crate::fvtm::{BevGrid, BevSpec};
use crate::geometry::{ProjectionHit, Rig};

/// Uniform, endpoint-inclusive reference heights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightSampling {
    pub z_min: f64,
    pub z_max: f64,
    pub n_ref: usize,
}

impl Default for HeightSampling {
    fn default() -> Self {
        Self {
            z_min: -5.0,
            z_max: 3.0,
            n_ref: 4,
        }
    }
}

impl HeightSampling {
    pub fn new(z_min: f64, z_max: f64, n_ref: usize) -> Result<Self> {
        if n_ref == 0 || !z_min.is_finite() || !z_max.is_finite() || z_min > z_max {
            return Err(Error::InvalidParams(format!(
                "height sampling [{z_min}, {z_max}] x {n_ref} is invalid"
            )));
        }
        Ok(Self {
            z_min,
            z_max,
            n_ref,
        })
    }

    /// A single reference sits at the interval midpoint.
    pub fn heights(&self) -> Vec<f64> {
        if self.n_ref == 1 {
            return vec![0.5 * (self.z_min + self.z_max)];
        }
        let step = (self.z_max - self.z_min) / (self.n_ref - 1) as f64;
        (0..self.n_ref)
            .map(|j| {
                if j + 1 == self.n_ref {
                    self.z_max
                } else {
                    self.z_min + j as f64 * step
                }
            })
            .collect()
    }
}

/// Dense affine map `y = W x + b`, `W` row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim {
            return Err(Error::shape(
                "linear weight",
                in_dim * out_dim,
                weight.len(),
            ));
        }
        if bias.len() != out_dim {
            return Err(Error::shape("linear bias", out_dim, bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("linear map must be finite".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks(self.in_dim).zip(&self.bias))
        {
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
        }
    }

    fn apply_row(&self, row: usize, x: &[f64]) -> f64 {
        let w = &self.weight[row * self.in_dim..(row + 1) * self.in_dim];
        w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[row]
    }

    fn random(in_dim: usize, out_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut sample = || rng.random_range(-scale..=scale);
        let weight = (0..in_dim * out_dim).map(|_| sample()).collect();
        let bias = (0..out_dim).map(|_| sample()).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }
}

/// Parameters of the deformable sampling function.
///
/// Offsets are in feature-map cells and shared by every (camera, height) hit
/// of a query. The value map is `C -> C`; head `h` reads the channel slice
/// `[h * C / heads, (h + 1) * C / heads)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableParams {
    heads: usize,
    points_per_head: usize,
    channels: usize,
    offset_map: Linear,
    weight_map: Linear,
    value_map: Linear,
    output_map: Linear,
}

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_POINTS_PER_HEAD: usize = 4;

impl DeformableParams {
    pub fn new(
        heads: usize,
        points_per_head: usize,
        offset_map: Linear,
        weight_map: Linear,
        value_map: Linear,
        output_map: Linear,
    ) -> Result<Self> {
        let channels = value_map.in_dim;
        let slots = heads * points_per_head;
        if heads == 0 || points_per_head == 0 || channels == 0 {
            return Err(Error::InvalidParams(
                "heads, points per head and channels must be non-zero".into(),
            ));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::InvalidParams(format!(
                "{channels} channels do not split evenly over {heads} heads"
            )));
        }
        let check = |what: &'static str, l: &Linear, i: usize, o: usize| {
            if (l.in_dim, l.out_dim) != (i, o) {
                Err(Error::shape(
                    what,
                    format!("{o}x{i}"),
                    format!("{}x{}", l.out_dim, l.in_dim),
                ))
            } else {
                Ok(())
            }
        };
        check("offset map", &offset_map, channels, slots * 2)?;
        check("attention weight map", &weight_map, channels, slots)?;
        check("value map", &value_map, channels, channels)?;
        check("output map", &output_map, channels, channels)?;
        Ok(Self {
            heads,
            points_per_head,
            channels,
            offset_map,
            weight_map,
            value_map,
            output_map,
        })
    }

    /// Zero offsets, uniform attention, identity value and output maps: every
    /// sample reduces to plain bilinear interpolation at the projection.
    pub fn identity(channels: usize, heads: usize, points_per_head: usize) -> Result<Self> {
        let slots = heads * points_per_head;
        Self::new(
            heads,
            points_per_head,
            Linear::zeros(channels, slots * 2),
            Linear::zeros(channels, slots),
            Linear::identity(channels),
            Linear::identity(channels),
        )
    }

    /// Uniformly random maps in `[-scale, scale]`, reproducible from `seed`.
    pub fn random(
        channels: usize,
        heads: usize,
        points_per_head: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = heads * points_per_head;
        Self::new(
            heads,
            points_per_head,
            Linear::random(channels, slots * 2, scale, &mut rng),
            Linear::random(channels, slots, scale, &mut rng),
            Linear::random(channels, channels, scale, &mut rng),
            Linear::random(channels, channels, scale, &mut rng),
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn points_per_head(&self) -> usize {
        self.points_per_head
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn offset_map(&self) -> &Linear {
        &self.offset_map
    }

    pub fn weight_map(&self) -> &Linear {
        &self.weight_map
    }

    pub fn value_map(&self) -> &Linear {
        &self.value_map
    }

    pub fn output_map(&self) -> &Linear {
        &self.output_map
    }
}

/// One (camera, reference point) projection with its depth consistency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefHit {
    pub ref_index: usize,
    pub camera_index: usize,
    pub hit: ProjectionHit,
    pub consistency: f64,
}

/// Reference points above a BEV cell's metric center.
pub fn reference_points(
    col: usize,
    row: usize,
    spec: &BevSpec,
    hs: &HeightSampling,
) -> Vec<Vector3<f64>> {
    let (x, y) = spec.cell_center(col, row);
    hs.heights()
        .into_iter()
        .map(|z| Vector3::new(x, y, z))
        .collect()
}

/// Projects every reference point into every camera (camera-major order) and
/// scores each valid hit against that camera's depth distribution.
pub fn project_refs(
    points: &[Vector3<f64>],
    rig: &Rig,
    depth_maps: &[DepthDistMap],
) -> Result<Vec<RefHit>> {
    if depth_maps.len() != rig.len() {
        return Err(Error::shape(
            "depth maps per camera",
            rig.len(),
            depth_maps.len(),
        ));
    }
    let mut hits = Vec::with_capacity(points.len() * rig.len());
    for (i, (camera, depth)) in rig.cameras().iter().zip(depth_maps).enumerate() {
        let stride = camera.feature_stride() as f64;
        for (j, p) in points.iter().enumerate() {
            let hit = ProjectionHit {
                camera_index: i,
                ..camera.project(p)
            };
            let consistency = if hit.valid {
                depth.consistency_at(hit.u / stride, hit.v / stride, hit.depth)
            } else {
                0.0
            };
            hits.push(RefHit {
                ref_index: j,
                camera_index: i,
                hit,
                consistency,
            });
        }
    }
    Ok(hits)
}

fn check_sampling_inputs(
    query: &[f64],
    feat: &FeatureMap,
    params: &DeformableParams,
) -> Result<()> {
    if query.len() != params.channels {
        return Err(Error::shape("query channels", params.channels, query.len()));
    }
    if feat.channels() != params.channels {
        return Err(Error::shape(
            "feature channels",
            params.channels,
            feat.channels(),
        ));
    }
    Ok(())
}

/// Deformable sampling of `feat` around feature-map position `(fu, fv)`.
pub fn deformable_sample(
    query: &[f64],
    feat: &FeatureMap,
    fu: f64,
    fv: f64,
    params: &DeformableParams,
) -> Result<Vec<f64>> {
    check_sampling_inputs(query, feat, params)?;
    let plan = SamplingPlan::new(query, params);
    Ok(plan.sample(feat, fu, fv))
}

/// Query-dependent offsets and attention weights, computed once per query.
struct SamplingPlan<'a> {
    params: &'a DeformableParams,
    offsets: Vec<f64>,
    attention: Vec<f64>,
}

impl<'a> SamplingPlan<'a> {
    fn new(query: &[f64], params: &'a DeformableParams) -> Self {
        let offsets = params.offset_map.apply(query);
        let mut attention = params.weight_map.apply(query);
        for head in attention.chunks_mut(params.points_per_head) {
            let peak = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            head.iter_mut().for_each(|a| *a = (*a - peak).exp());
            let sum: f64 = head.iter().sum();
            head.iter_mut().for_each(|a| *a /= sum);
        }
        Self {
            params,
            offsets,
            attention,
        }
    }

    fn sample(&self, feat: &FeatureMap, fu: f64, fv: f64) -> Vec<f64> {
        let p = self.params;
        let c = p.channels;
        let head_dim = c / p.heads;
        let mut mixed = vec![0.0; c];
        let mut acc = vec![0.0; c];
        let mut tap = vec![0.0; c];
        for h in 0..p.heads {
            acc.fill(0.0);
            for k in 0..p.points_per_head {
                let slot = h * p.points_per_head + k;
                let du = self.offsets[2 * slot];
                let dv = self.offsets[2 * slot + 1];
                feat.sample_into(fu + du, fv + dv, &mut tap);
                let a = self.attention[slot];
                for (s, t) in acc.iter_mut().zip(&tap) {
                    *s += a * t;
                }
            }
            let rows = h * head_dim..(h + 1) * head_dim;
            for (o, m) in rows.clone().zip(&mut mixed[rows]) {
                *m = p.value_map.apply_row(o, &acc);
            }
        }
        p.output_map.apply(&mixed)
    }
}

/// How the per-hit sum is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Divide by `max(1, number of valid hits)`.
    #[default]
    ValidHits,
    /// Bare sum.
    None,
}

fn aggregate(
    query: &[f64],
    feats: &[FeatureMap],
    hits: &[RefHit],
    params: &DeformableParams,
    depth_aware: bool,
    norm: Normalization,
    strides: &[f64],
) -> Vec<f64> {
    let plan = SamplingPlan::new(query, params);
    let mut out = vec![0.0; params.channels];
    let mut valid = 0usize;
    for h in hits.iter().filter(|h| h.hit.valid) {
        valid += 1;
        let weight = if depth_aware { h.consistency } else { 1.0 };
        if weight == 0.0 {
            continue;
        }
        let stride = strides[h.camera_index];
        let s = plan.sample(&feats[h.camera_index], h.hit.u / stride, h.hit.v / stride);
        for (o, v) in out.iter_mut().zip(&s) {
            *o += v * weight;
        }
    }
    if norm == Normalization::ValidHits && valid > 1 {
        let n = valid as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn check_aggregate_inputs(
    query: &[f64],
    feats: &[FeatureMap],
    hits: &[RefHit],
    params: &DeformableParams,
) -> Result<Vec<f64>> {
    for f in feats {
        check_sampling_inputs(query, f, params)?;
    }
    if let Some(h) = hits.iter().find(|h| h.camera_index >= feats.len()) {
        return Err(Error::shape(
            "hit camera index",
            format!("< {}", feats.len()),
            h.camera_index,
        ));
    }
    Ok(feats.iter().map(|f| f.stride() as f64).collect())
}

/// Spatial cross-attention: mean of deformable samples over valid hits.
pub fn sca(
    query: &[f64],
    feats: &[FeatureMap],
    hits: &[RefHit],
    params: &DeformableParams,
) -> Result<Vec<f64>> {
    let strides = check_aggregate_inputs(query, feats, hits, params)?;
    Ok(aggregate(
        query,
        feats,
        hits,
        params,
        false,
        Normalization::ValidHits,
        &strides,
    ))
}

/// Depth-aware spatial cross-attention: each sample weighted by its hit's
/// depth consistency, then normalized as in [`sca`].
pub fn sca_da(
    query: &[f64],
    feats: &[FeatureMap],
    hits: &[RefHit],
    params: &DeformableParams,
) -> Result<Vec<f64>> {
    sca_da_with(query, feats, hits, params, Normalization::ValidHits)
}

pub fn sca_da_with(
    query: &[f64],
    feats: &[FeatureMap],
    hits: &[RefHit],
    params: &DeformableParams,
    norm: Normalization,
) -> Result<Vec<f64>> {
    let strides = check_aggregate_inputs(query, feats, hits, params)?;
    Ok(aggregate(query, feats, hits, params, true, norm, &strides))
}

/// Settings for the single backward refinement pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardConfig {
    pub heights: HeightSampling,
    pub normalization: Normalization,
    /// Weight samples by depth consistency; `false` gives plain cross-attention.
    pub depth_aware: bool,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self {
            heights: HeightSampling::default(),
            normalization: Normalization::ValidHits,
            depth_aware: true,
        }
    }
}

/// One backward pass: every query cell receives its aggregated update
/// residually; all other cells are copied unchanged.
pub fn refine(
    bev: &BevGrid,
    queries: &[BevQuery],
    rig: &Rig,
    feats: &[FeatureMap],
    depth_maps: &[DepthDistMap],
    params: &DeformableParams,
    config: &BackwardConfig,
) -> Result<BevGrid> {
    let spec = *bev.spec();
    if feats.len() != rig.len() {
        return Err(Error::shape(
            "feature maps per camera",
            rig.len(),
            feats.len(),
        ));
    }
    if depth_maps.len() != rig.len() {
        return Err(Error::shape(
            "depth maps per camera",
            rig.len(),
            depth_maps.len(),
        ));
    }
    if spec.channels != params.channels {
        return Err(Error::shape("BEV channels", params.channels, spec.channels));
    }
    for f in feats {
        if f.channels() != params.channels {
            return Err(Error::shape(
                "feature channels",
                params.channels,
                f.channels(),
            ));
        }
    }
    if let Some(q) = queries
        .iter()
        .find(|q| q.x >= spec.grid_w || q.y >= spec.grid_h || q.feature.len() != spec.channels)
    {
        return Err(Error::shape(
            "query",
            format!(
                "cell inside {}x{} with {} channels",
                spec.grid_w, spec.grid_h, spec.channels
            ),
            format!("({}, {}) with {} channels", q.x, q.y, q.feature.len()),
        ));
    }
    let strides: Vec<f64> = rig
        .cameras()
        .iter()
        .map(|c| c.feature_stride() as f64)
        .collect();
    let updates = queries
        .par_iter()
        .map(|q| {
            let refs = reference_points(q.x, q.y, &spec, &config.heights);
            let hits = project_refs(&refs, rig, depth_maps)?;
            Ok(aggregate(
                &q.feature,
                feats,
                &hits,
                params,
                config.depth_aware,
                config.normalization,
                &strides,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = bev.clone();
    for (q, update) in queries.iter().zip(&updates) {
        let (dst, occupied) = out.cell_mut(spec.flat_index(q.x, q.y));
        for (d, u) in dst.iter_mut().zip(update) {
            *d += u;
        }
        if update.iter().any(|&u| u != 0.0) {
            *occupied = true;
        }
    }
    Ok(out)
}

/// Per-height depth consistency above one BEV cell: for each reference
/// height, the maximum consistency over cameras.
pub fn height_consistency(
    col: usize,
    row: usize,
    spec: &BevSpec,
    heights: &HeightSampling,
    rig: &Rig,
    depth_maps: &[DepthDistMap],
) -> Result<Vec<f64>> {
    let refs = reference_points(col, row, spec, heights);
    let hits = project_refs(&refs, rig, depth_maps)?;
    let mut best = vec![0.0f64; refs.len()];
    for h in hits {
        best[h.ref_index] = best[h.ref_index].max(h.consistency);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::{DepthBins, DepthDistribution};
    use crate::geometry::Camera;
    use nalgebra::Matrix3;

    #[test]
    fn heights_default_and_degenerate() {
        let h = HeightSampling::default().heights();
        let expected = [-5.0, -7.0 / 3.0, 1.0 / 3.0, 3.0];
        for (a, b) in h.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(h[0], -5.0);
        assert_eq!(h[3], 3.0);
        assert_eq!(
            HeightSampling::new(-5.0, 3.0, 1).unwrap().heights(),
            vec![-1.0]
        );
        assert!(HeightSampling::new(1.0, 0.0, 2).is_err());
        assert!(HeightSampling::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn reference_point_centers() {
        let spec = BevSpec::square(51.2, 128, 1).unwrap();
        let p = reference_points(0, 0, &spec, &HeightSampling::default());
        assert_eq!(p.len(), 4);
        assert!((p[0].x + 50.8).abs() < 1e-12 && (p[0].y + 50.8).abs() < 1e-12);
    }

    fn ramp_field(w: usize, h: usize, c: usize) -> FeatureMap {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(x as f64 * 1.5 - y as f64 * 0.25 + ch as f64 * 10.0);
                }
            }
        }
        FeatureMap::new(w, h, c, 1, data).unwrap()
    }

    #[test]
    fn identity_params_reduce_to_bilinear() {
        let feat = ramp_field(5, 4, 2);
        let params = DeformableParams::identity(2, 1, 1).unwrap();
        let q = [0.3, -0.7];
        for &(fu, fv) in &[(0.5, 0.5), (1.3, 2.2), (4.9, 3.1), (-1.0, 7.0)] {
            let s = deformable_sample(&q, &feat, fu, fv, &params).unwrap();
            let b = feat.sample(fu, fv);
            for (x, y) in s.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_field_ignores_offsets() {
        let f = [0.5, -1.0, 2.0, 4.0];
        let feat = FeatureMap::constant(6, 5, 1, &f);
        let params = DeformableParams::random(4, 2, 3, 0.8, 7).unwrap();
        let q = [1.0, 0.2, -0.4, 0.9];
        let s = deformable_sample(&q, &feat, 2.2, 1.9, &params).unwrap();
        let expected = params.output_map().apply(&params.value_map().apply(&f));
        for (a, b) in s.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_average_two_points() {
        // one head, two points; offsets send point 0 to cell 0 and point 1 to cell 2
        let feat = FeatureMap::new(
            3,
            1,
            3,
            1,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let offset_map = Linear::new(3, 4, vec![0.0; 12], vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        let params = DeformableParams::new(
            1,
            2,
            offset_map,
            Linear::zeros(3, 2),
            Linear::identity(3),
            Linear::identity(3),
        )
        .unwrap();
        let s = deformable_sample(&[0.0; 3], &feat, 1.5, 0.5, &params).unwrap();
        assert_eq!(s, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let feat = ramp_field(3, 3, 2);
        let params = DeformableParams::identity(4, 2, 1).unwrap();
        assert!(deformable_sample(&[0.0; 4], &feat, 1.0, 1.0, &params).is_err());
        assert!(DeformableParams::identity(6, 4, 1).is_err());
    }

    fn hit(camera: usize, u: f64, v: f64, consistency: f64, valid: bool) -> RefHit {
        RefHit {
            ref_index: 0,
            camera_index: camera,
            hit: ProjectionHit {
                camera_index: camera,
                u,
                v,
                depth: 5.0,
                valid,
            },
            consistency,
        }
    }

    #[test]
    fn sca_examples() {
        let f1 = FeatureMap::constant(4, 4, 1, &[2.0, 4.0]);
        let f2 = FeatureMap::constant(4, 4, 1, &[6.0, 0.0]);
        let feats = [f1, f2];
        let params = DeformableParams::identity(2, 1, 1).unwrap();
        let q = [0.0, 0.0];

        assert_eq!(sca(&q, &feats, &[], &params).unwrap(), vec![0.0, 0.0]);
        let invalid = [hit(0, 1.0, 1.0, 1.0, false)];
        assert_eq!(sca(&q, &feats, &invalid, &params).unwrap(), vec![0.0, 0.0]);

        let one = [hit(1, 1.5, 2.5, 1.0, true)];
        assert_eq!(sca(&q, &feats, &one, &params).unwrap(), vec![6.0, 0.0]);

        let two = [hit(0, 1.5, 2.5, 1.0, true), hit(1, 0.5, 0.5, 0.0, true)];
        assert_eq!(sca(&q, &feats, &two, &params).unwrap(), vec![4.0, 2.0]);
        assert_eq!(sca_da(&q, &feats, &two, &params).unwrap(), vec![1.0, 2.0]);

        let zero = [hit(0, 1.5, 2.5, 0.0, true), hit(1, 0.5, 0.5, 0.0, true)];
        assert_eq!(sca_da(&q, &feats, &zero, &params).unwrap(), vec![0.0, 0.0]);

        let bare = sca_da_with(&q, &feats, &two, &params, Normalization::None).unwrap();
        assert_eq!(bare, vec![2.0, 4.0]);
    }

    fn forward_camera() -> Camera {
        // at the origin looking along ego +x, 64x64 image, stride 8
        Camera::new(
            "front",
            64,
            64,
            Matrix3::new(32.0, 0.0, 32.0, 0.0, 32.0, 32.0, 0.0, 0.0, 1.0),
            Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            Vector3::zeros(),
            8,
        )
        .unwrap()
    }

    #[test]
    fn project_refs_behind_camera() {
        let rig = Rig::new(vec![forward_camera()]).unwrap();
        let bins = DepthBins::default();
        let dm = DepthDistMap::constant(bins, 8, 8, &DepthDistribution::uniform(118)).unwrap();
        let hits = project_refs(
            &[Vector3::new(-5.0, 0.0, 0.0), Vector3::new(-9.0, 1.0, 1.0)],
            &rig,
            &[dm],
        )
        .unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| !h.hit.valid && h.consistency == 0.0));
    }

    #[test]
    fn two_points_on_one_ray() {
        // predicted depth two-hot at 5 m everywhere: the 5 m point is consistent, the 25 m one is not
        let rig = Rig::new(vec![forward_camera()]).unwrap();
        let bins = DepthBins::default();
        let d5 = crate::depth::oracle_distribution(5.0, &bins, 0.0).unwrap();
        let dm = DepthDistMap::constant(bins, 8, 8, &d5).unwrap();
        let dir = Vector3::new(1.0, 0.2, -0.1);
        let hits = project_refs(&[dir * 5.0, dir * 25.0], &rig, &[dm]).unwrap();
        assert!(hits.iter().all(|h| h.hit.valid));
        assert!((hits[0].consistency - 1.0).abs() < 1e-12);
        assert_eq!(hits[1].consistency, 0.0);
        assert!((hits[0].hit.u - hits[1].hit.u).abs() < 1e-9);
    }

    #[test]
    fn refine_with_no_queries_is_identity() {
        let rig = Rig::new(vec![forward_camera()]).unwrap();
        let spec = BevSpec::square(10.0, 8, 2).unwrap();
        let bev = BevGrid::zeros(spec);
        let feats = vec![FeatureMap::constant(8, 8, 8, &[1.0, 1.0])];
        let bins = DepthBins::default();
        let dm =
            vec![DepthDistMap::constant(bins, 8, 8, &DepthDistribution::uniform(118)).unwrap()];
        let params = DeformableParams::identity(2, 1, 1).unwrap();
        let out = refine(
            &bev,
            &[],
            &rig,
            &feats,
            &dm,
            &params,
            &BackwardConfig::default(),
        )
        .unwrap();
        assert_eq!(out, bev);
    }

    #[test]
    fn refine_fills_blank_query_cell() {
        let rig = Rig::new(vec![forward_camera()]).unwrap();
        let spec = BevSpec::square(10.0, 8, 2).unwrap();
        let bev = BevGrid::zeros(spec);
        let feats = vec![FeatureMap::constant(8, 8, 8, &[1.0, 3.0])];
        let bins = DepthBins::default();
        let dm =
            vec![DepthDistMap::constant(bins, 8, 8, &DepthDistribution::uniform(118)).unwrap()];
        let params = DeformableParams::identity(2, 1, 1).unwrap();
        // cell (6, 4) has center (6.25, 1.25): in front of the camera
        let q = BevQuery {
            x: 6,
            y: 4,
            feature: vec![0.0, 0.0],
        };
        let out = refine(
            &bev,
            std::slice::from_ref(&q),
            &rig,
            &feats,
            &dm,
            &params,
            &BackwardConfig::default(),
        )
        .unwrap();
        assert!(out.is_occupied(6, 4));
        assert!(out.feature(6, 4)[0] > 0.0);
        for cell in 0..spec.num_cells() {
            if cell != spec.flat_index(6, 4) {
                assert_eq!(out.cell(cell), bev.cell(cell));
                assert!(!out.occupied()[cell]);
            }
        }

        // all consistencies zero: depth evidence only at 59 m
        let far = crate::depth::oracle_distribution(59.0, &bins, 0.0).unwrap();
        let dm = vec![DepthDistMap::constant(bins, 8, 8, &far).unwrap()];
        let out = refine(
            &bev,
            &[q],
            &rig,
            &feats,
            &dm,
            &params,
            &BackwardConfig::default(),
        )
        .unwrap();
        assert_eq!(out, bev);
    }
}
