//! Foreground region proposal: a 3x3 convolution + sigmoid mask head over BEV
//! features, ground-truth masks rasterized from 3D boxes, Dice and binary
//! cross-entropy losses, and threshold-based query selection.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fvtm::{BevGrid, BevSpec};

/// Default foreground threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// 3x3xC correlation kernel, indexed `[ky][kx][c]` with `ky`/`kx` in 0..3
/// mapping to row/column offsets -1..=1, plus a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadWeights {
    channels: usize,
    kernel: Vec<f64>,
    bias: f64,
}

impl MaskHeadWeights {
    pub fn new(channels: usize, kernel: Vec<f64>, bias: f64) -> Result<Self> {
        if channels == 0 || kernel.len() != 9 * channels {
            return Err(Error::shape(
                "mask kernel",
                9 * channels.max(1),
                kernel.len(),
            ));
        }
        if !bias.is_finite() || kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(
                "mask head weights must be finite".into(),
            ));
        }
        Ok(Self {
            channels,
            kernel,
            bias,
        })
    }

    pub fn zeros(channels: usize, bias: f64) -> Self {
        Self::new(channels, vec![0.0; 9 * channels], bias).expect("finite zero kernel")
    }

    /// Kernel that passes channel `channel` of the center cell through unchanged.
    pub fn center_tap(channels: usize, channel: usize) -> Self {
        let mut w = Self::zeros(channels, 0.0);
        w.kernel[(4) * channels + channel] = 1.0;
        w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    fn tap(&self, ky: usize, kx: usize) -> &[f64] {
        let start = (ky * 3 + kx) * self.channels;
        &self.kernel[start..start + self.channels]
    }
}

/// Per-cell mask logits and their sigmoid, row-major `grid_h x grid_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    width: usize,
    height: usize,
    logits: Vec<f64>,
    probabilities: Vec<f64>,
}

impl ForegroundMask {
    pub fn from_logits(width: usize, height: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != width * height {
            return Err(Error::shape("mask logits", width * height, logits.len()));
        }
        let probabilities = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(Self {
            width,
            height,
            logits,
            probabilities,
        })
    }

    /// Oracle mask from a binary foreground map: `+logit` inside, `-logit` outside.
    pub fn from_binary(width: usize, height: usize, binary: &[bool], logit: f64) -> Result<Self> {
        Self::from_logits(
            width,
            height,
            binary
                .iter()
                .map(|&b| if b { logit } else { -logit })
                .collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Same-size 3x3 cross-correlation with zero padding, plus bias, then sigmoid.
pub fn mask_head(bev: &BevGrid, weights: &MaskHeadWeights) -> Result<ForegroundMask> {
    let spec = bev.spec();
    if spec.channels != weights.channels {
        return Err(Error::shape(
            "mask head channels",
            spec.channels,
            weights.channels,
        ));
    }
    let (w, h) = (spec.grid_w, spec.grid_h);
    let mut logits = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut acc = weights.bias;
            for ky in 0..3 {
                let Some(r) = (row + ky).checked_sub(1).filter(|&r| r < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(c) = (col + kx).checked_sub(1).filter(|&c| c < w) else {
                        continue;
                    };
                    acc += weights
                        .tap(ky, kx)
                        .iter()
                        .zip(bev.feature(c, r))
                        .map(|(k, f)| k * f)
                        .sum::<f64>();
                }
            }
            logits[row * w + col] = acc;
        }
    }
    ForegroundMask::from_logits(w, h, logits)
}

/// Oriented 3D box; `size` is (length along yaw, width, height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParams(format!(
                "box sizes must be positive, got {size:?}"
            )));
        }
        if !yaw.is_finite() || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("box pose must be finite".into()));
        }
        Ok(Self { center, size, yaw })
    }

    /// Whether the BEV point lies in the yaw-rotated footprint (boundary inclusive).
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center.x, y - self.center.y);
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() <= 0.5 * self.size[0] && across.abs() <= 0.5 * self.size[1]
    }

    /// Footprint corners, counter-clockwise.
    pub fn footprint_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| (self.center.x + c * a - s * b, self.center.y + s * a + c * b))
    }
}

/// Binary BEV mask: a cell is foreground iff its center lies inside any box footprint.
pub fn rasterize_gt_mask(boxes: &[Box3D], spec: &BevSpec) -> Vec<bool> {
    let mut mask = vec![false; spec.num_cells()];
    let (dx, dy) = (spec.cell_size_x(), spec.cell_size_y());
    for b in boxes {
        let corners = b.footprint_corners();
        let (lo_x, hi_x) = min_max(corners.iter().map(|c| c.0));
        let (lo_y, hi_y) = min_max(corners.iter().map(|c| c.1));
        // cells whose centers can fall inside the bounding rectangle, padded by one
        let col_range = index_range(lo_x, hi_x, spec.x_min, dx, spec.grid_w);
        let row_range = index_range(lo_y, hi_y, spec.y_min, dy, spec.grid_h);
        for row in row_range.clone() {
            for col in col_range.clone() {
                let (x, y) = spec.cell_center(col, row);
                if b.footprint_contains(x, y) {
                    mask[spec.flat_index(col, row)] = true;
                }
            }
        }
    }
    mask
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn index_range(lo: f64, hi: f64, origin: f64, cell: f64, len: usize) -> std::ops::Range<usize> {
    let first = ((lo - origin) / cell - 0.5).floor() - 1.0;
    let last = ((hi - origin) / cell - 0.5).ceil() + 1.0;
    let first = first.max(0.0).min(len as f64) as usize;
    let last = (last + 1.0).max(0.0).min(len as f64) as usize;
    first..last.max(first)
}

/// Smooth Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice inputs", pred.len(), gt.len()));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

/// Mean binary cross-entropy with predictions clamped away from 0 and 1.
pub fn bce_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("bce inputs", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Weighted sum of Dice and cross-entropy; equal weights by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLoss {
    pub dice_weight: f64,
    pub bce_weight: f64,
}

impl Default for MaskLoss {
    fn default() -> Self {
        Self {
            dice_weight: 1.0,
            bce_weight: 1.0,
        }
    }
}

impl MaskLoss {
    pub fn evaluate(&self, pred: &[f64], gt: &[f64]) -> Result<f64> {
        Ok(self.dice_weight * dice_loss(pred, gt)? + self.bce_weight * bce_loss(pred, gt)?)
    }
}

/// A BEV cell selected for backward refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct BevQuery {
    pub x: usize,
    pub y: usize,
    pub feature: Vec<f64>,
}

/// Cells whose foreground probability exceeds `threshold`, in row-major order.
pub fn select_queries(
    bev: &BevGrid,
    mask: &ForegroundMask,
    threshold: f64,
) -> Result<Vec<BevQuery>> {
    let spec = bev.spec();
    if (mask.width, mask.height) != (spec.grid_w, spec.grid_h) {
        return Err(Error::shape(
            "foreground mask",
            format!("{}x{}", spec.grid_w, spec.grid_h),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParams(format!(
            "foreground threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(mask
        .probabilities
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > threshold)
        .map(|(i, _)| {
            let (x, y) = (i % spec.grid_w, i / spec.grid_w);
            BevQuery {
                x,
                y,
                feature: bev.feature(x, y).to_vec(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn grid_with(spec: BevSpec, f: impl Fn(usize, usize, usize) -> f64) -> BevGrid {
        let mut features = Vec::new();
        for row in 0..spec.grid_h {
            for col in 0..spec.grid_w {
                for ch in 0..spec.channels {
                    features.push(f(col, row, ch));
                }
            }
        }
        BevGrid::from_parts(spec, features, vec![true; spec.num_cells()]).unwrap()
    }

    #[test]
    fn zero_kernel_is_half() {
        let spec = BevSpec::square(2.0, 4, 3).unwrap();
        let g = grid_with(spec, |c, r, ch| (c + r + ch) as f64);
        let m = mask_head(&g, &MaskHeadWeights::zeros(3, 0.0)).unwrap();
        assert!(m.probabilities().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn center_tap_is_identity() {
        let spec = BevSpec::square(2.0, 4, 2).unwrap();
        let g = grid_with(spec, |c, r, ch| {
            if ch == 0 {
                c as f64 - r as f64 * 0.7
            } else {
                9.0
            }
        });
        let m = mask_head(&g, &MaskHeadWeights::center_tap(2, 0)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected = sigmoid(g.feature(c, r)[0]);
                assert!((m.probabilities()[r * 4 + c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bias_only_on_blank_grid() {
        let spec = BevSpec::square(2.0, 3, 2).unwrap();
        let g = BevGrid::zeros(spec);
        let mut w = MaskHeadWeights::zeros(2, 1.5);
        w.kernel.iter_mut().for_each(|k| *k = 0.3);
        let m = mask_head(&g, &w).unwrap();
        assert!(m.probabilities().iter().all(|&p| p == sigmoid(1.5)));
    }

    #[test]
    fn zero_padding_at_borders() {
        let spec = BevSpec::square(1.5, 3, 1).unwrap();
        let g = grid_with(spec, |_, _, _| 1.0);
        let w = MaskHeadWeights::new(1, vec![1.0; 9], 0.0).unwrap();
        let m = mask_head(&g, &w).unwrap();
        assert_eq!(m.logits(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn channel_mismatch() {
        let g = BevGrid::zeros(BevSpec::square(1.0, 2, 2).unwrap());
        assert!(mask_head(&g, &MaskHeadWeights::zeros(3, 0.0)).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let spec = BevSpec::square(4.0, 8, 1).unwrap();
        assert!(rasterize_gt_mask(&[], &spec).iter().all(|&m| !m));

        let b = Box3D::new(Vector3::zeros(), [2.0, 2.0, 1.0], 0.0).unwrap();
        let mask = rasterize_gt_mask(&[b], &spec);
        let set: Vec<(usize, usize)> = (0..64)
            .filter(|&i| mask[i])
            .map(|i| (i % 8, i / 8))
            .collect();
        assert_eq!(set, vec![(3, 3), (4, 3), (3, 4), (4, 4)]);

        let a = Box3D::new(Vector3::new(0.3, -0.2, 0.0), [4.0, 2.0, 1.0], FRAC_PI_2).unwrap();
        let b = Box3D::new(Vector3::new(0.3, -0.2, 0.0), [2.0, 4.0, 1.0], 0.0).unwrap();
        assert_eq!(
            rasterize_gt_mask(&[a], &spec),
            rasterize_gt_mask(&[b], &spec)
        );
    }

    #[test]
    fn box_validation() {
        assert!(Box3D::new(Vector3::zeros(), [0.0, 1.0, 1.0], 0.0).is_err());
        assert!(Box3D::new(Vector3::zeros(), [1.0, 1.0, -1.0], 0.0).is_err());
    }

    #[test]
    fn dice_examples() {
        let n = 7;
        assert_eq!(dice_loss(&vec![1.0; n], &vec![1.0; n]).unwrap(), 0.0);
        let l = dice_loss(&vec![0.0; n], &vec![1.0; n]).unwrap();
        assert!((l - (1.0 - 1.0 / (n as f64 + 1.0))).abs() < 1e-12);
        assert!((dice_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.25).abs() < 1e-12);
        assert!(dice_loss(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bce_loss(&[0.9], &[1.0]).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        let l = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l > 0.0 && l < 2e-7, "{l}");
    }

    #[test]
    fn combined_loss_defaults_to_sum() {
        let p = [0.2, 0.8, 0.6];
        let g = [0.0, 1.0, 1.0];
        let l = MaskLoss::default().evaluate(&p, &g).unwrap();
        assert_eq!(l, dice_loss(&p, &g).unwrap() + bce_loss(&p, &g).unwrap());
    }

    #[test]
    fn select_examples() {
        let spec = BevSpec::square(1.0, 2, 1).unwrap();
        let g = grid_with(spec, |c, r, _| (c + 2 * r) as f64);
        let all = ForegroundMask::from_logits(2, 2, vec![0.0; 4]).unwrap();
        let q = select_queries(&g, &all, 0.4).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!((q[1].x, q[1].y, q[1].feature.clone()), (1, 0, vec![1.0]));

        let logit = (0.39f64 / 0.61).ln();
        let none = ForegroundMask::from_logits(2, 2, vec![logit; 4]).unwrap();
        assert!(select_queries(&g, &none, 0.4).unwrap().is_empty());

        assert!(select_queries(&g, &all, 1.0).is_err());
        let wrong = ForegroundMask::from_logits(1, 1, vec![0.0]).unwrap();
        assert!(select_queries(&g, &wrong, 0.4).is_err());
    }
}
