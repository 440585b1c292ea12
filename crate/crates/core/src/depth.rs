//! Depth discretization, categorical depth distributions and the
//! two-hot depth-consistency score used to weight backward samples.

use crate::error::{Error, Result};
use crate::feature::bilinear_taps;

const SUM_TOL: f64 = 1e-6;

/// Uniform depth discretization with bin centers `d0 + k * delta`, `k < count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBins {
    d0: f64,
    delta: f64,
    count: usize,
}

impl DepthBins {
    pub fn new(d0: f64, delta: f64, count: usize) -> Result<Self> {
        if !d0.is_finite() || !delta.is_finite() {
            return Err(Error::InvalidBins("d0 and delta must be finite".into()));
        }
        if delta <= 0.0 {
            return Err(Error::InvalidBins(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidBins(format!(
                "need at least 2 bins, got {count}"
            )));
        }
        Ok(Self { d0, delta, count })
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d0 + k as f64 * self.delta
    }

    /// Largest representable depth, `d0 + (count - 1) * delta`.
    pub fn max_depth(&self) -> f64 {
        self.center(self.count - 1)
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.d0 && d <= self.max_depth()
    }
}

impl Default for DepthBins {
    /// 118 bins from 1 m in 0.5 m steps.
    fn default() -> Self {
        Self {
            d0: 1.0,
            delta: 0.5,
            count: 118,
        }
    }
}

/// Non-negative per-bin weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    weights: Vec<f64>,
}

impl DepthDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_normalized(&weights)?;
        Ok(Self { weights })
    }

    pub fn uniform(count: usize) -> Self {
        Self {
            weights: vec![1.0 / count as f64; count],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &w)| {
                if w > best.1 {
                    (i, w)
                } else {
                    best
                }
            })
            .0
    }
}

fn check_normalized(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "weights must be finite and non-negative, found {w}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Two-hot encoding of a continuous depth: linear weights on the two
/// enclosing bins, or nothing when the depth is outside the modeled range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TwoHot {
    InRange {
        lower_bin: usize,
        lower: f64,
        upper: f64,
    },
    OutOfRange,
}

impl TwoHot {
    pub fn is_out_of_range(&self) -> bool {
        matches!(self, TwoHot::OutOfRange)
    }

    /// Dense vector of length `count`; all zeros when out of range.
    pub fn to_dense(&self, count: usize) -> Vec<f64> {
        let mut v = vec![0.0; count];
        if let TwoHot::InRange {
            lower_bin,
            lower,
            upper,
        } = *self
        {
            v[lower_bin] = lower;
            v[lower_bin + 1] = upper;
        }
        v
    }

    /// Dot product with a dense weight vector.
    pub fn dot(&self, weights: &[f64]) -> f64 {
        match *self {
            TwoHot::InRange {
                lower_bin,
                lower,
                upper,
            } => weights[lower_bin] * lower + weights[lower_bin + 1] * upper,
            TwoHot::OutOfRange => 0.0,
        }
    }
}

pub fn two_hot(d: f64, bins: &DepthBins) -> TwoHot {
    if !bins.contains(d) {
        return TwoHot::OutOfRange;
    }
    let i = (((d - bins.d0) / bins.delta).floor() as usize).min(bins.count - 2);
    let frac = ((d - bins.center(i)) / bins.delta).clamp(0.0, 1.0);
    let lower = 1.0 - frac;
    TwoHot::InRange {
        lower_bin: i,
        lower,
        upper: 1.0 - lower,
    }
}

/// Depth consistency: agreement between a predicted distribution and the
/// depth `d` of a projected 3D point. Zero when `d` is out of range.
pub fn consistency(dist: &DepthDistribution, d: f64, bins: &DepthBins) -> f64 {
    two_hot(d, bins).dot(&dist.weights)
}

/// Synthetic depth prediction centered on a known depth.
///
/// `sigma == 0` gives the two-hot encoding; `sigma > 0` a Gaussian over bin
/// centers, renormalized. Returns `None` (no depth evidence) when `d` is
/// non-finite or outside the bin range.
pub fn oracle_distribution(d: f64, bins: &DepthBins, sigma: f64) -> Option<DepthDistribution> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if !d.is_finite() || !bins.contains(d) {
        return None;
    }
    if sigma == 0.0 {
        return Some(DepthDistribution {
            weights: two_hot(d, bins).to_dense(bins.count),
        });
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let exps: Vec<f64> = (0..bins.count)
        .map(|k| -(bins.center(k) - d).powi(2) * inv)
        .collect();
    let peak = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = exps.iter().map(|e| (e - peak).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Some(DepthDistribution { weights })
}

/// Per-cell depth distributions at feature-map resolution for one camera.
///
/// A cell holds either a normalized distribution or all zeros, the latter
/// meaning "no depth evidence" (sky, out-of-range depth).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistMap {
    bins: DepthBins,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthDistMap {
    pub fn new(bins: DepthBins, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(
                "depth map",
                "non-zero size",
                format!("{width}x{height}"),
            ));
        }
        if data.len() != width * height * bins.count {
            return Err(Error::shape(
                "depth map data",
                width * height * bins.count,
                data.len(),
            ));
        }
        for cell in data.chunks(bins.count) {
            if cell.iter().all(|&w| w == 0.0) {
                continue;
            }
            check_normalized(cell)?;
        }
        Ok(Self {
            bins,
            width,
            height,
            data,
        })
    }

    /// Same distribution in every cell.
    pub fn constant(
        bins: DepthBins,
        width: usize,
        height: usize,
        dist: &DepthDistribution,
    ) -> Result<Self> {
        if dist.len() != bins.count {
            return Err(Error::shape("distribution length", bins.count, dist.len()));
        }
        let mut data = Vec::with_capacity(width * height * bins.count);
        for _ in 0..width * height {
            data.extend_from_slice(&dist.weights);
        }
        Self::new(bins, width, height, data)
    }

    /// Builds a map from per-cell optional distributions (`None` = no evidence).
    pub fn from_cells(
        bins: DepthBins,
        width: usize,
        height: usize,
        cells: impl IntoIterator<Item = Option<DepthDistribution>>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * bins.count);
        for cell in cells {
            match cell {
                Some(d) if d.len() == bins.count => data.extend_from_slice(&d.weights),
                Some(d) => return Err(Error::shape("distribution length", bins.count, d.len())),
                None => data.extend(std::iter::repeat_n(0.0, bins.count)),
            }
        }
        Self::new(bins, width, height, data)
    }

    pub fn bins(&self) -> &DepthBins {
        &self.bins
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let n = self.bins.count;
        let start = (y * self.width + x) * n;
        &self.data[start..start + n]
    }

    /// Per-bin bilinear interpolation at feature-map coordinates (cell centers
    /// at `i + 0.5`), clamped to the edge cells.
    pub fn sample_distribution(&self, fu: f64, fv: f64) -> Vec<f64> {
        let n = self.bins.count;
        let mut out = vec![0.0; n];
        for (cell, w) in bilinear_taps(fu, fv, self.width, self.height) {
            for (o, s) in out.iter_mut().zip(&self.data[cell * n..(cell + 1) * n]) {
                *o += w * s;
            }
        }
        out
    }

    /// Consistency of depth `d` with the distribution sampled at `(fu, fv)`.
    ///
    /// Only the two bins touched by the two-hot encoding are interpolated.
    pub fn consistency_at(&self, fu: f64, fv: f64, d: f64) -> f64 {
        let TwoHot::InRange {
            lower_bin,
            lower,
            upper,
        } = two_hot(d, &self.bins)
        else {
            return 0.0;
        };
        let n = self.bins.count;
        let (mut wl, mut wu) = (0.0, 0.0);
        for (cell, w) in bilinear_taps(fu, fv, self.width, self.height) {
            wl += w * self.data[cell * n + lower_bin];
            wu += w * self.data[cell * n + lower_bin + 1];
        }
        wl * lower + wu * upper
    }
}
