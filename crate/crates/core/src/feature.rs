//! Dense per-camera feature maps and the clamp-to-edge bilinear sampler
//! shared by depth-distribution lookup and deformable sampling.
//!
//! Continuous feature-map coordinates put the center of cell `i` at `i + 0.5`,
//! so an image pixel `u` maps to `u / stride`.

use crate::error::{Error, Result};

/// Row-major `height x width x channels` feature map for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || stride == 0 {
            return Err(Error::shape(
                "feature map",
                "non-zero width, height, channels and stride",
                format!("{width}x{height}x{channels} stride {stride}"),
            ));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "feature map data",
                width * height * channels,
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            stride,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize, stride: usize) -> Self {
        Self::new(
            width,
            height,
            channels,
            stride,
            vec![0.0; width * height * channels],
        )
        .expect("zeros: dimensions must be non-zero")
    }

    /// Fills every cell with the same vector.
    pub fn constant(width: usize, height: usize, stride: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self::new(width, height, value.len(), stride, data)
            .expect("constant: dimensions must be non-zero")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Bilinear sample at feature-map coordinates, clamped to the edge cells.
    pub fn sample(&self, fu: f64, fv: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(fu, fv, &mut out);
        out
    }

    pub fn sample_into(&self, fu: f64, fv: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        for (cell, w) in bilinear_taps(fu, fv, self.width, self.height) {
            let src = &self.data[cell * self.channels..(cell + 1) * self.channels];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
}

/// Four (flat cell index, weight) taps for clamp-to-edge bilinear interpolation
/// on a `width x height` grid. Weights are non-negative and sum to one.
pub(crate) fn bilinear_taps(fu: f64, fv: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let (x0, x1, ax) = axis_taps(fu, width);
    let (y0, y1, ay) = axis_taps(fv, height);
    [
        (y0 * width + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * width + x1, ax * (1.0 - ay)),
        (y1 * width + x0, (1.0 - ax) * ay),
        (y1 * width + x1, ax * ay),
    ]
}

fn axis_taps(coord: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let c = coord - 0.5;
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, max) };
    let i0 = (c.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> FeatureMap {
        // 3x2 map, 1 channel, value = 10*y + x
        let data = vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        FeatureMap::new(3, 2, 1, 16, data).unwrap()
    }

    #[test]
    fn cell_centers_are_exact() {
        let m = ramp();
        for y in 0..2 {
            for x in 0..3 {
                let s = m.sample(x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(s[0], m.at(x, y)[0]);
            }
        }
    }

    #[test]
    fn midpoints_interpolate() {
        let m = ramp();
        assert_eq!(m.sample(1.0, 0.5)[0], 0.5);
        assert_eq!(m.sample(1.5, 1.0)[0], 6.0);
    }

    #[test]
    fn clamps_to_edges() {
        let m = ramp();
        assert_eq!(m.sample(-4.0, -4.0)[0], 0.0);
        assert_eq!(m.sample(100.0, 100.0)[0], 12.0);
        assert_eq!(m.sample(100.0, 0.5)[0], 2.0);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(FeatureMap::new(2, 2, 1, 1, vec![0.0; 3]).is_err());
    }
}
