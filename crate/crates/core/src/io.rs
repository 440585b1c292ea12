//! File formats: JSON rigs and scenes, the little-endian `FBBT` tensor
//! container, and binary PGM maps.
//!
//! Tensor layout: magic `FBBT`, `u32` version (1), `u32` rank, `rank` `u32`
//! dims, then `prod(dims)` little-endian `f32` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvtm::{DeformableParams, Linear};
use crate::error::{Error, Result};
use crate::frpn::{Box3D, MaskHeadWeights};
use crate::fvtm::BevGrid;
use crate::geometry::{Camera, Rig};
use crate::pipeline::{Scene, SceneObject};

pub const TENSOR_MAGIC: &[u8; 4] = b"FBBT";
pub const TENSOR_VERSION: u32 = 1;

/// Bundled nuScenes-like 6-camera rig (256x704 input, stride 16).
pub const REFERENCE_RIG_JSON: &str = include_str!("../data/reference_rig.json");

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub cameras: Vec<CameraFile>,
}

impl RigFile {
    pub fn to_rig(&self) -> Result<Rig> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                Camera::new(
                    c.name.clone(),
                    c.width,
                    c.height,
                    Matrix3::from_row_slice(&c.k),
                    Matrix3::from_row_slice(&c.r),
                    Vector3::from_row_slice(&c.t),
                    c.stride,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Rig::new(cameras)
    }

    pub fn from_rig(rig: &Rig) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[r * 3 + c] = m[(r, c)];
                }
            }
            out
        };
        Self {
            cameras: rig
                .cameras()
                .iter()
                .map(|c| CameraFile {
                    name: c.name().to_string(),
                    width: c.width(),
                    height: c.height(),
                    stride: c.feature_stride(),
                    k: row_major(c.intrinsics()),
                    r: row_major(c.rotation()),
                    t: [c.translation().x, c.translation().y, c.translation().z],
                })
                .collect(),
        }
    }
}

pub fn parse_rig(json: &str, origin: &Path) -> Result<Rig> {
    let file: RigFile =
        serde_json::from_str(json).map_err(|e| format_err(origin, e.to_string()))?;
    file.to_rig()
}

pub fn load_rig(path: impl AsRef<Path>) -> Result<Rig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_rig(&text, path)
}

pub fn save_rig(path: impl AsRef<Path>, rig: &Rig) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&RigFile::from_rig(rig))
        .map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn reference_rig() -> Rig {
    parse_rig(REFERENCE_RIG_JSON, Path::new("<bundled reference rig>"))
        .expect("bundled reference rig is valid")
}

/// A dense `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor data", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// BEV features as `[grid_h, grid_w, channels]`.
    pub fn from_bev(grid: &BevGrid) -> Self {
        let s = grid.spec();
        Self::from_f64(vec![s.grid_h, s.grid_w, s.channels], grid.features())
            .expect("BEV feature length matches its spec")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cursor = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let chunk = bytes.get(cursor..cursor + n).ok_or_else(|| {
                format_err(
                    origin,
                    format!("truncated tensor: missing {what} at byte {cursor}"),
                )
            })?;
            cursor += n;
            Ok(chunk)
        };
        let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);

        if take(4, "magic")? != TENSOR_MAGIC {
            return Err(format_err(origin, "bad magic, expected FBBT"));
        }
        let version = read_u32(take(4, "version")?);
        if version != TENSOR_VERSION {
            return Err(format_err(
                origin,
                format!("unsupported tensor version {version}"),
            ));
        }
        let rank = read_u32(take(4, "rank")?) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(take(4, "dims")?) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(origin, "tensor dims overflow"))?;
        let payload = &bytes[cursor..];
        if payload.len() != n * 4 {
            return Err(format_err(
                origin,
                format!("payload length {} bytes, expected {}", payload.len(), n * 4),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(io_err(path))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Tensor::decode(&bytes, path)
}

/// Binary PGM (P5, maxval 255) of values in `[0, 1]`, clamped and rounded.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "PGM size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (255.0 * v).round() as u8
    }));
    out
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, values)).map_err(io_err(path))
}

/// Parses a P5 image written by [`encode_pgm`]; returns `(width, height, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
        pos += 1;
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos..)?.to_vec();
    (data.len() == w * h).then_some((w, h, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxFile {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    /// Generated from the scene seed when absent.
    #[serde(default)]
    pub feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RigRef {
    Path(PathBuf),
    Inline(RigFile),
}

/// Scene description. Without `ground_z` (or with `null`) the scene has no
/// ground plane. `random_boxes` appends seeded random boxes after the
/// explicit ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub rig: RigRef,
    #[serde(default)]
    pub ground_z: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub channels: usize,
    #[serde(default)]
    pub boxes: Vec<BoxFile>,
    #[serde(default)]
    pub random_boxes: usize,
}

impl SceneFile {
    /// Resolves a relative rig path against `base_dir`.
    pub fn to_scene(&self, base_dir: &Path) -> Result<Scene> {
        let rig = match &self.rig {
            RigRef::Path(p) => load_rig(base_dir.join(p))?,
            RigRef::Inline(f) => f.to_rig()?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_f00d);
        let mut objects = Vec::with_capacity(self.boxes.len());
        for b in &self.boxes {
            let feature = match &b.feature {
                Some(f) => f.clone(),
                None => (0..self.channels)
                    .map(|_| rng.random_range(0.1..1.0))
                    .collect(),
            };
            objects.push(SceneObject {
                bbox: Box3D::new(Vector3::from_row_slice(&b.center), b.size, b.yaw)?,
                feature,
            });
        }
        if self.random_boxes > 0 {
            let extra = Scene::random(
                rig.clone(),
                self.random_boxes,
                self.channels,
                self.ground_z.unwrap_or(0.0),
                self.seed,
            )?;
            objects.extend(extra.objects().iter().cloned());
        }
        Scene::new(rig, objects, self.ground_z, self.channels, self.seed)
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: SceneFile =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    file.to_scene(path.parent().unwrap_or(Path::new(".")))
}

fn expect_dims(t: &Tensor, dims: &[usize], path: &Path) -> Result<()> {
    if t.dims != dims {
        return Err(format_err(
            path,
            format!("expected dims {dims:?}, found {:?}", t.dims),
        ));
    }
    Ok(())
}

/// Loads `mask_kernel.fbbt` (`[3, 3, C]`) and `mask_bias.fbbt` (`[1]`) from `dir`.
pub fn load_mask_head(dir: impl AsRef<Path>) -> Result<MaskHeadWeights> {
    let dir = dir.as_ref();
    let kp = dir.join("mask_kernel.fbbt");
    let kernel = load_tensor(&kp)?;
    if kernel.dims.len() != 3 || kernel.dims[..2] != [3, 3] {
        return Err(format_err(
            &kp,
            format!("expected dims [3, 3, C], found {:?}", kernel.dims),
        ));
    }
    let bp = dir.join("mask_bias.fbbt");
    let bias = load_tensor(&bp)?;
    expect_dims(&bias, &[1], &bp)?;
    MaskHeadWeights::new(kernel.dims[2], kernel.to_f64(), f64::from(bias.data[0]))
}

pub fn save_mask_head(dir: impl AsRef<Path>, w: &MaskHeadWeights) -> Result<()> {
    let dir = dir.as_ref();
    save_tensor(
        dir.join("mask_kernel.fbbt"),
        &Tensor::from_f64(vec![3, 3, w.channels()], w.kernel())?,
    )?;
    save_tensor(
        dir.join("mask_bias.fbbt"),
        &Tensor::from_f64(vec![1], &[w.bias()])?,
    )
}

const LINEAR_FILES: [&str; 4] = ["offset", "attn", "value", "output"];

fn load_linear(dir: &Path, stem: &str) -> Result<Linear> {
    let wp = dir.join(format!("{stem}_weight.fbbt"));
    let w = load_tensor(&wp)?;
    if w.dims.len() != 2 {
        return Err(format_err(
            &wp,
            format!("expected rank 2, found {:?}", w.dims),
        ));
    }
    let bp = dir.join(format!("{stem}_bias.fbbt"));
    let b = load_tensor(&bp)?;
    expect_dims(&b, &[w.dims[0]], &bp)?;
    Linear::new(w.dims[1], w.dims[0], w.to_f64(), b.to_f64())
}

/// Loads `{offset,attn,value,output}_{weight,bias}.fbbt` from `dir`. Weights
/// are `[out, in]`; the points per head follow from the attention rows.
pub fn load_deformable_params(dir: impl AsRef<Path>, heads: usize) -> Result<DeformableParams> {
    let dir = dir.as_ref();
    let [offset, attn, value, output] = LINEAR_FILES.map(|s| load_linear(dir, s));
    let attn = attn?;
    if heads == 0 || attn.out_dim() % heads != 0 {
        return Err(Error::InvalidParams(format!(
            "{} attention rows do not split over {heads} heads",
            attn.out_dim()
        )));
    }
    DeformableParams::new(
        heads,
        attn.out_dim() / heads,
        offset?,
        attn,
        value?,
        output?,
    )
}

pub fn save_deformable_params(dir: impl AsRef<Path>, p: &DeformableParams) -> Result<()> {
    let dir = dir.as_ref();
    let maps = [
        p.offset_map(),
        p.weight_map(),
        p.value_map(),
        p.output_map(),
    ];
    for (stem, l) in LINEAR_FILES.iter().zip(maps) {
        save_tensor(
            dir.join(format!("{stem}_weight.fbbt")),
            &Tensor::from_f64(vec![l.out_dim(), l.in_dim()], l.weight())?,
        )?;
        save_tensor(
            dir.join(format!("{stem}_bias.fbbt")),
            &Tensor::from_f64(vec![l.out_dim()], l.bias())?,
        )?;
    }
    Ok(())
}
