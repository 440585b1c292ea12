//! Command implementations behind the `fbvt` binary.
//!
//! Every command is a plain function returning its rows or artifacts so it
//! can be driven in-process; the binary only parses flags, resolves the
//! configuration and prints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use fbvt_core::bvtm::height_consistency;
use fbvt_core::io::{self, Tensor};
use fbvt_core::pipeline::render_inputs;
use fbvt_core::{
    occupancy_stats, rasterize_gt_mask, refine, select_queries, splat_naive, splat_pooled,
    BackwardConfig, BevSpec, DeformableParams, DepthBins, DepthDistMap, DepthDistribution,
    FeatureMap, ForegroundMask, ForwardProjector, HeightSampling, LiftedPoints, MaskHeadWeights,
    Normalization, PipelineConfig, PipelineOutput, Rig, Scene, SparsityReport,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fbvt_core::Error),
    #[error("{0}")]
    InvalidArgs(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Core(e) => e.code(),
            Self::InvalidArgs(_) => "invalid-args",
        }
    }

    /// The single diagnostic line printed on failure.
    pub fn diagnostic(&self) -> String {
        let detail = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {}", self.code(), detail)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::InvalidArgs(msg.into())
}

/// Optional settings, as read from a JSON config file or collected from
/// flags. Resolution order: flags, then config file, then defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// `[d0, delta, count]`.
    pub bins: Option<(f64, f64, usize)>,
    pub bev: Option<Vec<usize>>,
    pub half_extent: Option<f64>,
    pub stride: Option<usize>,
    pub tf: Option<f64>,
    pub sigma: Option<f64>,
    pub weight_floor: Option<f64>,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
    pub n_ref: Option<usize>,
    pub heads: Option<usize>,
    pub points_per_head: Option<usize>,
    /// `"valid-hits"` or `"none"`.
    pub normalization: Option<String>,
    pub depth_aware: Option<bool>,
    pub params_dir: Option<PathBuf>,
    pub mask_weights_dir: Option<PathBuf>,
    pub channels: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| fbvt_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut o: Self = serde_json::from_str(&text).map_err(|e| fbvt_core::Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        // directories in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        o.params_dir = o.params_dir.map(|p| base.join(p));
        o.mask_weights_dir = o.mask_weights_dir.map(|p| base.join(p));
        Ok(o)
    }

    /// Fills every unset field of `self` from `fallback`.
    pub fn or(self, fallback: Self) -> Self {
        Self {
            bins: self.bins.or(fallback.bins),
            bev: self.bev.or(fallback.bev),
            half_extent: self.half_extent.or(fallback.half_extent),
            stride: self.stride.or(fallback.stride),
            tf: self.tf.or(fallback.tf),
            sigma: self.sigma.or(fallback.sigma),
            weight_floor: self.weight_floor.or(fallback.weight_floor),
            z_min: self.z_min.or(fallback.z_min),
            z_max: self.z_max.or(fallback.z_max),
            n_ref: self.n_ref.or(fallback.n_ref),
            heads: self.heads.or(fallback.heads),
            points_per_head: self.points_per_head.or(fallback.points_per_head),
            normalization: self.normalization.or(fallback.normalization),
            depth_aware: self.depth_aware.or(fallback.depth_aware),
            params_dir: self.params_dir.or(fallback.params_dir),
            mask_weights_dir: self.mask_weights_dir.or(fallback.mask_weights_dir),
            channels: self.channels.or(fallback.channels),
            seed: self.seed.or(fallback.seed),
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub bins: DepthBins,
    pub bev: Vec<usize>,
    pub half_extent: f64,
    /// `None` keeps the stride stored in the rig.
    pub stride: Option<usize>,
    pub tf: f64,
    pub sigma: f64,
    pub weight_floor: f64,
    pub backward: BackwardConfig,
    pub heads: usize,
    pub points_per_head: usize,
    pub params_dir: Option<PathBuf>,
    pub mask_weights_dir: Option<PathBuf>,
    /// Feature channels for synthetic workloads (the bench command).
    pub channels: usize,
    pub seed: u64,
}

pub const DEFAULT_BEV_SIZE: usize = 128;
pub const DEFAULT_HALF_EXTENT: f64 = 51.2;
pub const DEFAULT_BENCH_CHANNELS: usize = 16;

impl Default for Settings {
    fn default() -> Self {
        Self::resolve(Overrides::default()).expect("defaults are valid")
    }
}

impl Settings {
    pub fn resolve(o: Overrides) -> Result<Self> {
        let defaults = PipelineConfig::with_channels(1);
        let bins = match o.bins {
            Some((d0, delta, count)) => DepthBins::new(d0, delta, count)?,
            None => DepthBins::default(),
        };
        let bev = o.bev.unwrap_or_else(|| vec![DEFAULT_BEV_SIZE]);
        if bev.is_empty() || bev.contains(&0) {
            return Err(invalid("BEV sizes must be positive"));
        }
        let hs = HeightSampling::default();
        let heights = HeightSampling::new(
            o.z_min.unwrap_or(hs.z_min),
            o.z_max.unwrap_or(hs.z_max),
            o.n_ref.unwrap_or(hs.n_ref),
        )?;
        let normalization = match o.normalization.as_deref() {
            None | Some("valid-hits") => Normalization::ValidHits,
            Some("none") => Normalization::None,
            Some(other) => {
                return Err(invalid(format!(
                    "normalization must be \"valid-hits\" or \"none\", found {other:?}"
                )))
            }
        };
        if o.stride == Some(0) {
            return Err(invalid("stride must be positive"));
        }
        let tf = o.tf.unwrap_or(defaults.threshold);
        if !(0.0..=1.0).contains(&tf) {
            return Err(invalid(format!("tf must lie in [0, 1], found {tf}")));
        }
        let sigma = o.sigma.unwrap_or(defaults.sigma);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!(
                "sigma must be finite and >= 0, found {sigma}"
            )));
        }
        Ok(Self {
            bins,
            bev,
            half_extent: o.half_extent.unwrap_or(DEFAULT_HALF_EXTENT),
            stride: o.stride,
            tf,
            sigma,
            weight_floor: o.weight_floor.unwrap_or(defaults.weight_floor),
            backward: BackwardConfig {
                heights,
                normalization,
                depth_aware: o.depth_aware.unwrap_or(true),
            },
            heads: o.heads.unwrap_or(fbvt_core::bvtm::DEFAULT_HEADS),
            points_per_head: o
                .points_per_head
                .unwrap_or(fbvt_core::bvtm::DEFAULT_POINTS_PER_HEAD),
            params_dir: o.params_dir,
            mask_weights_dir: o.mask_weights_dir,
            channels: o.channels.unwrap_or(DEFAULT_BENCH_CHANNELS),
            seed: o.seed.unwrap_or(0),
        })
    }

    /// Flags override the config file, which overrides the defaults.
    pub fn from_sources(flags: Overrides, config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => Overrides::load(p)?,
            None => Overrides::default(),
        };
        Self::resolve(flags.or(file))
    }

    pub fn apply_stride(&self, rig: Rig) -> Result<Rig> {
        Ok(match self.stride {
            Some(s) => rig.with_feature_stride(s)?,
            None => rig,
        })
    }

    /// BEV spec for the first requested size.
    pub fn spec(&self, channels: usize) -> Result<BevSpec> {
        Ok(BevSpec::square(self.half_extent, self.bev[0], channels)?)
    }

    pub fn pipeline_config(&self, channels: usize) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            spec: self.spec(channels)?,
            bins: self.bins,
            sigma: self.sigma,
            threshold: self.tf,
            weight_floor: self.weight_floor,
            backward: self.backward,
        })
    }

    /// Loaded parameters when a directory is configured, identity maps
    /// with zero offsets otherwise.
    pub fn deformable_params(&self, channels: usize) -> Result<DeformableParams> {
        let params = match &self.params_dir {
            Some(dir) => io::load_deformable_params(dir, self.heads)?,
            None => DeformableParams::identity(channels, self.heads, self.points_per_head)?,
        };
        if params.channels() != channels {
            return Err(invalid(format!(
                "deformable parameters have {} channels, scene has {channels}",
                params.channels()
            )));
        }
        Ok(params)
    }

    pub fn mask_weights(&self) -> Result<Option<MaskHeadWeights>> {
        Ok(match &self.mask_weights_dir {
            Some(dir) => Some(io::load_mask_head(dir)?),
            None => None,
        })
    }
}

/// Every pixel of every camera lifted with a uniform depth distribution and
/// a unit feature: occupancy then depends on geometry alone.
pub fn geometric_points(rig: &Rig, bins: &DepthBins) -> Result<LiftedPoints> {
    let uniform = DepthDistribution::uniform(bins.count());
    let (features, depths): (Vec<_>, Vec<_>) = rig
        .cameras()
        .iter()
        .map(|c| {
            let (w, h) = c.feature_size();
            let d = DepthDistMap::constant(*bins, w, h, &uniform)?;
            Ok((FeatureMap::constant(w, h, c.feature_stride(), &[1.0]), d))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(ForwardProjector::new(rig, *bins).lift_all(&features, &depths)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub bev_size: usize,
    pub report: SparsityReport,
}

pub const SPARSITY_HEADER: &str = "bev_size,total_cells,occupied_cells,occupancy_rate,blank_rate";

/// Geometric BEV occupancy of a rig at each requested grid size.
pub fn cmd_sparsity(
    rig: &Rig,
    bins: &DepthBins,
    sizes: &[usize],
    half_extent: f64,
) -> Result<Vec<SparsityRow>> {
    if sizes.is_empty() {
        return Err(invalid("at least one BEV size is required"));
    }
    let points = geometric_points(rig, bins)?;
    sizes
        .iter()
        .map(|&size| {
            let spec = BevSpec::square(half_extent, size, 1)?;
            let grid = splat_pooled(&points, &spec)?;
            Ok(SparsityRow {
                bev_size: size,
                report: occupancy_stats(&grid),
            })
        })
        .collect()
}

pub fn sparsity_csv(rows: &[SparsityRow]) -> String {
    let mut out = format!("{SPARSITY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.bev_size,
            r.report.total_cells,
            r.report.occupied_cells,
            r.report.occupancy_rate,
            r.report.blank_rate()
        );
    }
    out
}

/// BEV depth-consistency maps, each row-major `grid_h x grid_w` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMaps {
    pub width: usize,
    pub height: usize,
    /// Sum over heights of the best per-camera consistency, divided by the
    /// number of heights.
    pub combined: Vec<f64>,
    /// One map per reference height, lowest first.
    pub per_height: Vec<Vec<f64>>,
}

pub fn cmd_consistency_map(scene: &Scene, settings: &Settings) -> Result<ConsistencyMaps> {
    let spec = settings.spec(scene.channels())?;
    let inputs = render_inputs(scene, &settings.bins, settings.sigma)?;
    let heights = &settings.backward.heights;
    let n_ref = heights.n_ref;
    let mut combined = vec![0.0; spec.num_cells()];
    let mut per_height = vec![vec![0.0; spec.num_cells()]; n_ref];
    for row in 0..spec.grid_h {
        for col in 0..spec.grid_w {
            let cell = spec.flat_index(col, row);
            let w = height_consistency(col, row, &spec, heights, scene.rig(), &inputs.depths)?;
            combined[cell] = w.iter().sum::<f64>() / n_ref as f64;
            for (map, v) in per_height.iter_mut().zip(w) {
                map[cell] = v;
            }
        }
    }
    Ok(ConsistencyMaps {
        width: spec.grid_w,
        height: spec.grid_h,
        combined,
        per_height,
    })
}

/// Writes `consistency.pgm` and, if requested, `consistency_h<k>.pgm`.
pub fn write_consistency_maps(
    maps: &ConsistencyMaps,
    out: &Path,
    per_height: bool,
) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = vec![out.join("consistency.pgm")];
    io::write_pgm(&written[0], maps.width, maps.height, &maps.combined)?;
    if per_height {
        for (k, map) in maps.per_height.iter().enumerate() {
            let p = out.join(format!("consistency_h{k}.pgm"));
            io::write_pgm(&p, maps.width, maps.height, map)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub bev_size: usize,
    /// Lifted points for the splat kernels, query cells for `refine`.
    pub points: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
}

pub const BENCH_HEADER: &str = "kernel,bev_size,points,median_ms,p95_ms";

/// Boxes placed in the synthetic bench scene.
pub const BENCH_BOXES: usize = 6;

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok((percentile(&ms, 0.5), percentile(&ms, 0.95)))
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Random per-pixel features lifted with uniform depth, seeded.
pub fn bench_points(
    rig: &Rig,
    bins: &DepthBins,
    channels: usize,
    seed: u64,
) -> Result<LiftedPoints> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = DepthDistribution::uniform(bins.count());
    let mut features = Vec::new();
    let mut depths = Vec::new();
    for c in rig.cameras() {
        let (w, h) = c.feature_size();
        let data = (0..w * h * channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        features.push(FeatureMap::new(w, h, channels, c.feature_stride(), data)?);
        depths.push(DepthDistMap::constant(*bins, w, h, &uniform)?);
    }
    Ok(ForwardProjector::new(rig, *bins).lift_all(&features, &depths)?)
}

/// Times `splat_naive`, `splat_pooled` and `refine` at each BEV size. The
/// pooled kernel is checked bit-for-bit against the naive one before any
/// timing.
pub fn cmd_bench(rig: &Rig, settings: &Settings, reps: usize) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(invalid("reps must be at least 1"));
    }
    let channels = settings.channels;
    let points = bench_points(rig, &settings.bins, channels, settings.seed)?;
    let scene = Scene::random(rig.clone(), BENCH_BOXES, channels, 0.0, settings.seed)?;
    let inputs = render_inputs(&scene, &settings.bins, settings.sigma)?;
    let params = DeformableParams::random(
        channels,
        settings.heads,
        settings.points_per_head,
        0.5,
        settings.seed,
    )?;
    let projector =
        ForwardProjector::new(rig, settings.bins).with_weight_floor(settings.weight_floor);
    let scene_points = projector.lift_all(&inputs.features, &inputs.depths)?;

    let mut rows = Vec::new();
    for &size in &settings.bev {
        let spec = BevSpec::square(settings.half_extent, size, channels)?;
        let naive = splat_naive(&points, &spec)?;
        let pooled = splat_pooled(&points, &spec)?;
        if !bit_equal(&naive, &pooled) {
            return Err(invalid(format!(
                "splat_pooled differs from splat_naive at BEV size {size}"
            )));
        }
        let (median_ms, p95_ms) = time_reps(reps, || {
            splat_naive(&points, &spec).map(drop).map_err(Into::into)
        })?;
        rows.push(BenchRow {
            kernel: "splat_naive",
            bev_size: size,
            points: points.len(),
            median_ms,
            p95_ms,
        });
        let (median_ms, p95_ms) = time_reps(reps, || {
            splat_pooled(&points, &spec).map(drop).map_err(Into::into)
        })?;
        rows.push(BenchRow {
            kernel: "splat_pooled",
            bev_size: size,
            points: points.len(),
            median_ms,
            p95_ms,
        });

        let bev = splat_pooled(&scene_points, &spec)?;
        let gt = rasterize_gt_mask(&scene.boxes(), &spec);
        let mask =
            ForegroundMask::from_binary(size, size, &gt, fbvt_core::pipeline::ORACLE_MASK_LOGIT)?;
        let queries = select_queries(&bev, &mask, settings.tf)?;
        let (median_ms, p95_ms) = time_reps(reps, || {
            refine(
                &bev,
                &queries,
                rig,
                &inputs.features,
                &inputs.depths,
                &params,
                &settings.backward,
            )
            .map(drop)
            .map_err(Into::into)
        })?;
        rows.push(BenchRow {
            kernel: "refine",
            bev_size: size,
            points: queries.len(),
            median_ms,
            p95_ms,
        });
    }
    Ok(rows)
}

fn bit_equal(a: &fbvt_core::BevGrid, b: &fbvt_core::BevGrid) -> bool {
    a.occupied() == b.occupied()
        && a.features().len() == b.features().len()
        && a.features()
            .iter()
            .zip(b.features())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{:.3}",
            r.kernel, r.bev_size, r.points, r.median_ms, r.p95_ms
        );
    }
    out
}

pub const PIPELINE_SPARSITY_HEADER: &str =
    "stage,total_cells,occupied_cells,occupancy_rate,blank_rate,queries,gt_cells,gt_blank_cells";

/// Blank cells inside the ground-truth foreground mask.
pub fn gt_blank_cells(occupied: &[bool], gt: &[bool]) -> usize {
    occupied.iter().zip(gt).filter(|(o, g)| **g && !**o).count()
}

pub fn pipeline_sparsity_csv(out: &PipelineOutput) -> String {
    let gt_cells = out.gt_mask.iter().filter(|g| **g).count();
    let mut csv = format!("{PIPELINE_SPARSITY_HEADER}\n");
    for (stage, report, grid) in [
        ("forward", &out.before, &out.bev),
        ("refined", &out.after, &out.refined),
    ] {
        let _ = writeln!(
            csv,
            "{stage},{},{},{:.6},{:.6},{},{gt_cells},{}",
            report.total_cells,
            report.occupied_cells,
            report.occupancy_rate,
            report.blank_rate(),
            out.queries.len(),
            gt_blank_cells(grid.occupied(), &out.gt_mask)
        );
    }
    csv
}

/// Files written by [`cmd_pipeline`], relative to the output directory.
pub const PIPELINE_ARTIFACTS: [&str; 6] = [
    "bev.fbbt",
    "mask_logits.fbbt",
    "refined.fbbt",
    "occupancy_before.pgm",
    "occupancy_after.pgm",
    "sparsity.csv",
];

/// Runs the full pipeline on `scene` and writes its artifacts into `out`.
pub fn cmd_pipeline(scene: &Scene, settings: &Settings, out: &Path) -> Result<PipelineOutput> {
    let config = settings.pipeline_config(scene.channels())?;
    let params = settings.deformable_params(scene.channels())?;
    let weights = settings.mask_weights()?;
    let result = fbvt_core::run_pipeline(scene, &config, &params, weights.as_ref())?;

    create_dir(out)?;
    let spec = config.spec;
    io::save_tensor(out.join("bev.fbbt"), &Tensor::from_bev(&result.bev))?;
    io::save_tensor(
        out.join("mask_logits.fbbt"),
        &Tensor::from_f64(vec![spec.grid_h, spec.grid_w], result.mask.logits())?,
    )?;
    io::save_tensor(out.join("refined.fbbt"), &Tensor::from_bev(&result.refined))?;
    let as_image = |occ: &[bool]| {
        occ.iter()
            .map(|&o| f64::from(u8::from(o)))
            .collect::<Vec<_>>()
    };
    io::write_pgm(
        out.join("occupancy_before.pgm"),
        spec.grid_w,
        spec.grid_h,
        &as_image(result.bev.occupied()),
    )?;
    io::write_pgm(
        out.join("occupancy_after.pgm"),
        spec.grid_w,
        spec.grid_h,
        &as_image(result.refined.occupied()),
    )?;
    write_text(&out.join("sparsity.csv"), &pipeline_sparsity_csv(&result))?;
    Ok(result)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| {
        fbvt_core::Error::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| {
        fbvt_core::Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Parses `1,2,3`-style lists.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| invalid(format!("cannot parse {p:?} in list {s:?}")))
        })
        .collect()
}

/// Parses `d0,delta,count`.
pub fn parse_bins(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [d0, delta, count] = parts[..] else {
        return Err(invalid(format!("bins must be d0,delta,count, found {s:?}")));
    };
    let bad = || invalid(format!("bins must be d0,delta,count, found {s:?}"));
    Ok((
        d0.parse().map_err(|_| bad())?,
        delta.parse().map_err(|_| bad())?,
        count.parse().map_err(|_| bad())?,
    ))
}

/// The rig at `path`, or the bundled reference rig.
pub fn rig_or_reference(path: Option<&Path>) -> Result<Rig> {
    Ok(match path {
        Some(p) => io::load_rig(p)?,
        None => io::reference_rig(),
    })
}
