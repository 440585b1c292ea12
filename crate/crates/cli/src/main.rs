use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fbvt_cli::{
    bench_csv, cmd_bench, cmd_consistency_map, cmd_pipeline, cmd_sparsity, parse_bins, parse_list,
    pipeline_sparsity_csv, rig_or_reference, sparsity_csv, write_consistency_maps, CliError,
    Overrides, Result, Settings,
};

#[derive(Parser)]
#[command(
    name = "fbvt",
    version,
    about = "Forward-backward camera-to-BEV view transformation tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Geometric BEV occupancy of a camera rig at several grid sizes.
    Sparsity {
        /// Rig JSON; the bundled reference rig when omitted.
        #[arg(long)]
        rig: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Depth-consistency map over the BEV plane for a scene.
    ConsistencyMap {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one map per reference height.
        #[arg(long)]
        per_height: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Time the pooling and refinement kernels.
    Bench {
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Forward projection, foreground selection and backward refinement.
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated square BEV sizes.
    #[arg(long)]
    bev: Option<String>,
    /// Feature stride, overriding the rig's.
    #[arg(long)]
    stride: Option<usize>,
    /// Depth bins as d0,delta,count.
    #[arg(long)]
    bins: Option<String>,
    /// Foreground threshold.
    #[arg(long)]
    tf: Option<f64>,
    /// Oracle depth spread in meters.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let flags = Overrides {
            bev: self.bev.as_deref().map(parse_list).transpose()?,
            bins: self.bins.as_deref().map(parse_bins).transpose()?,
            stride: self.stride,
            tf: self.tf,
            sigma: self.sigma,
            seed: self.seed,
            ..Default::default()
        };
        Settings::from_sources(flags, self.config.as_deref())
    }
}

fn load_scene(path: &std::path::Path, settings: &Settings) -> Result<fbvt_core::Scene> {
    let scene = fbvt_core::io::load_scene(path)?;
    let rig = settings.apply_stride(scene.rig().clone())?;
    Ok(scene.with_rig(rig))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sparsity { rig, common } => {
            let s = common.settings()?;
            let rig = s.apply_stride(rig_or_reference(rig.as_deref())?)?;
            let rows = cmd_sparsity(&rig, &s.bins, &s.bev, s.half_extent)?;
            print!("{}", sparsity_csv(&rows));
        }
        Command::ConsistencyMap {
            scene,
            out,
            per_height,
            common,
        } => {
            let s = common.settings()?;
            let scene = load_scene(&scene, &s)?;
            let maps = cmd_consistency_map(&scene, &s)?;
            for p in write_consistency_maps(&maps, &out, per_height)? {
                println!("{}", p.display());
            }
        }
        Command::Bench { rig, reps, common } => {
            let s = common.settings()?;
            let rig = s.apply_stride(rig_or_reference(rig.as_deref())?)?;
            print!("{}", bench_csv(&cmd_bench(&rig, &s, reps)?));
        }
        Command::Pipeline { scene, out, common } => {
            let s = common.settings()?;
            let scene = load_scene(&scene, &s)?;
            let result = cmd_pipeline(&scene, &s, &out)?;
            print!("{}", pipeline_sparsity_csv(&result));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let detail = e.kind().to_string();
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or(&detail)
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::InvalidArgs(first.to_string()).diagnostic());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            ExitCode::FAILURE
        }
    }
}
