//! Command-line front end for the saliency preprocessing pipeline.
//!
//! Every stage of the pipeline is exposed as its own subcommand so a stage
//! can be re-run from the previous stage's on-disk dump; `run` chains them
//! all and writes `report.json`. `confound`, `overlay`, `fraction` and
//! `validate` are dataset utilities around the same trajectory layout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use autofocus_core::confound::{confound_dataset, IconConfig};
use autofocus_core::detect::{Detector, DetectorSource};
use autofocus_core::manifest::{load_manifest, Trajectory};
use autofocus_core::pipeline::{
    discover_trajectories, overlay_trajectory, run_dataset, stage_context, stage_detect,
    stage_filter, stage_saliency, stage_segment, stage_track, validate_dataset,
    write_supervision_manifest, RunOptions, REPORT_FILE,
};
use autofocus_core::vlm::{HttpTransport, MockTransport, VlmClient, ENV_MODEL};
use autofocus_core::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "autofocus", version, about = "Saliency preprocessing for imitation-learning datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset directory, or a single trajectory directory.
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output root; each trajectory writes under <OUT>/<name>/.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Pipeline parameter file (JSON); replaces the preset.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in parameter preset.
    #[arg(long, value_name = "NAME", default_value = "carla", value_parser = ["carla", "robot"])]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => PipelineConfig::preset(&self.preset)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct VlmArgs {
    /// Scripted VLM fixture (JSON map of trajectory name to reply list).
    /// Without it the client is configured from AUTOFOCUS_VLM_BASE_URL,
    /// AUTOFOCUS_VLM_API_KEY and AUTOFOCUS_VLM_MODEL.
    #[arg(long, value_name = "FILE")]
    mock_vlm: Option<PathBuf>,
}

impl VlmArgs {
    fn client(&self) -> anyhow::Result<VlmClient> {
        match &self.mock_vlm {
            Some(path) => {
                let transport = MockTransport::from_file(path)
                    .with_context(|| format!("loading mock fixture {}", path.display()))?;
                Ok(VlmClient::new(Arc::new(transport), "mock"))
            }
            None => {
                let transport = HttpTransport::from_env()?;
                let model = std::env::var(ENV_MODEL)
                    .map_err(|_| anyhow::anyhow!("{ENV_MODEL} is not set"))?;
                Ok(VlmClient::new(Arc::new(transport), model))
            }
        }
    }
}

#[derive(Debug, Args)]
struct DetectorArgs {
    /// Detection fixture (JSON); a relative path resolves inside each
    /// trajectory directory, an absolute path is shared.
    #[arg(long, value_name = "FILE", group = "detector_source")]
    detections: Option<PathBuf>,
    /// Open-vocabulary detector endpoint exposing POST /detect.
    #[arg(long, value_name = "URL", group = "detector_source")]
    detector_url: Option<String>,
    /// Cache directory for detector service responses.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
}

impl DetectorArgs {
    fn build(&self) -> anyhow::Result<Detector> {
        let source = match (&self.detections, &self.detector_url) {
            (Some(path), None) => DetectorSource::Fixture(path.clone()),
            (None, Some(url)) => DetectorSource::Service { url: url.clone() },
            _ => bail!("pass --detections <fixture> or --detector-url <url>"),
        };
        Ok(Detector::new(source).with_cache_dir(self.cache_dir.clone()))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Query the VLM once per trajectory for a context summary.
    Context {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        vlm: VlmArgs,
    },
    /// Detect the context vocabulary on every frame.
    Detect {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Associate detections across frames into tracks.
    Track {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Split each trajectory into constant-active-set sub-sequences.
    Segment {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Pick key objects per sub-sequence, retrying flagged missing categories.
    Filter {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        vlm: VlmArgs,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Render and export per-frame saliency maps (PNG + raw f32).
    Saliency {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every stage over the dataset and write report.json.
    Run {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        vlm: VlmArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        /// Worker pool size (default: one worker per CPU).
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
        /// Stop scheduling after the first trajectory failure and exit nonzero.
        #[arg(long)]
        strict: bool,
    },
    /// Copy the dataset with previous-action icons drawn in the top margin.
    Confound {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Icon geometry file (JSON); missing fields keep their defaults.
        #[arg(long, value_name = "FILE")]
        icon_config: Option<PathBuf>,
    },
    /// Blend frames with their exported saliency maps for inspection.
    Overlay {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Inclusive frame range, e.g. 3..17 or a single index (default: all).
        #[arg(long, value_name = "RANGE", value_parser = parse_frame_range)]
        frames: Option<(usize, usize)>,
        /// Outline key-object boxes on top of the blend.
        #[arg(long)]
        boxes: bool,
    },
    /// Draw the supervised-frame subset for a supervision fraction.
    Fraction {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Fraction of frames to supervise, in (0, 1].
        #[arg(long, value_name = "F")]
        fraction: f64,
        /// Sampling seed.
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
    /// Check every manifest in the dataset and report problems.
    Validate {
        #[command(flatten)]
        dataset: DatasetArgs,
    },
}

fn parse_frame_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |part: &str| {
        part.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad frame range {s:?}; expected START..END or a single index"))
    };
    match s.split_once("..") {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => parse(s).map(|t| (t, t)),
    }
}

/// Loads each discovered trajectory and hands it to `f` with its output
/// directory. Stage subcommands abort on the first error.
fn for_each(
    dataset: &Path,
    out_root: &Path,
    mut f: impl FnMut(&Trajectory, &Path) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    for dir in discover_trajectories(dataset)? {
        let traj = load_manifest(&dir.join("manifest.json"))?;
        let out_dir = out_root.join(traj.name());
        f(&traj, &out_dir).with_context(|| format!("trajectory {}", traj.name()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Context { dataset, out, config, vlm } => {
            let cfg = config.load()?;
            let client = vlm.client()?;
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let context = stage_context(traj, out_dir, &cfg, &client)?;
                println!("{}: context with {} vocabulary terms", traj.name(), context.vocabulary.len());
                Ok(())
            })?;
        }
        Command::Detect { dataset, out, config, detector } => {
            let cfg = config.load()?;
            let det = detector.build()?;
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let frames = stage_detect(traj, out_dir, &cfg, &det)?;
                let n: usize = frames.iter().map(|f| f.detections.len()).sum();
                println!("{}: {} detections over {} frames", traj.name(), n, frames.len());
                Ok(())
            })?;
        }
        Command::Track { dataset, out, config } => {
            let cfg = config.load()?;
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let tracks = stage_track(traj, out_dir, &cfg)?;
                println!("{}: {} tracks", traj.name(), tracks.len());
                Ok(())
            })?;
        }
        Command::Segment { dataset, out } => {
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let subs = stage_segment(traj, out_dir)?;
                println!("{}: {} sub-sequences", traj.name(), subs.len());
                Ok(())
            })?;
        }
        Command::Filter { dataset, out, config, vlm, detector } => {
            let cfg = config.load()?;
            let client = vlm.client()?;
            let det = detector.build()?;
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let outcome = stage_filter(traj, out_dir, &cfg, &client, &det)?;
                println!(
                    "{}: {} sub-sequences, {} VLM calls",
                    traj.name(),
                    outcome.state.subsequences.len(),
                    outcome.vlm_calls
                );
                for warning in &outcome.warnings {
                    eprintln!("{}: warning: {warning}", traj.name());
                }
                Ok(())
            })?;
        }
        Command::Saliency { dataset, out, config } => {
            let cfg = config.load()?;
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let n = stage_saliency(traj, out_dir, &cfg)?;
                println!("{}: {n} saliency maps", traj.name());
                Ok(())
            })?;
        }
        Command::Run { dataset, out, config, vlm, detector, jobs, strict } => {
            let cfg = config.load()?;
            let client = vlm.client()?;
            let det = detector.build()?;
            let options = RunOptions { jobs, strict };
            let report = run_dataset(&dataset.dataset, &out.out, &cfg, &client, &det, &options)
                .with_context(|| {
                    format!("run aborted; partial report at {}", out.out.join(REPORT_FILE).display())
                })?;
            for t in &report.trajectories {
                match &t.error {
                    None => println!(
                        "{}: ok ({} frames, {} tracks, {} sub-sequences, {} VLM calls)",
                        t.name, t.frames, t.tracks, t.subsequences, t.vlm_calls
                    ),
                    Some(e) => println!("{}: FAILED: {e}", t.name),
                }
                for warning in &t.warnings {
                    eprintln!("{}: warning: {warning}", t.name);
                }
            }
            println!("report: {}", out.out.join(REPORT_FILE).display());
            let failures = report.failures();
            if failures > 0 {
                eprintln!("{failures} of {} trajectories failed", report.trajectories.len());
            }
        }
        Command::Confound { dataset, out, icon_config } => {
            let cfg = match &icon_config {
                Some(path) => IconConfig::from_file(path)?,
                None => IconConfig::default(),
            };
            let n = confound_dataset(&dataset.dataset, &out.out, &cfg)?;
            println!("confounded {n} trajectories into {}", out.out.display());
        }
        Command::Overlay { dataset, out, frames, boxes } => {
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let n = overlay_trajectory(traj, out_dir, frames, boxes)?;
                println!("{}: {n} overlays", traj.name());
                Ok(())
            })?;
        }
        Command::Fraction { dataset, out, fraction, seed } => {
            for_each(&dataset.dataset, &out.out, |traj, out_dir| {
                let manifest = write_supervision_manifest(traj, out_dir, fraction, seed)?;
                println!(
                    "{}: {} of {} frames supervised",
                    traj.name(),
                    manifest.frames.len(),
                    traj.len()
                );
                Ok(())
            })?;
        }
        Command::Validate { dataset } => {
            let results = validate_dataset(&dataset.dataset)?;
            let mut bad = 0;
            for (name, error) in &results {
                match error {
                    None => println!("{name}: ok"),
                    Some(e) => {
                        bad += 1;
                        println!("{name}: {e}");
                    }
                }
            }
            if bad > 0 {
                eprintln!("{bad} of {} trajectories invalid", results.len());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
