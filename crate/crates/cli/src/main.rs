use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod run;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    /// Problems in the scene, its assets or the evaluation inputs.
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "drillsim", version, about = "Volumetric drilling simulator and synthetic data generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a scene with a scripted trajectory or live control
    Run(RunArgs),
    /// Run a scene live, streaming to clients until interrupted
    Serve(ServeArgs),
    /// Convert an NRRD label volume to a slice stack, or a slice stack to NRRD
    Convert(ConvertArgs),
    /// Play back a recording
    Replay(ReplayArgs),
    /// Score pose or depth estimates against a recording
    Eval(EvalArgs),
    /// Write a synthetic temporal-bone scene
    Phantom(PhantomArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    /// Number of frames to render, then stop
    #[arg(long, value_name = "N")]
    pub frames: Option<u64>,
    /// moving_camera, moving_drill or a trajectory YAML file
    #[arg(long, value_name = "TRAJECTORY")]
    pub trajectory: Option<String>,
    /// Write every published message to this recording
    #[arg(long, value_name = "PATH")]
    pub record: Option<PathBuf>,
    /// Allow --record to replace an existing file
    #[arg(long)]
    pub force: bool,
    /// Stereo baseline override, meters
    #[arg(long, value_name = "M")]
    pub baseline: Option<f64>,
    /// Image size override
    #[arg(long, value_name = "WxH", value_parser = parse_size)]
    pub size: Option<(u32, u32)>,
    /// Seed for the input tremor noise
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Physics ticks per rendered frame
    #[arg(long, value_name = "K", default_value_t = 33)]
    pub render_every: u64,
    /// Physics rate, Hz
    #[arg(long, value_name = "HZ", default_value_t = 1000.0)]
    pub physics_hz: f64,
    /// Standard deviation of drill input tremor, meters
    #[arg(long, value_name = "M", default_value_t = 1e-5)]
    pub tremor: f64,
    /// Publish frames at this rate instead of every frame, Hz
    #[arg(long, value_name = "HZ")]
    pub publish_hz: Option<f64>,
    /// Rate of object pose messages
    #[arg(long, value_enum, default_value_t = PoseRateArg::Render)]
    pub pose_rate: PoseRateArg,
    /// Object to publish poses for (repeatable; default: all bodies and volumes)
    #[arg(long = "track", value_name = "OBJECT")]
    pub track: Vec<String>,
    /// Replace the scene volume with this slice-stack descriptor
    #[arg(long, value_name = "DESCRIPTOR")]
    pub volume: Option<PathBuf>,
    /// Worker threads for rendering (default: all cores)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoseRateArg {
    Render,
    Physics,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Scene launch file
    pub launch: PathBuf,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Serve live on this address (TCP and WebSocket)
    #[arg(long, value_name = "ADDR")]
    pub serve: Option<String>,
    /// Pace the loop to wall-clock time (implied by --serve)
    #[arg(long)]
    pub realtime: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Scene launch file
    pub launch: PathBuf,
    /// Address to listen on (TCP and WebSocket)
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:9090")]
    pub addr: String,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// An .nrrd volume or a slice-stack descriptor (.yaml)
    pub input: PathBuf,
    /// Output directory for a slice stack, or .nrrd file for a descriptor input
    pub output: PathBuf,
    /// File name prefix of the written slices
    #[arg(long, default_value = "slice_")]
    pub prefix: String,
    /// Replace existing output
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Recording to play
    pub recording: PathBuf,
    /// Playback speed factor; 0 plays as fast as possible
    #[arg(long, value_name = "X", default_value_t = 1.0)]
    pub speed: f64,
    /// Write the replayed messages to a new recording
    #[arg(long, value_name = "PATH")]
    pub record: Option<PathBuf>,
    /// Allow --record to replace an existing file
    #[arg(long)]
    pub force: bool,
    /// Stream the replay on this address
    #[arg(long, value_name = "ADDR")]
    pub serve: Option<String>,
    /// Scene whose volume the recorded edits are applied to (with --volume-out)
    #[arg(long, value_name = "LAUNCH", requires = "volume_out")]
    pub scene: Option<PathBuf>,
    /// Write the edited volume as a slice stack into this directory
    #[arg(long, value_name = "DIR", requires = "scene")]
    pub volume_out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Pose,
    Depth,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    None,
    #[value(name = "first_frame")]
    FirstFrame,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth recording
    pub recording: PathBuf,
    /// Pose estimates (frame_id tx ty tz qw qx qy qz) or depth estimates
    /// (recording, PFM file or directory of <frame>.pfm)
    pub estimates: PathBuf,
    /// What the estimates are
    #[arg(long, value_enum, default_value_t = EvalMode::Pose)]
    pub mode: EvalMode,
    /// Object whose poses are scored (left_camera and right_camera name the stereo cameras)
    #[arg(long, default_value = "drill")]
    pub object: String,
    /// Express ground truth in the frame of this object
    #[arg(long, value_name = "OBJECT")]
    pub relative_to: Option<String>,
    /// Map estimates onto ground truth before scoring
    #[arg(long, value_enum, default_value_t = AlignArg::None)]
    pub align: AlignArg,
    /// Frame index of a single PFM depth estimate
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub frame: u64,
    /// Write a JSON summary here
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory
    pub out: PathBuf,
    /// Voxels per edge
    #[arg(long, default_value_t = 128)]
    pub voxels: usize,
    /// Camera image size
    #[arg(long, value_name = "WxH", value_parser = parse_size, default_value = "640x480")]
    pub size: (u32, u32),
    /// Stereo baseline, meters
    #[arg(long, value_name = "M", default_value_t = 0.065)]
    pub baseline: f64,
}

pub fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<u32>().ok().filter(|&n| n > 0);
    match (p(w), p(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected positive WxH, got `{s}`")),
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run(a) => run::cmd_run(&a.launch, &a.sim, a.serve.as_deref(), a.realtime),
        Command::Serve(a) => run::cmd_run(&a.launch, &a.sim, Some(&a.addr), true),
        Command::Convert(a) => commands::cmd_convert(&a),
        Command::Replay(a) => commands::cmd_replay(&a),
        Command::Eval(a) => commands::cmd_eval(&a),
        Command::Phantom(a) => commands::cmd_phantom(&a),
    }
}

/// The error and its causes, skipping causes already quoted by the message
/// above them.
fn error_text(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.ends_with(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", error_text(&f.error));
            ExitCode::from(f.code)
        }
    }
}
