//! The `splatbridge` command-line tool: serve a session, render and convert
//! scenes, train from captured views, plan captures and run scripted
//! scenarios.

pub mod commands;
pub mod config;
pub mod scenario;
pub mod worlds;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use splatbridge::recon::{default_rings, Ring};

use commands::{parse_ring, parse_vec3, CameraArgs, TrainArgs};
use config::Config;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad arguments, config or input content.
    Usage(String),
    /// Files or sockets that could not be opened, read or written.
    Io(String),
    /// A scenario expectation failed.
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Assertion(_) => 1,
            CliError::Usage(_) | CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "splatbridge", version, about)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the session server until interrupted.
    Serve {
        /// TCP address; overrides `server.listen`.
        #[arg(long)]
        listen: Option<String>,
        /// Disable the web socket bridge.
        #[arg(long)]
        headless: bool,
    },
    /// Render a scene from one viewpoint to .ppm or raw .rgb.
    Render {
        scene: PathBuf,
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,-3")]
        eye: [f64; 3],
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
        target: [f64; 3],
        #[arg(long, value_parser = parse_vec3, default_value = "0,-1,0")]
        up: [f64; 3],
        #[arg(long, default_value_t = 100.0)]
        focal: f64,
        #[arg(long, default_value_t = 128)]
        width: u32,
        #[arg(long, default_value_t = 128)]
        height: u32,
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
        background: [f64; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a scene to a directory of .ppm views taken at a plan's poses.
    Train {
        images: PathBuf,
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        focal: f64,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iters: Option<usize>,
        /// Starting scene; random Gaussians around the plan center otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        gaussians: usize,
    },
    /// Convert between .splat and .ply.
    Convert { input: PathBuf, output: PathBuf },
    /// Write a capture plan around a center point.
    Plan {
        #[arg(long, value_parser = parse_vec3)]
        center: [f64; 3],
        /// radius:height:count, repeatable; the two default rings otherwise.
        #[arg(long = "ring", value_parser = parse_ring)]
        rings: Vec<Ring>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario script against a fresh stepped server.
    Scenario {
        /// Script path, or `builtin:occluded_button`.
        script: String,
        /// Transcript output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
}

pub fn load_config(path: Option<&std::path::Path>, seed: Option<u64>) -> Result<Config, CliError> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(cfg.with_seed(seed))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Serve { listen, headless } => {
            if let Some(l) = listen {
                cfg.server.listen = l;
            }
            commands::cmd_serve(&cfg, headless, None)
        }
        Command::Render { scene, eye, target, up, focal, width, height, background, out } => {
            commands::cmd_render(&scene, &CameraArgs { eye, target, up, focal, width, height }, background, &out)
        }
        Command::Train { images, plan, out, focal, iters, init, gaussians } => {
            if let Some(n) = iters {
                cfg.train.iterations = n;
            }
            commands::cmd_train(&cfg, &TrainArgs { images, plan, out, focal, init, gaussians })
        }
        Command::Convert { input, output } => commands::cmd_convert(&input, &output),
        Command::Plan { center, rings, out } => {
            let rings = if rings.is_empty() { default_rings() } else { rings };
            commands::cmd_plan(center, &rings, out.as_deref())
        }
        Command::Scenario { script, out, listen } => {
            let text = match script.strip_prefix(worlds::BUILTIN_PREFIX) {
                Some(worlds::OCCLUDED_BUTTON) => scenario::OCCLUDED_BUTTON_SCRIPT.to_string(),
                Some(other) => return Err(CliError::Usage(format!("unknown builtin script `{other}`"))),
                None => std::fs::read_to_string(&script).map_err(|e| CliError::Io(format!("{script}: {e}")))?,
            };
            let parsed = scenario::Script::parse(&text)?;
            let outcome = scenario::run(&cfg, &parsed, &listen)?;
            scenario::finish(&outcome, out.as_deref())
        }
    }
}
