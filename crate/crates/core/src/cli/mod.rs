//! Command-line front end. Every command writes a run manifest next to its
//! outputs so that it can be reproduced from that file alone.

mod commands;
mod render;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::write_atomic;
use crate::error::{Error, Result};

pub use render::render_svg;

#[derive(Parser, Debug)]
#[command(name = "gridline", version, about = "Grid-based single-shot polyline estimation")]
pub struct Cli {
    /// JSON file with option defaults; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Dump per-cell ground-truth segments of an annotation file.
    Discretize(DiscretizeArgs),
    /// Build an anchor set (uniform or k-means).
    Anchors(AnchorsArgs),
    /// Train a head on a dataset directory.
    Train(TrainArgs),
    /// Run a checkpoint on a dataset directory.
    Predict(PredictArgs),
    /// Suppress near-duplicate predicted segments.
    Nms(NmsArgs),
    /// Join predicted segments into polylines.
    Stitch(StitchArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Draw annotations or predictions as SVG.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Index of the first generated scene; disjoint ranges give disjoint splits.
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    /// Grid as ROWSxCOLS; must agree with the image size.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long = "cell-size")]
    pub cell_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DiscretizeArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub representation: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AnchorsArgs {
    /// Dataset directory (required for k-means).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub space: Option<String>,
    #[arg(long, visible_alias = "p")]
    pub predictors: Option<usize>,
    #[arg(long, conflicts_with = "uniform")]
    pub kmeans: bool,
    #[arg(long)]
    pub uniform: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for checkpoint, history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub representation: Option<String>,
    #[arg(long)]
    pub predictors: Option<usize>,
    /// Anchor set JSON file, or `dynamic`.
    #[arg(long)]
    pub anchors: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Loss weights `wg,wc1,wc0,wcl`.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long = "geometry-activation")]
    pub geometry_activation: Option<String>,
    #[arg(long = "confidence-activation")]
    pub confidence_activation: Option<String>,
    #[arg(long)]
    pub augment: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Apply keep-max suppression before writing.
    #[arg(long)]
    pub nms: bool,
    /// Join segments into polylines before writing (implies cell-free output).
    #[arg(long)]
    pub stitch: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct NmsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "cell-size")]
    pub cell_size: Option<usize>,
    #[arg(long = "position-eps")]
    pub position_eps: Option<f64>,
    /// Degrees.
    #[arg(long = "angle-eps")]
    pub angle_eps: Option<f64>,
    /// keepmax or average.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct StitchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "cell-size")]
    pub cell_size: Option<usize>,
    #[arg(long = "join-eps")]
    pub join_eps: Option<f64>,
    /// Degrees.
    #[arg(long = "angle-eps")]
    pub angle_eps: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset directory or annotation file with the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    /// Output directory for the report, table and gate curve.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub representation: Option<String>,
    #[arg(long)]
    pub predictors: Option<usize>,
    /// Anchor set JSON file, or `dynamic`.
    #[arg(long)]
    pub anchors: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Comma-separated gate radii in pixels.
    #[arg(long)]
    pub radii: Option<String>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Annotation or prediction file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Zero-based record to draw.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Optional second file drawn underneath in grey (e.g. ground truth).
    #[arg(long)]
    pub underlay: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub scale: Option<f64>,
}

/// Option lookup: explicit flag, then config file entry, then default.
pub(crate) struct Settings {
    config: Map<String, Value>,
    resolved: Map<String, Value>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            None => Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                match serde_json::from_str::<Value>(&text)? {
                    Value::Object(m) => m,
                    _ => return Err(Error::invalid(format!("{}: config must be a JSON object", p.display()))),
                }
            }
        };
        Ok(Self { config, resolved: Map::new() })
    }

    /// Resolves `key`; config keys use snake_case names of the flags.
    pub(crate) fn get<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.config.get(key) {
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| Error::invalid(format!("config entry {key:?}: {e}")))?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), serde_json::to_value(&value)?);
        Ok(value)
    }

    pub(crate) fn get_opt<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.config.get(key) {
                Some(v) => Some(
                    serde_json::from_value(v.clone())
                        .map_err(|e| Error::invalid(format!("config entry {key:?}: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), serde_json::to_value(v)?);
        }
        Ok(value)
    }

    pub(crate) fn flag(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.get_opt::<bool>(key, None)?.unwrap_or(false);
        self.resolved.insert(key.to_string(), Value::Bool(v));
        Ok(v)
    }

    pub(crate) fn record<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.resolved.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }
}

/// Provenance of one command invocation.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    settings: &'a Map<String, Value>,
    outputs: Vec<String>,
}

/// Writes `<output>.run.json`, or `run.json` inside an output directory.
pub(crate) fn write_manifest(
    command: &str,
    argv: &[OsString],
    settings: &Settings,
    output: &Path,
    outputs: &[PathBuf],
) -> Result<()> {
    let path = if output.is_dir() {
        output.join("run.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        output.with_file_name(name)
    };
    let m = RunManifest {
        tool: "gridline",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        settings: &settings.resolved,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_atomic(&path, &serde_json::to_vec_pretty(&m)?)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("GRIDLINE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs the tool; returns the process exit code (0 ok, 1 runtime error, 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::InvalidArgument(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli, argv: &[OsString]) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => commands::gen(a, &mut settings, argv),
        Command::Discretize(a) => commands::discretize(a, &mut settings, argv),
        Command::Anchors(a) => commands::anchors(a, &mut settings, argv),
        Command::Train(a) => commands::train(a, &mut settings, argv),
        Command::Predict(a) => commands::predict(a, &mut settings, argv),
        Command::Nms(a) => commands::nms_cmd(a, &mut settings, argv),
        Command::Stitch(a) => commands::stitch_cmd(a, &mut settings, argv),
        Command::Eval(a) => commands::eval(a, &mut settings, argv),
        Command::Render(a) => commands::render(a, &mut settings, argv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["gridline", "no-such-command"]), 2);
        assert_eq!(run(["gridline", "gen"]), 2);
    }

    #[test]
    fn flags_win_over_config() {
        let mut s = Settings { config: serde_json::from_str(r#"{"epochs": 7, "lr": 0.5}"#).unwrap(), resolved: Map::new() };
        assert_eq!(s.get("epochs", Some(3usize), 1).unwrap(), 3);
        assert_eq!(s.get("lr", None, 0.1).unwrap(), 0.5);
        assert_eq!(s.get("seed", None, 4u64).unwrap(), 4);
        assert!(s.get::<usize>("lr", None, 0).is_err());
    }
}
