//! The `grqo` command line: `gen-data`, `train`, `eval`, `ablate`, `plot`.
//!
//! Exit codes: 0 success, 2 usage, 3 validation (bad config, spec or
//! missing input), 4 runtime failure. Failures print one line to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ablate::{self, AblateOptions, Axis};
use crate::error::{Error, Result};
use crate::evalkit::{map_over, EvalOptions};
use crate::synthdata::{build_splits, load_dataset, save_dataset, Dataset, DatasetSpec, SplitName};
use crate::trainer::{load_checkpoint, Mode, TrainConfig, Trainer, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Environment variable bounding how many ablation cells train at once.
pub const WORKERS_ENV: &str = "GRQO_NUM_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "grqo", version, about = "Visual-prompt detector training with group-relative query optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sft,
    Grqo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Component,
    RewardDesign,
    LossWeights,
    PromptCount,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Dataset spec as JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train one run into a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Training config as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print a JSON report line.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, default_value_t = 64)]
        prompts_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an ablation grid: one run directory per cell plus summary.csv.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot or tabulate the metrics.csv of several runs.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// `.svg` for a chart, `.csv` for a long-format table.
        #[arg(long)]
        out: PathBuf,
    },
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Component => Axis::Component,
            AxisArg::RewardDesign => Axis::RewardDesign,
            AxisArg::LossWeights => Axis::LossWeights,
            AxisArg::PromptCount => Axis::PromptCount,
        }
    }
}

/// Where a run came from: enough to regenerate its data and replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command_line: Vec<String>,
    pub config: TrainConfig,
    pub dataset: DatasetRef,
    pub build: String,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub master_seed: u64,
    pub spec: DatasetSpec,
    pub checksum: u32,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Package version plus the `GRQO_BUILD_REV` seen at compile time, if any.
pub fn build_id() -> String {
    match option_env!("GRQO_BUILD_REV") {
        Some(rev) => format!("grqo-{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("grqo-{}", env!("CARGO_PKG_VERSION")),
    }
}

impl RunManifest {
    pub fn new(run_dir: &Path, command_line: Vec<String>, config: &TrainConfig, data: &Dataset) -> Self {
        let run_id = run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            run_id,
            command_line,
            config: config.clone(),
            dataset: DatasetRef { master_seed: data.master_seed, spec: data.spec.clone(), checksum: data.checksum() },
            build: build_id(),
            created_unix,
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir)?;
        fs::write(run_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(run_dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("run manifest: {e}")))
    }

    /// Regenerates the dataset, checks it against the recorded checksum and
    /// retrains the recorded config into `out`.
    pub fn replay(&self, out: &Path) -> Result<()> {
        let data = build_splits(&self.dataset.spec, self.dataset.master_seed)?;
        let actual = data.checksum();
        if actual != self.dataset.checksum {
            return Err(Error::Checksum { what: "regenerated dataset".into(), expected: self.dataset.checksum, actual });
        }
        Trainer::new(self.config.clone(), &data)?.run(Some(out))
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema(_) | Error::Version { .. } | Error::ClassNotInPool(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    require(&dir.join("manifest.json"), "dataset manifest")?;
    load_dataset(dir)
}

fn gen_data(out: &Path, seed: u64, spec: Option<&Path>) -> Result<String> {
    let spec = match spec {
        Some(p) => read_json_file::<DatasetSpec>(p, "dataset spec")?,
        None => DatasetSpec::default(),
    };
    spec.validate()?;
    let data = build_splits(&spec, seed)?;
    save_dataset(out, &data)?;
    let n: usize = data.splits.iter().map(|s| s.scenes.len()).sum();
    Ok(format!("wrote {n} scenes to {} (checksum {:08x})", out.display(), data.checksum()))
}

fn train(data_dir: &Path, mode: ModeArg, config: &Path, out: &Path, argv: &[String]) -> Result<String> {
    let mut cfg: TrainConfig = read_json_file(config, "config")?;
    cfg.mode = if mode == ModeArg::Sft { Mode::Sft } else { Mode::Grqo };
    cfg.validate()?;
    let data = load_data(data_dir)?;
    RunManifest::new(out, argv.to_vec(), &cfg, &data).write(out)?;
    let mut t = Trainer::new(cfg, &data)?;
    t.run(Some(out))?;
    Ok(match t.history.last() {
        Some(m) => format!("{METRICS_HEADER}\n{}", m.csv_row()),
        None => "no epochs run".into(),
    })
}

fn eval(ckpt: &Path, data_dir: &Path, split: SplitArg, prompts: usize, seed: u64) -> Result<String> {
    require(ckpt, "checkpoint")?;
    if prompts == 0 {
        return Err(Error::Config("--prompts-per-class must be positive".into()));
    }
    let data = load_data(data_dir)?;
    let model = load_checkpoint(ckpt)?.into_model()?;
    let run_id = ckpt
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".into());
    let split = if split == SplitArg::Id { SplitName::ValId } else { SplitName::ValOod };
    let opts = EvalOptions { run_id, prompts_per_class: prompts, seed, ..Default::default() };
    let report = map_over(&model, &data, split, &opts)?;
    Ok(serde_json::to_string(&report)?)
}

fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn ablate_cmd(axis: AxisArg, data_dir: &Path, out: &Path, argv: &[String]) -> Result<String> {
    let workers = workers_from_env()?;
    let data = load_data(data_dir)?;
    let opts = AblateOptions { workers, ..Default::default() };
    let on_cell = |dir: &Path, cell: &ablate::Cell| RunManifest::new(dir, argv.to_vec(), &cell.config, &data).write(dir);
    let rows = ablate::run(axis.into(), &TrainConfig::default(), &data, out, &opts, &on_cell)?;
    let mut s = String::from(ablate::SUMMARY_HEADER);
    for r in &rows {
        s.push('\n');
        s.push_str(&r.csv_row());
    }
    Ok(s)
}

/// One run's `metrics.csv` as column names and rows of raw fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub run: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("metrics.csv");
        require(&path, "metrics file")?;
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Schema(format!("{} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(Error::Schema(format!("{} line {}: {} fields, expected {}", path.display(), i + 2, row.len(), header.len())));
            }
            rows.push(row);
        }
        let run = run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| run_dir.display().to_string());
        Ok(Self { run, header, rows })
    }

    /// `(epoch, value)` pairs of a numeric column, skipping empty cells.
    pub fn series(&self, column: &str) -> Vec<(f64, f64)> {
        let (Some(e), Some(c)) = (self.col("epoch"), self.col(column)) else { return Vec::new() };
        self.rows.iter().filter_map(|r| Some((r[e].parse().ok()?, r[c].parse().ok()?))).collect()
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Long-format table: `run` followed by each run's own columns. All runs
/// must share a header.
pub fn metrics_csv(tables: &[MetricsTable]) -> Result<String> {
    let Some(first) = tables.first() else { return Err(Error::Config("no runs to tabulate".into())) };
    let mut s = format!("run,{}\n", first.header.join(","));
    for t in tables {
        if t.header != first.header {
            return Err(Error::Schema(format!("run {} has a different metrics header", t.run)));
        }
        for r in &t.rows {
            let _ = writeln!(s, "{},{}", t.run, r.join(","));
        }
    }
    Ok(s)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Two panels of AP@0.5 per epoch (OOD and in-domain validation), one line
/// per run.
pub fn metrics_svg(tables: &[MetricsTable]) -> String {
    let (pw, ph, margin) = (360.0, 240.0, 48.0);
    let width = 2.0 * (pw + margin) + margin;
    let height = ph + 2.0 * margin + 16.0 * tables.len() as f64;
    let panels = [("val_ood_ap50", "val_ood AP@0.5"), ("val_id_ap50", "val_id AP@0.5")];
    let max_epoch = tables.iter().flat_map(|t| t.series("epoch")).map(|p| p.0).fold(1.0, f64::max);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for (k, (col, title)) in panels.iter().enumerate() {
        let x0 = margin + k as f64 * (pw + margin);
        let y0 = margin;
        let max_v = tables.iter().flat_map(|t| t.series(col)).map(|p| p.1).fold(0.0, f64::max).max(1e-3) * 1.1;
        let _ = writeln!(s, "<rect x=\"{x0}\" y=\"{y0}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{title}</text>", x0 + pw / 2.0, y0 - 8.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>", x0 + pw / 2.0, y0 + ph + 28.0);
        for tick in 0..=4 {
            let v = max_v * tick as f64 / 4.0;
            let y = y0 + ph - ph * tick as f64 / 4.0;
            let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.1}\" text-anchor=\"end\">{v:.3}</text>", x0 - 4.0);
        }
        let _ = writeln!(s, "<text x=\"{x0}\" y=\"{}\" text-anchor=\"middle\">0</text>", y0 + ph + 14.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{max_epoch}</text>", x0 + pw, y0 + ph + 14.0);
        for (i, t) in tables.iter().enumerate() {
            let pts: Vec<String> = t
                .series(col)
                .iter()
                .map(|&(e, v)| format!("{:.1},{:.1}", x0 + pw * e / max_epoch, y0 + ph - ph * v / max_v))
                .collect();
            if !pts.is_empty() {
                let color = PALETTE[i % PALETTE.len()];
                let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
            }
        }
    }
    for (i, t) in tables.iter().enumerate() {
        let y = margin + ph + 48.0 + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>", y - 4.0, margin + 20.0, y - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", margin + 26.0, escape(&t.run));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn plot(runs: &[PathBuf], out: &Path) -> Result<String> {
    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext != "svg" && ext != "csv" {
        return Err(Error::Config(format!("plot output must end in .svg or .csv, got {}", out.display())));
    }
    let tables = runs.iter().map(|r| MetricsTable::read(r)).collect::<Result<Vec<_>>>()?;
    let body = if ext == "svg" { metrics_svg(&tables) } else { metrics_csv(&tables)? };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, body)?;
    Ok(format!("wrote {}", out.display()))
}

/// Runs one parsed command, returning what to print on success.
pub fn execute(cli: Cli, argv: &[String]) -> Result<String> {
    match cli.command {
        Command::GenData { out, seed, spec } => gen_data(&out, seed, spec.as_deref()),
        Command::Train { data, mode, config, out } => train(&data, mode, &config, &out, argv),
        Command::Eval { ckpt, data, split, prompts_per_class, seed } => eval(&ckpt, &data, split, prompts_per_class, seed),
        Command::Ablate { axis, data, out } => ablate_cmd(axis, &data, &out, argv),
        Command::Plot { runs, out } => plot(&runs, &out),
    }
}

/// Parses `args` (program name first), runs the command, prints its output
/// and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("usage error"));
            return EXIT_USAGE;
        }
    };
    match execute(cli, &argv) {
        Ok(out) => {
            println!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["grqo", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["grqo"]), EXIT_USAGE);
        assert_eq!(main_with_args(["grqo", "ablate", "--axis", "nope", "--data", "d", "--out", "o"]), EXIT_USAGE);
    }

    #[test]
    fn missing_inputs_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let m = missing.to_str().unwrap();
        assert_eq!(main_with_args(["grqo", "eval", "--ckpt", m, "--data", m, "--split", "id"]), EXIT_VALIDATION);
        let out = dir.path().join("x.svg");
        assert_eq!(main_with_args(["grqo", "plot", "--runs", m, "--out", out.to_str().unwrap()]), EXIT_VALIDATION);
        let bad = dir.path().join("x.png");
        assert_eq!(main_with_args(["grqo", "plot", "--runs", m, "--out", bad.to_str().unwrap()]), EXIT_VALIDATION);
    }

    #[test]
    fn bad_spec_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.json");
        fs::write(&spec, r#"{"train_count": 4, "colour": 1}"#).unwrap();
        let out = dir.path().join("data");
        let code = main_with_args(["grqo", "gen-data", "--out", out.to_str().unwrap(), "--seed", "1", "--spec", spec.to_str().unwrap()]);
        assert_eq!(code, EXIT_VALIDATION);
    }

    #[test]
    fn svg_has_one_line_per_run_and_panel() {
        let t = |run: &str| MetricsTable {
            run: run.into(),
            header: METRICS_HEADER.split(',').map(str::to_string).collect(),
            rows: (0..3)
                .map(|e| {
                    let mut r = vec![String::new(); 16];
                    r[1] = e.to_string();
                    r[12] = format!("{}", 0.1 * e as f64);
                    r[14] = format!("{}", 0.05 * e as f64);
                    r
                })
                .collect(),
        };
        let svg = metrics_svg(&[t("a"), t("b<c")]);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("b&lt;c"));
        let csv = metrics_csv(&[t("a"), t("b")]).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("run,step,epoch"));
    }
}
