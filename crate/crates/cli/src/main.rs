use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use semf_core::ablation::{render_csv, render_table, run_axis, Axis};
use semf_core::data::{load_csv, make_windows, impute, synthesize, write_csv, Dataset, Split, SplitSpec, SynthConfig, HORIZONS};
use semf_core::model::SemfModel;
use semf_core::timefreq::{render_image, write_matrix_csv, write_pgm, ImageConfig, ImageKind};
use semf_core::train::{evaluate, train, TrainConfig};

/// Prefix of every error line on stderr.
const ERROR_PREFIX: &str = "semf: error:";
const CONFIG_FILE: &str = "config.txt";
/// Keys handled by the driver rather than the training config.
const RUN_KEYS: [&str; 7] = ["data", "out", "checkpoint", "split", "axis", "index", "kind"];

#[derive(Parser)]
#[command(name = "semf", version, about = "Spectrogram and exogenous-series fusion forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Aligned daily CSV (date, target, exogenous columns).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset CSV.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3339)]
        days: usize,
        /// CSV path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one window as a PGM image with a CSV sidecar.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: Option<usize>,
        /// line, stft, cmor or morlet.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train, then write the checkpoint, training log and test metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute a split's metrics from a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Run one ablation grid (or `all`).
    Ablate {
        #[command(flatten)]
        common: Common,
        /// image, exo_encoder, fusion, patch_scale, seq_len or all.
        #[arg(long)]
        axis: Option<String>,
    },
}

/// Bad user input; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    anyhow!(UsageError(e.to_string()))
}

/// Resolved settings for one command: file values, then flags.
struct RunConfig {
    command: &'static str,
    train: TrainConfig,
    run: BTreeMap<&'static str, String>,
}

impl RunConfig {
    fn resolve(command: &'static str, common: &Common, flags: &[(&'static str, Option<String>)]) -> Result<Self> {
        let mut cfg = RunConfig {
            command,
            train: TrainConfig::default(),
            run: BTreeMap::new(),
        };
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
                cfg.set(k.trim(), v.trim())?;
            }
        }
        let paths = [("data", &common.data), ("out", &common.out)];
        for (k, v) in paths {
            if let Some(p) = v {
                cfg.set(k, &p.to_string_lossy())?;
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
        }
        for kv in &common.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "command" {
            return Ok(());
        }
        if let Some(k) = RUN_KEYS.iter().find(|k| **k == key) {
            self.run.insert(k, value.to_string());
            return Ok(());
        }
        self.train.set(key, value).map_err(usage)
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.run.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| usage(format!("missing --{key}")))
    }

    fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("semf_out"))
    }

    fn echo(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.run {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&self.train.to_key_values());
        s
    }

    /// Creates the output directory and writes the config echo into it.
    fn prepare_out(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join(CONFIG_FILE), self.echo())?;
        Ok(dir)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_frame(cfg: &RunConfig) -> Result<semf_core::data::AlignedFrame> {
    let path = cfg.require("data")?;
    Ok(load_csv(Path::new(path))?)
}

fn cmd_synth(seed: u64, days: usize, out: &Path) -> Result<()> {
    let frame = synthesize(&SynthConfig::new(seed, days))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(std::io::BufWriter::new(file), &frame)?;
    println!("wrote {} days to {}", frame.len(), out.display());
    Ok(())
}

fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let kind: ImageKind = cfg.get("kind").unwrap_or("morlet").parse().map_err(usage)?;
    let index: usize = cfg.require("index")?.parse().map_err(|_| usage("--index must be a non-negative integer"))?;
    let seq_len = cfg.train.model.seq_len;
    let frame = impute(&load_frame(cfg)?)?;
    let windows = make_windows(&frame, seq_len, &HORIZONS)?;
    let sample = windows
        .get(index)
        .ok_or_else(|| usage(format!("--index {index} out of range (0..{})", windows.len())))?;
    let image = render_image(&sample.history, &ImageConfig::with_kind(kind, cfg.train.model.n_scales))?;
    let dir = cfg.prepare_out()?;
    let stem = format!("window_{index}_{kind}");
    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm(fs::File::create(&pgm).with_context(|| format!("creating {}", pgm.display()))?, &image.values)?;
    let csv = dir.join(format!("{stem}.csv"));
    write_matrix_csv(fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?, &image.values)?;
    let s = image.values.shape();
    println!("rendered {kind} window {index} ({}x{}) to {}", s[0], s[1], pgm.display());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig) -> Result<()> {
    let frame = load_frame(&cfg)?;
    cfg.train.model.n_exo = frame.n_exogenous();
    let dir = cfg.prepare_out()?;
    let ds = Dataset::prepare(&frame, cfg.train.model.seq_len, &SplitSpec::default())?;
    let (n_train, n_val, n_test) = ds.sizes();
    log::info!("windows: train {n_train}, val {n_val}, test {n_test}");
    let outcome = train(&cfg.train, &ds)?;
    outcome.model.save(&dir.join("checkpoint.semf"), ds.standardizer())?;
    write(&dir.join("training_log.csv"), outcome.log.to_csv())?;
    let report = evaluate(&outcome.model, ds.test(), ds.standardizer())?;
    write(&dir.join("test_metrics.csv"), report.to_csv())?;
    let table = report.to_table(true);
    write(&dir.join("test_metrics.txt"), &table)?;
    println!(
        "best epoch {} of {} (val mse {:.6})",
        outcome.log.best_epoch,
        outcome.log.epochs.len(),
        outcome.log.best_val_mse()
    );
    print!("{table}");
    Ok(())
}

fn cmd_eval(cfg: RunConfig) -> Result<()> {
    let split: Split = cfg.get("split").unwrap_or("test").parse().map_err(usage)?;
    let checkpoint = PathBuf::from(cfg.require("checkpoint")?);
    let (model, standardizer) = SemfModel::load(&checkpoint)?;
    let frame = load_frame(&cfg)?;
    let ds = Dataset::prepare(&frame, model.config.seq_len, &SplitSpec::default())?;
    if ds.standardizer().checksum() != standardizer.checksum() {
        log::warn!("data differs from the training data: standardizer mismatch");
    }
    let dir = cfg.prepare_out()?;
    let report = evaluate(&model, ds.split(split), &standardizer)?;
    let name = split.as_str();
    write(&dir.join(format!("{name}_metrics.csv")), report.to_csv())?;
    let table = report.to_table(true);
    write(&dir.join(format!("{name}_metrics.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("SEMF_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("SEMF_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn cmd_ablate(mut cfg: RunConfig) -> Result<()> {
    let axis_arg = cfg.require("axis")?.to_string();
    let axes: Vec<Axis> = if axis_arg == "all" {
        Axis::ALL.to_vec()
    } else {
        vec![axis_arg.parse().map_err(usage)?]
    };
    let threads = threads_from_env()?;
    let frame = load_frame(&cfg)?;
    cfg.train.model.n_exo = frame.n_exogenous();
    let root = cfg.prepare_out()?;
    for axis in axes {
        let results = run_axis(axis, &cfg.train, &frame, threads)?;
        let axis_dir = root.join(axis.as_str());
        for r in &results {
            let cell_dir = axis_dir.join(&r.cell.slug);
            fs::create_dir_all(&cell_dir).with_context(|| format!("creating {}", cell_dir.display()))?;
            let mut echo = format!("command=train\ndata={}\n", cfg.require("data")?);
            echo.push_str(&r.cell.config.to_key_values());
            write(&cell_dir.join(CONFIG_FILE), echo)?;
            write(&cell_dir.join("test_metrics.csv"), r.test.to_csv())?;
            write(&cell_dir.join("training_log.csv"), r.log.to_csv())?;
        }
        let table = render_table(axis, &results);
        write(&axis_dir.join("table.txt"), &table)?;
        write(&axis_dir.join("table.csv"), render_csv(&results))?;
        println!("== {axis} ==");
        print!("{table}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, days, out } => cmd_synth(seed, days, &out),
        Command::Render { common, index, kind } => {
            let cfg = RunConfig::resolve(
                "render",
                &common,
                &[("index", index.map(|i| i.to_string())), ("kind", kind)],
            )?;
            cmd_render(&cfg)
        }
        Command::Train { common } => cmd_train(RunConfig::resolve("train", &common, &[])?),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let flags = [
                ("checkpoint", checkpoint.map(|p| p.to_string_lossy().into_owned())),
                ("split", split),
            ];
            cmd_eval(RunConfig::resolve("eval", &common, &flags)?)
        }
        Command::Ablate { common, axis } => cmd_ablate(RunConfig::resolve("ablate", &common, &[("axis", axis)])?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{ERROR_PREFIX} {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
