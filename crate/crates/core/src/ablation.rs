//! Ablation grids: one axis at a time, every cell trained from the same seed on the same frame.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{AlignedFrame, Dataset, SplitSpec};
use crate::encoders::ExoEncoderKind;
use crate::error::{Result, SemfError};
use crate::fusion::FusionKind;
use crate::metrics::MetricsReport;
use crate::timefreq::ImageKind;
use crate::train::{evaluate, train, TrainConfig, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Image,
    ExoEncoder,
    Fusion,
    PatchScale,
    SeqLen,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Image, Axis::ExoEncoder, Axis::Fusion, Axis::PatchScale, Axis::SeqLen];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Image => "image",
            Axis::ExoEncoder => "exo_encoder",
            Axis::Fusion => "fusion",
            Axis::PatchScale => "patch_scale",
            Axis::SeqLen => "seq_len",
        }
    }

    fn column_title(self) -> &'static str {
        match self {
            Axis::Image => "Image",
            Axis::ExoEncoder => "Exo encoder",
            Axis::Fusion => "Fusion",
            Axis::PatchScale => "Patch / Scales",
            Axis::SeqLen => "Seq length",
        }
    }

    /// Grid cells in table row order, each derived from `base`.
    pub fn cells(self, base: &TrainConfig) -> Vec<Cell> {
        let with = |label: String, slug: String, f: &dyn Fn(&mut TrainConfig)| {
            let mut config = *base;
            f(&mut config);
            Cell { label, slug, config }
        };
        match self {
            Axis::Image => [ImageKind::Line, ImageKind::Stft, ImageKind::Cmor, ImageKind::Morlet]
                .into_iter()
                .map(|k| with(k.to_string(), k.to_string(), &|c| c.model.image_kind = k))
                .collect(),
            Axis::ExoEncoder => [ExoEncoderKind::Mlp, ExoEncoderKind::Transformer]
                .into_iter()
                .map(|k| with(k.as_str().into(), k.as_str().into(), &|c| c.model.exo_kind = k))
                .collect(),
            Axis::Fusion => [FusionKind::Single, FusionKind::Bi]
                .into_iter()
                .map(|k| with(k.as_str().into(), k.as_str().into(), &|c| c.model.fusion_kind = k))
                .collect(),
            Axis::PatchScale => [(8, 64), (16, 64), (8, 128), (16, 128)]
                .into_iter()
                .map(|(p, s)| {
                    with(format!("({p},{s})"), format!("p{p}_s{s}"), &|c| {
                        c.model.patch_size = p;
                        c.model.n_scales = s;
                    })
                })
                .collect(),
            Axis::SeqLen => [30, 60, 90, 120]
                .into_iter()
                .map(|l| with(l.to_string(), l.to_string(), &|c| c.model.seq_len = l))
                .collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = SemfError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = Axis::ALL.iter().map(|a| a.as_str()).collect();
            SemfError::Config(format!("unknown axis `{s}` (expected one of: {})", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Row label as shown in the table.
    pub label: String,
    /// Filesystem-safe name.
    pub slug: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub test: MetricsReport,
    pub log: TrainingLog,
}

/// Prepare, train and evaluate on the test split; the same path a standalone run takes.
pub fn train_and_evaluate(cfg: &TrainConfig, frame: &AlignedFrame) -> Result<CellResult> {
    let ds = Dataset::prepare(frame, cfg.model.seq_len, &SplitSpec::default())?;
    let outcome = train(cfg, &ds)?;
    let test = evaluate(&outcome.model, ds.test(), ds.standardizer())?;
    Ok(CellResult {
        cell: Cell {
            label: String::new(),
            slug: String::new(),
            config: *cfg,
        },
        test,
        log: outcome.log,
    })
}

pub fn run_cell(cell: &Cell, frame: &AlignedFrame) -> Result<CellResult> {
    let mut r = train_and_evaluate(&cell.config, frame)?;
    r.cell = cell.clone();
    Ok(r)
}

/// Runs every cell of `axis` on up to `threads` worker threads. Results come back in row order.
pub fn run_axis(axis: Axis, base: &TrainConfig, frame: &AlignedFrame, threads: usize) -> Result<Vec<CellResult>> {
    let cells = axis.cells(base);
    let threads = threads.clamp(1, cells.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                log::info!("ablation {axis}: cell {}", cells[i].label);
                let r = run_cell(&cells[i], frame);
                slots.lock().expect("ablation worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("ablation worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell is visited"))
        .collect()
}

/// Aligned text table of horizon-averaged test metrics, one row per cell.
pub fn render_table(axis: Axis, results: &[CellResult]) -> String {
    let title = axis.column_title();
    let w = results.iter().map(|r| r.cell.label.len()).max().unwrap_or(0).max(title.len());
    let mut out = String::new();
    let _ = writeln!(out, "{title:<w$}  {:>12}  {:>10}  {:>10}  {:>8}", "RMSE", "RMAE", "MAPE", "R2");
    for r in results {
        let m = &r.test.averaged;
        let r2 = m.r2.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<w$}  {:>12.4}  {:>10.6}  {:>10.6}  {:>8}",
            r.cell.label, m.rmse, m.rmae, m.mape, r2
        );
    }
    out
}

/// `cell,rmse,rmae,mape,r2` with horizon-averaged test metrics.
pub fn render_csv(results: &[CellResult]) -> String {
    let mut out = String::from("cell,rmse,rmae,mape,r2\n");
    for r in results {
        let m = &r.test.averaged;
        let r2 = m.r2.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{},{}", r.cell.label, m.rmse, m.rmae, m.mape, r2);
    }
    out
}
