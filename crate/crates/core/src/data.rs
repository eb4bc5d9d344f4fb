//! Aligned daily series: CSV ingestion, gap imputation, windowing,
//! chronological splits, per-horizon target scaling and a synthetic generator.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Result, SemfError};

/// Forecast offsets in days, in output order.
pub const HORIZONS: [usize; 6] = [1, 3, 7, 14, 21, 35];
pub const MAX_HORIZON: usize = 35;
/// Lower bound on every standard deviation used as a divisor.
pub const STD_FLOOR: f64 = 1e-8;
pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Daily target plus exogenous columns on one shared date axis.
/// Missing cells are `None` until [`impute`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub dates: Vec<NaiveDate>,
    pub target_name: String,
    pub target: Vec<Option<f64>>,
    pub column_names: Vec<String>,
    /// Column-major: `exogenous[j][t]`.
    pub exogenous: Vec<Vec<Option<f64>>>,
}

impl AlignedFrame {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_exogenous(&self) -> usize {
        self.exogenous.len()
    }

    pub fn n_gaps(&self) -> usize {
        std::iter::once(&self.target)
            .chain(&self.exogenous)
            .map(|c| c.iter().filter(|v| v.is_none()).count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.dates.len();
        if self.target.len() != t || self.exogenous.iter().any(|c| c.len() != t) {
            return Err(SemfError::Schema("columns have unequal lengths".into()));
        }
        if self.exogenous.len() != self.column_names.len() {
            return Err(SemfError::Schema("column names do not match exogenous columns".into()));
        }
        if let Some(w) = self.dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(SemfError::Schema(format!("dates not strictly increasing at {}", w[1])));
        }
        Ok(())
    }

    /// Target values; fails if any gap remains.
    pub fn target_values(&self) -> Result<Vec<f64>> {
        dense(&self.target, &self.target_name)
    }

    /// Exogenous columns as dense vectors; fails if any gap remains.
    pub fn exogenous_values(&self) -> Result<Vec<Vec<f64>>> {
        self.exogenous
            .iter()
            .zip(&self.column_names)
            .map(|(c, n)| dense(c, n))
            .collect()
    }
}

fn dense(col: &[Option<f64>], name: &str) -> Result<Vec<f64>> {
    col.iter()
        .map(|v| v.ok_or_else(|| SemfError::contract(format!("column `{name}` still has gaps; impute first"))))
        .collect()
}

pub fn load_csv(path: &Path) -> Result<AlignedFrame> {
    parse_csv(BufReader::new(File::open(path)?))
}

/// Parses `date,<target>,<exo_1>,...`; rows are sorted by date afterwards.
pub fn parse_csv<R: Read>(reader: R) -> Result<AlignedFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(SemfError::Parse { line: 1, msg: "empty file".into() }),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    if header.len() < 3 {
        return Err(SemfError::Schema(format!(
            "need a date, a target and at least one exogenous column, found {} columns",
            header.len()
        )));
    }
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let width = names.len();

    let mut rows: Vec<(NaiveDate, Vec<Option<f64>>)> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_error(e, line))?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(SemfError::Parse {
                line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(rec[0].trim(), DATE_FORMAT).map_err(|e| SemfError::Parse {
            line,
            msg: format!("bad date `{}`: {e}", &rec[0]),
        })?;
        let values = rec
            .iter()
            .skip(1)
            .map(|cell| {
                let cell = cell.trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                let v = f64::from_str(cell).map_err(|_| SemfError::Parse {
                    line,
                    msg: format!("bad number `{cell}`"),
                })?;
                if !v.is_finite() {
                    return Err(SemfError::Parse {
                        line,
                        msg: format!("non-finite value `{cell}`"),
                    });
                }
                Ok(Some(v))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((date, values));
    }
    if rows.is_empty() {
        return Err(SemfError::Parse { line: 2, msg: "no data rows".into() });
    }
    rows.sort_by_key(|(d, _)| *d);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(SemfError::Schema(format!("duplicate date {}", w[0].0)));
    }

    let n_exo = width - 2;
    let mut frame = AlignedFrame {
        dates: Vec::with_capacity(rows.len()),
        target_name: names[1].clone(),
        target: Vec::with_capacity(rows.len()),
        column_names: names[2..].to_vec(),
        exogenous: vec![Vec::with_capacity(rows.len()); n_exo],
    };
    for (date, values) in rows {
        frame.dates.push(date);
        frame.target.push(values[0]);
        for (col, v) in frame.exogenous.iter_mut().zip(&values[1..]) {
            col.push(*v);
        }
    }
    Ok(frame)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> SemfError {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    SemfError::Parse { line, msg: e.to_string() }
}

/// Writes the frame in the same layout [`parse_csv`] reads; gaps are empty cells.
pub fn write_csv<W: Write>(mut w: W, frame: &AlignedFrame) -> Result<()> {
    let mut header = vec!["date".to_string(), frame.target_name.clone()];
    header.extend(frame.column_names.iter().cloned());
    writeln!(w, "{}", header.join(","))?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in 0..frame.len() {
        write!(w, "{},{}", frame.dates[t].format(DATE_FORMAT), cell(frame.target[t]))?;
        for col in &frame.exogenous {
            write!(w, ",{}", cell(col[t]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Forward-fills every column, then back-fills any leading gap from the first observation.
pub fn impute(frame: &AlignedFrame) -> Result<AlignedFrame> {
    let fill = |col: &[Option<f64>], name: &str| -> Result<Vec<Option<f64>>> {
        let first = col
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or_else(|| SemfError::Imputation { column: name.to_string() })?;
        let mut last = first;
        Ok(col
            .iter()
            .map(|v| {
                if let Some(x) = v {
                    last = *x;
                }
                Some(last)
            })
            .collect())
    };
    Ok(AlignedFrame {
        dates: frame.dates.clone(),
        target_name: frame.target_name.clone(),
        target: fill(&frame.target, &frame.target_name)?,
        column_names: frame.column_names.clone(),
        exogenous: frame
            .exogenous
            .iter()
            .zip(&frame.column_names)
            .map(|(c, n)| fill(c, n))
            .collect::<Result<_>>()?,
    })
}

/// One training instance anchored at day `anchor_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `y[anchor - L + 1 ..= anchor]`.
    pub history: Vec<f64>,
    /// `[L, n_exogenous]`, same days as `history`.
    pub exo_window: Tensor,
    pub targets: Vec<f64>,
    pub raw_targets: Vec<f64>,
    pub anchor_index: usize,
}

/// Smallest frame length that yields one window.
pub fn min_frame_len(seq_len: usize, horizons: &[usize]) -> usize {
    seq_len + horizons.iter().copied().max().unwrap_or(0)
}

/// All windows with a full history and every horizon observable, ordered by anchor.
pub fn make_windows(frame: &AlignedFrame, seq_len: usize, horizons: &[usize]) -> Result<Vec<WindowSample>> {
    if seq_len == 0 || horizons.is_empty() {
        return Err(SemfError::Sizing("seq_len and horizon list must be non-empty".into()));
    }
    let t = frame.len();
    let need = min_frame_len(seq_len, horizons);
    if t < need {
        return Err(SemfError::Sizing(format!(
            "frame has {t} days; need at least {need} for seq_len {seq_len}"
        )));
    }
    let y = frame.target_values()?;
    let exo = frame.exogenous_values()?;
    let d = exo.len();
    let max_h = need - seq_len;
    Ok((seq_len - 1..t - max_h)
        .map(|anchor| {
            let start = anchor + 1 - seq_len;
            let mut window = Vec::with_capacity(seq_len * d);
            for i in start..=anchor {
                window.extend(exo.iter().map(|c| c[i]));
            }
            let raw: Vec<f64> = horizons.iter().map(|&h| y[anchor + h]).collect();
            WindowSample {
                history: y[start..=anchor].to_vec(),
                exo_window: Tensor::new(vec![seq_len, d], window).expect("window shape"),
                targets: raw.clone(),
                raw_targets: raw,
                anchor_index: anchor,
            }
        })
        .collect())
}

/// Chronological split ratios in basis points (1/10000).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_bp: u32,
    pub val_bp: u32,
    pub test_bp: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_bp: 6500,
            val_bp: 1500,
            test_bp: 2000,
        }
    }
}

impl SplitSpec {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (
            self.train_bp as f64 / 1e4,
            self.val_bp as f64 / 1e4,
            self.test_bp as f64 / 1e4,
        )
    }

    /// `(train, val, test)`: floors for train and test (each at least one),
    /// validation takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        if self.train_bp + self.val_bp + self.test_bp != 10_000 {
            return Err(SemfError::Config("split ratios must sum to 1".into()));
        }
        if n < 3 {
            return Err(SemfError::Split(format!("{n} windows cannot form three non-empty splits")));
        }
        let train = (n * self.train_bp as usize / 10_000).max(1);
        let test = (n * self.test_bp as usize / 10_000).max(1);
        let val = n.checked_sub(train + test).filter(|&v| v > 0).ok_or_else(|| {
            SemfError::Split(format!("no validation windows left out of {n}"))
        })?;
        Ok((train, val, test))
    }

    /// Window indices where validation and test begin.
    pub fn boundaries(&self, n: usize) -> Result<(usize, usize)> {
        let (train, val, _) = self.sizes(n)?;
        Ok((train, train + val))
    }
}

pub fn chronological_split<T>(mut samples: Vec<T>, spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (b1, b2) = spec.boundaries(samples.len())?;
    let test = samples.split_off(b2);
    let val = samples.split_off(b1);
    Ok((samples, val, test))
}

/// Per-horizon target mean and standard deviation from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &[WindowSample]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| SemfError::contract("cannot fit a standardizer on an empty split"))?;
        let k = first.raw_targets.len();
        let n = train.len() as f64;
        let mut mean = vec![0.0; k];
        for s in train {
            for (m, v) in mean.iter_mut().zip(&s.raw_targets) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; k];
        for s in train {
            for ((sd, m), v) in std.iter_mut().zip(&mean).zip(&s.raw_targets) {
                *sd += (v - m) * (v - m) / n;
            }
        }
        for (h, sd) in std.iter_mut().enumerate() {
            *sd = sd.sqrt();
            if *sd < STD_FLOOR {
                log::warn!("horizon {h}: target variance below floor, std clamped to {STD_FLOOR}");
                *sd = STD_FLOOR;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, standardized: &[f64]) -> Vec<f64> {
        standardized
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Rewrites `targets` from `raw_targets` on any split.
    pub fn apply(&self, samples: &mut [WindowSample]) {
        for s in samples {
            s.targets = self.transform(&s.raw_targets);
        }
    }

    /// Digest of the exact stat bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.mean.iter().chain(&self.std) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("standardizer.mean".into(), Tensor::new(vec![self.mean.len()], self.mean.clone()).expect("1d")),
            ("standardizer.std".into(), Tensor::new(vec![self.std.len()], self.std.clone()).expect("1d")),
        ]
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| SemfError::Format(format!("checkpoint lacks `{name}`")))
        };
        let (mean, std) = (find("standardizer.mean")?, find("standardizer.std")?);
        if mean.len() != std.len() || std.iter().any(|s| s.is_nan() || *s < STD_FLOOR) {
            return Err(SemfError::Format("invalid standardizer tensors".into()));
        }
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = SemfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(SemfError::Config(format!("unknown split `{s}` (valid: train, val, test)"))),
        }
    }
}

/// How often each split has been handed out.
#[derive(Debug, Default)]
pub struct AccessCounters {
    train: AtomicUsize,
    val: AtomicUsize,
    test: AtomicUsize,
}

impl AccessCounters {
    fn bump(&self, split: Split) {
        let c = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train.load(Ordering::Relaxed),
            Split::Val => self.val.load(Ordering::Relaxed),
            Split::Test => self.test.load(Ordering::Relaxed),
        }
    }
}

/// Windows split chronologically with targets scaled by train-only stats.
#[derive(Debug)]
pub struct Dataset {
    seq_len: usize,
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    test: Vec<WindowSample>,
    standardizer: Standardizer,
    access: AccessCounters,
}

impl Dataset {
    /// Imputes, windows, splits and standardizes `frame`.
    pub fn prepare(frame: &AlignedFrame, seq_len: usize, spec: &SplitSpec) -> Result<Self> {
        frame.validate()?;
        let frame = impute(frame)?;
        let windows = make_windows(&frame, seq_len, &HORIZONS)?;
        let (mut train, mut val, mut test) = chronological_split(windows, spec)?;
        let standardizer = Standardizer::fit(&train)?;
        for part in [&mut train, &mut val, &mut test] {
            standardizer.apply(part);
        }
        Ok(Self {
            seq_len,
            train,
            val,
            test,
            standardizer,
            access: AccessCounters::default(),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_exogenous(&self) -> usize {
        self.train[0].exo_window.shape()[1]
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn split(&self, split: Split) -> &[WindowSample] {
        self.access.bump(split);
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[WindowSample] {
        self.split(Split::Train)
    }

    pub fn val(&self) -> &[WindowSample] {
        self.split(Split::Val)
    }

    pub fn test(&self) -> &[WindowSample] {
        self.split(Split::Test)
    }

    /// Sizes without touching the access counters.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn access(&self) -> &AccessCounters {
        &self.access
    }

    /// Keeps only the first `n` training windows.
    pub fn truncate_train(&mut self, n: usize) {
        self.train.truncate(n);
    }
}

/// Exogenous column names, levels and AR(1) coefficients of the generator.
pub const SYNTH_COLUMNS: [(&str, f64, f64, f64); 10] = [
    ("us10y", 2.5, 0.5, 0.80),
    ("us2y", 2.0, 0.5, 0.97),
    ("us3m", 1.5, 0.5, 0.98),
    ("dxy", 95.0, 3.0, 0.80),
    ("usdcny", 6.6, 0.2, 0.97),
    ("usdjpy", 115.0, 8.0, 0.98),
    ("usdkrw", 1150.0, 40.0, 0.97),
    ("spx", 3000.0, 300.0, 0.98),
    ("vix", 18.0, 5.0, 0.80),
    ("lme", 2500.0, 200.0, 0.97),
];
/// `(column index, coefficient, lag in days)` of the exogenous drivers.
pub const SYNTH_DRIVERS: [(usize, f64, usize); 3] = [(0, 25.0, 36), (3, 20.0, 40), (8, -22.0, 45)];
pub const SYNTH_LEVEL: f64 = 1500.0;
pub const SYNTH_TREND: f64 = 0.004;
/// `(amplitude, period in days)`.
pub const SYNTH_CYCLES: [(f64, f64); 2] = [(4.0, 18.0), (6.0, 60.0)];
pub const SYNTH_BURN_IN: usize = 64;
pub const SYNTH_MIN_DAYS: usize = 160;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_days: usize,
    pub noise: f64,
    pub gap_rate: f64,
    pub start: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_days: 3339,
            noise: 3.0,
            gap_rate: 0.02,
            start: NaiveDate::from_ymd_opt(2013, 4, 1).expect("valid date"),
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_days: usize) -> Self {
        Self {
            seed,
            n_days,
            ..Self::default()
        }
    }
}

/// Unit-variance AR(1) paths for every exogenous column, [`synth_max_lag`] days
/// longer than the frame so the target can look back from day 0.
pub fn synth_latent_paths(rng: &mut ChaCha8Rng, n_days: usize) -> Vec<Vec<f64>> {
    let lead = synth_max_lag();
    SYNTH_COLUMNS
        .iter()
        .map(|&(_, _, _, phi)| {
            let innov = (1.0 - phi * phi).sqrt();
            let mut z: f64 = rng.sample(StandardNormal);
            let mut path = Vec::with_capacity(lead + n_days);
            for i in 0..SYNTH_BURN_IN + lead + n_days {
                let e: f64 = rng.sample(StandardNormal);
                z = phi * z + innov * e;
                if i >= SYNTH_BURN_IN {
                    path.push(z);
                }
            }
            path
        })
        .collect()
}

pub fn synth_max_lag() -> usize {
    SYNTH_DRIVERS.iter().map(|d| d.2).max().unwrap_or(0)
}

/// Noise-free target at day `t`; `latent[j][lead + t]` is column `j` on day `t`.
pub fn synth_signal(t: usize, latent: &[Vec<f64>]) -> f64 {
    let lead = synth_max_lag();
    let tf = t as f64;
    let mut y = SYNTH_LEVEL + SYNTH_TREND * tf;
    for (amp, period) in SYNTH_CYCLES {
        y += amp * (2.0 * std::f64::consts::PI * tf / period).sin();
    }
    for (j, beta, lag) in SYNTH_DRIVERS {
        y += beta * latent[j][lead + t - lag];
    }
    y
}

/// Deterministic synthetic frame in which the target depends on lagged
/// exogenous drivers.
pub fn synthesize(cfg: &SynthConfig) -> Result<AlignedFrame> {
    if cfg.n_days < SYNTH_MIN_DAYS {
        return Err(SemfError::Sizing(format!(
            "n_days {} below minimum {SYNTH_MIN_DAYS}",
            cfg.n_days
        )));
    }
    if !(0.0..1.0).contains(&cfg.gap_rate) || cfg.noise.is_nan() || cfg.noise < 0.0 {
        return Err(SemfError::Config("gap_rate must lie in [0, 1) and noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = synth_latent_paths(&mut rng, cfg.n_days);
    let lead = synth_max_lag();
    let mut target: Vec<Option<f64>> = (0..cfg.n_days)
        .map(|t| {
            let e: f64 = rng.sample(StandardNormal);
            Some(synth_signal(t, &latent) + cfg.noise * e)
        })
        .collect();
    let mut exogenous: Vec<Vec<Option<f64>>> = SYNTH_COLUMNS
        .iter()
        .zip(&latent)
        .map(|(&(_, level, scale, _), z)| z[lead..].iter().map(|v| Some(level + scale * v)).collect())
        .collect();
    for col in std::iter::once(&mut target).chain(exogenous.iter_mut()) {
        for cell in col.iter_mut() {
            if rng.gen::<f64>() < cfg.gap_rate {
                *cell = None;
            }
        }
    }
    let dates = (0..cfg.n_days)
        .map(|i| {
            cfg.start
                .checked_add_days(Days::new(i as u64))
                .ok_or_else(|| SemfError::Config("date range overflow".into()))
        })
        .collect::<Result<_>>()?;
    Ok(AlignedFrame {
        dates,
        target_name: "target".into(),
        target,
        column_names: SYNTH_COLUMNS.iter().map(|c| c.0.to_string()).collect(),
        exogenous,
    })
}

pub fn synthesize_dataset(seed: u64, n_days: usize) -> Result<AlignedFrame> {
    synthesize(&SynthConfig::new(seed, n_days))
}
