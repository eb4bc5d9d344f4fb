//! Time-frequency images of a target window.
//!
//! The main path is a Morlet continuous wavelet transform evaluated as a
//! direct correlation (computed through zero-padded FFTs) with `1/sqrt(s)`
//! normalization, followed by joint standardization of `ln(|W| + eps)`.
//! Complex Morlet, STFT and line-plot images exist for comparison and are all
//! emitted at the same `n_rows x L` shape.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::error::{Result, SemfError};

/// Gaussian envelope level below which wavelet taps are dropped.
pub const ENVELOPE_CUTOFF: f64 = 1e-8;

/// Below this pre-standardization variance an image is emitted as all zeros.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageKind {
    Line,
    Stft,
    Cmor,
    Morlet,
}

impl ImageKind {
    pub const ALL: [ImageKind; 4] = [ImageKind::Line, ImageKind::Stft, ImageKind::Cmor, ImageKind::Morlet];

    pub fn as_str(self) -> &'static str {
        match self {
            ImageKind::Line => "line",
            ImageKind::Stft => "stft",
            ImageKind::Cmor => "cmor",
            ImageKind::Morlet => "morlet",
        }
    }
}

impl fmt::Display for ImageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageKind {
    type Err = SemfError;

    fn from_str(s: &str) -> Result<Self> {
        ImageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SemfError::Config(format!("unknown image kind `{s}` (valid: line, stft, cmor, morlet)")))
    }
}

/// Geometric scale grid shared by both wavelet families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleGrid {
    pub n_scales: usize,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for ScaleGrid {
    fn default() -> Self {
        Self {
            n_scales: 128,
            s_min: 2.0,
            s_max: 64.0,
        }
    }
}

impl ScaleGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 2 || !(self.s_min > 0.0 && self.s_min < self.s_max) {
            return Err(SemfError::Config(format!(
                "invalid scale grid: {} scales over [{}, {}]",
                self.n_scales, self.s_min, self.s_max
            )));
        }
        Ok(())
    }

    pub fn scales(&self) -> Vec<f64> {
        let ratio = (self.s_max / self.s_min).ln() / (self.n_scales - 1) as f64;
        (0..self.n_scales)
            .map(|j| self.s_min * (ratio * j as f64).exp())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorletParams {
    pub omega0: f64,
    pub grid: ScaleGrid,
    pub epsilon: f64,
}

impl Default for MorletParams {
    fn default() -> Self {
        Self {
            omega0: 6.0,
            grid: ScaleGrid::default(),
            epsilon: 1e-8,
        }
    }
}

impl MorletParams {
    pub fn validate(&self) -> Result<()> {
        if self.omega0 < 5.0 {
            return Err(SemfError::Config(format!("omega0 {} below 5", self.omega0)));
        }
        self.grid.validate()
    }

    /// Ratio of equivalent Fourier period to scale.
    pub fn fourier_factor(&self) -> f64 {
        4.0 * std::f64::consts::PI / (self.omega0 + (2.0 + self.omega0 * self.omega0).sqrt())
    }
}

/// Complex Morlet with bandwidth `B` and center frequency `C`:
/// `(pi B)^(-1/2) exp(2 pi i C eta) exp(-eta^2 / B)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmorParams {
    pub bandwidth: f64,
    pub center: f64,
    pub grid: ScaleGrid,
    pub epsilon: f64,
}

impl Default for CmorParams {
    fn default() -> Self {
        Self {
            bandwidth: 1.5,
            center: 1.0,
            grid: ScaleGrid::default(),
            epsilon: 1e-8,
        }
    }
}

impl CmorParams {
    /// Fourier period of the amplitude peak at scale `s`.
    pub fn period_at_scale(&self, s: f64) -> f64 {
        let pc = std::f64::consts::PI * self.center;
        2.0 * std::f64::consts::PI * s / (pc + (pc * pc + 1.0 / self.bandwidth).sqrt())
    }
}

/// Complex coefficients, row-major `scales.len() x len`.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtCoefficients {
    pub scales: Vec<f64>,
    pub len: usize,
    pub data: Vec<Complex64>,
}

impl CwtCoefficients {
    pub fn at(&self, j: usize, n: usize) -> Complex64 {
        self.data[j * self.len + n]
    }

    pub fn row(&self, j: usize) -> &[Complex64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }
}

/// A standardized `n_rows x L` image with the axis labels it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor,
    /// Wavelet scales in samples for wavelet images; empty otherwise.
    pub scales: Vec<f64>,
    pub kind: ImageKind,
}

impl Spectrogram {
    pub fn n_rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_cols(&self) -> usize {
        self.values.shape()[1]
    }
}

fn check_series(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(SemfError::Sizing(format!("series length {} < 2", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SemfError::NonFinite { op: "cwt input" });
    }
    Ok(())
}

/// Morlet CWT, `W[j][n] = s_j^(-1/2) sum_n' x[n'] conj(psi0((n' - n) / s_j))`,
/// zero-padded at both ends.
pub fn morlet_cwt(x: &[f64], p: &MorletParams) -> Result<CwtCoefficients> {
    check_series(x)?;
    p.validate()?;
    let norm = std::f64::consts::PI.powf(-0.25);
    let omega0 = p.omega0;
    correlate_wavelet(
        x,
        &p.grid.scales(),
        |eta| (-0.5 * eta * eta).exp(),
        |eta| Complex64::from_polar(norm * (-0.5 * eta * eta).exp(), omega0 * eta),
    )
}

pub fn cmor_cwt(x: &[f64], p: &CmorParams) -> Result<CwtCoefficients> {
    check_series(x)?;
    p.grid.validate()?;
    if p.bandwidth <= 0.0 || p.center <= 0.0 {
        return Err(SemfError::Config("cmor bandwidth and center must be positive".into()));
    }
    let b = p.bandwidth;
    let norm = (std::f64::consts::PI * b).powf(-0.5);
    let w = 2.0 * std::f64::consts::PI * p.center;
    correlate_wavelet(
        x,
        &p.grid.scales(),
        |eta| (-eta * eta / b).exp(),
        |eta| Complex64::from_polar(norm * (-eta * eta / b).exp(), w * eta),
    )
}

fn correlate_wavelet(
    x: &[f64],
    scales: &[f64],
    envelope: impl Fn(f64) -> f64,
    mother: impl Fn(f64) -> Complex64,
) -> Result<CwtCoefficients> {
    let len = x.len();
    // Lags beyond len - 1 never overlap the signal.
    let size = (2 * len - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut xf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    xf.resize(size, Complex64::new(0.0, 0.0));
    fft.process(&mut xf);

    let mut data = Vec::with_capacity(scales.len() * len);
    let mut kernel = vec![Complex64::new(0.0, 0.0); size];
    for &s in scales {
        kernel.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let amp = 1.0 / s.sqrt();
        // y[n] = sum_m x[n + m] c[m] with c[m] = conj(psi(m / s)) / sqrt(s),
        // realized as a circular convolution with h[j] = c[-j].
        for m in -(len as i64 - 1)..=(len as i64 - 1) {
            let eta = m as f64 / s;
            if envelope(eta) < ENVELOPE_CUTOFF {
                continue;
            }
            let c = mother(eta).conj() * amp;
            let j = (-m).rem_euclid(size as i64) as usize;
            kernel[j] = c;
        }
        fft.process(&mut kernel);
        for (k, xv) in kernel.iter_mut().zip(&xf) {
            *k *= xv;
        }
        ifft.process(&mut kernel);
        let inv = 1.0 / size as f64;
        data.extend(kernel[..len].iter().map(|c| c * inv));
    }
    Ok(CwtCoefficients {
        scales: scales.to_vec(),
        len,
        data,
    })
}

/// Standardizes all entries jointly; near-constant inputs become all zeros.
pub fn standardize_in_place(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < DEGENERATE_VARIANCE {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let std = var.sqrt();
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

/// `standardize(ln(|W| + eps))` over the whole matrix.
pub fn log_amplitude_normalize(w: &CwtCoefficients, epsilon: f64, kind: ImageKind) -> Spectrogram {
    let mut values: Vec<f64> = w.data.iter().map(|c| (c.norm() + epsilon).ln()).collect();
    standardize_in_place(&mut values);
    Spectrogram {
        values: Tensor::new(vec![w.scales.len(), w.len], values).expect("cwt shape"),
        scales: w.scales.clone(),
        kind,
    }
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Hann-windowed DFT magnitudes, `bins x frames` with bin 0 = DC.
pub fn stft_magnitudes(x: &[f64], window_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    check_series(x)?;
    if window_len < 2 || window_len > x.len() {
        return Err(SemfError::Sizing(format!(
            "STFT window {window_len} must lie in [2, {}]",
            x.len()
        )));
    }
    if hop == 0 {
        return Err(SemfError::Sizing("STFT hop must be positive".into()));
    }
    let n_frames = 1 + (x.len() - window_len) / hop;
    let n_bins = window_len / 2 + 1;
    let win = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut out = vec![vec![0.0; n_frames]; n_bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for f in 0..n_frames {
        let start = f * hop;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + k] * win[k], 0.0);
        }
        fft.process(&mut buf);
        for (b, row) in out.iter_mut().enumerate() {
            row[f] = buf[b].norm();
        }
    }
    Ok(out)
}

fn lerp_at(values: &[f64], pos: f64) -> f64 {
    let last = values.len() - 1;
    let pos = pos.clamp(0.0, last as f64);
    let i = (pos.floor() as usize).min(last);
    if i == last {
        return values[last];
    }
    let t = pos - i as f64;
    values[i] * (1.0 - t) + values[i + 1] * t
}

/// Log-magnitude STFT resampled to `n_rows x L`; row 0 is the highest frequency
/// so the orientation matches the wavelet images (small scales first).
pub fn stft_spectrogram(x: &[f64], window_len: usize, hop: usize, n_rows: usize, epsilon: f64) -> Result<Spectrogram> {
    let mags = stft_magnitudes(x, window_len, hop)?;
    if n_rows < 2 {
        return Err(SemfError::Sizing("STFT image needs at least 2 rows".into()));
    }
    let len = x.len();
    let n_bins = mags.len();
    let n_frames = mags[0].len();
    let logs: Vec<Vec<f64>> = mags
        .iter()
        .map(|r| r.iter().map(|m| (m + epsilon).ln()).collect())
        .collect();
    let center0 = (window_len - 1) as f64 / 2.0;
    // Time first: bins x L.
    let timed: Vec<Vec<f64>> = logs
        .iter()
        .map(|row| {
            (0..len)
                .map(|n| {
                    if n_frames == 1 {
                        row[0]
                    } else {
                        lerp_at(row, (n as f64 - center0) / hop as f64)
                    }
                })
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(n_rows * len);
    for r in 0..n_rows {
        let bin_pos = (n_rows - 1 - r) as f64 * (n_bins - 1) as f64 / (n_rows - 1) as f64;
        for n in 0..len {
            let column: Vec<f64> = timed.iter().map(|row| row[n]).collect();
            values.push(lerp_at(&column, bin_pos));
        }
    }
    standardize_in_place(&mut values);
    Ok(Spectrogram {
        values: Tensor::new(vec![n_rows, len], values)?,
        scales: Vec::new(),
        kind: ImageKind::Stft,
    })
}

/// Row index of each sample on a `height`-row canvas, row 0 at the top (maximum).
/// A flat series sits on row `(height - 1) / 2`.
pub fn line_rows(x: &[f64], height: usize) -> Vec<usize> {
    let (min, max) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    if span.is_nan() || span <= 0.0 {
        return vec![(height - 1) / 2; x.len()];
    }
    x.iter()
        .map(|&v| {
            let level = ((v - min) / span * (height - 1) as f64).round() as usize;
            height - 1 - level.min(height - 1)
        })
        .collect()
}

/// Binary polyline canvas (`height x L`, row-major) before standardization.
pub fn line_canvas(x: &[f64], height: usize) -> Result<Vec<f64>> {
    check_series(x)?;
    if height < 2 {
        return Err(SemfError::Sizing("line raster needs at least 2 rows".into()));
    }
    let len = x.len();
    let rows = line_rows(x, height);
    let mut canvas = vec![0.0; height * len];
    for c in 0..len - 1 {
        bresenham(c as i64, rows[c] as i64, c as i64 + 1, rows[c + 1] as i64, |cx, cy| {
            canvas[cy as usize * len + cx as usize] = 1.0;
        });
    }
    Ok(canvas)
}

fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64, mut plot: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        plot(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn line_raster(x: &[f64], height: usize) -> Result<Spectrogram> {
    let mut values = line_canvas(x, height)?;
    standardize_in_place(&mut values);
    Ok(Spectrogram {
        values: Tensor::new(vec![height, x.len()], values)?,
        scales: Vec::new(),
        kind: ImageKind::Line,
    })
}

/// Settings for turning one target window into an encoder image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageConfig {
    pub kind: ImageKind,
    pub grid: ScaleGrid,
    pub omega0: f64,
    pub epsilon: f64,
    pub cmor_bandwidth: f64,
    pub cmor_center: f64,
    pub stft_window: usize,
    pub stft_hop: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            kind: ImageKind::Morlet,
            grid: ScaleGrid::default(),
            omega0: 6.0,
            epsilon: 1e-8,
            cmor_bandwidth: 1.5,
            cmor_center: 1.0,
            stft_window: 32,
            stft_hop: 4,
        }
    }
}

impl ImageConfig {
    pub fn with_kind(kind: ImageKind, n_scales: usize) -> Self {
        Self {
            kind,
            grid: ScaleGrid {
                n_scales,
                ..ScaleGrid::default()
            },
            ..Self::default()
        }
    }

    pub fn morlet(&self) -> MorletParams {
        MorletParams {
            omega0: self.omega0,
            grid: self.grid,
            epsilon: self.epsilon,
        }
    }

    pub fn cmor(&self) -> CmorParams {
        CmorParams {
            bandwidth: self.cmor_bandwidth,
            center: self.cmor_center,
            grid: self.grid,
            epsilon: self.epsilon,
        }
    }
}

/// Renders `x` as a standardized `n_scales x len(x)` image of the configured kind.
pub fn render_image(x: &[f64], cfg: &ImageConfig) -> Result<Spectrogram> {
    match cfg.kind {
        ImageKind::Morlet => {
            let w = morlet_cwt(x, &cfg.morlet())?;
            Ok(log_amplitude_normalize(&w, cfg.epsilon, ImageKind::Morlet))
        }
        ImageKind::Cmor => {
            let w = cmor_cwt(x, &cfg.cmor())?;
            Ok(log_amplitude_normalize(&w, cfg.epsilon, ImageKind::Cmor))
        }
        ImageKind::Stft => {
            let window = cfg.stft_window.min(x.len());
            stft_spectrogram(x, window, cfg.stft_hop, cfg.grid.n_scales, cfg.epsilon)
        }
        ImageKind::Line => line_raster(x, cfg.grid.n_scales),
    }
}

/// Binary PGM (P5), values mapped linearly from `[min, max]` to `[0, 255]`.
/// A constant image maps to all zeros.
pub fn write_pgm<W: Write>(mut w: W, image: &Tensor) -> Result<()> {
    let (rows, cols) = (image.shape()[0], image.shape()[1]);
    let (min, max) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    writeln!(w, "P5 {cols} {rows} 255")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// One CSV line per row, values in shortest round-trip decimal form.
pub fn write_matrix_csv<W: Write>(mut w: W, image: &Tensor) -> Result<()> {
    for r in 0..image.rows() {
        let line: Vec<String> = image.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(r: R) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| SemfError::Parse {
                    line: i as u64 + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows).map_err(|_| SemfError::Parse {
        line: 0,
        msg: "ragged matrix rows".into(),
    })
}
