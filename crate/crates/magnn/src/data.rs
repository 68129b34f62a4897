//! Dataset handling: delimited-text ingestion, chronological 60/20/20
//! splits, per-variable max-abs scaling fitted on training rows only,
//! sliding-window sample construction, and a synthetic generator that plants
//! known periodic structure for experiments.
//!
//! Matrices are time-major: row t holds the N variable readings at timestep
//! t. Window inputs are handed out variable-major (N×T) because that is the
//! layout the model consumes.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::path::Path;

/// Which chronological split a window sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A multivariate series with fitted splits and scaler.
///
/// Immutable after construction; all accessors are `&self`, so sharing one
/// dataset across threads is safe.
#[derive(Debug, Clone)]
pub struct MtsDataset {
    /// Raw values, `t_total * n_vars`, row-major by timestep.
    pub values: Vec<f64>,
    /// Values divided by per-variable scaler factors, same layout.
    pub scaled: Vec<f64>,
    pub n_vars: usize,
    pub t_total: usize,
    pub variable_names: Vec<String>,
    /// Free-text cadence descriptor ("daily", "synthetic", …).
    pub sample_rate: String,
    /// First row index outside the training split: `floor(0.6 * t_total)`.
    pub train_end: usize,
    /// First row index outside the validation split: `floor(0.8 * t_total)`.
    pub val_end: usize,
    /// Per-variable max-abs factors fitted on rows `[0, train_end)`;
    /// zero-variance columns get factor 1 so division is always defined.
    pub factors: Vec<f64>,
}

/// One supervised sample: an input window and the value `h` steps past it.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// Scaled window, variable-major N×T.
    pub input: Vec<f64>,
    /// Scaled target `x_{origin+T+h-1}`, length N.
    pub target: Vec<f64>,
    /// Absolute row index of the window's first timestep.
    pub origin_index: usize,
    /// Absolute row index of the target (`origin + T + h - 1`).
    pub target_index: usize,
}

const MIN_ROWS: usize = 10;

impl MtsDataset {
    /// Builds a dataset from a time-major matrix, fitting splits and scaler.
    pub fn from_matrix(
        values: Vec<f64>,
        n_vars: usize,
        variable_names: Vec<String>,
        sample_rate: String,
    ) -> Result<Self> {
        if n_vars == 0 || values.len() % n_vars != 0 {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: vec![values.len(), n_vars],
                msg: "values length must be a positive multiple of n_vars".into(),
            });
        }
        let t_total = values.len() / n_vars;
        if t_total < MIN_ROWS {
            return Err(Error::Config(format!(
                "dataset has {t_total} rows, need at least {MIN_ROWS}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "dataset" });
        }
        let train_end = (t_total as f64 * 0.6).floor() as usize;
        let val_end = (t_total as f64 * 0.8).floor() as usize;
        let factors = fit_max_abs(&values, n_vars, train_end);
        let mut scaled = values.clone();
        for (i, v) in scaled.iter_mut().enumerate() {
            *v /= factors[i % n_vars];
        }
        Ok(MtsDataset {
            values,
            scaled,
            n_vars,
            t_total,
            variable_names,
            sample_rate,
            train_end,
            val_end,
            factors,
        })
    }

    /// Raw (unscaled) row at timestep `t`.
    pub fn raw_row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_vars..(t + 1) * self.n_vars]
    }

    /// `[start, end)` row range of a split.
    pub fn split_range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.t_total),
        }
    }

    /// Writes the raw matrix back out as delimited text (the same format
    /// `load_csv` reads).
    pub fn save_csv(&self, path: &Path, delimiter: char, header: bool) -> Result<()> {
        let mut out = String::new();
        if header {
            out.push_str(&self.variable_names.join(&delimiter.to_string()));
            out.push('\n');
        }
        for t in 0..self.t_total {
            let row: Vec<String> = self.raw_row(t).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(&delimiter.to_string()));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Per-variable max of |x| over the training rows, with 1.0 for all-zero
/// columns. Fitting is a pure function of the data, so refitting is
/// idempotent.
fn fit_max_abs(values: &[f64], n_vars: usize, train_end: usize) -> Vec<f64> {
    let mut factors = vec![0.0f64; n_vars];
    for t in 0..train_end {
        for j in 0..n_vars {
            factors[j] = factors[j].max(values[t * n_vars + j].abs());
        }
    }
    for f in &mut factors {
        if *f == 0.0 {
            *f = 1.0;
        }
    }
    factors
}

/// Loads a delimited numeric text file (rows = timesteps, columns =
/// variables). Fails with the 1-based row and column of the first offending
/// cell on ragged or non-numeric input.
pub fn load_csv(path: &Path, delimiter: char, header: bool) -> Result<MtsDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.display().to_string(),
        row: 0,
        col: 0,
        msg: e.to_string(),
    })?;
    let path_str = path.display().to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let mut names: Vec<String> = Vec::new();
    if header {
        if let Some((_, line)) = lines.next() {
            names = line
                .split(delimiter)
                .map(|s| s.trim().to_string())
                .collect();
        }
    }

    let mut values = Vec::new();
    let mut n_vars = 0usize;
    let mut data_rows = 0usize;
    for (line_idx, line) in lines {
        let row: Vec<&str> = line.split(delimiter).collect();
        if n_vars == 0 {
            n_vars = row.len();
        } else if row.len() != n_vars {
            return Err(Error::Ingest {
                path: path_str,
                row: line_idx + 1,
                col: row.len().min(n_vars) + 1,
                msg: format!("ragged row: expected {n_vars} cells, found {}", row.len()),
            });
        }
        for (col_idx, cell) in row.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Ingest {
                path: path_str.clone(),
                row: line_idx + 1,
                col: col_idx + 1,
                msg: format!("cell {cell:?} is not a number"),
            })?;
            values.push(v);
        }
        data_rows += 1;
    }
    if data_rows < MIN_ROWS {
        return Err(Error::Ingest {
            path: path_str,
            row: data_rows,
            col: 0,
            msg: format!("only {data_rows} data rows, need at least {MIN_ROWS}"),
        });
    }
    if names.len() != n_vars {
        names = (0..n_vars).map(|j| format!("v{j}")).collect();
    }
    MtsDataset::from_matrix(values, n_vars, names, "unknown".into())
}

/// Number of stride-1 windows that fit in a segment of `seg_len` rows with
/// window size `t_window` and horizon `h`.
pub fn window_count(seg_len: usize, t_window: usize, h: usize) -> usize {
    (seg_len + 1).saturating_sub(t_window + h)
}

/// Enumerates every (window, target) sample of a split.
///
/// Windows and targets both live inside the split segment: origin o yields
/// input rows `[o, o+T)` and target row `o + T + h - 1`, and origins run
/// until the target hits the segment's last row. Samples carry scaled
/// values; metrics use the raw rows via `target_index`.
pub fn make_windows(
    ds: &MtsDataset,
    split: Split,
    t_window: usize,
    h: usize,
) -> Result<Vec<WindowSample>> {
    if t_window == 0 || h == 0 {
        return Err(Error::Contract(
            "make_windows requires t_window >= 1 and h >= 1".into(),
        ));
    }
    let (start, end) = ds.split_range(split);
    let seg_len = end - start;
    let count = window_count(seg_len, t_window, h);
    if count == 0 {
        return Err(Error::Config(format!(
            "{split} split has {seg_len} rows, need at least {} for T={t_window}, h={h}",
            t_window + h
        )));
    }
    let n = ds.n_vars;
    let mut samples = Vec::with_capacity(count);
    for o in 0..count {
        let origin = start + o;
        let target_index = origin + t_window + h - 1;
        let mut input = vec![0.0; n * t_window];
        for j in 0..t_window {
            let row = &ds.scaled[(origin + j) * n..(origin + j + 1) * n];
            for (i, v) in row.iter().enumerate() {
                input[i * t_window + j] = *v;
            }
        }
        let target = ds.scaled[target_index * n..(target_index + 1) * n].to_vec();
        samples.push(WindowSample {
            input,
            target,
            origin_index: origin,
            target_index,
        });
    }
    Ok(samples)
}

/// Multiplies a scaled vector back into original units.
pub fn inverse_scale(x_scaled: &[f64], ds: &MtsDataset) -> Result<Vec<f64>> {
    if x_scaled.len() != ds.n_vars {
        return Err(Error::ShapeMismatch {
            op: "inverse_scale",
            lhs: vec![x_scaled.len()],
            rhs: vec![ds.n_vars],
        });
    }
    Ok(x_scaled
        .iter()
        .zip(&ds.factors)
        .map(|(v, f)| v * f)
        .collect())
}

/// Generates N coupled series, each a mixture of sinusoids at the given
/// integer periods plus Gaussian noise.
///
/// Variable j's base signal is `Σ_p a_{j,p} sin(2π (t mod p)/p + φ_{j,p})`
/// with seeded random amplitudes and phases; the output is
/// `coupling · base + noise`. Phases use `t mod p`, so with zero noise each
/// column is exactly periodic in every listed period's least common
/// multiple (and in p itself under identity coupling with one period).
pub fn synth_multiscale(
    n_vars: usize,
    t_total: usize,
    periods: &[usize],
    coupling: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<MtsDataset> {
    if periods.is_empty() || periods.contains(&0) {
        return Err(Error::Config("periods must be nonempty and positive".into()));
    }
    if coupling.len() != n_vars * n_vars {
        return Err(Error::ShapeMismatch {
            op: "synth_multiscale",
            lhs: vec![n_vars, n_vars],
            rhs: vec![coupling.len()],
        });
    }
    if t_total < MIN_ROWS {
        return Err(Error::Config(format!(
            "t_total {t_total} too small, need at least {MIN_ROWS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amps: Vec<f64> = (0..n_vars * periods.len())
        .map(|_| rng.gen_range(0.5..1.5))
        .collect();
    let phases: Vec<f64> = (0..n_vars * periods.len())
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut values = vec![0.0; t_total * n_vars];
    let mut base = vec![0.0; n_vars];
    for t in 0..t_total {
        for (j, b) in base.iter_mut().enumerate() {
            let mut s = 0.0;
            for (pi, &p) in periods.iter().enumerate() {
                let phase = std::f64::consts::TAU * ((t % p) as f64) / p as f64;
                s += amps[j * periods.len() + pi] * (phase + phases[j * periods.len() + pi]).sin();
            }
            *b = s;
        }
        for i in 0..n_vars {
            let mut v = 0.0;
            for j in 0..n_vars {
                v += coupling[i * n_vars + j] * base[j];
            }
            if noise_sd > 0.0 {
                v += noise_sd * normal.sample(&mut rng);
            }
            values[t * n_vars + i] = v;
        }
    }
    let names = (0..n_vars).map(|j| format!("v{j}")).collect();
    MtsDataset::from_matrix(values, n_vars, names, "synthetic".into())
}

/// Identity-plus-uniform-offdiagonal mixing matrix, the default coupling for
/// synthetic experiments: each variable leans on every other with weight
/// `strength / (N-1)`.
pub fn default_coupling(n_vars: usize, strength: f64) -> Vec<f64> {
    let mut c = vec![0.0; n_vars * n_vars];
    for i in 0..n_vars {
        for j in 0..n_vars {
            c[i * n_vars + j] = if i == j {
                1.0
            } else if n_vars > 1 {
                strength / (n_vars - 1) as f64
            } else {
                0.0
            };
        }
    }
    c
}
