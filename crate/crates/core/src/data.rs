//! Series tables, CSV loading, synthetic generation, chronological splits,
//! standardization, windowing and per-instance normalization.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the per-instance standard deviation.
pub const INSTANCE_EPS: f64 = 1e-5;
/// Floor applied to standardizer deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A named multivariate series stored row-major as `[timesteps, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub name: String,
    pub timestamps: Vec<String>,
    pub channel_names: Vec<String>,
    values: Vec<f64>,
}

impl SeriesTable {
    pub fn new(
        name: impl Into<String>,
        timestamps: Vec<String>,
        channel_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = channel_names.len();
        if m == 0 {
            return Err(Error::data("a series table needs at least one channel"));
        }
        if timestamps.len() < 2 {
            return Err(Error::data(format!(
                "a series table needs at least 2 timesteps, got {}",
                timestamps.len()
            )));
        }
        if values.len() != timestamps.len() * m {
            return Err(Error::data(format!(
                "{} values do not fill {} rows of {} channels",
                values.len(),
                timestamps.len(),
                m
            )));
        }
        Ok(Self {
            name: name.into(),
            timestamps,
            channel_names,
            values,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels() + channel]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.channels();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.timesteps()).map(|t| self.value(t, channel)).collect()
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channels()) {
            return Err(Error::data(format!("channel {bad} out of range")));
        }
        let values = (0..self.timesteps())
            .flat_map(|t| channels.iter().map(move |&c| (t, c)))
            .map(|(t, c)| self.value(t, c))
            .collect();
        let names = channels.iter().map(|&c| self.channel_names[c].clone()).collect();
        Self::new(self.name.clone(), self.timestamps.clone(), names, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        for t in 0..self.timesteps() {
            let mut rec = vec![self.timestamps[t].clone()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads a CSV whose first column is an opaque timestamp and whose remaining
/// columns are numeric channels. Blank or malformed cells are errors.
pub fn load_csv(path: &Path) -> Result<SeriesTable> {
    let csv_err = |row: usize, column: usize, reason: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => csv_err(0, 0, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(1, 0, e.to_string()))?
        .clone();
    if header.len() < 2 {
        return Err(csv_err(1, 0, "need a timestamp column and at least one channel".into()));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = channel_names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based file line numbers; the header is row 1.
        let row = i + 2;
        let record = record.map_err(|e| csv_err(row, 0, e.to_string()))?;
        if record.len() != m + 1 {
            return Err(csv_err(
                row,
                record.len(),
                format!("expected {} fields, found {}", m + 1, record.len()),
            ));
        }
        timestamps.push(record[0].to_string());
        for (j, cell) in record.iter().enumerate().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(csv_err(row, j + 1, "missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(row, j + 1, format!("cannot parse {cell:?} as a number")))?;
            if !v.is_finite() {
                return Err(csv_err(row, j + 1, format!("non-finite value {cell}")));
            }
            values.push(v);
        }
    }
    if timestamps.len() < 2 {
        return Err(csv_err(
            timestamps.len() + 1,
            0,
            format!("need at least 2 data rows, found {}", timestamps.len()),
        ));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SeriesTable::new(name, timestamps, channel_names, values)
}

/// How the series is cut into train / validation / test roles.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    /// Explicit end indices of the train and validation blocks and of the
    /// whole usable series.
    Borders {
        train_end: usize,
        val_end: usize,
        test_end: usize,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    /// 12/4/4 months of `steps_per_day` observations (30-day months).
    pub fn ett(steps_per_day: usize) -> Self {
        let month = 30 * steps_per_day;
        SplitSpec::Borders {
            train_end: 12 * month,
            val_end: 16 * month,
            test_end: 20 * month,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological split. Validation and test ranges are extended backwards by
/// `lookback` steps so their first window has a complete look-back; their
/// targets never leave the role's own block.
pub fn chrono_split(
    timesteps: usize,
    spec: &SplitSpec,
    lookback: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    let (train_end, val_end, test_end) = match *spec {
        SplitSpec::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
                return Err(Error::config("split fractions must lie in [0, 1]"));
            }
            if (train + val + test - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "split fractions sum to {}, not 1",
                    train + val + test
                )));
            }
            let cut = |f: f64| (f * timesteps as f64 + 1e-9).floor() as usize;
            let train_end = cut(train);
            let val_end = train_end + cut(val);
            (train_end, val_end, timesteps)
        }
        SplitSpec::Borders {
            train_end,
            val_end,
            test_end,
        } => {
            if !(train_end <= val_end && val_end <= test_end && test_end <= timesteps) {
                return Err(Error::config(format!(
                    "split borders {train_end}/{val_end}/{test_end} invalid for {timesteps} steps"
                )));
            }
            (train_end, val_end, test_end)
        }
    };
    let ranges = SplitRanges {
        train: 0..train_end,
        val: train_end.saturating_sub(lookback)..val_end,
        test: val_end.saturating_sub(lookback)..test_end,
    };
    let need = lookback + horizon;
    for (role, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.len() < need {
            return Err(Error::config(format!(
                "{role} split {r:?} has {} steps, fewer than look-back + horizon = {need}",
                r.len()
            )));
        }
    }
    Ok(ranges)
}

/// Per-channel z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(table: &SeriesTable, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > table.timesteps() {
            return Err(Error::data(format!("cannot fit standardizer on rows {rows:?}")));
        }
        let m = table.channels();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; m];
        for t in rows.clone() {
            for (c, v) in table.row(t).iter().enumerate() {
                mean[c] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for t in rows {
            for (c, v) in table.row(t).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.map(table, |v, mean, std| (v - mean) / std)
    }

    pub fn invert(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.map(table, |v, mean, std| v * std + mean)
    }

    /// Inverts in place a buffer laid out `[.., channels, steps]`.
    pub fn invert_channel_major(&self, data: &mut [f64], steps: usize) {
        let m = self.mean.len();
        for (i, chunk) in data.chunks_mut(steps).enumerate() {
            let c = i % m;
            chunk
                .iter_mut()
                .for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
    }

    fn map(&self, table: &SeriesTable, f: impl Fn(f64, f64, f64) -> f64) -> Result<SeriesTable> {
        let m = table.channels();
        if m != self.mean.len() {
            return Err(Error::data(format!(
                "standardizer fitted on {} channels applied to {m}",
                self.mean.len()
            )));
        }
        let values = table
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % m], self.std[i % m]))
            .collect();
        SeriesTable::new(
            table.name.clone(),
            table.timestamps.clone(),
            table.channel_names.clone(),
            values,
        )
    }
}

/// One forecasting instance: look-back `x: [M, L]`, horizon `y: [M, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    pub x: Tensor,
    pub y: Tensor,
    pub inst_mean: Option<Vec<f64>>,
    pub inst_std: Option<Vec<f64>>,
}

/// Start offsets (absolute time indices) of every window inside `range`.
pub fn window_starts(
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config("look-back, horizon and stride must be positive"));
    }
    if range.len() < lookback + horizon {
        return Err(Error::data(format!(
            "range {range:?} is shorter than look-back + horizon = {}",
            lookback + horizon
        )));
    }
    let last = range.end - lookback - horizon;
    Ok((range.start..=last).step_by(stride).collect())
}

/// Materializes every window of a range. With `instance_norm`, the
/// per-channel statistics of each look-back are recorded as well.
pub fn make_windows(
    table: &SeriesTable,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    instance_norm: bool,
) -> Result<Vec<WindowSample>> {
    if range.end > table.timesteps() {
        return Err(Error::data(format!(
            "range {range:?} exceeds {} timesteps",
            table.timesteps()
        )));
    }
    let m = table.channels();
    window_starts(range, lookback, horizon, stride)?
        .into_iter()
        .map(|start| {
            let x = channel_major(table, start, lookback);
            let y = channel_major(table, start + lookback, horizon);
            let (inst_mean, inst_std) = if instance_norm {
                let (_, stats) = instance_normalize(&x, lookback);
                (Some(stats.mean), Some(stats.std))
            } else {
                (None, None)
            };
            Ok(WindowSample {
                start,
                x: Tensor::new(vec![m, lookback], x)?,
                y: Tensor::new(vec![m, horizon], y)?,
                inst_mean,
                inst_std,
            })
        })
        .collect()
}

/// `len` steps from `start`, laid out channel-major `[M, len]`.
pub fn channel_major(table: &SeriesTable, start: usize, len: usize) -> Vec<f64> {
    let m = table.channels();
    let mut out = vec![0.0; m * len];
    for k in 0..len {
        for (c, v) in table.row(start + k).iter().enumerate() {
            out[c * len + k] = *v;
        }
    }
    out
}

/// Per-row mean and (population std + eps) used to undo normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, without the epsilon.
    pub std: Vec<f64>,
}

/// Normalizes every row of length `len` of `x` to zero mean and unit
/// (population) deviation, dividing by `std + 1e-5`.
pub fn instance_normalize(x: &[f64], len: usize) -> (Vec<f64>, InstanceStats) {
    let rows = x.len() / len;
    let mut out = Vec::with_capacity(x.len());
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for row in x.chunks(len) {
        let mu = row.iter().sum::<f64>() / len as f64;
        // Second pass removes the summation error, which the epsilon would
        // otherwise amplify on (near-)constant rows.
        let mu = mu + row.iter().map(|v| v - mu).sum::<f64>() / len as f64;
        let sd = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / len as f64).sqrt();
        out.extend(row.iter().map(|v| (v - mu) / (sd + INSTANCE_EPS)));
        mean.push(mu);
        std.push(sd);
    }
    (out, InstanceStats { mean, std })
}

/// Inverse of [`instance_normalize`] applied to rows of length `len`.
pub fn instance_denormalize(y: &[f64], len: usize, stats: &InstanceStats) -> Vec<f64> {
    y.chunks(len)
        .zip(stats.mean.iter().zip(&stats.std))
        .flat_map(|(row, (mu, sd))| row.iter().map(move |v| v * (sd + INSTANCE_EPS) + mu))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthChannel {
    pub sinusoids: Vec<Sinusoid>,
    pub trend: f64,
    pub noise: f64,
}

/// Recipe for a seeded synthetic multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub timesteps: usize,
    pub seed: u64,
    pub channels: Vec<SynthChannel>,
    /// Weight of a unit-variance AR(1) component shared by all channels.
    pub coupling: f64,
}

/// Autoregressive coefficient of the shared component.
const SHARED_AR: f64 = 0.95;

impl SynthSpec {
    /// A family of `m` channels mixing a few periods with channel-specific
    /// amplitudes and phases, small trends and Gaussian noise.
    pub fn suite(m: usize, timesteps: usize, seed: u64, periods: &[f64], noise: f64) -> Self {
        let channels = (0..m)
            .map(|c| SynthChannel {
                sinusoids: periods
                    .iter()
                    .enumerate()
                    .map(|(k, &period)| Sinusoid {
                        period,
                        amplitude: 1.0 / (k + 1) as f64 * (1.0 + 0.25 * (c % 3) as f64),
                        phase: 0.7 * c as f64 + 1.3 * k as f64,
                    })
                    .collect(),
                trend: 0.0,
                noise,
            })
            .collect();
        Self {
            timesteps,
            seed,
            channels,
            coupling: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.timesteps < 2 {
            return Err(Error::config("synthetic series needs ≥1 channel and ≥2 steps"));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::config("coupling must lie in [0, 1]"));
        }
        for ch in &self.channels {
            if ch.noise < 0.0 || !ch.noise.is_finite() {
                return Err(Error::config("noise sigma must be ≥ 0"));
            }
            if ch.sinusoids.iter().any(|s| !(s.period > 0.0)) {
                return Err(Error::config("sinusoid periods must be positive"));
            }
        }
        Ok(())
    }
}

/// `value(t) = trend·t + Σ a·sin(2πt/period + phase) + coupling·shared(t) + noise`,
/// drawn from one seeded stream: the shared path first, then each channel's
/// noise in channel order.
pub fn synth_generate(spec: &SynthSpec) -> Result<SeriesTable> {
    spec.validate()?;
    let n = spec.timesteps;
    let m = spec.channels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut shared = vec![0.0; n];
    if spec.coupling > 0.0 {
        let innovation = (1.0 - SHARED_AR * SHARED_AR).sqrt();
        let mut state: f64 = std_normal.sample(&mut rng);
        for s in shared.iter_mut() {
            *s = state;
            state = SHARED_AR * state + innovation * std_normal.sample(&mut rng);
        }
    }
    let mut values = vec![0.0; n * m];
    for (c, ch) in spec.channels.iter().enumerate() {
        for t in 0..n {
            let tf = t as f64;
            let seasonal: f64 = ch
                .sinusoids
                .iter()
                .map(|s| s.amplitude * (2.0 * PI * tf / s.period + s.phase).sin())
                .sum();
            let noise = if ch.noise > 0.0 {
                ch.noise * std_normal.sample(&mut rng)
            } else {
                0.0
            };
            values[t * m + c] = ch.trend * tf + seasonal + spec.coupling * shared[t] + noise;
        }
    }
    SeriesTable::new(
        "synthetic",
        (0..n).map(|t| t.to_string()).collect(),
        (0..m).map(|c| format!("ch{c}")).collect(),
        values,
    )
}

/// A split, standardized series with the window starts of every role.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Model-space data (standardized when a scaler is present).
    pub table: SeriesTable,
    pub scaler: Option<Standardizer>,
    pub splits: SplitRanges,
    pub lookback: usize,
    pub horizon: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub split: SplitSpec,
    pub standardize: bool,
    /// Fraction of the (most recent) training windows kept.
    pub train_fraction: f64,
    /// Step between consecutive training windows.
    pub train_stride: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            standardize: true,
            train_fraction: 1.0,
            train_stride: 1,
        }
    }
}

impl PreparedData {
    pub fn new(
        raw: &SeriesTable,
        lookback: usize,
        horizon: usize,
        opts: &PrepareOptions,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&opts.train_fraction) {
            return Err(Error::config("train_fraction must lie in [0, 1]"));
        }
        let splits = chrono_split(raw.timesteps(), &opts.split, lookback, horizon)?;
        let (table, scaler) = if opts.standardize {
            let s = Standardizer::fit(raw, splits.train.clone())?;
            (s.apply(raw)?, Some(s))
        } else {
            (raw.clone(), None)
        };
        let mut train = window_starts(splits.train.clone(), lookback, horizon, opts.train_stride)?;
        // Keep the most recent windows; validation and test stay fixed.
        let keep = (opts.train_fraction * train.len() as f64).round() as usize;
        train.drain(..train.len() - keep.min(train.len()));
        let val = window_starts(splits.val.clone(), lookback, horizon, 1)?;
        let test = window_starts(splits.test.clone(), lookback, horizon, 1)?;
        Ok(Self {
            table,
            scaler,
            splits,
            lookback,
            horizon,
            train,
            val,
            test,
        })
    }

    pub fn channels(&self) -> usize {
        self.table.channels()
    }

    /// Stacks windows into `x: [B, M, L]` and `y: [B, M, T]`.
    pub fn batch(&self, starts: &[usize]) -> Result<(Tensor, Tensor)> {
        let (l, t, m) = (self.lookback, self.horizon, self.channels());
        let mut x = Vec::with_capacity(starts.len() * m * l);
        let mut y = Vec::with_capacity(starts.len() * m * t);
        for &s in starts {
            x.extend(channel_major(&self.table, s, l));
            y.extend(channel_major(&self.table, s + l, t));
        }
        Ok((
            Tensor::new(vec![starts.len(), m, l], x)?,
            Tensor::new(vec![starts.len(), m, t], y)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn ramp(n: usize, m: usize) -> SeriesTable {
        SeriesTable::new(
            "ramp",
            (0..n).map(|t| t.to_string()).collect(),
            (0..m).map(|c| format!("c{c}")).collect(),
            (0..n * m).map(|i| (i / m) as f64 + 1000.0 * (i % m) as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn loads_small_fixture() {
        let f = write_tmp("date,a,b\n2020-01-01,1.0,2\n2020-01-02,3,4.5\n2020-01-03,-1e-3,0\n");
        let t = load_csv(f.path()).unwrap();
        assert_eq!((t.timesteps(), t.channels()), (3, 2));
        assert_eq!(t.channel_names, vec!["a", "b"]);
        assert_eq!(t.value(1, 1), 4.5);
        assert_eq!(t.timestamps[2], "2020-01-03");
    }

    #[test]
    fn ett_style_header_gives_seven_channels() {
        let mut s = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for i in 0..5 {
            s.push_str(&format!("2016-07-01 0{i}:00:00,5.8,2.0,1.5,0.4,4.2,1.3,30.5\n"));
        }
        let t = load_csv(write_tmp(&s).path()).unwrap();
        assert_eq!(t.channels(), 7);
    }

    #[test]
    fn blank_cell_names_location() {
        let f = write_tmp("date,a,b\n1,1.0,2\n2,,4\n");
        match load_csv(f.path()) {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("date,a\n1,x\n2,1\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Csv { row: 2, column: 2, .. })));
        let f = write_tmp("date,a\n1,1\n");
        assert!(load_csv(f.path()).is_err());
    }

    #[test]
    fn fraction_split_example() {
        let s = chrono_split(100, &SplitSpec::default(), 10, 2).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.val, 60..80);
        assert_eq!(s.test, 70..100);
        let bad = SplitSpec::Fractions {
            train: 0.6,
            val: 0.1,
            test: 0.2,
        };
        assert!(matches!(chrono_split(100, &bad, 10, 2), Err(Error::Config(_))));
        assert!(chrono_split(100, &SplitSpec::default(), 10, 20).is_err());
    }

    #[test]
    fn ett_borders() {
        // Hourly ETT: 12/4/4 months of 30 days.
        let spec = SplitSpec::ett(24);
        let s = chrono_split(17420, &spec, 336, 96).unwrap();
        assert_eq!(s.train, 0..8640);
        assert_eq!(s.val, 8640 - 336..11520);
        assert_eq!(s.test, 11520 - 336..14400);
    }

    #[test]
    fn standardizer_properties() {
        let mut table = ramp(50, 2);
        // Constant channel.
        for t in 0..50 {
            table.values[t * 2 + 1] = 7.0;
        }
        let s = Standardizer::fit(&table, 0..30).unwrap();
        let z = s.apply(&table).unwrap();
        assert!(z.channel(1).iter().all(|&v| v == 0.0));
        let back = s.invert(&z).unwrap();
        for (a, b) in back.values().iter().zip(table.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Test rows do not influence the fit.
        let mut changed = table.clone();
        for t in 30..50 {
            changed.values[t * 2] = -1e6;
        }
        assert_eq!(Standardizer::fit(&changed, 0..30).unwrap(), s);
    }

    #[test]
    fn window_counts_and_alignment() {
        let table = ramp(30, 2);
        let w = make_windows(&table, 5..15, 4, 2, 1, false).unwrap();
        assert_eq!(w.len(), 5);
        for (i, win) in w.iter().enumerate() {
            assert_eq!(win.x.at(&[0, 3]), table.value(5 + i + 3, 0));
            assert_eq!(win.y.at(&[1, 0]), table.value(5 + i + 4, 1));
        }
        assert_eq!(make_windows(&table, 5..15, 4, 2, 2, false).unwrap().len(), 3);
        assert!(make_windows(&table, 5..10, 4, 2, 1, false).is_err());
    }

    #[test]
    fn instance_norm_hand_example() {
        let (z, st) = instance_normalize(&[1.0, 2.0, 3.0], 3);
        assert_eq!(st.mean, vec![2.0]);
        assert!((st.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let expect = 1.0 / ((2.0f64 / 3.0).sqrt() + INSTANCE_EPS);
        assert!((z[0] + expect).abs() < 1e-12 && z[1] == 0.0 && (z[2] - expect).abs() < 1e-12);
        assert!((z[2] - 1.22474).abs() < 1e-4);
        let back = instance_denormalize(&z, 3, &st);
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn instance_norm_constant_and_denorm() {
        let (z, st) = instance_normalize(&[4.0; 6], 6);
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(st.std, vec![0.0]);
        assert_eq!(instance_denormalize(&[0.0; 3], 3, &st), vec![4.0; 3]);
        // Scaling a channel by c scales the denormalized output of a fixed
        // normalized prediction by about c.
        let x = [1.0, -2.0, 0.5, 3.0];
        let (_, s1) = instance_normalize(&x, 4);
        let scaled: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let (_, s10) = instance_normalize(&scaled, 4);
        let out1 = instance_denormalize(&[1.0, 2.0], 2, &s1);
        let out10 = instance_denormalize(&[1.0, 2.0], 2, &s10);
        for (a, b) in out1.iter().zip(&out10) {
            assert!((b / a - 10.0).abs() < 1e-3);
        }
    }

    #[test]
    fn synth_pure_sinusoid_and_determinism() {
        let spec = SynthSpec {
            timesteps: 100,
            seed: 3,
            channels: vec![SynthChannel {
                sinusoids: vec![Sinusoid {
                    period: 24.0,
                    amplitude: 2.0,
                    phase: 0.5,
                }],
                trend: 0.0,
                noise: 0.0,
            }],
            coupling: 0.0,
        };
        let t = synth_generate(&spec).unwrap();
        for i in 0..100 {
            let expect = 2.0 * (2.0 * PI * i as f64 / 24.0 + 0.5).sin();
            assert_eq!(t.value(i, 0), expect);
        }
        let noisy = SynthSpec::suite(3, 500, 9, &[24.0, 100.0], 0.3);
        let a = synth_generate(&noisy).unwrap();
        let b = synth_generate(&noisy).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn synth_uncoupled_noise_is_uncorrelated() {
        let spec = SynthSpec {
            timesteps: 10_000,
            seed: 11,
            channels: vec![
                SynthChannel {
                    sinusoids: vec![],
                    trend: 0.0,
                    noise: 1.0,
                };
                2
            ],
            coupling: 0.0,
        };
        let t = synth_generate(&spec).unwrap();
        let (a, b) = (t.channel(0), t.channel(1));
        let corr = correlation(&a, &b);
        assert!(corr.abs() < 0.1, "{corr}");

        let coupled = SynthSpec {
            coupling: 1.0,
            ..spec
        };
        let t = synth_generate(&coupled).unwrap();
        assert!(correlation(&t.channel(0), &t.channel(1)) > 0.3);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn prepared_data_fraction_keeps_eval_sets() {
        let table = synth_generate(&SynthSpec::suite(2, 400, 1, &[24.0], 0.1)).unwrap();
        let full = PreparedData::new(&table, 24, 8, &PrepareOptions::default()).unwrap();
        let half = PreparedData::new(
            &table,
            24,
            8,
            &PrepareOptions {
                train_fraction: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(full.val, half.val);
        assert_eq!(full.test, half.test);
        assert_eq!(half.train.len(), (full.train.len() as f64 * 0.5).round() as usize);
        assert_eq!(half.train.last(), full.train.last());
        // No test window's target leaves the test block.
        for &s in &full.test {
            assert!(s >= full.splits.test.start && s + 24 + 8 <= full.splits.test.end);
            assert!(s + 24 >= full.splits.val.end);
        }
        let (x, y) = full.batch(&full.train[..3]).unwrap();
        assert_eq!(x.shape(), &[3, 2, 24]);
        assert_eq!(y.shape(), &[3, 2, 8]);
    }
}
