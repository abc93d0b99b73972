//! Naive baselines and the benchmark, ablation and sweep drivers.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::data::{channel_major, load_csv, synth_generate, PreparedData, SeriesTable};
use crate::error::{Error, Result};
use crate::metrics::{metric_mse_mae, Metrics};
use crate::model::{ChannelMode, HeadKind, Model};
use crate::training::{derive_seed, predict_windows, train, TrainConfig, TrainReport};

/// `ŷ_t = x_L` for every step of the horizon.
pub fn repeat_last(data: &PreparedData, starts: &[usize]) -> Result<Metrics> {
    let (l, t, m) = (data.lookback, data.horizon, data.channels());
    let mut pred = Vec::with_capacity(starts.len() * m * t);
    let mut target = Vec::with_capacity(starts.len() * m * t);
    for &s in starts {
        let x = channel_major(&data.table, s, l);
        target.extend(channel_major(&data.table, s + l, t));
        for c in 0..m {
            pred.extend(std::iter::repeat_n(x[c * l + l - 1], t));
        }
    }
    metric_mse_mae(&pred, &target)
}

/// One least-squares map per channel from the look-back window (plus an
/// intercept) to the horizon, fitted on training windows.
#[derive(Debug, Clone)]
pub struct OlsBaseline {
    /// Per channel, `[L + 1, T]` coefficients (intercept last).
    pub coef: Vec<DMatrix<f64>>,
}

impl OlsBaseline {
    pub fn fit(data: &PreparedData) -> Result<Self> {
        let (l, t, m) = (data.lookback, data.horizon, data.channels());
        let n = data.train.len();
        if n == 0 {
            return Err(Error::data("no training windows for the least-squares baseline"));
        }
        let coef = (0..m)
            .map(|c| {
                let mut x = DMatrix::zeros(n, l + 1);
                let mut y = DMatrix::zeros(n, t);
                for (i, &s) in data.train.iter().enumerate() {
                    for k in 0..l {
                        x[(i, k)] = data.table.value(s + k, c);
                    }
                    x[(i, l)] = 1.0;
                    for k in 0..t {
                        y[(i, k)] = data.table.value(s + l + k, c);
                    }
                }
                x.svd(true, true)
                    .solve(&y, 1e-12)
                    .map_err(|e| Error::data(format!("least-squares fit failed: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { coef })
    }

    pub fn evaluate(&self, data: &PreparedData, starts: &[usize]) -> Result<Metrics> {
        let (l, t, m) = (data.lookback, data.horizon, data.channels());
        let mut pred = Vec::with_capacity(starts.len() * m * t);
        let mut target = Vec::with_capacity(starts.len() * m * t);
        for &s in starts {
            target.extend(channel_major(&data.table, s + l, t));
            for (c, w) in self.coef.iter().enumerate() {
                for k in 0..t {
                    let mut v = w[(l, k)];
                    for j in 0..l {
                        v += data.table.value(s + j, c) * w[(j, k)];
                    }
                    pred.push(v);
                }
            }
        }
        metric_mse_mae(&pred, &target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    pub repeat_last: Metrics,
    pub ols: Metrics,
}

pub fn naive_baselines(data: &PreparedData) -> Result<Baselines> {
    Ok(Baselines {
        repeat_last: repeat_last(data, &data.test)?,
        ols: OlsBaseline::fit(data)?.evaluate(data, &data.test)?,
    })
}

/// Test metrics of a trained model on the standardized scale, or on the
/// original scale when `raw_scale` is set (predictions and targets are
/// mapped back through the training-split standardizer).
pub fn test_metrics(model: &Model, data: &PreparedData, raw_scale: bool) -> Result<Metrics> {
    let (mut pred, mut target) = predict_windows(model, data, &data.test)?;
    if raw_scale {
        if let Some(s) = &data.scaler {
            s.invert_channel_major(&mut pred, data.horizon);
            s.invert_channel_major(&mut target, data.horizon);
        }
    }
    metric_mse_mae(&pred, &target)
}

/// The dataset named by the config, or its synthetic suite.
pub fn load_dataset(run: &RunConfig) -> Result<SeriesTable> {
    match &run.dataset {
        Some(path) => load_csv(path),
        None => synth_generate(&run.synth_spec()),
    }
}

/// Outcome of one supervised run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub data: PreparedData,
}

/// Prepares windows for `run.horizon`, initializes a forecaster from the
/// run seed and trains it.
pub fn run_supervised(run: &RunConfig, table: &SeriesTable) -> Result<RunOutcome> {
    let data = PreparedData::new(table, run.lookback, run.horizon, &run.prepare_options())?;
    let cfg = run.model_config(data.channels(), HeadKind::Forecast);
    let model = Model::new(cfg, derive_seed(run.seed, "init"))?;
    let (model, report) = train(model, &data, &TrainConfig::from_run(run))?;
    Ok(RunOutcome { model, report, data })
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// One row per horizon: model test metrics and the two naive baselines.
pub fn run_benchmark(run: &RunConfig) -> Result<String> {
    let table = load_dataset(run)?;
    let mut csv = String::from("dataset,horizon,mse,mae,repeat_last_mse,repeat_last_mae,ols_mse,ols_mae\n");
    for &t in &run.horizons {
        let mut cell = run.clone();
        cell.horizon = t;
        let outcome = run_supervised(&cell, &table)?;
        let m = outcome
            .report
            .test
            .ok_or_else(|| Error::data("test split has no windows"))?;
        let b = naive_baselines(&outcome.data)?;
        let _ = writeln!(
            csv,
            "{},{t},{},{},{},{},{},{}",
            run.name,
            fmt_metric(m.mse),
            fmt_metric(m.mae),
            fmt_metric(b.repeat_last.mse),
            fmt_metric(b.repeat_last.mae),
            fmt_metric(b.ols.mse),
            fmt_metric(b.ols.mae),
        );
    }
    Ok(csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Patching and channel independence.
    PatchCi,
    /// Channel independence, one time step per token.
    Ci,
    /// Patching with channel-mixing tokens.
    Patch,
    /// Neither: channel mixing, one step per token.
    Original,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::PatchCi, Variant::Ci, Variant::Patch, Variant::Original];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PatchCi => "P+CI",
            Variant::Ci => "CI",
            Variant::Patch => "P",
            Variant::Original => "original",
        }
    }

    /// The base config with only `(P, S, channel_mode)` changed.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if matches!(self, Variant::Ci | Variant::Original) {
            cfg.patch_len = 1;
            cfg.stride = 1;
        }
        cfg.channel_mode = match self {
            Variant::PatchCi | Variant::Ci => ChannelMode::Independent,
            Variant::Patch | Variant::Original => ChannelMode::Mixing,
        };
        cfg
    }
}

/// Rough peak bytes of one training step: attention tensors (scores,
/// weights, dropout output and their gradients) plus per-layer activations.
pub fn estimate_step_bytes(run: &RunConfig, channels: usize) -> Result<usize> {
    let cfg = run.model_config(channels, HeadKind::Forecast);
    let n = cfg.num_patches()?;
    let rows = match cfg.channel_mode {
        ChannelMode::Independent => run.batch_size * channels,
        ChannelMode::Mixing => run.batch_size,
    };
    let attention = rows * cfg.heads * n * n * 6;
    let activations = rows * n * (cfg.d_model * 14 + cfg.d_ff * 4);
    Ok((attention + activations) * cfg.layers * 8)
}

/// Four-row table over the patching / channel-independence variants.
/// Variants whose estimated step memory exceeds the budget are marked "-".
pub fn run_ablation(run: &RunConfig) -> Result<String> {
    let table = load_dataset(run)?;
    let mut csv = String::from("variant,patch_len,stride,channel_mode,num_patches,mse,mae\n");
    for v in Variant::ALL {
        let cfg = v.apply(run);
        // Only the ablated fields may differ from the base config.
        let mut reset = cfg.clone();
        reset.patch_len = run.patch_len;
        reset.stride = run.stride;
        reset.channel_mode = run.channel_mode;
        if reset != *run {
            return Err(Error::config("ablation variants must differ only in P, S and channel mode"));
        }
        let n = cfg.model_config(table.channels(), HeadKind::Forecast).num_patches()?;
        let mode = match cfg.channel_mode {
            ChannelMode::Independent => "independent",
            ChannelMode::Mixing => "mixing",
        };
        let budget = run.memory_budget_mb.saturating_mul(1 << 20);
        let (mse, mae) = if estimate_step_bytes(&cfg, table.channels())? > budget {
            log::warn!("variant {} exceeds the memory budget; marked '-'", v.name());
            ("-".to_string(), "-".to_string())
        } else {
            let m = run_supervised(&cfg, &table)?
                .report
                .test
                .ok_or_else(|| Error::data("test split has no windows"))?;
            (fmt_metric(m.mse), fmt_metric(m.mae))
        };
        let _ = writeln!(
            csv,
            "{},{},{},{mode},{n},{mse},{mae}",
            v.name(),
            cfg.patch_len,
            cfg.stride
        );
    }
    Ok(csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LookBack,
    PatchLen,
    TrainFraction,
    Seed,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "look_back" | "lookback" => Ok(SweepAxis::LookBack),
            "patch_len" => Ok(SweepAxis::PatchLen),
            "train_fraction" => Ok(SweepAxis::TrainFraction),
            "seed" => Ok(SweepAxis::Seed),
            _ => Err(Error::config(format!(
                "unknown sweep axis `{s}` (look_back, patch_len, train_fraction, seed)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LookBack => "look_back",
            SweepAxis::PatchLen => "patch_len",
            SweepAxis::TrainFraction => "train_fraction",
            SweepAxis::Seed => "seed",
        }
    }
}

/// Sweep tables. `results` and `summary` are deterministic; wall-clock
/// seconds per cell are kept apart in `timing`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub results: String,
    /// Mean and sample standard deviation over cells (seed axis only).
    pub summary: Option<String>,
    pub timing: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// One supervised run per value of the axis, everything else fixed. On the
/// patch-length axis the stride follows P (non-overlapping patches).
pub fn run_sweep(run: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let table = load_dataset(run)?;
    let mut results = String::from("axis,value,mse,mae\n");
    let mut timing = String::from("axis,value,seconds\n");
    let mut mses = Vec::new();
    let mut maes = Vec::new();
    for value in values {
        let mut cfg = run.clone();
        match axis {
            SweepAxis::LookBack => cfg.set("lookback", value)?,
            SweepAxis::PatchLen => {
                cfg.set("patch_len", value)?;
                cfg.stride = cfg.patch_len;
            }
            SweepAxis::TrainFraction => cfg.set("train_fraction", value)?,
            SweepAxis::Seed => cfg.set("seed", value)?,
        }
        cfg.validate()?;
        let clock = Instant::now();
        let outcome = run_supervised(&cfg, &table)?;
        let seconds = clock.elapsed().as_secs_f64();
        let m = outcome
            .report
            .test
            .ok_or_else(|| Error::data("test split has no windows"))?;
        mses.push(m.mse);
        maes.push(m.mae);
        let _ = writeln!(results, "{},{value},{},{}", axis.name(), fmt_metric(m.mse), fmt_metric(m.mae));
        let _ = writeln!(timing, "{},{value},{seconds:.3}", axis.name());
    }
    let summary = (axis == SweepAxis::Seed).then(|| {
        let (mm, ms) = mean_std(&mses);
        let (am, as_) = mean_std(&maes);
        format!(
            "metric,mean,std\nmse,{},{}\nmae,{},{}\n",
            fmt_metric(mm),
            fmt_metric(ms),
            fmt_metric(am),
            fmt_metric(as_)
        )
    });
    Ok(SweepOutput {
        results,
        summary,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PrepareOptions, SynthSpec};

    fn table_from(values: Vec<f64>, m: usize) -> SeriesTable {
        let n = values.len() / m;
        SeriesTable::new(
            "t",
            (0..n).map(|t| t.to_string()).collect(),
            (0..m).map(|c| format!("c{c}")).collect(),
            values,
        )
        .unwrap()
    }

    fn raw(table: &SeriesTable, l: usize, t: usize) -> PreparedData {
        let opts = PrepareOptions {
            standardize: false,
            ..PrepareOptions::default()
        };
        PreparedData::new(table, l, t, &opts).unwrap()
    }

    #[test]
    fn constant_series_repeat_last_is_exact() {
        let data = raw(&table_from(vec![3.5; 600], 2), 24, 8);
        assert_eq!(repeat_last(&data, &data.test).unwrap().mse, 0.0);
    }

    #[test]
    fn linear_trend_ols_is_exact() {
        let data = raw(&table_from((0..500).map(|t| 0.3 * t as f64 - 2.0).collect(), 1), 16, 8);
        let m = OlsBaseline::fit(&data).unwrap().evaluate(&data, &data.test).unwrap();
        assert!(m.mse <= 1e-6, "{}", m.mse);
    }

    #[test]
    fn repeat_last_half_period_sinusoid_gives_two() {
        // Period 40, horizon 20: every forecast step t compares sin(θ) with
        // sin(θ + 2πt/40); over all phases the mean of (sin θ − sin(θ+φ))² is
        // 1 − cos φ, which at the last step (φ = π) is 2.
        let period = 40.0;
        let spec = SynthSpec {
            timesteps: 4000,
            seed: 0,
            channels: vec![crate::data::SynthChannel {
                sinusoids: vec![crate::data::Sinusoid {
                    period,
                    amplitude: 1.0,
                    phase: 0.0,
                }],
                trend: 0.0,
                noise: 0.0,
            }],
            coupling: 0.0,
        };
        let table = synth_generate(&spec).unwrap();
        let data = raw(&table, 20, 20);
        let (l, t) = (20, 20);
        let mut se_last = 0.0;
        let mut total = 0.0;
        for &s in &data.test {
            let last = data.table.value(s + l - 1, 0);
            for k in 0..t {
                let e = (data.table.value(s + l + k, 0) - last).powi(2);
                total += e;
                if k == t - 1 {
                    se_last += e;
                }
            }
        }
        let n = data.test.len() as f64;
        assert!((se_last / n - 2.0).abs() < 0.02, "{}", se_last / n);
        // The metric agrees with the mean of 1 − cos(2π(k+1)/40) over k.
        let analytic: f64 = (1..=t)
            .map(|k| 1.0 - (2.0 * std::f64::consts::PI * k as f64 / period).cos())
            .sum::<f64>()
            / t as f64;
        let m = repeat_last(&data, &data.test).unwrap();
        assert!((m.mse - total / (n * t as f64)).abs() < 1e-12);
        assert!((m.mse - analytic).abs() < 0.02, "{} vs {analytic}", m.mse);
    }

    #[test]
    fn variants_differ_only_in_ablated_fields() {
        let base = RunConfig::parse("L = 64\nP = 8\nS = 8").unwrap();
        for v in Variant::ALL {
            let cfg = v.apply(&base);
            let mut reset = cfg.clone();
            reset.patch_len = base.patch_len;
            reset.stride = base.stride;
            reset.channel_mode = base.channel_mode;
            assert_eq!(reset, base);
        }
        let ci = Variant::Ci.apply(&base);
        let n = ci.model_config(3, HeadKind::Forecast).num_patches().unwrap();
        assert_eq!(n, 64 + 1);
        assert_eq!(Variant::PatchCi.apply(&base), base);
    }

    #[test]
    fn memory_budget_marks_rows() {
        let base = RunConfig::parse("L = 512\nmemory_budget_mb = 64").unwrap();
        let orig = Variant::Original.apply(&base);
        assert!(estimate_step_bytes(&orig, 7).unwrap() > 64 << 20);
        let small = RunConfig::parse("L = 64\nP = 8\nS = 8\nd_model = 8\nheads = 2\nd_ff = 16\nlayers = 1").unwrap();
        assert!(estimate_step_bytes(&small, 2).unwrap() < 64 << 20);
    }

    #[test]
    fn seed_summary_uses_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
