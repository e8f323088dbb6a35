//! Series cleaning, Z-score scaling and three-resolution window assembly.
//!
//! For an anchor time `t`, history length `S`, horizon `T` and `p` steps per
//! day, a window holds
//!
//! ```text
//! x_current[s] = X[t - S + 1 + s]
//! x_day[s]     = X[t + 1 + s - p]
//! x_week[s]    = X[t + 1 + s - 7p]
//! y[τ]         = X[t + 1 + τ]
//! ```
//!
//! so the day and week blocks are the shifted images of the target window.
//! Valid anchors are `7p - 1 ..= L - T - 1`.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node flow series, `values[t, n]`, with `mask[t, n] = 1` where observed.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub values: Tensor,
    pub mask: Tensor,
    pub step_minutes: u32,
}

impl RawSeries {
    /// Series with every entry observed.
    pub fn observed(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("RawSeries", "values must be [steps, nodes]"));
        }
        let mask = Tensor::ones(values.shape());
        Ok(RawSeries {
            values,
            mask,
            step_minutes: 5,
        })
    }

    /// Builds a series whose mask marks NaN entries as missing.
    pub fn from_values_with_nan(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("RawSeries", "values must be [steps, nodes]"));
        }
        let mask = values.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
        Ok(RawSeries {
            values,
            mask,
            step_minutes: 5,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn missing_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 0.0).count()
    }

    /// Row `t` as a slice over nodes.
    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.values.data()[t * n..(t + 1) * n]
    }

    fn mask_row(&self, t: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.mask.data()[t * n..(t + 1) * n]
    }

    /// Values of rows `rows` that are marked observed.
    pub fn observed_values(&self, rows: Range<usize>) -> Vec<f64> {
        rows.flat_map(|t| {
            self.row(t)
                .iter()
                .zip(self.mask_row(t))
                .filter(|(_, &m)| m == 1.0)
                .map(|(&v, _)| v)
        })
        .collect()
    }
}

/// Fills missing entries per node by linear interpolation between the nearest
/// observed neighbours; leading and trailing gaps copy the nearest observation.
/// The mask is kept so metrics can still skip the filled entries.
pub fn interpolate_missing(raw: &RawSeries) -> Result<RawSeries> {
    let (steps, nodes) = (raw.n_steps(), raw.n_nodes());
    let mut out = raw.clone();
    let (vals, mask) = (raw.values.data(), raw.mask.data());
    let filled = out.values.data_mut();
    for n in 0..nodes {
        let observed: Vec<usize> = (0..steps)
            .filter(|&t| mask[t * nodes + n] == 1.0 && vals[t * nodes + n].is_finite())
            .collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            return Err(Error::Validation(format!("node {n} has no observed values")));
        };
        for t in 0..first {
            filled[t * nodes + n] = vals[first * nodes + n];
        }
        for t in last + 1..steps {
            filled[t * nodes + n] = vals[last * nodes + n];
        }
        for pair in observed.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (vals[a * nodes + n], vals[b * nodes + n]);
            for t in a + 1..b {
                let frac = (t - a) as f64 / (b - a) as f64;
                filled[t * nodes + n] = va + (vb - va) * frac;
            }
        }
    }
    Ok(out)
}

/// Global Z-score statistics, population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

pub fn fit_zscore(values: &[f64]) -> Result<NormStats> {
    if values.is_empty() {
        return Err(Error::Validation("cannot fit Z-score on an empty sample".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::Validation("Z-score needs a non-constant series".into()));
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn apply_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert_value(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply_value(v))
    }

    pub fn invert(&self, z: &Tensor) -> Tensor {
        z.map(|v| self.invert_value(v))
    }
}

/// Temporal layout of the three input resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionConfig {
    /// Steps per day, `p`.
    pub steps_per_day: usize,
    /// History length `S`.
    pub history: usize,
    /// Forecast horizon `T`.
    pub horizon: usize,
}

impl Default for ResolutionConfig {
    fn default() -> Self {
        ResolutionConfig {
            steps_per_day: 288,
            history: 12,
            horizon: 12,
        }
    }
}

impl ResolutionConfig {
    pub fn week_stride(&self) -> usize {
        7 * self.steps_per_day
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 || self.history == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "steps_per_day, history and horizon must be positive".into(),
            ));
        }
        if self.history > self.steps_per_day {
            return Err(Error::Config(format!(
                "history {} exceeds steps_per_day {}: the day block would read the future",
                self.history, self.steps_per_day
            )));
        }
        Ok(())
    }

    /// Smallest series length that yields one window.
    pub fn min_steps(&self) -> usize {
        self.week_stride() + self.horizon
    }

    /// Earliest valid anchor.
    pub fn first_anchor(&self) -> usize {
        self.week_stride() - 1
    }

    /// Anchors `t` that have a full week of history and `T` future steps.
    pub fn anchors(&self, n_steps: usize) -> Range<usize> {
        let start = self.first_anchor();
        let end = (n_steps + 1).saturating_sub(self.min_steps()) + start;
        start..end.max(start)
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x_current: Tensor,
    pub x_day: Tensor,
    pub x_week: Tensor,
    pub y: Tensor,
    /// Observation mask of the target rows.
    pub y_mask: Tensor,
    pub anchor: usize,
}

fn gather_rows(src: &Tensor, start: usize, len: usize) -> Tensor {
    let n = src.shape()[1];
    Tensor::from_parts(alloc::vec![len, n], src.data()[start * n..(start + len) * n].to_vec())
}

impl WindowSample {
    /// Cuts the window anchored at `t` out of `series`.
    pub fn extract(series: &RawSeries, cfg: &ResolutionConfig, t: usize) -> Result<Self> {
        let valid = cfg.anchors(series.n_steps());
        if !valid.contains(&t) {
            return Err(Error::Contract(format!(
                "anchor {t} needs t >= {} and t <= {} (series of {} steps)",
                cfg.first_anchor(),
                series.n_steps() as i64 - cfg.horizon as i64 - 1,
                series.n_steps()
            )));
        }
        let (s, p) = (cfg.history, cfg.steps_per_day);
        Ok(WindowSample {
            x_current: gather_rows(&series.values, t + 1 - s, s),
            x_day: gather_rows(&series.values, t + 1 - p, s),
            x_week: gather_rows(&series.values, t + 1 - cfg.week_stride(), s),
            y: gather_rows(&series.values, t + 1, cfg.horizon),
            y_mask: gather_rows(&series.mask, t + 1, cfg.horizon),
            anchor: t,
        })
    }
}

/// Every window of `series`, in chronological order.
pub fn build_windows(series: &RawSeries, cfg: &ResolutionConfig) -> Result<Vec<WindowSample>> {
    cfg.validate()?;
    let anchors = cfg.anchors(series.n_steps());
    if anchors.is_empty() {
        log::warn!(
            "series of {} steps is shorter than the {} needed for one window",
            series.n_steps(),
            cfg.min_steps()
        );
    }
    anchors.map(|t| WindowSample::extract(series, cfg, t)).collect()
}

/// Chronological 6:2:2 partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Sizes `(⌊0.6n⌋, ⌊0.2n⌋, rest)`.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 5 {
        return Err(Error::Validation(format!("need at least 5 samples to split, got {n}")));
    }
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    Ok((train, val, n - train - val))
}

/// Contiguous split without shuffling; the flooring remainder goes to test.
pub fn split_622<T>(mut items: Vec<T>) -> Result<Split<T>> {
    let (train, val, _) = split_sizes(items.len())?;
    let test = items.split_off(train + val);
    let val_items = items.split_off(train);
    Ok(Split {
        train: items,
        val: val_items,
        test,
    })
}

/// A cleaned, normalized series with its chronological anchor split.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    /// Z-scored series; the mask still marks originally missing entries.
    pub series: RawSeries,
    pub stats: NormStats,
    pub resolution: ResolutionConfig,
    pub anchors: Split<usize>,
}

impl PreparedData {
    pub fn n_nodes(&self) -> usize {
        self.series.n_nodes()
    }

    pub fn sample(&self, anchor: usize) -> Result<WindowSample> {
        WindowSample::extract(&self.series, &self.resolution, anchor)
    }
}

/// Rows whose values may inform normalization: everything up to and
/// including the last training anchor.
pub fn train_rows(anchors: &Split<usize>) -> Range<usize> {
    0..anchors.train.last().map_or(0, |&t| t + 1)
}

/// Interpolates gaps, splits anchors 6:2:2, fits Z-score statistics on the
/// training rows only and normalizes the whole series with them.
pub fn prepare(raw: &RawSeries, resolution: ResolutionConfig) -> Result<PreparedData> {
    resolution.validate()?;
    let clean = interpolate_missing(raw)?;
    let anchors: Vec<usize> = resolution.anchors(clean.n_steps()).collect();
    if anchors.is_empty() {
        log::warn!("no complete windows in a series of {} steps", clean.n_steps());
    }
    let anchors = split_622(anchors)?;
    let stats = fit_zscore(&clean.observed_values(train_rows(&anchors)))?;
    Ok(PreparedData {
        series: RawSeries {
            values: stats.apply(&clean.values),
            mask: clean.mask,
            step_minutes: clean.step_minutes,
        },
        stats,
        resolution,
        anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn column(values: &[f64]) -> RawSeries {
        let t = Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap();
        RawSeries::from_values_with_nan(t).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let out = interpolate_missing(&column(&[1.0, f64::NAN, 3.0])).unwrap();
        assert_eq!(out.values.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(out.mask.data(), &[1.0, 0.0, 1.0]);

        let out = interpolate_missing(&column(&[f64::NAN, 2.0])).unwrap();
        assert_eq!(out.values.data(), &[2.0, 2.0]);

        let out = interpolate_missing(&column(&[0.0, f64::NAN, f64::NAN, 3.0])).unwrap();
        assert_eq!(out.values.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn interpolation_rejects_empty_node() {
        let t = Tensor::new(vec![2, 2], vec![1.0, f64::NAN, 2.0, f64::NAN]).unwrap();
        let err = interpolate_missing(&RawSeries::from_values_with_nan(t).unwrap()).unwrap_err();
        assert!(format!("{err}").contains("node 1"));
    }

    #[test]
    fn zscore_examples() {
        let s = fit_zscore(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - libm::sqrt(2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(s.apply_value(2.0), 0.0);
        assert!(fit_zscore(&[4.0, 4.0]).is_err());
    }

    #[test]
    fn window_boundary_example() {
        let cfg = ResolutionConfig::default();
        let l = 2016 + 12;
        let values = Tensor::new(vec![l, 1], (0..l).map(|v| v as f64).collect()).unwrap();
        let w = build_windows(&RawSeries::observed(values).unwrap(), &cfg).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].anchor, 2015);
        assert_eq!(w[0].x_week.data()[0], 0.0);
        assert_eq!(w[0].x_current.data()[11], 2015.0);
        assert_eq!(w[0].x_day.data()[0], (2016 - 288) as f64);
        assert_eq!(w[0].y.data()[0], 2016.0);
    }

    #[test]
    fn short_series_gives_no_windows() {
        let cfg = ResolutionConfig::default();
        let values = Tensor::zeros(&[100, 2]);
        assert!(build_windows(&RawSeries::observed(values).unwrap(), &cfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn history_longer_than_a_day_is_rejected() {
        let cfg = ResolutionConfig {
            steps_per_day: 4,
            history: 5,
            horizon: 1,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_examples() {
        let s = split_622((0..10).collect()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = split_622((0..11).collect()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 3));
        assert_eq!(s.val, vec![6, 7]);
        assert!(split_622((0..4).collect::<Vec<i32>>()).is_err());
    }
}
