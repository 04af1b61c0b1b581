//! Turns a restricted panel into per-stock supervised samples.
//!
//! Pipeline, in order: drop panel-wide sparse features, stationarize each
//! fundamentals series into quarter-over-quarter fractional changes, fill
//! gaps, append the stock's previous-quarter benchmark-relative return as
//! an extra feature, align targets (the feature vector at quarter `t`
//! predicts the relative return realized over `t+1`), split 60/20/20 by
//! time, and standardize with statistics fitted on training rows only.
//!
//! Gap filling is deliberately one-sided inside the dataset: a missing
//! change at quarter `t` takes the nearest earlier observation (or 0, the
//! neutral "no change", when none exists), so every stored feature vector
//! can be recomputed bit-for-bit from data truncated at its own quarter —
//! see [`audit_feature_vector`]. The symmetric [`impute_neighbor_mean`]
//! is used only where the future is legitimate input: the regression
//! target itself when a return is unobservable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::panel::{BenchmarkSeries, PanelError, Quarter, QuarterlyPanel};
use crate::scalar::Scalar;

/// Errors raised while preprocessing panel data into a dataset.
#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("SeriesTooShort: need at least 2 observations, got {0}")]
    SeriesTooShort(usize),
    #[error("AllMissing: cannot impute a series with no observed values")]
    AllMissing,
    #[error("TooFewRows: standardization needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error(
        "NoOverlap: {ticker} has fewer than two quarters with both a price and a benchmark level"
    )]
    NoOverlap { ticker: String },
    #[error("AllFeaturesDropped: every feature exceeds the missing-fraction limit {limit}")]
    AllFeaturesDropped { limit: f64 },
    #[error("WindowTooShort: {got} usable samples per ticker, need at least {need}")]
    WindowTooShort { got: usize, need: usize },
    #[error("SplitEmpty: the {part} range has no samples")]
    SplitEmpty { part: &'static str },
    #[error("BadSplitFractions: train {train} / validation {validation} / test {test} must each lie in (0,1) and sum to 1")]
    BadSplitFractions {
        train: f64,
        validation: f64,
        test: f64,
    },
    #[error(
        "MissingValues: imputation is disabled but {ticker} {column} is unobservable at {quarter}"
    )]
    MissingValues {
        ticker: String,
        column: String,
        quarter: Quarter,
    },
    #[error("SchemaError: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Name given to the appended previous-quarter relative-return feature.
pub const LAG_RETURN_FEATURE: &str = "rel_ret_lag1";

/// Quarter-over-quarter fractional change of a level series.
///
/// `out[t]` covers `series[t] -> series[t+1]` and is missing when either
/// end is missing or the base value is zero. Output length is input
/// length minus one.
pub fn stationarize<T: Scalar>(series: &[Option<T>]) -> Result<Vec<Option<T>>, PreprocessError> {
    if series.len() < 2 {
        return Err(PreprocessError::SeriesTooShort(series.len()));
    }
    Ok(series
        .windows(2)
        .map(|w| match (w[0], w[1]) {
            (Some(prev), Some(cur)) if prev != T::zero() => Some((cur - prev) / prev),
            _ => None,
        })
        .collect())
}

/// Fills every gap with the mean of the nearest observed values on each
/// side; one-sided gaps copy the single nearest observation. Errors when
/// nothing is observed at all.
pub fn impute_neighbor_mean<T: Scalar>(series: &[Option<T>]) -> Result<Vec<T>, PreprocessError> {
    if !series.iter().any(Option::is_some) {
        return Err(PreprocessError::AllMissing);
    }
    let n = series.len();
    // prev[i]: nearest observed value at index <= i; next[i]: at index >= i.
    let mut prev: Vec<Option<T>> = Vec::with_capacity(n);
    let mut last = None;
    for v in series {
        if v.is_some() {
            last = *v;
        }
        prev.push(last);
    }
    let mut next: Vec<Option<T>> = vec![None; n];
    let mut coming = None;
    for i in (0..n).rev() {
        if series[i].is_some() {
            coming = series[i];
        }
        next[i] = coming;
    }
    Ok((0..n)
        .map(|i| match (prev[i], next[i]) {
            (Some(a), Some(b)) => {
                if series[i].is_some() {
                    series[i].expect("observed")
                } else {
                    (a + b) / T::of(2.0)
                }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("some value observed"),
        })
        .collect())
}

/// One-sided gap fill used for dataset features: each missing entry takes
/// the nearest earlier observation, and entries before the first
/// observation become zero. Equivalent to running
/// [`impute_neighbor_mean`] on the series truncated at each position,
/// which is what makes stored feature vectors recomputable from
/// time-truncated data.
pub fn causal_fill<T: Scalar>(series: &[Option<T>]) -> Vec<T> {
    let mut last = T::zero();
    series
        .iter()
        .map(|v| {
            if let Some(v) = *v {
                last = v;
            }
            last
        })
        .collect()
}

/// Per-feature location/scale fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats<T> {
    names: Vec<String>,
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Scalar> StandardizationStats<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    /// Columns whose training standard deviation is exactly zero; these
    /// carry no information and must be removed before standardizing.
    pub fn zero_variance(&self) -> Vec<usize> {
        (0..self.std.len())
            .filter(|&i| self.std[i] == T::zero())
            .collect()
    }

    /// Keeps only the listed columns, in the given order.
    pub fn retain(&self, keep: &[usize]) -> Self {
        Self {
            names: keep.iter().map(|&i| self.names[i].clone()).collect(),
            mean: keep.iter().map(|&i| self.mean[i]).collect(),
            std: keep.iter().map(|&i| self.std[i]).collect(),
        }
    }

    /// Standardizes one raw row: `(v - mean) / std` per column.
    pub fn apply(&self, raw: &[T]) -> Vec<T> {
        assert_eq!(raw.len(), self.names.len(), "row width mismatch");
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }
}

/// Fits per-column mean and sample standard deviation (n-1 denominator)
/// on training rows. Zero-variance columns are kept but flagged via
/// [`StandardizationStats::zero_variance`].
pub fn fit_standardization<T: Scalar>(
    names: &[String],
    rows: &[&[T]],
) -> Result<StandardizationStats<T>, PreprocessError> {
    if rows.len() < 2 {
        return Err(PreprocessError::TooFewRows(rows.len()));
    }
    let nf = names.len();
    let n = T::from_count(rows.len());
    let mut mean = vec![T::zero(); nf];
    for row in rows {
        assert_eq!(row.len(), nf, "row width mismatch");
        for (acc, &v) in mean.iter_mut().zip(*row) {
            *acc += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![T::zero(); nf];
    for row in rows {
        for ((acc, &v), &m) in var.iter_mut().zip(*row).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    let denom = n - T::one();
    let std = var.iter().map(|&v| (v / denom).sqrt()).collect();
    Ok(StandardizationStats {
        names: names.to_vec(),
        mean,
        std,
    })
}

/// A stock's benchmark-relative quarterly returns at the quarters where
/// they are observable.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeReturnSeries<T> {
    pub ticker: String,
    pub quarters: Vec<Quarter>,
    pub values: Vec<T>,
}

/// Stock return minus benchmark return per quarter, as fractions:
/// `(p_t/p_{t-1} - 1) - (b_t/b_{t-1} - 1)`, aligned to a quarter axis.
///
/// `out[i]` is the return realized over `quarters[i]` and needs the price
/// at `i-1` and `i` plus benchmark levels at both quarters; `out[0]` is
/// always missing.
fn relative_return_options<T: Scalar>(
    quarters: &[Quarter],
    prices: &[Option<T>],
    bench: &BenchmarkSeries<T>,
) -> Vec<Option<T>> {
    let mut out = vec![None; quarters.len()];
    for i in 1..quarters.len() {
        let (Some(p0), Some(p1)) = (prices[i - 1], prices[i]) else {
            continue;
        };
        let (Some(b0), Some(b1)) = (bench.level_at(quarters[i - 1]), bench.level_at(quarters[i]))
        else {
            continue;
        };
        out[i] = Some((p1 / p0 - T::one()) - (b1 / b0 - T::one()));
    }
    out
}

/// Benchmark-relative returns for one ticker over its observable
/// quarters. Errors when fewer than two quarters have both a price and a
/// benchmark level (no return is computable).
pub fn relative_returns<T: Scalar>(
    ticker: &str,
    quarters: &[Quarter],
    prices: &[Option<T>],
    bench: &BenchmarkSeries<T>,
) -> Result<RelativeReturnSeries<T>, PreprocessError> {
    assert_eq!(quarters.len(), prices.len(), "axis mismatch");
    let opts = relative_return_options(quarters, prices, bench);
    let mut qs = Vec::new();
    let mut vs = Vec::new();
    for (i, v) in opts.iter().enumerate() {
        if let Some(v) = *v {
            qs.push(quarters[i]);
            vs.push(v);
        }
    }
    if vs.is_empty() {
        return Err(PreprocessError::NoOverlap {
            ticker: ticker.to_string(),
        });
    }
    Ok(RelativeReturnSeries {
        ticker: ticker.to_string(),
        quarters: qs,
        values: vs,
    })
}

/// Knobs for [`build_dataset`].
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    /// Drop features whose panel-wide missing fraction exceeds this.
    pub max_missing_frac: f64,
    /// When false, any unobservable feature value or target is an error
    /// instead of being filled.
    pub impute: bool,
    pub train_frac: f64,
    pub validation_frac: f64,
    pub test_frac: f64,
    /// Minimum usable samples per ticker.
    pub min_samples: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_missing_frac: 0.20,
            impute: true,
            train_frac: 0.6,
            validation_frac: 0.2,
            test_frac: 0.2,
            min_samples: 10,
        }
    }
}

/// Chronological three-way split over the common sample axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    n_train: usize,
    n_validation: usize,
    n_test: usize,
}

impl Split {
    /// `train = floor(train_frac * n)`, `validation = floor(validation_frac * n)`,
    /// `test = n - train - validation`.
    pub fn by_fractions(n: usize, train_frac: f64, validation_frac: f64) -> Self {
        let n_train = (train_frac * n as f64).floor() as usize;
        let n_validation = (validation_frac * n as f64).floor() as usize;
        Self {
            n_train,
            n_validation,
            n_test: n - n_train - n_validation,
        }
    }

    pub fn n(&self) -> usize {
        self.n_train + self.n_validation + self.n_test
    }

    pub fn train(&self) -> Range<usize> {
        0..self.n_train
    }

    pub fn validation(&self) -> Range<usize> {
        self.n_train..self.n_train + self.n_validation
    }

    pub fn test(&self) -> Range<usize> {
        self.n_train + self.n_validation..self.n()
    }

    /// Train and validation rows together — the final-fit range.
    pub fn train_validation(&self) -> Range<usize> {
        0..self.n_train + self.n_validation
    }

    pub fn label_of(&self, row: usize) -> &'static str {
        if self.train().contains(&row) {
            "train"
        } else if self.validation().contains(&row) {
            "validation"
        } else {
            "test"
        }
    }
}

/// What [`build_dataset`] decided along the way, for logs and reports.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    /// Panel-wide missing fraction per original feature.
    pub missing_fractions: Vec<(String, f64)>,
    /// Features dropped for sparsity.
    pub dropped_sparse: Vec<String>,
    /// Features dropped for zero training variance.
    pub dropped_zero_variance: Vec<String>,
}

/// One stock's samples. `raw` holds unstandardized feature rows; `x` is
/// `raw` standardized with the train-range stats; `x_merged` with the
/// train+validation stats used for final fits. All row-major.
#[derive(Debug, Clone, PartialEq)]
struct StockSamples<T> {
    raw: Vec<T>,
    x: Vec<T>,
    x_merged: Vec<T>,
    y: Vec<T>,
}

/// Supervised samples for every ticker over a common quarter axis.
///
/// Sample `s` of a ticker pairs the standardized feature vector observed
/// at `quarters()[s]` with the benchmark-relative return realized over
/// the following quarter. Split ranges are shared by all tickers, so a
/// row index means the same quarter everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    tickers: Vec<String>,
    feature_names: Vec<String>,
    quarters: Vec<Quarter>,
    split: Split,
    stats: StandardizationStats<T>,
    stats_merged: StandardizationStats<T>,
    stocks: Vec<StockSamples<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Feature quarters, one per sample row.
    pub fn quarters(&self) -> &[Quarter] {
        &self.quarters
    }

    pub fn n_samples(&self) -> usize {
        self.quarters.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Train-range standardization stats (the persisted ones, applied to
    /// every split of [`Dataset::x_row`]).
    pub fn stats(&self) -> &StandardizationStats<T> {
        &self.stats
    }

    /// Train+validation stats backing [`Dataset::x_merged_row`].
    pub fn stats_merged(&self) -> &StandardizationStats<T> {
        &self.stats_merged
    }

    pub fn ticker_index(&self, ticker: &str) -> Option<usize> {
        self.tickers
            .binary_search_by(|t| t.as_str().cmp(ticker))
            .ok()
    }

    pub fn row_of_quarter(&self, q: Quarter) -> Option<usize> {
        let first = self.quarters.first()?.index();
        let off = q.index() - first;
        (0..self.quarters.len() as i64)
            .contains(&off)
            .then_some(off as usize)
    }

    fn stock(&self, ticker: usize) -> &StockSamples<T> {
        &self.stocks[ticker]
    }

    /// Unstandardized feature row.
    pub fn raw_row(&self, ticker: usize, row: usize) -> &[T] {
        let nf = self.n_features();
        &self.stock(ticker).raw[row * nf..(row + 1) * nf]
    }

    /// Feature row standardized with the train-range stats.
    pub fn x_row(&self, ticker: usize, row: usize) -> &[T] {
        let nf = self.n_features();
        &self.stock(ticker).x[row * nf..(row + 1) * nf]
    }

    /// Feature row standardized with the train+validation stats.
    pub fn x_merged_row(&self, ticker: usize, row: usize) -> &[T] {
        let nf = self.n_features();
        &self.stock(ticker).x_merged[row * nf..(row + 1) * nf]
    }

    /// Relative return realized over the quarter after `quarters()[row]`.
    pub fn y(&self, ticker: usize, row: usize) -> T {
        self.stock(ticker).y[row]
    }

    pub fn y_series(&self, ticker: usize) -> &[T] {
        &self.stock(ticker).y
    }

    /// First/last feature quarter of each split range.
    pub fn split_quarters(&self) -> [(Quarter, Quarter); 3] {
        let b = |r: Range<usize>| (self.quarters[r.start], self.quarters[r.end - 1]);
        [
            b(self.split.train()),
            b(self.split.validation()),
            b(self.split.test()),
        ]
    }

    /// Writes `dataset.csv` (`ticker,quarter,split,y,<features>`) and
    /// `stats.csv` (`feature,mean,std`). Floats use shortest
    /// round-trip formatting, so a reload is bit-exact.
    pub fn write(&self, dataset_path: &Path, stats_path: &Path) -> Result<(), PreprocessError> {
        let mut out = String::new();
        out.push_str("ticker,quarter,split,y");
        for f in &self.feature_names {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for (ti, ticker) in self.tickers.iter().enumerate() {
            for row in 0..self.n_samples() {
                out.push_str(ticker);
                out.push(',');
                out.push_str(&self.quarters[row].to_string());
                out.push(',');
                out.push_str(self.split.label_of(row));
                out.push(',');
                out.push_str(&self.y(ti, row).to_string());
                for v in self.x_row(ti, row) {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        fs::write(dataset_path, out)?;

        let mut out = fs::File::create(stats_path)?;
        writeln!(out, "feature,mean,std")?;
        for (i, f) in self.stats.names().iter().enumerate() {
            writeln!(out, "{f},{},{}", self.stats.mean()[i], self.stats.std()[i])?;
        }
        Ok(())
    }

    /// Reloads what [`Dataset::write`] wrote. Persisted fields (tickers,
    /// features, quarters, split, standardized rows, targets, train-range
    /// stats) come back bit-exact. The unstandardized rows and the
    /// train+validation view are reconstructed from them, so those may
    /// differ from the original build by float rounding.
    pub fn read(dataset_path: &Path, stats_path: &Path) -> Result<Self, PreprocessError> {
        let schema = |msg: String| PreprocessError::SchemaError(msg);

        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(stats_path)?;
        {
            let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
            if header != ["feature", "mean", "std"] {
                return Err(schema("stats.csv header must be feature,mean,std".into()));
            }
        }
        let mut names = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for record in rdr.records() {
            let record = record?;
            names.push(record[0].to_string());
            mean.push(
                record[1]
                    .parse::<T>()
                    .map_err(|_| schema(format!("bad mean {:?}", &record[1])))?,
            );
            std.push(
                record[2]
                    .parse::<T>()
                    .map_err(|_| schema(format!("bad std {:?}", &record[2])))?,
            );
        }
        let stats = StandardizationStats { names, mean, std };

        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(dataset_path)?;
        let feature_names: Vec<String> = {
            let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
            if header.len() < 5 || header[..4] != ["ticker", "quarter", "split", "y"] {
                return Err(schema(
                    "dataset.csv header must be ticker,quarter,split,y,<features>".into(),
                ));
            }
            header[4..].to_vec()
        };
        if feature_names != stats.names {
            return Err(schema("stats.csv features do not match dataset.csv".into()));
        }
        let nf = feature_names.len();

        struct Acc<T> {
            quarters: Vec<Quarter>,
            labels: Vec<String>,
            x: Vec<T>,
            y: Vec<T>,
        }
        let mut per: BTreeMap<String, Acc<T>> = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != nf + 4 {
                return Err(schema(format!("dataset row has {} columns", record.len())));
            }
            let acc = per.entry(record[0].to_string()).or_insert_with(|| Acc {
                quarters: Vec::new(),
                labels: Vec::new(),
                x: Vec::new(),
                y: Vec::new(),
            });
            acc.quarters.push(record[1].parse()?);
            acc.labels.push(record[2].to_string());
            acc.y.push(
                record[3]
                    .parse::<T>()
                    .map_err(|_| schema(format!("bad y {:?}", &record[3])))?,
            );
            for cell in record.iter().skip(4) {
                acc.x.push(
                    cell.parse::<T>()
                        .map_err(|_| schema(format!("bad feature value {cell:?}")))?,
                );
            }
        }
        if per.is_empty() {
            return Err(schema("dataset.csv has no rows".into()));
        }

        let tickers: Vec<String> = per.keys().cloned().collect();
        let first = per.values().next().expect("non-empty");
        let quarters = first.quarters.clone();
        let labels = first.labels.clone();
        for w in quarters.windows(2) {
            if w[1] != w[0].next() {
                return Err(schema("sample quarters must be consecutive".into()));
            }
        }
        let n_train = labels.iter().take_while(|l| *l == "train").count();
        let n_validation = labels[n_train..]
            .iter()
            .take_while(|l| *l == "validation")
            .count();
        let n_test = labels[n_train + n_validation..]
            .iter()
            .take_while(|l| *l == "test")
            .count();
        if n_train + n_validation + n_test != labels.len() {
            return Err(schema(
                "split labels must be contiguous train/validation/test".into(),
            ));
        }
        let split = Split {
            n_train,
            n_validation,
            n_test,
        };

        let mut stocks = Vec::with_capacity(tickers.len());
        for t in &tickers {
            let acc = &per[t];
            if acc.quarters != quarters || acc.labels != labels {
                return Err(schema(format!(
                    "{t}: quarters/split differ from other tickers"
                )));
            }
            let raw: Vec<T> = acc
                .x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * stats.std[i % nf] + stats.mean[i % nf])
                .collect();
            stocks.push(StockSamples {
                raw,
                x: acc.x.clone(),
                x_merged: Vec::new(),
                y: acc.y.clone(),
            });
        }

        let merged_rows: Vec<&[T]> = stocks
            .iter()
            .flat_map(|s| {
                split
                    .train_validation()
                    .map(|r| &s.raw[r * nf..(r + 1) * nf])
            })
            .collect();
        let stats_merged = fit_standardization(&feature_names, &merged_rows)?;
        for s in &mut stocks {
            s.x_merged = (0..quarters.len())
                .flat_map(|r| stats_merged.apply(&s.raw[r * nf..(r + 1) * nf]))
                .collect();
        }

        Ok(Self {
            tickers,
            feature_names,
            quarters,
            split,
            stats,
            stats_merged,
            stocks,
        })
    }
}

/// Removes features whose panel-wide missing fraction exceeds
/// `max_missing_frac`. Returns the slimmed panel and a report of every
/// feature's missing fraction plus the dropped names.
pub fn drop_sparse_features<T: Scalar>(
    panel: &QuarterlyPanel<T>,
    max_missing_frac: f64,
) -> Result<(QuarterlyPanel<T>, BuildReport), PreprocessError> {
    let mut report = BuildReport::default();
    let mut keep = Vec::new();
    for f in 0..panel.n_features() {
        let frac = panel.missing_fraction(f);
        report
            .missing_fractions
            .push((panel.features()[f].clone(), frac));
        if frac > max_missing_frac {
            report.dropped_sparse.push(panel.features()[f].clone());
        } else {
            keep.push(f);
        }
    }
    if keep.is_empty() {
        return Err(PreprocessError::AllFeaturesDropped {
            limit: max_missing_frac,
        });
    }
    Ok((panel.retain_features(&keep), report))
}

/// Builds the supervised dataset from a window-restricted panel and its
/// benchmark. See the module docs for the exact pipeline and the
/// one-sided gap-fill rule.
pub fn build_dataset<T: Scalar>(
    panel: &QuarterlyPanel<T>,
    bench: &BenchmarkSeries<T>,
    cfg: &PreprocessConfig,
) -> Result<(Dataset<T>, BuildReport), PreprocessError> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(cfg.train_frac)
        || !ok(cfg.validation_frac)
        || !ok(cfg.test_frac)
        || (cfg.train_frac + cfg.validation_frac + cfg.test_frac - 1.0).abs() > 1e-9
    {
        return Err(PreprocessError::BadSplitFractions {
            train: cfg.train_frac,
            validation: cfg.validation_frac,
            test: cfg.test_frac,
        });
    }

    let (panel, mut report) = drop_sparse_features(panel, cfg.max_missing_frac)?;
    let axis = panel.quarters();
    let n_axis = axis.len();
    let n_samples = n_axis.saturating_sub(2);
    if n_samples < cfg.min_samples {
        return Err(PreprocessError::WindowTooShort {
            got: n_samples,
            need: cfg.min_samples,
        });
    }
    // Sample row s <-> feature quarter axis[s+1]; its target is the
    // relative return realized over axis[s+2].
    let quarters: Vec<Quarter> = axis[1..n_axis - 1].to_vec();
    let split = Split::by_fractions(n_samples, cfg.train_frac, cfg.validation_frac);
    for (range, part) in [
        (split.train(), "train"),
        (split.validation(), "validation"),
        (split.test(), "test"),
    ] {
        if range.is_empty() {
            return Err(PreprocessError::SplitEmpty { part });
        }
    }

    let nf_base = panel.n_features();
    let mut feature_names: Vec<String> = panel.features().to_vec();
    feature_names.push(LAG_RETURN_FEATURE.to_string());
    let nf = nf_base + 1;

    let mut raws: Vec<Vec<T>> = Vec::with_capacity(panel.n_tickers());
    let mut ys: Vec<Vec<T>> = Vec::with_capacity(panel.n_tickers());
    for ti in 0..panel.n_tickers() {
        let ticker = &panel.tickers()[ti];
        // Stationarized fundamentals, causally filled per column.
        let mut columns: Vec<Vec<T>> = Vec::with_capacity(nf_base);
        for f in 0..nf_base {
            let series = panel.feature_series(ti, f);
            let changes = stationarize(&series)?;
            if !cfg.impute {
                if let Some(s) = (0..n_samples).find(|&s| changes[s].is_none()) {
                    return Err(PreprocessError::MissingValues {
                        ticker: ticker.clone(),
                        column: panel.features()[f].clone(),
                        quarter: quarters[s],
                    });
                }
            }
            columns.push(causal_fill(&changes));
        }

        let r_opts = relative_return_options(axis, &panel.price_series(ti), bench);
        if !r_opts.iter().any(Option::is_some) {
            return Err(PreprocessError::NoOverlap {
                ticker: ticker.clone(),
            });
        }
        if !cfg.impute {
            for s in 0..n_samples {
                for (idx, what) in [(s + 1, LAG_RETURN_FEATURE), (s + 2, "target")] {
                    if r_opts[idx].is_none() {
                        return Err(PreprocessError::MissingValues {
                            ticker: ticker.clone(),
                            column: what.to_string(),
                            quarter: axis[idx],
                        });
                    }
                }
            }
        }
        // Lagged return: causal, like the other features. Targets: the
        // label is the future, so symmetric neighbor-mean filling is fine.
        let lag = causal_fill(&r_opts);
        let target = impute_neighbor_mean(&r_opts[1..])?;

        let mut raw = Vec::with_capacity(n_samples * nf);
        let mut y = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            for col in &columns {
                raw.push(col[s]);
            }
            raw.push(lag[s + 1]);
            y.push(target[s + 1]);
        }
        raws.push(raw);
        ys.push(y);
    }

    // Train-range stats over all tickers' training rows, then drop
    // zero-variance columns everywhere.
    let train_rows: Vec<&[T]> = raws
        .iter()
        .flat_map(|raw| split.train().map(|r| &raw[r * nf..(r + 1) * nf]))
        .collect();
    let stats_full = fit_standardization(&feature_names, &train_rows)?;
    let zero = stats_full.zero_variance();
    let keep: Vec<usize> = (0..nf).filter(|i| !zero.contains(i)).collect();
    if keep.is_empty() {
        return Err(PreprocessError::AllFeaturesDropped {
            limit: cfg.max_missing_frac,
        });
    }
    for &i in &zero {
        log::warn!("{}: zero training variance, dropped", feature_names[i]);
        report.dropped_zero_variance.push(feature_names[i].clone());
    }
    let stats = stats_full.retain(&keep);
    let feature_names: Vec<String> = keep.iter().map(|&i| feature_names[i].clone()).collect();
    let nf_kept = keep.len();

    let raws: Vec<Vec<T>> = raws
        .iter()
        .map(|raw| {
            (0..n_samples)
                .flat_map(|r| keep.iter().map(move |&i| raw[r * nf + i]))
                .collect()
        })
        .collect();

    let merged_rows: Vec<&[T]> = raws
        .iter()
        .flat_map(|raw| {
            split
                .train_validation()
                .map(|r| &raw[r * nf_kept..(r + 1) * nf_kept])
        })
        .collect();
    let stats_merged = fit_standardization(&feature_names, &merged_rows)?;

    let stocks = raws
        .into_iter()
        .zip(ys)
        .map(|(raw, y)| {
            let x = (0..n_samples)
                .flat_map(|r| stats.apply(&raw[r * nf_kept..(r + 1) * nf_kept]))
                .collect();
            let x_merged = (0..n_samples)
                .flat_map(|r| stats_merged.apply(&raw[r * nf_kept..(r + 1) * nf_kept]))
                .collect();
            StockSamples {
                raw,
                x,
                x_merged,
                y,
            }
        })
        .collect();

    Ok((
        Dataset {
            tickers: panel.tickers().to_vec(),
            feature_names,
            quarters,
            split,
            stats,
            stats_merged,
            stocks,
        },
        report,
    ))
}

/// Anti-lookahead audit route: recomputes the standardized feature vector
/// of `(ticker, quarter)` from panel data truncated at that quarter, plus
/// the dataset's train-range stats. Matches the stored
/// [`Dataset::x_row`] bit-for-bit when the pipeline is causal.
pub fn audit_feature_vector<T: Scalar>(
    panel: &QuarterlyPanel<T>,
    bench: &BenchmarkSeries<T>,
    dataset: &Dataset<T>,
    ticker: &str,
    quarter: Quarter,
) -> Result<Vec<T>, PreprocessError> {
    let ti = panel
        .ticker_index(ticker)
        .ok_or_else(|| PreprocessError::SchemaError(format!("unknown ticker {ticker}")))?;
    let qi = panel
        .quarter_index(quarter)
        .ok_or_else(|| PreprocessError::SchemaError(format!("{quarter} outside the panel")))?;
    if qi == 0 {
        return Err(PreprocessError::SchemaError(format!(
            "{quarter} has no preceding quarter for differencing"
        )));
    }
    let axis = &panel.quarters()[..=qi];

    let mut raw = Vec::with_capacity(dataset.n_features());
    for name in dataset.feature_names() {
        if name == LAG_RETURN_FEATURE {
            let prices: Vec<Option<T>> = (0..=qi).map(|q| panel.price(ti, q)).collect();
            let r_opts = relative_return_options(axis, &prices, bench);
            raw.push(*causal_fill(&r_opts).last().expect("qi >= 1"));
        } else {
            let f = panel
                .features()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| {
                    PreprocessError::SchemaError(format!("feature {name} missing from panel"))
                })?;
            let series: Vec<Option<T>> = (0..=qi).map(|q| panel.value(ti, q, f)).collect();
            let changes = stationarize(&series)?;
            raw.push(*causal_fill(&changes).last().expect("qi >= 1"));
        }
    }
    Ok(dataset.stats().apply(&raw))
}
