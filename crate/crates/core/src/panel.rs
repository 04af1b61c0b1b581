//! Quarterly panel data: calendar quarters, per-ticker fundamentals and
//! prices, and the benchmark index series.
//!
//! On disk a data tree looks like
//!
//! ```text
//! data/
//!   fundamentals/<TICKER>.csv   header: quarter,<feature>,...   one row per quarter
//!   prices.csv                  header: ticker,quarter,close
//!   benchmark.csv               header: quarter,level
//! ```
//!
//! Quarters are written `YYYY-Q[1-4]`. Missing fundamentals cells are empty
//! or the literal `NA`. A loaded panel always has a strictly increasing,
//! gap-free quarter axis; quarters a ticker never reported are represented
//! as missing values, not as absent rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::scalar::Scalar;

/// Errors raised while building or loading panel data.
#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("MissingFile: {0}")]
    MissingFile(PathBuf),
    #[error("SchemaError: {0}")]
    SchemaError(String),
    #[error("DuplicateQuarter: {quarter} appears twice for {name}")]
    DuplicateQuarter { name: String, quarter: Quarter },
    #[error("InvalidQuarter: {0}")]
    InvalidQuarter(String),
    #[error("NonPositivePrice: {ticker} {quarter} close {value}")]
    NonPositivePrice {
        ticker: String,
        quarter: Quarter,
        value: f64,
    },
    #[error("NonPositiveLevel: benchmark level at {quarter} is {value}")]
    NonPositiveLevel { quarter: Quarter, value: f64 },
    #[error("GapInSeries: benchmark is missing {quarter}")]
    GapInSeries { quarter: Quarter },
    #[error("EmptyUniverse: no ticker has data on or before {start}")]
    EmptyUniverse { start: Quarter },
    #[error("EmptyWindow: window start {start} is after end {end}")]
    EmptyWindow { start: Quarter, end: Quarter },
    #[error("BenchmarkCoverage: benchmark must cover {need_start}..={need_end}, has {have_start}..={have_end}")]
    BenchmarkCoverage {
        need_start: Quarter,
        need_end: Quarter,
        have_start: Quarter,
        have_end: Quarter,
    },
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A calendar quarter, e.g. `1999-Q4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter {
    year: i32,
    quarter: u8,
}

impl Quarter {
    pub fn new(year: i32, quarter: u8) -> Result<Self, PanelError> {
        if (1..=4).contains(&quarter) {
            Ok(Self { year, quarter })
        } else {
            Err(PanelError::InvalidQuarter(format!(
                "{year}-Q{quarter}: quarter index must be 1..=4"
            )))
        }
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn quarter(&self) -> u8 {
        self.quarter
    }

    /// The quarter immediately after this one, rolling Q4 into Q1 of the
    /// next year (`1999-Q4` -> `2000-Q1`).
    pub fn next(self) -> Self {
        if self.quarter == 4 {
            Self {
                year: self.year + 1,
                quarter: 1,
            }
        } else {
            Self {
                year: self.year,
                quarter: self.quarter + 1,
            }
        }
    }

    /// The quarter immediately before this one.
    pub fn prev(self) -> Self {
        if self.quarter == 1 {
            Self {
                year: self.year - 1,
                quarter: 4,
            }
        } else {
            Self {
                year: self.year,
                quarter: self.quarter - 1,
            }
        }
    }

    /// Position on the infinite quarter axis; consecutive quarters differ
    /// by exactly one.
    pub fn index(self) -> i64 {
        i64::from(self.year) * 4 + i64::from(self.quarter) - 1
    }

    fn from_index(idx: i64) -> Self {
        Self {
            year: i32::try_from(idx.div_euclid(4)).expect("quarter index within i32 years"),
            quarter: (idx.rem_euclid(4) + 1) as u8,
        }
    }

    /// All quarters from `start` through `end` inclusive, in order.
    pub fn range_inclusive(start: Quarter, end: Quarter) -> Vec<Quarter> {
        (start.index()..=end.index())
            .map(Quarter::from_index)
            .collect()
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-Q{}", self.year, self.quarter)
    }
}

impl FromStr for Quarter {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PanelError::InvalidQuarter(format!("{s:?}: expected YYYY-Q[1-4]"));
        let (y, q) = s.split_once("-Q").ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let quarter: u8 = q.parse().map_err(|_| bad())?;
        Quarter::new(year, quarter).map_err(|_| bad())
    }
}

/// Where the pieces of a data tree live relative to its root, and which
/// tickers to load. With `tickers: None` the universe is every `*.csv`
/// under the fundamentals directory; with an explicit list, a listed
/// ticker without a file is an error.
#[derive(Debug, Clone)]
pub struct PanelLayout {
    pub fundamentals_dir: String,
    pub prices_file: String,
    pub tickers: Option<Vec<String>>,
}

impl Default for PanelLayout {
    fn default() -> Self {
        Self {
            fundamentals_dir: "fundamentals".to_string(),
            prices_file: "prices.csv".to_string(),
            tickers: None,
        }
    }
}

/// Count of cells that failed numeric parsing during a load, keyed by
/// `(ticker, feature)`. These cells are treated as missing.
#[derive(Debug, Clone, Default)]
pub struct IngestStats {
    pub unparseable: BTreeMap<(String, String), usize>,
}

impl IngestStats {
    pub fn total_unparseable(&self) -> usize {
        self.unparseable.values().sum()
    }
}

/// Fundamentals and prices for a universe of tickers over a common,
/// gap-free quarter axis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarterlyPanel<T> {
    tickers: Vec<String>,
    quarters: Vec<Quarter>,
    features: Vec<String>,
    /// Row-major `[ticker][quarter][feature]`.
    values: Vec<Option<T>>,
    /// Row-major `[ticker][quarter]`.
    prices: Vec<Option<T>>,
}

impl<T: Scalar> QuarterlyPanel<T> {
    /// Builds a panel from dense missing-masked storage, validating the
    /// axis invariants (sorted unique tickers, consecutive quarters,
    /// unique feature names, positive prices).
    pub fn new(
        tickers: Vec<String>,
        quarters: Vec<Quarter>,
        features: Vec<String>,
        values: Vec<Option<T>>,
        prices: Vec<Option<T>>,
    ) -> Result<Self, PanelError> {
        if quarters.is_empty() {
            return Err(PanelError::SchemaError("panel has no quarters".into()));
        }
        for w in quarters.windows(2) {
            if w[1] != w[0].next() {
                return Err(PanelError::SchemaError(format!(
                    "quarter axis not consecutive at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        for w in tickers.windows(2) {
            if w[1] <= w[0] {
                return Err(PanelError::SchemaError(format!(
                    "tickers not sorted/unique at {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        let unique: BTreeSet<&String> = features.iter().collect();
        if unique.len() != features.len() {
            return Err(PanelError::SchemaError("duplicate feature name".into()));
        }
        if values.len() != tickers.len() * quarters.len() * features.len()
            || prices.len() != tickers.len() * quarters.len()
        {
            return Err(PanelError::SchemaError("storage size mismatch".into()));
        }
        for (i, p) in prices.iter().enumerate() {
            if let Some(v) = *p {
                if v <= T::zero() {
                    let ti = i / quarters.len();
                    let qi = i % quarters.len();
                    return Err(PanelError::NonPositivePrice {
                        ticker: tickers[ti].clone(),
                        quarter: quarters[qi],
                        value: v.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(Self {
            tickers,
            quarters,
            features,
            values,
            prices,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn quarters(&self) -> &[Quarter] {
        &self.quarters
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_quarters(&self) -> usize {
        self.quarters.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn ticker_index(&self, ticker: &str) -> Option<usize> {
        self.tickers
            .binary_search_by(|t| t.as_str().cmp(ticker))
            .ok()
    }

    pub fn quarter_index(&self, q: Quarter) -> Option<usize> {
        let first = self.quarters[0].index();
        let off = q.index() - first;
        (0..self.quarters.len() as i64)
            .contains(&off)
            .then_some(off as usize)
    }

    pub fn value(&self, ticker: usize, quarter: usize, feature: usize) -> Option<T> {
        self.values[(ticker * self.quarters.len() + quarter) * self.features.len() + feature]
    }

    pub fn price(&self, ticker: usize, quarter: usize) -> Option<T> {
        self.prices[ticker * self.quarters.len() + quarter]
    }

    /// Fundamentals series for one `(ticker, feature)` along the axis.
    pub fn feature_series(&self, ticker: usize, feature: usize) -> Vec<Option<T>> {
        (0..self.quarters.len())
            .map(|q| self.value(ticker, q, feature))
            .collect()
    }

    /// Price series for one ticker along the axis.
    pub fn price_series(&self, ticker: usize) -> Vec<Option<T>> {
        (0..self.quarters.len())
            .map(|q| self.price(ticker, q))
            .collect()
    }

    /// Earliest quarter at which the ticker has any datum (a fundamentals
    /// cell or a price). `None` when the ticker is entirely empty.
    pub fn first_observed(&self, ticker: usize) -> Option<Quarter> {
        (0..self.quarters.len())
            .find(|&q| {
                self.price(ticker, q).is_some()
                    || (0..self.features.len()).any(|f| self.value(ticker, q, f).is_some())
            })
            .map(|q| self.quarters[q])
    }

    /// Missing fundamentals cells for one feature across the whole panel,
    /// as a fraction of `tickers x quarters`.
    pub fn missing_fraction(&self, feature: usize) -> f64 {
        let total = self.tickers.len() * self.quarters.len();
        let missing = (0..self.tickers.len())
            .flat_map(|t| (0..self.quarters.len()).map(move |q| (t, q)))
            .filter(|&(t, q)| self.value(t, q, feature).is_none())
            .count();
        missing as f64 / total as f64
    }

    /// Total missing fundamentals cells.
    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Missing fundamentals cells for one `(ticker, feature)` pair.
    pub fn missing_count_for(&self, ticker: usize, feature: usize) -> usize {
        (0..self.quarters.len())
            .filter(|&q| self.value(ticker, q, feature).is_none())
            .count()
    }

    /// Fraction of fundamentals cells present for one ticker.
    pub fn coverage(&self, ticker: usize) -> f64 {
        let total = self.quarters.len() * self.features.len();
        let present = (0..self.quarters.len())
            .flat_map(|q| (0..self.features.len()).map(move |f| (q, f)))
            .filter(|&(q, f)| self.value(ticker, q, f).is_some())
            .count();
        present as f64 / total as f64
    }

    /// Returns a copy keeping only the named features, in the given order.
    pub fn retain_features(&self, keep: &[usize]) -> Self {
        let features = keep.iter().map(|&f| self.features[f].clone()).collect();
        let mut values = Vec::with_capacity(self.tickers.len() * self.quarters.len() * keep.len());
        for t in 0..self.tickers.len() {
            for q in 0..self.quarters.len() {
                for &f in keep {
                    values.push(self.value(t, q, f));
                }
            }
        }
        Self {
            tickers: self.tickers.clone(),
            quarters: self.quarters.clone(),
            features,
            values,
            prices: self.prices.clone(),
        }
    }

    /// Clips the panel to `[start, end]` and drops tickers first observed
    /// after `start`. The result's axis covers exactly `start..=end`;
    /// quarters outside the original axis come back as missing. Returns
    /// the surviving panel and the dropped tickers (sorted).
    pub fn restrict_window(
        &self,
        start: Quarter,
        end: Quarter,
    ) -> Result<(Self, Vec<String>), PanelError> {
        if start > end {
            return Err(PanelError::EmptyWindow { start, end });
        }
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for t in 0..self.tickers.len() {
            match self.first_observed(t) {
                Some(q) if q <= start => kept.push(t),
                _ => dropped.push(self.tickers[t].clone()),
            }
        }
        if kept.is_empty() {
            return Err(PanelError::EmptyUniverse { start });
        }
        let quarters = Quarter::range_inclusive(start, end);
        let nf = self.features.len();
        let mut values = Vec::with_capacity(kept.len() * quarters.len() * nf);
        let mut prices = Vec::with_capacity(kept.len() * quarters.len());
        for &t in &kept {
            for &q in &quarters {
                let qi = self.quarter_index(q);
                for f in 0..nf {
                    values.push(qi.and_then(|qi| self.value(t, qi, f)));
                }
                prices.push(qi.and_then(|qi| self.price(t, qi)));
            }
        }
        let panel = Self {
            tickers: kept.iter().map(|&t| self.tickers[t].clone()).collect(),
            quarters,
            features: self.features.clone(),
            values,
            prices,
        };
        Ok((panel, dropped))
    }
}

/// Benchmark index levels over a gap-free quarter range.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSeries<T> {
    quarters: Vec<Quarter>,
    levels: Vec<T>,
}

impl<T: Scalar> BenchmarkSeries<T> {
    pub fn new(quarters: Vec<Quarter>, levels: Vec<T>) -> Result<Self, PanelError> {
        if quarters.is_empty() || quarters.len() != levels.len() {
            return Err(PanelError::SchemaError(
                "benchmark needs one level per quarter".into(),
            ));
        }
        for w in quarters.windows(2) {
            if w[1] != w[0].next() {
                return Err(PanelError::GapInSeries {
                    quarter: w[0].next(),
                });
            }
        }
        for (q, l) in quarters.iter().zip(&levels) {
            if *l <= T::zero() {
                return Err(PanelError::NonPositiveLevel {
                    quarter: *q,
                    value: l.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(Self { quarters, levels })
    }

    pub fn quarters(&self) -> &[Quarter] {
        &self.quarters
    }

    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    pub fn first(&self) -> Quarter {
        self.quarters[0]
    }

    pub fn last(&self) -> Quarter {
        *self.quarters.last().expect("non-empty by construction")
    }

    pub fn level_at(&self, q: Quarter) -> Option<T> {
        let off = q.index() - self.first().index();
        if (0..self.levels.len() as i64).contains(&off) {
            Some(self.levels[off as usize])
        } else {
            None
        }
    }

    /// Errors unless the series covers `start.prev()..=end`; the quarter
    /// before the window is needed for the first in-window return.
    pub fn check_covers(&self, start: Quarter, end: Quarter) -> Result<(), PanelError> {
        let need_start = start.prev();
        if self.first() > need_start || self.last() < end {
            return Err(PanelError::BenchmarkCoverage {
                need_start,
                need_end: end,
                have_start: self.first(),
                have_end: self.last(),
            });
        }
        Ok(())
    }
}

/// Treats empty and `NA` cells as missing; anything else must parse as a
/// number. Returns `Err(())` for an unparseable non-empty cell.
fn parse_cell<T: Scalar>(raw: &str) -> Result<Option<T>, ()> {
    let s = raw.trim();
    if s.is_empty() || s == "NA" {
        return Ok(None);
    }
    s.parse::<T>().map(Some).map_err(|_| ())
}

/// Loads a full data tree (fundamentals plus prices) from `root`.
///
/// The quarter axis is the smallest consecutive range covering every
/// quarter mentioned in any file. Unparseable numeric cells become
/// missing values and are counted per `(ticker, feature)` in the returned
/// [`IngestStats`] (and logged).
pub fn load_panel<T: Scalar>(
    root: &Path,
    layout: &PanelLayout,
) -> Result<(QuarterlyPanel<T>, IngestStats), PanelError> {
    let dir = root.join(&layout.fundamentals_dir);
    let mut tickers: Vec<String> = match &layout.tickers {
        Some(list) => {
            let mut list = list.clone();
            list.sort();
            list.dedup();
            for t in &list {
                let p = dir.join(format!("{t}.csv"));
                if !p.is_file() {
                    return Err(PanelError::MissingFile(p));
                }
            }
            list
        }
        None => {
            if !dir.is_dir() {
                return Err(PanelError::MissingFile(dir));
            }
            let mut found = Vec::new();
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("csv") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        found.push(stem.to_string());
                    }
                }
            }
            found.sort();
            found
        }
    };
    if tickers.is_empty() {
        return Err(PanelError::SchemaError(format!(
            "no ticker files under {}",
            dir.display()
        )));
    }
    tickers.shrink_to_fit();

    let mut stats = IngestStats::default();
    let mut features: Option<Vec<String>> = None;
    // Per ticker: quarter -> row of optional values.
    let mut fundamentals: Vec<BTreeMap<Quarter, Vec<Option<T>>>> =
        Vec::with_capacity(tickers.len());

    for ticker in &tickers {
        let path = dir.join(format!("{ticker}.csv"));
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(&path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(k) if k.kind() == std::io::ErrorKind::NotFound => {
                    PanelError::MissingFile(path.clone())
                }
                _ => PanelError::Csv(e),
            })?;
        let header = rdr.headers()?.clone();
        let mut cols = header.iter().map(str::trim);
        if cols.next() != Some("quarter") {
            return Err(PanelError::SchemaError(format!(
                "{}: first header column must be 'quarter'",
                path.display()
            )));
        }
        let file_features: Vec<String> = cols.map(String::from).collect();
        if file_features.is_empty() {
            return Err(PanelError::SchemaError(format!(
                "{}: no feature columns",
                path.display()
            )));
        }
        match &features {
            None => features = Some(file_features),
            Some(expected) if *expected == file_features => {}
            Some(expected) => {
                return Err(PanelError::SchemaError(format!(
                    "{}: header {:?} differs from {:?}",
                    path.display(),
                    file_features,
                    expected
                )))
            }
        }
        let nf = features.as_ref().expect("set above").len();

        let mut rows: BTreeMap<Quarter, Vec<Option<T>>> = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != nf + 1 {
                return Err(PanelError::SchemaError(format!(
                    "{}: row has {} columns, expected {}",
                    path.display(),
                    record.len(),
                    nf + 1
                )));
            }
            let quarter: Quarter = record[0].trim().parse()?;
            let mut row = Vec::with_capacity(nf);
            for (fi, cell) in record.iter().skip(1).enumerate() {
                match parse_cell::<T>(cell) {
                    Ok(v) => row.push(v),
                    Err(()) => {
                        let feature = features.as_ref().expect("set above")[fi].clone();
                        log::warn!(
                            "{ticker} {quarter} {feature}: unparseable cell {cell:?} treated as missing"
                        );
                        *stats
                            .unparseable
                            .entry((ticker.clone(), feature))
                            .or_insert(0) += 1;
                        row.push(None);
                    }
                }
            }
            if rows.insert(quarter, row).is_some() {
                return Err(PanelError::DuplicateQuarter {
                    name: ticker.clone(),
                    quarter,
                });
            }
        }
        fundamentals.push(rows);
    }
    let features = features.expect("at least one ticker file");

    // Prices: ticker,quarter,close. Rows for tickers outside the universe
    // are ignored (the fundamentals directory defines the universe).
    let prices_path = root.join(&layout.prices_file);
    let mut price_rows: Vec<BTreeMap<Quarter, T>> = vec![BTreeMap::new(); tickers.len()];
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&prices_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(k) if k.kind() == std::io::ErrorKind::NotFound => {
                PanelError::MissingFile(prices_path.clone())
            }
            _ => PanelError::Csv(e),
        })?;
    {
        let header: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        if header != ["ticker", "quarter", "close"] {
            return Err(PanelError::SchemaError(format!(
                "{}: header must be ticker,quarter,close",
                prices_path.display()
            )));
        }
    }
    for record in rdr.records() {
        let record = record?;
        if record.len() != 3 {
            return Err(PanelError::SchemaError(format!(
                "{}: price row has {} columns",
                prices_path.display(),
                record.len()
            )));
        }
        let ticker = record[0].trim();
        let Ok(ti) = tickers.binary_search_by(|t| t.as_str().cmp(ticker)) else {
            log::warn!("prices.csv: ignoring unknown ticker {ticker:?}");
            continue;
        };
        let quarter: Quarter = record[1].trim().parse()?;
        let close = record[2].trim().parse::<T>().map_err(|_| {
            PanelError::SchemaError(format!(
                "{}: unparseable close {:?} for {ticker} {quarter}",
                prices_path.display(),
                &record[2]
            ))
        })?;
        if close <= T::zero() {
            return Err(PanelError::NonPositivePrice {
                ticker: ticker.to_string(),
                quarter,
                value: close.to_f64().unwrap_or(f64::NAN),
            });
        }
        if price_rows[ti].insert(quarter, close).is_some() {
            return Err(PanelError::DuplicateQuarter {
                name: format!("{ticker} (prices)"),
                quarter,
            });
        }
    }

    // Axis: smallest consecutive range covering everything observed.
    let mut lo: Option<Quarter> = None;
    let mut hi: Option<Quarter> = None;
    let mut widen = |q: Quarter| {
        lo = Some(lo.map_or(q, |c| c.min(q)));
        hi = Some(hi.map_or(q, |c| c.max(q)));
    };
    for rows in &fundamentals {
        for q in rows.keys() {
            widen(*q);
        }
    }
    for rows in &price_rows {
        for q in rows.keys() {
            widen(*q);
        }
    }
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(PanelError::SchemaError("no data rows in any file".into()));
    };
    let quarters = Quarter::range_inclusive(lo, hi);

    let nf = features.len();
    let mut values = vec![None; tickers.len() * quarters.len() * nf];
    let mut prices = vec![None; tickers.len() * quarters.len()];
    for (ti, rows) in fundamentals.iter().enumerate() {
        for (q, row) in rows {
            let qi = (q.index() - lo.index()) as usize;
            let base = (ti * quarters.len() + qi) * nf;
            values[base..base + nf].copy_from_slice(row);
        }
    }
    for (ti, rows) in price_rows.iter().enumerate() {
        for (q, close) in rows {
            let qi = (q.index() - lo.index()) as usize;
            prices[ti * quarters.len() + qi] = Some(*close);
        }
    }

    let panel = QuarterlyPanel::new(tickers, quarters, features, values, prices)?;
    Ok((panel, stats))
}

/// Writes `panel` under `root` in the layout [`load_panel`] reads.
///
/// Every ticker file carries one row per axis quarter (missing cells
/// empty), so a save/load round trip reproduces the panel exactly,
/// including its missing mask.
pub fn save_panel<T: Scalar>(
    panel: &QuarterlyPanel<T>,
    root: &Path,
    layout: &PanelLayout,
) -> Result<(), PanelError> {
    let dir = root.join(&layout.fundamentals_dir);
    fs::create_dir_all(&dir)?;
    for (ti, ticker) in panel.tickers().iter().enumerate() {
        let mut out = String::new();
        out.push_str("quarter");
        for f in panel.features() {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for (qi, q) in panel.quarters().iter().enumerate() {
            out.push_str(&q.to_string());
            for fi in 0..panel.n_features() {
                out.push(',');
                if let Some(v) = panel.value(ti, qi, fi) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        fs::write(dir.join(format!("{ticker}.csv")), out)?;
    }

    let mut out = fs::File::create(root.join(&layout.prices_file))?;
    writeln!(out, "ticker,quarter,close")?;
    for (ti, ticker) in panel.tickers().iter().enumerate() {
        for (qi, q) in panel.quarters().iter().enumerate() {
            if let Some(p) = panel.price(ti, qi) {
                writeln!(out, "{ticker},{q},{p}")?;
            }
        }
    }
    Ok(())
}

/// Loads a `quarter,level` benchmark file. Rows may be in any order;
/// duplicates, gaps, and non-positive levels are errors.
pub fn load_benchmark<T: Scalar>(path: &Path) -> Result<BenchmarkSeries<T>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(k) if k.kind() == std::io::ErrorKind::NotFound => {
                PanelError::MissingFile(path.to_path_buf())
            }
            _ => PanelError::Csv(e),
        })?;
    {
        let header: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        if header != ["quarter", "level"] {
            return Err(PanelError::SchemaError(format!(
                "{}: header must be quarter,level",
                path.display()
            )));
        }
    }
    let mut rows: BTreeMap<Quarter, T> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(PanelError::SchemaError(format!(
                "{}: benchmark row has {} columns",
                path.display(),
                record.len()
            )));
        }
        let quarter: Quarter = record[0].trim().parse()?;
        let level = record[1].trim().parse::<T>().map_err(|_| {
            PanelError::SchemaError(format!(
                "{}: unparseable level {:?} at {quarter}",
                path.display(),
                &record[1]
            ))
        })?;
        if level <= T::zero() {
            return Err(PanelError::NonPositiveLevel {
                quarter,
                value: level.to_f64().unwrap_or(f64::NAN),
            });
        }
        if rows.insert(quarter, level).is_some() {
            return Err(PanelError::DuplicateQuarter {
                name: "benchmark".into(),
                quarter,
            });
        }
    }
    let Some((&first, _)) = rows.first_key_value() else {
        return Err(PanelError::SchemaError(format!(
            "{}: benchmark has no rows",
            path.display()
        )));
    };
    let last = *rows.last_key_value().expect("non-empty").0;
    let mut levels = Vec::with_capacity(rows.len());
    for q in Quarter::range_inclusive(first, last) {
        match rows.get(&q) {
            Some(l) => levels.push(*l),
            None => return Err(PanelError::GapInSeries { quarter: q }),
        }
    }
    BenchmarkSeries::new(Quarter::range_inclusive(first, last), levels)
}

/// Writes a benchmark series as `quarter,level`.
pub fn save_benchmark<T: Scalar>(
    bench: &BenchmarkSeries<T>,
    path: &Path,
) -> Result<(), PanelError> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "quarter,level")?;
    for (q, l) in bench.quarters().iter().zip(bench.levels()) {
        writeln!(out, "{q},{l}")?;
    }
    Ok(())
}
