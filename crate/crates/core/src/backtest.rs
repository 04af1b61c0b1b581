//! Quarterly long-short experiment over a supervised dataset.
//!
//! One regressor is trained per ticker on its own history (final fits use
//! the merged train+validation window). Each test quarter the models
//! score every ticker's feature vector, tickers are ranked by predicted
//! relative return, the top k form the Buy portfolio and the bottom k the
//! Sell portfolio, and each portfolio earns the equal-weight mean of its
//! members' realized benchmark-relative returns. A full-sample series
//! (every trained ticker, equal weight) is reported alongside as the
//! neutral reference; all three series are summarized by mean, sample
//! standard deviation, and compound return.

use std::cmp::Ordering;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;

use crate::anfis::{fit_anfis, AnfisError, AnfisModel, AnfisTrainConfig, SubClustConfig};
use crate::fnn::{train_fnn, FnnConfig, FnnError, FnnModel};
use crate::panel::Quarter;
use crate::preprocess::Dataset;
use crate::scalar::Scalar;

/// Errors raised while training the universe or assembling the report.
#[derive(Debug, thiserror::Error)]
pub enum BacktestError {
    #[error("UniverseTooSmall: {n} tickers cannot fill two disjoint portfolios of {k}")]
    UniverseTooSmall { n: usize, k: usize },
    #[error("MissingSample: no scorable sample row at {quarter}")]
    MissingSample { quarter: Quarter },
    #[error("MissingRealized: {ticker} has no realized return in this cross-section")]
    MissingRealized { ticker: String },
    #[error("SeriesTooShort: need at least 2 quarters, got {0}")]
    SeriesTooShort(usize),
    #[error("NonFiniteScore: {ticker} predicted a non-finite return at {quarter}")]
    NonFiniteScore { ticker: String, quarter: Quarter },
    #[error(transparent)]
    Fnn(#[from] FnnError),
    #[error(transparent)]
    Anfis(#[from] AnfisError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which regressor family a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Fnn,
    Anfis,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Fnn => "fnn",
            Algo::Anfis => "anfis",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a run needs besides the dataset and the algorithm choice.
#[derive(Debug, Clone)]
pub struct BacktestConfig {
    /// Portfolio size per side.
    pub k: usize,
    pub fnn: FnnConfig,
    pub clust: SubClustConfig,
    pub anfis_train: AnfisTrainConfig,
    /// Ridge for the fuzzy consequent least-squares solves. The
    /// normalized-firing design matrix is strongly collinear at the
    /// default clustering settings on quarterly sample sizes, and its
    /// coefficient cancellations explode out of sample; the default of
    /// 1.0 is sized for standardized inputs with fraction-scale targets
    /// and shrinks those cancellations away.
    pub ridge: f64,
    /// Mixed into each ticker's training seed.
    pub base_seed: u64,
    /// Also run the model-selection pass: train-only fits scored over
    /// the validation quarters.
    pub validation_pass: bool,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            k: 30,
            fnn: FnnConfig::default(),
            clust: SubClustConfig::default(),
            anfis_train: AnfisTrainConfig::default(),
            ridge: 1.0,
            base_seed: 0,
            validation_pass: false,
        }
    }
}

/// 64-bit FNV-1a; mixes ticker names into per-ticker seeds so adding or
/// removing one stock leaves every other stock's training untouched.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in s.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A trained per-ticker regressor of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel<T> {
    Fnn(FnnModel<T>),
    Anfis(AnfisModel<T>),
}

impl<T: Scalar> TrainedModel<T> {
    /// Predicted relative return for one feature row.
    pub fn predict(&self, x: &[T]) -> Result<T, BacktestError> {
        match self {
            TrainedModel::Fnn(m) => Ok(m.predict_return(x)?),
            TrainedModel::Anfis(m) => Ok(m.predict(x)?),
        }
    }
}

/// Fitting window for a universe of models: `Train` is the
/// model-selection stage (train rows, train-range standardization),
/// `TrainValidation` the final stage (merged rows and stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitWindow {
    Train,
    TrainValidation,
}

/// A ticker whose model could not be fitted, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub ticker: String,
    pub reason: String,
}

/// Per-ticker trained models (ticker-ascending) plus the tickers that
/// fell out of the universe.
#[derive(Debug, Clone, PartialEq)]
pub struct UniverseModels<T> {
    pub algo: Algo,
    pub window: FitWindow,
    pub models: Vec<(String, TrainedModel<T>)>,
    pub excluded: Vec<Exclusion>,
}

/// A failure of the data, not of the configuration: the ticker is
/// excluded and the run continues. Anything else aborts the run.
fn fnn_exclusion(e: &FnnError) -> bool {
    matches!(
        e,
        FnnError::DegenerateTargets | FnnError::NonFiniteLoss { .. }
    )
}

fn anfis_exclusion(e: &AnfisError) -> bool {
    matches!(
        e,
        AnfisError::DegenerateRange { .. }
            | AnfisError::SingularSystem
            | AnfisError::NonFiniteLoss { .. }
    )
}

/// Trains one model per ticker over the given fitting window, in
/// parallel. Tickers whose data defeats training (constant targets,
/// degenerate ranges, singular solves, diverged losses) are excluded
/// with a warning; at least `2k` must survive.
pub fn train_universe_over<T: Scalar>(
    dataset: &Dataset<T>,
    algo: Algo,
    cfg: &BacktestConfig,
    base_seed: u64,
    window: FitWindow,
) -> Result<UniverseModels<T>, BacktestError> {
    let rows = match window {
        FitWindow::Train => dataset.split().train(),
        FitWindow::TrainValidation => dataset.split().train_validation(),
    };
    let nf = dataset.n_features();
    let outcomes: Vec<Result<TrainedModel<T>, BacktestError>> = (0..dataset.tickers().len())
        .into_par_iter()
        .map(|ti| {
            let mut x = Vec::with_capacity(rows.len() * nf);
            let mut y = Vec::with_capacity(rows.len());
            for row in rows.clone() {
                let feats = match window {
                    FitWindow::Train => dataset.x_row(ti, row),
                    FitWindow::TrainValidation => dataset.x_merged_row(ti, row),
                };
                x.extend_from_slice(feats);
                y.push(dataset.y(ti, row));
            }
            let seed = base_seed ^ fnv1a64(&dataset.tickers()[ti]);
            match algo {
                Algo::Fnn => {
                    let fnn_cfg = FnnConfig {
                        seed,
                        ..cfg.fnn.clone()
                    };
                    train_fnn(&x, &y, nf, &fnn_cfg)
                        .map(|(m, _)| TrainedModel::Fnn(m))
                        .map_err(BacktestError::from)
                }
                Algo::Anfis => fit_anfis(&x, &y, nf, &cfg.clust, &cfg.anfis_train, cfg.ridge)
                    .map(|(m, _)| TrainedModel::Anfis(m))
                    .map_err(BacktestError::from),
            }
        })
        .collect();

    let mut models = Vec::new();
    let mut excluded = Vec::new();
    for (ti, outcome) in outcomes.into_iter().enumerate() {
        let ticker = dataset.tickers()[ti].clone();
        match outcome {
            Ok(model) => models.push((ticker, model)),
            Err(e) => {
                let data_failure = match &e {
                    BacktestError::Fnn(fe) => fnn_exclusion(fe),
                    BacktestError::Anfis(ae) => anfis_exclusion(ae),
                    _ => false,
                };
                if !data_failure {
                    return Err(e);
                }
                log::warn!("{ticker}: excluded from the {algo} universe: {e}");
                excluded.push(Exclusion {
                    ticker,
                    reason: e.to_string(),
                });
            }
        }
    }
    if models.len() < 2 * cfg.k {
        return Err(BacktestError::UniverseTooSmall {
            n: models.len(),
            k: cfg.k,
        });
    }
    Ok(UniverseModels {
        algo,
        window,
        models,
        excluded,
    })
}

/// Final-stage universe: merged train+validation fits.
pub fn train_universe<T: Scalar>(
    dataset: &Dataset<T>,
    algo: Algo,
    cfg: &BacktestConfig,
    base_seed: u64,
) -> Result<UniverseModels<T>, BacktestError> {
    train_universe_over(dataset, algo, cfg, base_seed, FitWindow::TrainValidation)
}

/// One quarter's predicted and realized returns across the trained
/// universe. `quarter` is the quarter the features are observed at; both
/// the predictions and the realized values refer to the return earned
/// over the following quarter.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection<T> {
    pub quarter: Quarter,
    pub tickers: Vec<String>,
    pub scores: Vec<T>,
    pub realized: Vec<T>,
}

impl<T: Scalar> CrossSection<T> {
    fn realized_of(&self, ticker: &str) -> Result<T, BacktestError> {
        self.tickers
            .iter()
            .position(|t| t == ticker)
            .map(|i| self.realized[i])
            .ok_or_else(|| BacktestError::MissingRealized {
                ticker: ticker.to_string(),
            })
    }
}

/// Scores every trained ticker at one quarter. `permitted` is the
/// sample-row range this universe may be evaluated on (the test range
/// for final models, the validation range for selection models);
/// quarters outside it have no legitimate sample.
pub fn predict_cross_section<T: Scalar>(
    models: &UniverseModels<T>,
    dataset: &Dataset<T>,
    quarter: Quarter,
    permitted: Range<usize>,
) -> Result<CrossSection<T>, BacktestError> {
    let row = dataset
        .row_of_quarter(quarter)
        .filter(|r| permitted.contains(r))
        .ok_or(BacktestError::MissingSample { quarter })?;
    let mut tickers = Vec::with_capacity(models.models.len());
    let mut scores = Vec::with_capacity(models.models.len());
    let mut realized = Vec::with_capacity(models.models.len());
    for (ticker, model) in &models.models {
        let ti = dataset
            .ticker_index(ticker)
            .ok_or_else(|| BacktestError::MissingRealized {
                ticker: ticker.clone(),
            })?;
        let x = match models.window {
            FitWindow::Train => dataset.x_row(ti, row),
            FitWindow::TrainValidation => dataset.x_merged_row(ti, row),
        };
        let score = model.predict(x)?;
        if !score.is_finite() {
            return Err(BacktestError::NonFiniteScore {
                ticker: ticker.clone(),
                quarter,
            });
        }
        tickers.push(ticker.clone());
        scores.push(score);
        realized.push(dataset.y(ti, row));
    }
    Ok(CrossSection {
        quarter,
        tickers,
        scores,
        realized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Buy,
    Sell,
}

/// An equal-weight portfolio for the quarter following `quarter`.
/// Members are stored ticker-ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub quarter: Quarter,
    pub side: Side,
    pub members: Vec<String>,
}

impl Portfolio {
    pub fn contains(&self, ticker: &str) -> bool {
        self.members
            .binary_search_by(|m| m.as_str().cmp(ticker))
            .is_ok()
    }
}

/// Top-k and bottom-k portfolios by predicted return.
///
/// Deterministic tie rule: Buy takes the first k under
/// (score descending, ticker ascending); Sell takes the first k under
/// (score ascending, ticker ascending), skipping anything Buy already
/// claimed. The two sides are therefore always disjoint, and a
/// cross-section narrower than 2k is refused outright.
pub fn construct_portfolios<T: Scalar>(
    cs: &CrossSection<T>,
    k: usize,
) -> Result<(Portfolio, Portfolio), BacktestError> {
    let n = cs.tickers.len();
    if k == 0 || n < 2 * k {
        return Err(BacktestError::UniverseTooSmall { n, k });
    }
    for (i, s) in cs.scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(BacktestError::NonFiniteScore {
                ticker: cs.tickers[i].clone(),
                quarter: cs.quarter,
            });
        }
    }
    let by_score = |desc: bool| {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let scores = if desc {
                cs.scores[b].partial_cmp(&cs.scores[a])
            } else {
                cs.scores[a].partial_cmp(&cs.scores[b])
            };
            scores
                .unwrap_or(Ordering::Equal)
                .then_with(|| cs.tickers[a].cmp(&cs.tickers[b]))
        });
        order
    };
    let mut buy: Vec<String> = by_score(true)[..k]
        .iter()
        .map(|&i| cs.tickers[i].clone())
        .collect();
    buy.sort();
    let mut sell: Vec<String> = Vec::with_capacity(k);
    for i in by_score(false) {
        let t = &cs.tickers[i];
        if buy.binary_search(t).is_err() {
            sell.push(t.clone());
            if sell.len() == k {
                break;
            }
        }
    }
    sell.sort();
    Ok((
        Portfolio {
            quarter: cs.quarter,
            side: Side::Buy,
            members: buy,
        },
        Portfolio {
            quarter: cs.quarter,
            side: Side::Sell,
            members: sell,
        },
    ))
}

/// Equal-weight return: the arithmetic mean of the members' realized
/// relative returns.
pub fn portfolio_return<T: Scalar>(
    p: &Portfolio,
    cs: &CrossSection<T>,
) -> Result<T, BacktestError> {
    if p.members.is_empty() {
        return Err(BacktestError::UniverseTooSmall { n: 0, k: 0 });
    }
    let mut sum = T::zero();
    for m in &p.members {
        sum += cs.realized_of(m)?;
    }
    Ok(sum / T::from_count(p.members.len()))
}

/// Mean, sample standard deviation, and compound return of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary<T> {
    pub mean: T,
    pub std: T,
    pub compound: T,
}

/// Summarizes a per-quarter return series: arithmetic mean, sample
/// standard deviation (n−1), and compound return `Π(1+r) − 1`.
pub fn evaluate<T: Scalar>(series: &[T]) -> Result<Summary<T>, BacktestError> {
    let n = series.len();
    if n < 2 {
        return Err(BacktestError::SeriesTooShort(n));
    }
    let nt = T::from_count(n);
    let mean = series.iter().copied().sum::<T>() / nt;
    let ss = series.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>();
    let std = (ss / (nt - T::one())).sqrt();
    let compound = series.iter().fold(T::one(), |acc, &r| acc * (T::one() + r)) - T::one();
    Ok(Summary {
        mean,
        std,
        compound,
    })
}

/// One report row. `quarter` is the quarter the returns were realized
/// over (one after the features were observed); `middle` is the
/// equal-weight return of the `n − 2k` unselected tickers, kept so the
/// membership accounting `k·buy + k·sell + (n−2k)·middle = n·full` can
/// be audited from the report alone.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarterRow<T> {
    pub quarter: Quarter,
    pub buy: T,
    pub sell: T,
    pub middle: T,
    pub full_sample: T,
    pub n: usize,
}

/// Everything a run produces, ready for the report writer.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport<T> {
    pub algo: Algo,
    pub k: usize,
    pub rows: Vec<QuarterRow<T>>,
    pub buy: Summary<T>,
    pub sell: Summary<T>,
    pub full_sample: Summary<T>,
    pub excluded: Vec<Exclusion>,
    /// Selection-stage rows (train-only models scored over the
    /// validation quarters) when the config asked for them.
    pub validation_rows: Option<Vec<QuarterRow<T>>>,
}

impl<T: Scalar> BacktestReport<T> {
    pub fn buy_series(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.buy).collect()
    }

    pub fn sell_series(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.sell).collect()
    }

    pub fn full_series(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.full_sample).collect()
    }
}

fn portfolio_rows<T: Scalar>(
    models: &UniverseModels<T>,
    dataset: &Dataset<T>,
    rows: Range<usize>,
    k: usize,
) -> Result<Vec<QuarterRow<T>>, BacktestError> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows.clone() {
        let quarter = dataset.quarters()[row];
        let cs = predict_cross_section(models, dataset, quarter, rows.clone())?;
        let (buy, sell) = construct_portfolios(&cs, k)?;
        let buy_ret = portfolio_return(&buy, &cs)?;
        let sell_ret = portfolio_return(&sell, &cs)?;
        let n = cs.tickers.len();
        let full = cs.realized.iter().copied().sum::<T>() / T::from_count(n);
        let middle = if n > 2 * k {
            let mut sum = T::zero();
            for (i, t) in cs.tickers.iter().enumerate() {
                if !buy.contains(t) && !sell.contains(t) {
                    sum += cs.realized[i];
                }
            }
            sum / T::from_count(n - 2 * k)
        } else {
            T::zero()
        };
        out.push(QuarterRow {
            quarter: quarter.next(),
            buy: buy_ret,
            sell: sell_ret,
            middle,
            full_sample: full,
            n,
        });
    }
    Ok(out)
}

/// Runs the whole experiment: train the universe on the merged window,
/// build Buy/Sell portfolios for every test quarter, and summarize the
/// Buy, Sell, and full-sample series. With `cfg.validation_pass` a
/// second universe is fitted on the train window alone and scored over
/// the validation quarters.
pub fn run_backtest<T: Scalar>(
    dataset: &Dataset<T>,
    algo: Algo,
    cfg: &BacktestConfig,
) -> Result<BacktestReport<T>, BacktestError> {
    let models = train_universe(dataset, algo, cfg, cfg.base_seed)?;
    let rows = portfolio_rows(&models, dataset, dataset.split().test(), cfg.k)?;
    let buy = evaluate(&rows.iter().map(|r| r.buy).collect::<Vec<_>>())?;
    let sell = evaluate(&rows.iter().map(|r| r.sell).collect::<Vec<_>>())?;
    let full = evaluate(&rows.iter().map(|r| r.full_sample).collect::<Vec<_>>())?;
    let validation_rows = if cfg.validation_pass {
        let selection = train_universe_over(dataset, algo, cfg, cfg.base_seed, FitWindow::Train)?;
        Some(portfolio_rows(
            &selection,
            dataset,
            dataset.split().validation(),
            cfg.k,
        )?)
    } else {
        None
    };
    Ok(BacktestReport {
        algo,
        k: cfg.k,
        rows,
        buy,
        sell,
        full_sample: full,
        excluded: models.excluded,
        validation_rows,
    })
}

/// Ten-significant-digit scientific notation used by every report file.
fn sig10<T: Scalar>(v: T) -> String {
    format!("{v:.9e}")
}

/// A value as a reader of the report files sees it: round-tripped through
/// the ten-significant-digit format. Idempotent, so re-rendering summaries
/// from a stored returns file reproduces them byte for byte.
pub fn published<T: Scalar>(v: T) -> T {
    sig10(v).parse().expect("formatted float parses back")
}

/// Renders the `summary.csv` and `compound_curve.csv` bodies for parallel
/// per-quarter buy/sell/full-sample series. Every input is first rounded
/// through [`published`], so the derived files describe exactly the numbers
/// stored in `portfolio_returns.csv` rather than their full-precision
/// ancestors.
///
/// Panics if the slices have different lengths; fails like [`evaluate`] on
/// series too short to summarize.
pub fn render_summaries<T: Scalar>(
    quarters: &[Quarter],
    buy: &[T],
    sell: &[T],
    full: &[T],
) -> Result<(String, String), BacktestError> {
    assert!(
        buy.len() == quarters.len() && sell.len() == quarters.len() && full.len() == quarters.len(),
        "parallel series of equal length"
    );
    let rounded: [Vec<T>; 3] = [
        buy.iter().map(|&v| published(v)).collect(),
        sell.iter().map(|&v| published(v)).collect(),
        full.iter().map(|&v| published(v)).collect(),
    ];

    let mut summary = String::from("series,mean,std,compound\n");
    for (name, values) in ["buy", "sell", "full_sample"].iter().zip(&rounded) {
        let s = evaluate(values)?;
        summary.push_str(&format!(
            "{name},{},{},{}\n",
            sig10(s.mean),
            sig10(s.std),
            sig10(s.compound)
        ));
    }

    let mut curve = String::from("quarter,buy,sell,full_sample\n");
    let mut acc = [T::one(), T::one(), T::one()];
    for (i, quarter) in quarters.iter().enumerate() {
        curve.push_str(&quarter.to_string());
        for (a, values) in acc.iter_mut().zip(&rounded) {
            *a *= T::one() + values[i];
            curve.push(',');
            curve.push_str(&sig10(*a - T::one()));
        }
        curve.push('\n');
    }
    Ok((summary, curve))
}

fn returns_csv<T: Scalar>(rows: &[QuarterRow<T>]) -> String {
    let mut out = String::from("quarter,buy,sell,full_sample\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.quarter,
            sig10(r.buy),
            sig10(r.sell),
            sig10(r.full_sample)
        ));
    }
    out
}

/// Writes the report directory: `portfolio_returns.csv` (per realized
/// quarter), `summary.csv` (mean/std/compound per series),
/// `compound_curve.csv` (running compound per series), `config.json`
/// (the caller's configuration echo, written verbatim), and
/// `validation_returns.csv` when the selection pass ran.
///
/// The summary and curve files are derived from the *published* returns
/// (see [`render_summaries`]), so each is exactly what a reader recomputes
/// from `portfolio_returns.csv`.
pub fn write_report<T: Scalar>(
    report: &BacktestReport<T>,
    dir: &Path,
    config_echo: &str,
) -> Result<(), BacktestError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("portfolio_returns.csv"), returns_csv(&report.rows))?;

    let quarters: Vec<Quarter> = report.rows.iter().map(|r| r.quarter).collect();
    let col = |f: fn(&QuarterRow<T>) -> T| report.rows.iter().map(f).collect::<Vec<T>>();
    let (summary, curve) = render_summaries(
        &quarters,
        &col(|r| r.buy),
        &col(|r| r.sell),
        &col(|r| r.full_sample),
    )?;
    fs::write(dir.join("summary.csv"), summary)?;
    fs::write(dir.join("compound_curve.csv"), curve)?;

    fs::write(dir.join("config.json"), config_echo)?;

    if let Some(vrows) = &report.validation_rows {
        fs::write(dir.join("validation_returns.csv"), returns_csv(vrows))?;
    }
    Ok(())
}
