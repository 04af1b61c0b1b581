//! The batch subcommands. Each takes an effective [`RunConfig`] (file
//! plus flag overrides) and reports through stdout; errors bubble to the
//! exit-code mapping in the crate root.

use std::fs;
use std::path::{Path, PathBuf};

use fundrank_core::backtest::{
    evaluate, published, render_summaries, run_backtest, write_report, Algo, BacktestReport,
    QuarterRow, Summary, TrainedModel,
};
use fundrank_core::panel::{load_benchmark, load_panel, PanelLayout, Quarter, QuarterlyPanel};
use fundrank_core::preprocess::{build_dataset, BuildReport, Dataset};
use fundrank_core::synth::generate_panel;

use crate::check;
use crate::config::{DerivedEcho, RunConfig};
use crate::CliError;

type Panel64 = QuarterlyPanel<f64>;
type Dataset64 = Dataset<f64>;

fn sig10(v: f64) -> String {
    format!("{v:.9e}")
}

/// Loads the tree, applies the configured window, and checks benchmark
/// coverage. Shared by every data-driven command.
fn load_tree(cfg: &RunConfig) -> Result<(Panel64, fundrank_core::Benchmark64), CliError> {
    let (panel, stats) = load_panel::<f64>(&cfg.data_dir, &PanelLayout::default())?;
    if stats.total_unparseable() > 0 {
        println!(
            "note: {} unparseable cells treated as missing",
            stats.total_unparseable()
        );
    }
    let panel = match cfg.window()? {
        Some((start, end)) => {
            let (panel, dropped) = panel.restrict_window(start, end)?;
            if !dropped.is_empty() {
                println!(
                    "note: {} tickers start after {start} and were dropped: {}",
                    dropped.len(),
                    dropped.join(" ")
                );
            }
            panel
        }
        None => panel,
    };
    let bench = load_benchmark::<f64>(&cfg.benchmark_path())?;
    bench.check_covers(
        panel.quarters()[0],
        *panel.quarters().last().expect("panel is never empty"),
    )?;
    Ok((panel, bench))
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset64, BuildReport), CliError> {
    let (panel, bench) = load_tree(cfg)?;
    Ok(build_dataset(&panel, &bench, &cfg.preprocess_config())?)
}

/// Validates the data tree and prints coverage and missing-value
/// statistics per ticker.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let (panel, bench) = load_tree(cfg)?;
    let (nq, nf) = (panel.quarters().len(), panel.n_features());
    println!(
        "panel: {} tickers x {} quarters ({}..{}) x {} features",
        panel.n_tickers(),
        nq,
        panel.quarters()[0],
        panel.quarters()[nq - 1],
        nf
    );
    println!(
        "benchmark: {}..{} ({} levels)",
        bench.first(),
        bench.last(),
        bench.levels().len()
    );
    println!("ticker  first_data  prices  missing_cells");
    for ti in 0..panel.n_tickers() {
        let first = panel
            .first_observed(ti)
            .map_or_else(|| "none".to_string(), |q| q.to_string());
        let prices = (0..nq).filter(|&qi| panel.price(ti, qi).is_some()).count();
        let missing = (0..nq)
            .flat_map(|qi| (0..nf).map(move |fi| (qi, fi)))
            .filter(|&(qi, fi)| panel.value(ti, qi, fi).is_none())
            .count();
        println!(
            "{}  {first}  {prices}/{nq}  {missing}/{} ({:.1}%)",
            panel.tickers()[ti],
            nq * nf,
            100.0 * missing as f64 / (nq * nf) as f64
        );
    }
    let mut sparse: Vec<(f64, &str)> = (0..nf)
        .map(|f| (panel.missing_fraction(f), panel.features()[f].as_str()))
        .collect();
    sparse.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("sparsest features:");
    for (frac, name) in sparse.iter().take(5) {
        println!("  {name}: {:.1}% missing", 100.0 * frac);
    }
    Ok(())
}

/// Builds the supervised dataset and writes `dataset.csv` / `stats.csv`.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let (dataset, report) = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    dataset.write(
        &cfg.out_dir.join("dataset.csv"),
        &cfg.out_dir.join("stats.csv"),
    )?;
    print_build_report(&report);
    let [train, validation, test] = dataset.split_quarters();
    println!(
        "dataset: {} tickers x {} samples x {} features",
        dataset.tickers().len(),
        dataset.n_samples(),
        dataset.n_features()
    );
    println!(
        "split: train {}..{} | validation {}..{} | test {}..{} (feature quarters)",
        train.0, train.1, validation.0, validation.1, test.0, test.1
    );
    println!("wrote {}", cfg.out_dir.join("dataset.csv").display());
    Ok(())
}

fn print_build_report(report: &BuildReport) {
    if !report.dropped_sparse.is_empty() {
        println!(
            "dropped {} sparse features: {}",
            report.dropped_sparse.len(),
            report.dropped_sparse.join(" ")
        );
    }
    if !report.dropped_zero_variance.is_empty() {
        println!(
            "dropped {} zero-variance features: {}",
            report.dropped_zero_variance.len(),
            report.dropped_zero_variance.join(" ")
        );
    }
}

/// Trains the per-ticker universe for each selected algorithm and saves
/// the models under `<out>/models/<algo>/`.
pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let (dataset, _) = load_dataset(cfg)?;
    let bt = cfg.backtest_config();
    for algo in cfg.algo.runs() {
        let universe = fundrank_core::backtest::train_universe(&dataset, algo, &bt, cfg.base_seed)?;
        let dir = cfg.out_dir.join("models").join(algo.name());
        fs::create_dir_all(&dir)?;
        for (ticker, model) in &universe.models {
            let path = dir.join(format!("{ticker}.txt"));
            match model {
                TrainedModel::Fnn(m) => m.save(&path)?,
                TrainedModel::Anfis(m) => m.save(&path)?,
            }
        }
        for ex in &universe.excluded {
            println!("{algo}: excluded {}: {}", ex.ticker, ex.reason);
        }
        println!(
            "{algo}: saved {} models to {} ({} excluded)",
            universe.models.len(),
            dir.display(),
            universe.excluded.len()
        );
    }
    Ok(())
}

fn derived_echo(dataset: &Dataset64, excluded: Vec<String>) -> DerivedEcho {
    let [train, validation, test] = dataset.split_quarters();
    let pair = |(a, b): (fundrank_core::panel::Quarter, fundrank_core::panel::Quarter)| {
        [a.to_string(), b.to_string()]
    };
    DerivedEcho {
        n_tickers: dataset.tickers().len(),
        n_features: dataset.n_features(),
        train_quarters: pair(train),
        validation_quarters: pair(validation),
        test_quarters: pair(test),
        excluded,
    }
}

fn print_summary(label: &str, s: &Summary<f64>) {
    println!(
        "{label:<12} mean {:>13}  std {:>13}  compound {:>13}",
        sig10(s.mean),
        sig10(s.std),
        sig10(s.compound)
    );
}

/// Buy/sell/full-sample summaries of the published per-quarter returns —
/// the same numbers `summary.csv` holds, so the console and the files
/// never disagree.
fn published_summaries(rows: &[QuarterRow<f64>]) -> Result<[Summary<f64>; 3], CliError> {
    let col = |f: fn(&QuarterRow<f64>) -> f64| -> Result<Summary<f64>, CliError> {
        Ok(evaluate(
            &rows.iter().map(|r| published(f(r))).collect::<Vec<_>>(),
        )?)
    };
    Ok([col(|r| r.buy)?, col(|r| r.sell)?, col(|r| r.full_sample)?])
}

/// Runs the experiment for each selected algorithm and writes the report
/// directory (or directories plus a combined summary when both run).
pub fn cmd_backtest(cfg: &RunConfig) -> Result<(), CliError> {
    let (dataset, _) = load_dataset(cfg)?;
    let bt = cfg.backtest_config();
    let runs = cfg.algo.runs();
    let mut reports: Vec<(Algo, BacktestReport<f64>)> = Vec::new();
    for algo in runs.iter().copied() {
        let report = run_backtest(&dataset, algo, &bt)?;
        reports.push((algo, report));
    }

    let combined = runs.len() > 1;
    let mut report_stats: Vec<[Summary<f64>; 3]> = Vec::new();
    for (algo, report) in &reports {
        let dir = if combined {
            cfg.out_dir.join(format!("{}-{}", cfg.run_id, algo.name()))
        } else {
            cfg.out_dir.join(&cfg.run_id)
        };
        let mut echo_cfg = cfg.clone();
        echo_cfg.algo = match algo {
            Algo::Fnn => crate::config::AlgoChoice::Fnn,
            Algo::Anfis => crate::config::AlgoChoice::Anfis,
        };
        let excluded = report.excluded.iter().map(|e| e.ticker.clone()).collect();
        let echo = echo_cfg.echo_json(Some(derived_echo(&dataset, excluded)));
        write_report(report, &dir, &echo)?;
        for ex in &report.excluded {
            println!("{algo}: excluded {}: {}", ex.ticker, ex.reason);
        }
        println!("{algo}: report in {}", dir.display());
        let stats = published_summaries(&report.rows)?;
        print_summary(&format!("{algo} buy"), &stats[0]);
        print_summary(&format!("{algo} sell"), &stats[1]);
        print_summary(&format!("{algo} full"), &stats[2]);
        report_stats.push(stats);
    }

    if combined {
        let dir = cfg.out_dir.join(&cfg.run_id);
        fs::create_dir_all(&dir)?;
        let mut out = String::from("series,mean,std,compound,full_mean,full_std,full_compound\n");
        let mut push_row = |name: String, s: &Summary<f64>, full: &Summary<f64>| {
            out.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                sig10(s.mean),
                sig10(s.std),
                sig10(s.compound),
                sig10(full.mean),
                sig10(full.std),
                sig10(full.compound)
            ));
        };
        for (side, si) in [("buy", 0), ("sell", 1)] {
            for ((algo, _), stats) in reports.iter().zip(&report_stats) {
                push_row(format!("{algo}_{side}"), &stats[si], &stats[2]);
            }
        }
        fs::write(dir.join("summary.csv"), out)?;
        let excluded = reports
            .iter()
            .flat_map(|(algo, r)| {
                r.excluded
                    .iter()
                    .map(move |e| format!("{algo}:{}", e.ticker))
            })
            .collect();
        fs::write(
            dir.join("config.json"),
            cfg.echo_json(Some(derived_echo(&dataset, excluded))),
        )?;
        println!("combined summary in {}", dir.display());
    }
    Ok(())
}

/// Where a run's stored returns live. A single-algorithm backtest writes
/// `<out>/<run_id>`; a `both` run writes `<out>/<run_id>-fnn` and
/// `<out>/<run_id>-anfis`. Falls back to `<out>` itself when it already
/// holds `portfolio_returns.csv`.
fn report_dirs(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let named = [
        cfg.out_dir.join(&cfg.run_id),
        cfg.out_dir.join(format!("{}-fnn", cfg.run_id)),
        cfg.out_dir.join(format!("{}-anfis", cfg.run_id)),
    ];
    let has_returns = |dir: &PathBuf| dir.join("portfolio_returns.csv").is_file();
    let found: Vec<PathBuf> = named.into_iter().filter(has_returns).collect();
    if !found.is_empty() {
        return Ok(found);
    }
    if has_returns(&cfg.out_dir) {
        return Ok(vec![cfg.out_dir.clone()]);
    }
    Err(CliError::Config(format!(
        "no portfolio_returns.csv under {} (run `backtest` first)",
        cfg.out_dir.display()
    )))
}

/// Re-renders `summary.csv` and `compound_curve.csv` from the stored
/// per-quarter returns of every run directory found. Inputs are the
/// file's ten-significant-digit values, so regenerated summaries reflect
/// exactly what the file says.
pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    for dir in report_dirs(cfg)? {
        rerender_report(&dir)?;
    }
    Ok(())
}

fn rerender_report(dir: &Path) -> Result<(), CliError> {
    let path = dir.join("portfolio_returns.csv");
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "quarter,buy,sell,full_sample" {
        return Err(CliError::Config(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut quarters: Vec<Quarter> = Vec::new();
    let mut series = [Vec::new(), Vec::new(), Vec::new()];
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(CliError::Config(format!(
                "{} line {}: expected 4 columns",
                path.display(),
                lineno + 2
            )));
        }
        quarters.push(cells[0].parse().map_err(|_| {
            CliError::Config(format!(
                "{} line {}: unparseable quarter {:?}",
                path.display(),
                lineno + 2,
                cells[0]
            ))
        })?);
        for (si, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CliError::Config(format!(
                    "{} line {}: unparseable return {cell:?}",
                    path.display(),
                    lineno + 2
                ))
            })?;
            series[si].push(v);
        }
    }

    let (summary, curve) = render_summaries(&quarters, &series[0], &series[1], &series[2])?;
    fs::write(dir.join("summary.csv"), summary)?;
    fs::write(dir.join("compound_curve.csv"), curve)?;
    for (name, values) in ["buy", "sell", "full_sample"].iter().zip(&series) {
        print_summary(name, &evaluate(values)?);
    }
    println!("re-rendered summaries in {}", dir.display());
    Ok(())
}

/// Generates a synthetic data tree (fundamentals, prices, benchmark, and
/// the noiseless truth table) under the data directory, in the same
/// layout the ingestion commands read, so the other subcommands can run
/// against it with the same config file.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synth_spec()?;
    let (panel, bench, truth) = generate_panel::<f64>(&spec)?;
    let root = &cfg.data_dir;
    let fundamentals = root.join("fundamentals");
    fs::create_dir_all(&fundamentals)?;

    for ti in 0..panel.n_tickers() {
        let mut out = String::from("quarter");
        for f in panel.features() {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for (qi, quarter) in panel.quarters().iter().enumerate() {
            out.push_str(&quarter.to_string());
            for fi in 0..panel.n_features() {
                out.push(',');
                if let Some(v) = panel.value(ti, qi, fi) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        fs::write(
            fundamentals.join(format!("{}.csv", panel.tickers()[ti])),
            out,
        )?;
    }

    let mut out = String::from("ticker,quarter,close\n");
    for ti in 0..panel.n_tickers() {
        for (qi, quarter) in panel.quarters().iter().enumerate() {
            if let Some(p) = panel.price(ti, qi) {
                out.push_str(&format!("{},{quarter},{p}\n", panel.tickers()[ti]));
            }
        }
    }
    fs::write(root.join("prices.csv"), out)?;

    let mut out = String::from("quarter,level\n");
    for (q, l) in bench.quarters().iter().zip(bench.levels()) {
        out.push_str(&format!("{q},{l}\n"));
    }
    fs::write(root.join("benchmark.csv"), out)?;

    let mut out = String::from("ticker,quarter,expected_relative_return\n");
    for ((ticker, quarter), v) in truth.iter() {
        out.push_str(&format!("{ticker},{quarter},{v}\n"));
    }
    fs::write(root.join("truth.csv"), out)?;

    println!(
        "synthetic tree: {} tickers x {} quarters x {} features -> {}",
        panel.n_tickers(),
        panel.quarters().len(),
        panel.n_features(),
        root.display()
    );
    Ok(())
}

/// Runs the embedded verification suite; any failure is fatal.
pub fn cmd_selfcheck(fault: Option<&str>) -> Result<(), CliError> {
    if let Some(name) = fault {
        if check::all_checks().iter().all(|c| c.name != name) {
            return Err(CliError::Config(format!("unknown check {name:?}")));
        }
        println!("note: sabotaging {name} (test hook)");
    }
    let failed = check::run_all(fault);
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}
