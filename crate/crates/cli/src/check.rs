//! Embedded verification suite behind `fundrank selfcheck`.
//!
//! Each check measures a property of the production code against an
//! independent oracle or hand-derived bound: finite-difference gradients,
//! a from-scratch clustering replay, exact least-squares recovery, a
//! full-sort portfolio oracle, the normalization invariant, and the
//! report accounting identity. A hidden fault hook (`--fault NAME`)
//! genuinely breaks the named check's measurement so the harness can be
//! shown to detect real failures.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fundrank_core::anfis::{
    anfis_mse, fit_consequents_lse, premise_gradient_check, subtractive_cluster, AnfisModel, Rule,
    SubClustConfig,
};
use fundrank_core::backtest::{
    construct_portfolios, run_backtest, Algo, BacktestConfig, CrossSection,
};
use fundrank_core::fnn::{gradient_check, FnnModel};
use fundrank_core::panel::Quarter;
use fundrank_core::preprocess::{build_dataset, PreprocessConfig};
use fundrank_core::synth::{generate_panel, SynthSpec};

/// One named verification with its runtime budget in seconds.
pub struct Check {
    pub name: &'static str,
    pub budget_secs: u64,
    run: fn(bool) -> Result<String, String>,
}

impl Check {
    /// Runs the check; `fault` names a check whose measurement should be
    /// sabotaged (the hidden test hook).
    pub fn run(&self, fault: Option<&str>) -> Result<String, String> {
        (self.run)(fault == Some(self.name))
    }
}

pub fn all_checks() -> Vec<Check> {
    vec![
        Check {
            name: "fnn_gradient_check",
            budget_secs: 10,
            run: check_fnn_gradients,
        },
        Check {
            name: "anfis_gradient_check",
            budget_secs: 10,
            run: check_anfis_gradients,
        },
        Check {
            name: "clustering_oracle",
            budget_secs: 30,
            run: check_clustering_oracle,
        },
        Check {
            name: "lse_recovery",
            budget_secs: 5,
            run: check_lse_recovery,
        },
        Check {
            name: "normalization_invariant",
            budget_secs: 10,
            run: check_normalization_invariant,
        },
        Check {
            name: "portfolio_oracle",
            budget_secs: 10,
            run: check_portfolio_oracle,
        },
        Check {
            name: "accounting_identity",
            budget_secs: 30,
            run: check_accounting_identity,
        },
    ]
}

/// Runs every check, printing one PASS/FAIL line each; returns the names
/// of the failures.
pub fn run_all(fault: Option<&str>) -> Vec<&'static str> {
    let mut failed = Vec::new();
    for check in all_checks() {
        let started = Instant::now();
        match check.run(fault) {
            Ok(detail) => {
                let secs = started.elapsed().as_secs_f64();
                if secs > check.budget_secs as f64 {
                    println!(
                        "FAIL {}: passed but took {secs:.1}s (budget {}s)",
                        check.name, check.budget_secs
                    );
                    failed.push(check.name);
                } else {
                    println!("PASS {} ({secs:.2}s): {detail}", check.name);
                }
            }
            Err(msg) => {
                println!("FAIL {}: {msg}", check.name);
                failed.push(check.name);
            }
        }
    }
    failed
}

/// Analytic network gradients vs central differences: 10 random
/// 21-input, 21-hidden models on 4-sample batches, worst relative error
/// below 1e-4. The fault hook degrades the finite-difference step until
/// the approximation genuinely breaks.
pub fn check_fnn_gradients(fault: bool) -> Result<String, String> {
    let h = if fault { 0.25 } else { 1e-5 };
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let model = FnnModel::<f64>::init(21, 21, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x: Vec<f64> = (0..4 * 21).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
        let err = gradient_check(&model, &x, &t, h).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

/// Random fuzzy model: `rules` Gaussians over [0,1] inputs with random
/// consequents. Shared by the gradient and normalization checks.
fn random_anfis(n_in: usize, rules: usize, rng: &mut ChaCha8Rng) -> AnfisModel<f64> {
    let rules = (0..rules)
        .map(|_| Rule {
            centers: (0..n_in).map(|_| rng.gen_range(0.0..1.0)).collect(),
            sigmas: (0..n_in).map(|_| rng.gen_range(0.15..0.6)).collect(),
            coeffs: (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: rng.gen_range(-0.5..0.5),
        })
        .collect();
    AnfisModel::from_parts(n_in, rules, vec![0.0; n_in], vec![1.0; n_in])
        .expect("positive sigmas by construction")
}

/// Analytic premise gradients (Gaussian centers and widths) vs central
/// differences over 10 random rule bases.
pub fn check_anfis_gradients(fault: bool) -> Result<String, String> {
    let h = if fault { 0.5 } else { 1e-5 };
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let n_in = 1 + (seed as usize % 4);
        let model = random_anfis(n_in, 2 + (seed as usize % 3), &mut rng);
        let x: Vec<f64> = (0..4 * n_in).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let err = premise_gradient_check(&model, &x, &t, h).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

/// From-scratch replay of the documented clustering arithmetic. No
/// incremental state: every round recomputes each point's potential from
/// the event log (initial sum, then every subtraction and zero-out in
/// order), so any bookkeeping error in the production code shows up as a
/// diverging selection.
fn cluster_by_replay(points: &[f64], dim: usize, cfg: &SubClustConfig) -> Vec<usize> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let d2 = |a: usize, b: usize| {
        let (a, b) = (row(a), row(b));
        let mut s = 0.0;
        for j in 0..dim {
            let d = a[j] - b[j];
            s += d * d;
        }
        s
    };
    let ra = cfg.radius;
    let rb = cfg.squash * ra;
    let alpha = 4.0 / (ra * ra);
    let beta = 4.0 / (rb * rb);

    #[derive(Clone, Copy)]
    enum Event {
        Subtract { center: usize, pc: f64 },
        ZeroOut { point: usize },
    }
    let mut events: Vec<Event> = Vec::new();
    let potential = |i: usize, events: &[Event]| {
        let mut v = 0.0;
        for j in 0..n {
            v += (-(alpha * d2(i, j))).exp();
        }
        for e in events {
            match *e {
                Event::Subtract { center, pc } => {
                    v -= pc * (-(beta * d2(i, center))).exp();
                }
                Event::ZeroOut { point } if point == i => v = 0.0,
                Event::ZeroOut { .. } => {}
            }
        }
        v
    };
    let argmax = |events: &[Event]| {
        let mut best = 0;
        let mut best_v = potential(0, events);
        for i in 1..n {
            let v = potential(i, events);
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        (best, best_v)
    };

    let (first, p1) = argmax(&events);
    let mut centers = vec![first];
    events.push(Event::Subtract {
        center: first,
        pc: p1,
    });
    let accept = cfg.accept_ratio * p1;
    let reject = cfg.reject_ratio * p1;
    loop {
        let (k, pk) = argmax(&events);
        if pk <= 0.0 {
            break;
        }
        let take = if pk >= accept {
            true
        } else if pk < reject {
            break;
        } else {
            let d_min = centers
                .iter()
                .map(|&c| d2(k, c).sqrt())
                .fold(f64::INFINITY, f64::min);
            d_min / ra + pk / p1 >= 1.0
        };
        if take {
            centers.push(k);
            events.push(Event::Subtract { center: k, pc: pk });
        } else {
            events.push(Event::ZeroOut { point: k });
        }
    }
    centers
}

/// Production clustering vs the replay oracle on 50 randomized fixtures
/// (up to 200 points, up to 5 dimensions, mixed blob/uniform layouts):
/// the selected centers and their order must match exactly.
pub fn check_clustering_oracle(fault: bool) -> Result<String, String> {
    let mut total_centers = 0;
    for fixture in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + fixture);
        let n = rng.gen_range(5..=200);
        let dim = rng.gen_range(1..=5);
        let blobs = rng.gen_range(1..=4);
        let centers: Vec<Vec<f64>> = (0..blobs)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.1..0.9)).collect())
            .collect();
        let mut points = Vec::with_capacity(n * dim);
        for i in 0..n {
            if i % 4 == 3 {
                // Every fourth point is uniform background noise.
                for _ in 0..dim {
                    points.push(rng.gen_range(0.0..1.0));
                }
            } else {
                for &cj in &centers[i % blobs] {
                    points.push((cj + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
                }
            }
        }
        let cfg = SubClustConfig::default();
        let got = subtractive_cluster(&points, dim, &cfg).map_err(|e| e.to_string())?;
        let oracle_cfg = if fault {
            SubClustConfig { squash: 1.0, ..cfg }
        } else {
            cfg
        };
        let want = cluster_by_replay(&points, dim, &oracle_cfg);
        if got != want {
            return Err(format!(
                "fixture {fixture} (n={n}, dim={dim}): centers {got:?} != oracle {want:?}"
            ));
        }
        total_centers += got.len();
    }
    Ok(format!("50 fixtures, {total_centers} centers matched"))
}

/// Noiseless data from a known two-rule system with the true premises
/// installed: one least-squares pass must recover the consequents to
/// 1e-6 and fit with RMSE below 1e-8.
pub fn check_lse_recovery(fault: bool) -> Result<String, String> {
    let truth = AnfisModel::from_parts(
        1,
        vec![
            Rule {
                centers: vec![1.0],
                sigmas: vec![0.7],
                coeffs: vec![1.5],
                bias: 0.2,
            },
            Rule {
                centers: vec![4.0],
                sigmas: vec![0.7],
                coeffs: vec![-0.8],
                bias: -0.1,
            },
        ],
        vec![0.0],
        vec![5.0],
    )
    .expect("valid fixture");
    let x: Vec<f64> = (0..51).map(|i| i as f64 * 0.1).collect();
    let t: Vec<f64> = x
        .iter()
        .map(|&v| truth.predict(&[v]).expect("in range"))
        .collect();

    let blank = AnfisModel::from_parts(
        1,
        truth
            .rules()
            .iter()
            .map(|r| Rule {
                coeffs: vec![0.0],
                bias: 0.0,
                ..r.clone()
            })
            .collect(),
        vec![0.0],
        vec![5.0],
    )
    .expect("valid fixture");
    let fitted = fit_consequents_lse(&blank, &x, &t, 0.0).map_err(|e| e.to_string())?;

    let mut want: Vec<f64> = truth
        .rules()
        .iter()
        .flat_map(|r| r.coeffs.iter().copied().chain([r.bias]))
        .collect();
    if fault {
        want[0] += 0.01;
    }
    let got: Vec<f64> = fitted
        .rules()
        .iter()
        .flat_map(|r| r.coeffs.iter().copied().chain([r.bias]))
        .collect();
    let coeff_err = want
        .iter()
        .zip(&got)
        .map(|(w, g)| (w - g).abs())
        .fold(0.0, f64::max);
    let rmse = anfis_mse(&fitted, &x, &t)
        .map_err(|e| e.to_string())?
        .sqrt();
    if coeff_err > 1e-6 {
        return Err(format!("consequent error {coeff_err:.2e} > 1e-6"));
    }
    if rmse > 1e-8 {
        return Err(format!("training RMSE {rmse:.2e} > 1e-8"));
    }
    Ok(format!("coefficients to {coeff_err:.1e}, RMSE {rmse:.1e}"))
}

/// Rule weights are a convex combination: they must sum to one within
/// 1e-12 on 1000 random inputs across 20 random models, and a one-rule
/// model must collapse to the plain least-squares line.
pub fn check_normalization_invariant(fault: bool) -> Result<String, String> {
    let mut worst = 0.0f64;
    for m in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + m);
        let n_in = 1 + (m as usize % 4);
        let model = random_anfis(n_in, 1 + (m as usize % 5), &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let (_, trace) = model.forward(&x).map_err(|e| e.to_string())?;
            let sum: f64 = trace.normalized.iter().sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    let tolerance = if fault { 1e-18 } else { 1e-12 };
    if worst > tolerance {
        return Err(format!("|sum - 1| up to {worst:.2e} > {tolerance:.0e}"));
    }

    // One rule: normalized weight is identically 1, so the model IS the
    // consequent line; its least-squares fit must match a direct solve.
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let x: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
    let t: Vec<f64> = x
        .iter()
        .map(|&v| 0.7 * v - 0.3 + 0.01 * (9.0 * v).sin())
        .collect();
    let single = AnfisModel::from_parts(
        1,
        vec![Rule {
            centers: vec![0.5],
            sigmas: vec![0.4],
            coeffs: vec![0.0],
            bias: 0.0,
        }],
        vec![0.0],
        vec![1.0],
    )
    .expect("valid fixture");
    let fitted = fit_consequents_lse(&single, &x, &t, 0.0).map_err(|e| e.to_string())?;
    // Direct ordinary least squares for slope/intercept.
    let n = x.len() as f64;
    let (sx, st) = (x.iter().sum::<f64>(), t.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxt: f64 = x.iter().zip(&t).map(|(a, b)| a * b).sum();
    let slope = (n * sxt - sx * st) / (n * sxx - sx * sx);
    let intercept = (st - slope * sx) / n;
    let rule = &fitted.rules()[0];
    let line_err = (rule.coeffs[0] - slope)
        .abs()
        .max((rule.bias - intercept).abs());
    if line_err > 1e-9 {
        return Err(format!(
            "single-rule fit differs from direct least squares by {line_err:.2e}"
        ));
    }
    Ok(format!(
        "|sum - 1| max {worst:.1e}; single rule matches OLS to {line_err:.1e}"
    ))
}

/// Full-sort oracle: order everything by (score desc, ticker asc) and
/// take the head for Buy; order the remainder by (score asc, ticker asc)
/// and take the head for Sell.
fn portfolios_by_full_sort(cs: &CrossSection<f64>, k: usize) -> (Vec<String>, Vec<String>) {
    let n = cs.tickers.len();
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| {
        cs.scores[b]
            .partial_cmp(&cs.scores[a])
            .expect("finite scores")
            .then_with(|| cs.tickers[a].cmp(&cs.tickers[b]))
    });
    let buy_picks: Vec<usize> = desc[..k].to_vec();
    let mut rest: Vec<usize> = desc[k..].to_vec();
    rest.sort_by(|&a, &b| {
        cs.scores[a]
            .partial_cmp(&cs.scores[b])
            .expect("finite scores")
            .then_with(|| cs.tickers[a].cmp(&cs.tickers[b]))
    });
    let mut buy: Vec<String> = buy_picks.iter().map(|&i| cs.tickers[i].clone()).collect();
    let mut sell: Vec<String> = rest[..k].iter().map(|&i| cs.tickers[i].clone()).collect();
    buy.sort();
    sell.sort();
    (buy, sell)
}

/// Portfolio construction vs the full-sort oracle on 1000 random score
/// vectors, roughly half of them quantized to force ties; Buy and Sell
/// must also be disjoint every time.
pub fn check_portfolio_oracle(fault: bool) -> Result<String, String> {
    let quarter: Quarter = "2015-Q1".parse().expect("valid literal");
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    for trial in 0..1000u32 {
        let n = rng.gen_range(4..=70);
        let k = rng.gen_range(1..=n / 2);
        let tickers: Vec<String> = (0..n).map(|i| format!("T{i:02}")).collect();
        let scores: Vec<f64> = if trial % 2 == 0 {
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        } else {
            // Heavy ties: scores drawn from at most five distinct values.
            (0..n)
                .map(|_| f64::from(rng.gen_range(-2i32..=2)) / 50.0)
                .collect()
        };
        let cs = CrossSection {
            quarter,
            tickers,
            scores,
            realized: vec![0.0; n],
        };
        let (buy, sell) = match construct_portfolios(&cs, k) {
            Ok(p) => p,
            Err(e) => return Err(format!("trial {trial}: {e}")),
        };
        let oracle_k = if fault && k > 1 { k - 1 } else { k };
        let (want_buy, want_sell) = portfolios_by_full_sort(&cs, oracle_k);
        if buy.members != want_buy || sell.members != want_sell {
            return Err(format!(
                "trial {trial} (n={n}, k={k}): got buy {:?} sell {:?}, oracle buy {want_buy:?} sell {want_sell:?}",
                buy.members, sell.members
            ));
        }
        if buy.members.iter().any(|t| sell.contains(t)) {
            return Err(format!("trial {trial}: Buy and Sell overlap"));
        }
    }
    Ok("1000 score vectors matched, all disjoint".to_string())
}

/// End-to-end accounting: run a small synthetic experiment and confirm
/// every quarter satisfies k·buy + k·sell + (n−2k)·middle = n·full
/// within 1e-12.
pub fn check_accounting_identity(fault: bool) -> Result<String, String> {
    let spec = SynthSpec {
        n_stocks: 10,
        n_quarters: 24,
        noise_sigma: 0.02,
        ..SynthSpec::default()
    };
    let (panel, bench, _) = generate_panel::<f64>(&spec).map_err(|e| e.to_string())?;
    let (dataset, _) =
        build_dataset(&panel, &bench, &PreprocessConfig::default()).map_err(|e| e.to_string())?;
    let cfg = BacktestConfig {
        k: 3,
        ..BacktestConfig::default()
    };
    let report = run_backtest(&dataset, Algo::Anfis, &cfg).map_err(|e| e.to_string())?;
    let k = cfg.k as f64;
    let mut worst = 0.0f64;
    for (i, row) in report.rows.iter().enumerate() {
        let n = row.n as f64;
        let full = if fault && i == 0 {
            row.full_sample + 1e-6
        } else {
            row.full_sample
        };
        let gap = (k * row.buy + k * row.sell + (n - 2.0 * k) * row.middle - n * full).abs();
        worst = worst.max(gap);
        if gap > 1e-12 {
            return Err(format!("{}: identity off by {gap:.2e}", row.quarter));
        }
    }
    Ok(format!(
        "{} quarters, worst gap {worst:.1e}",
        report.rows.len()
    ))
}
