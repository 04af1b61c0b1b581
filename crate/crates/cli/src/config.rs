//! Run configuration: one flat file of key-value pairs, plus flag
//! overrides.
//!
//! Configs load from TOML (default) or JSON (`.json` extension). Every
//! run echoes its effective configuration to `config.json` in the report
//! directory; that echo is itself a loadable config, so any run can be
//! replayed exactly from its own output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fundrank_core::anfis::{AnfisTrainConfig, SubClustConfig};
use fundrank_core::backtest::{Algo, BacktestConfig};
use fundrank_core::fnn::FnnConfig;
use fundrank_core::panel::Quarter;
use fundrank_core::preprocess::PreprocessConfig;
use fundrank_core::synth::SynthSpec;

use crate::CliError;

/// Algorithm selection: one family or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AlgoChoice {
    Fnn,
    Anfis,
    Both,
}

impl AlgoChoice {
    /// The runs this choice expands to, in fixed order.
    pub fn runs(self) -> Vec<Algo> {
        match self {
            AlgoChoice::Fnn => vec![Algo::Fnn],
            AlgoChoice::Anfis => vec![Algo::Anfis],
            AlgoChoice::Both => vec![Algo::Fnn, Algo::Anfis],
        }
    }
}

/// Split-range boundaries and dataset shape, attached to the config echo
/// for the record. Ignored when a config is loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedEcho {
    pub n_tickers: usize,
    pub n_features: usize,
    pub train_quarters: [String; 2],
    pub validation_quarters: [String; 2],
    pub test_quarters: [String; 2],
    pub excluded: Vec<String>,
}

/// Every knob of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of the data tree (`fundamentals/`, `prices.csv`).
    pub data_dir: PathBuf,
    /// Benchmark CSV; a relative path is resolved against `data_dir`.
    pub benchmark_file: PathBuf,
    /// Directory run outputs are written under.
    pub out_dir: PathBuf,
    /// Report subdirectory name for this run.
    pub run_id: String,
    /// Optional panel window, e.g. "1996-Q1".
    pub start: Option<String>,
    pub end: Option<String>,

    pub train_frac: f64,
    pub validation_frac: f64,
    pub test_frac: f64,
    pub max_missing_frac: f64,
    pub impute: bool,
    pub min_samples: usize,

    pub algo: AlgoChoice,
    pub k: usize,
    pub base_seed: u64,
    /// Worker threads; absent means all available cores.
    pub threads: Option<usize>,
    pub validation_pass: bool,

    /// Hidden-layer width; absent means "match the input width".
    pub fnn_hidden: Option<usize>,
    pub fnn_learning_rate: f64,
    pub fnn_epochs: usize,
    pub fnn_batch_size: usize,
    pub fnn_beta1: f64,
    pub fnn_beta2: f64,
    pub fnn_epsilon: f64,
    pub fnn_scaler_margin: f64,

    pub anfis_radius: f64,
    pub anfis_squash: f64,
    pub anfis_accept_ratio: f64,
    pub anfis_reject_ratio: f64,
    pub anfis_learning_rate: f64,
    pub anfis_epochs: usize,
    pub anfis_ridge: f64,

    pub synth_stocks: usize,
    pub synth_quarters: usize,
    pub synth_features: usize,
    pub synth_weights: Vec<f64>,
    pub synth_scale: f64,
    pub synth_noise: f64,
    pub synth_blank_fraction: f64,
    pub synth_start: String,

    /// Written into echoes; never read back into behavior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedEcho>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fnn = FnnConfig::default();
        let clust = SubClustConfig::default();
        let anfis = AnfisTrainConfig::default();
        let bt = fundrank_core::backtest::BacktestConfig::default();
        let pre = PreprocessConfig::default();
        let synth = SynthSpec::default();
        Self {
            data_dir: PathBuf::from("."),
            benchmark_file: PathBuf::from("benchmark.csv"),
            out_dir: PathBuf::from("report"),
            run_id: "run".to_string(),
            start: None,
            end: None,
            train_frac: pre.train_frac,
            validation_frac: pre.validation_frac,
            test_frac: pre.test_frac,
            max_missing_frac: pre.max_missing_frac,
            impute: pre.impute,
            min_samples: pre.min_samples,
            algo: AlgoChoice::Both,
            k: bt.k,
            base_seed: 0,
            threads: None,
            validation_pass: false,
            fnn_hidden: fnn.hidden,
            fnn_learning_rate: fnn.learning_rate,
            fnn_epochs: fnn.epochs,
            fnn_batch_size: fnn.batch_size,
            fnn_beta1: fnn.beta1,
            fnn_beta2: fnn.beta2,
            fnn_epsilon: fnn.epsilon,
            fnn_scaler_margin: fnn.scaler_margin,
            anfis_radius: clust.radius,
            anfis_squash: clust.squash,
            anfis_accept_ratio: clust.accept_ratio,
            anfis_reject_ratio: clust.reject_ratio,
            anfis_learning_rate: anfis.learning_rate,
            anfis_epochs: anfis.epochs,
            anfis_ridge: bt.ridge,
            synth_stocks: synth.n_stocks,
            synth_quarters: synth.n_quarters,
            synth_features: synth.n_features,
            synth_weights: synth.signal_weights,
            synth_scale: synth.signal_scale,
            synth_noise: synth.noise_sigma,
            synth_blank_fraction: synth.blank_fraction,
            synth_start: synth.start.to_string(),
            derived: None,
        }
    }
}

impl RunConfig {
    /// Loads a config file, picking the format by extension: `.json`
    /// parses as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let sum = self.train_frac + self.validation_frac + self.test_frac;
        let each_ok = [self.train_frac, self.validation_frac, self.test_frac]
            .iter()
            .all(|f| (0.0..1.0).contains(f) && *f > 0.0);
        if !each_ok || (sum - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "split fractions {}/{}/{} must lie in (0,1) and sum to 1",
                self.train_frac, self.validation_frac, self.test_frac
            )));
        }
        if self.k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(CliError::Config(format!(
                "run_id {:?} must be a plain directory name",
                self.run_id
            )));
        }
        self.window()?;
        self.synth_spec()?;
        Ok(())
    }

    fn parse_quarter(label: &str, s: &str) -> Result<Quarter, CliError> {
        s.parse()
            .map_err(|e| CliError::Config(format!("{label}: {e}")))
    }

    /// The configured panel window, if any.
    pub fn window(&self) -> Result<Option<(Quarter, Quarter)>, CliError> {
        match (&self.start, &self.end) {
            (None, None) => Ok(None),
            (Some(s), Some(e)) => {
                let start = Self::parse_quarter("start", s)?;
                let end = Self::parse_quarter("end", e)?;
                Ok(Some((start, end)))
            }
            _ => Err(CliError::Config(
                "start and end must be given together".into(),
            )),
        }
    }

    /// Benchmark path with relative paths anchored at the data root.
    pub fn benchmark_path(&self) -> PathBuf {
        if self.benchmark_file.is_absolute() {
            self.benchmark_file.clone()
        } else {
            self.data_dir.join(&self.benchmark_file)
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            max_missing_frac: self.max_missing_frac,
            impute: self.impute,
            train_frac: self.train_frac,
            validation_frac: self.validation_frac,
            test_frac: self.test_frac,
            min_samples: self.min_samples,
        }
    }

    pub fn backtest_config(&self) -> BacktestConfig {
        BacktestConfig {
            k: self.k,
            fnn: FnnConfig {
                hidden: self.fnn_hidden,
                learning_rate: self.fnn_learning_rate,
                epochs: self.fnn_epochs,
                batch_size: self.fnn_batch_size,
                beta1: self.fnn_beta1,
                beta2: self.fnn_beta2,
                epsilon: self.fnn_epsilon,
                scaler_margin: self.fnn_scaler_margin,
                seed: 0,
            },
            clust: SubClustConfig {
                radius: self.anfis_radius,
                squash: self.anfis_squash,
                accept_ratio: self.anfis_accept_ratio,
                reject_ratio: self.anfis_reject_ratio,
            },
            anfis_train: AnfisTrainConfig {
                learning_rate: self.anfis_learning_rate,
                epochs: self.anfis_epochs,
            },
            ridge: self.anfis_ridge,
            base_seed: self.base_seed,
            validation_pass: self.validation_pass,
        }
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, CliError> {
        Ok(SynthSpec {
            n_stocks: self.synth_stocks,
            n_quarters: self.synth_quarters,
            n_features: self.synth_features,
            signal_weights: self.synth_weights.clone(),
            signal_scale: self.synth_scale,
            noise_sigma: self.synth_noise,
            seed: self.base_seed,
            blank_fraction: self.synth_blank_fraction,
            start: Self::parse_quarter("synth_start", &self.synth_start)?,
        })
    }

    /// The JSON echo written next to every report. Loadable as a config.
    pub fn echo_json(&self, derived: Option<DerivedEcho>) -> String {
        let mut with = self.clone();
        with.derived = derived;
        let mut text = serde_json::to_string_pretty(&with).expect("config serializes infallibly");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_and_json_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            k: 5,
            algo: AlgoChoice::Anfis,
            start: Some("1996-Q1".into()),
            end: Some("2017-Q4".into()),
            ..RunConfig::default()
        };

        let toml_path = tmp.path().join("run.toml");
        std::fs::write(&toml_path, toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&toml_path).unwrap(), cfg);

        let json_path = tmp.path().join("run.json");
        std::fs::write(&json_path, cfg.echo_json(None)).unwrap();
        assert_eq!(RunConfig::load(&json_path).unwrap(), cfg);
    }

    #[test]
    fn echo_with_derived_block_still_loads() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let derived = DerivedEcho {
            n_tickers: 70,
            n_features: 22,
            train_quarters: ["1996-Q2".into(), "2008-Q4".into()],
            validation_quarters: ["2009-Q1".into(), "2013-Q1".into()],
            test_quarters: ["2013-Q2".into(), "2017-Q3".into()],
            excluded: vec![],
        };
        let path = tmp.path().join("config.json");
        std::fs::write(&path, cfg.echo_json(Some(derived))).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.derived.as_ref().unwrap().n_tickers, 70);
        let mut stripped = back;
        stripped.derived = None;
        assert_eq!(stripped, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.toml");
        std::fs::write(&path, "kk = 12\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("kk"), "{err}");
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let mut cfg = RunConfig {
            train_frac: 0.5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.train_frac = 0.6;
        cfg.k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn window_requires_both_endpoints() {
        let mut cfg = RunConfig {
            start: Some("1996-Q1".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.end = Some("1999-Q4".into());
        let (s, e) = cfg.window().unwrap().unwrap();
        assert_eq!(s.to_string(), "1996-Q1");
        assert_eq!(e.to_string(), "1999-Q4");
    }
}
