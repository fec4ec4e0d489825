//! Run configuration: a flat key=value text format with `#` comments
//! and dotted keys. Unknown keys, malformed lines and out-of-range
//! values are reported with their line number; missing required keys
//! are reported by name.

use crate::augment::AugmentConfig;
use crate::fed::{
    Aggregator, FedConfig, LossWeights, PretrainSpec, Progress, SwaWeighting, TeacherSource,
    TrainMode,
};
use crate::model::ModelDims;
use crate::synthdata::{BenchmarkSpec, Scenario};
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Parsed key=value pairs with their line numbers.
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Config {
                line: line_no,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    msg: "empty key or value".into(),
                });
            }
            if entries.insert(key.clone(), (value, line_no)).is_some() {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self {
            entries,
            consumed: Default::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<(&str, usize)> {
        let found = self.entries.get(key)?;
        self.consumed.borrow_mut().insert(key.to_string());
        Some((found.0.as_str(), found.1))
    }

    pub fn required(&self, key: &str) -> Result<(&str, usize)> {
        self.raw(key).ok_or_else(|| Error::MissingKey(key.into()))
    }

    fn parse_with<T>(
        &self,
        key: &str,
        default: T,
        f: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => f(v).map_err(|msg| Error::Config {
                line,
                msg: format!("{key}: {msg}"),
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_with(key, default, |v| {
            v.parse::<u64>().map_err(|_| format!("`{v}` is not an integer"))
        })
    }

    pub fn usize_in(&self, key: &str, default: usize, lo: usize, hi: usize) -> Result<usize> {
        self.parse_with(key, default, |v| {
            let n = v
                .parse::<usize>()
                .map_err(|_| format!("`{v}` is not an integer"))?;
            if n < lo || n > hi {
                return Err(format!("{n} outside [{lo}, {hi}]"));
            }
            Ok(n)
        })
    }

    pub fn f64_in(&self, key: &str, default: f64, lo: f64, hi: f64) -> Result<f64> {
        self.parse_with(key, default, |v| {
            let x = v
                .parse::<f64>()
                .map_err(|_| format!("`{v}` is not a number"))?;
            if !x.is_finite() || x < lo || x > hi {
                return Err(format!("{x} outside [{lo}, {hi}]"));
            }
            Ok(x)
        })
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parse_with(key, default, |v| match v {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            other => Err(format!("`{other}` is not a boolean")),
        })
    }

    pub fn enum_or<T>(
        &self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => parse(v).map_err(|e| Error::Config {
                line,
                msg: format!("{key}: {e}"),
            }),
        }
    }

    /// Error out on any key that was never consumed (catches typos).
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (key, (_, line)) in &self.entries {
            if !consumed.contains(key) {
                return Err(Error::Config {
                    line: *line,
                    msg: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

/// Everything one experiment needs: benchmark shape, model widths,
/// pretraining settings and federation settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub benchmark: BenchmarkSpec,
    pub hidden: usize,
    pub feature: usize,
    pub pretrain: PretrainSpec,
    pub fed: FedConfig,
    pub cust: CustOverrides,
}

/// Centralized self-training knobs. The pooled run anneals with the
/// polynomial schedule and defaults to one full-pool batch per step,
/// which plays the role federation's averaging plays for drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CustOverrides {
    pub rounds: usize,
    pub eta: f64,
    /// 0 selects the full pool as one batch
    pub batch_size: usize,
}

impl RunConfig {
    /// The federation config with the centralized-run overrides applied.
    pub fn cust_config(&self, pool_size: usize) -> FedConfig {
        FedConfig {
            rounds: self.cust.rounds,
            eta: self.cust.eta,
            batch_size: if self.cust.batch_size == 0 {
                pool_size.max(1)
            } else {
                self.cust.batch_size
            },
            ..self.fed.clone()
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_channels: self.benchmark.channels,
            hidden: self.hidden,
            feature: self.feature,
            classes: self.benchmark.classes,
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let raw = RawConfig::parse(text)?;

        let (seed_str, seed_line) = raw.required("seed")?;
        let seed: u64 = seed_str.parse().map_err(|_| Error::Config {
            line: seed_line,
            msg: format!("seed: `{seed_str}` is not an integer"),
        })?;
        let (scen_str, scen_line) = raw.required("data.scenario")?;
        let scenario = Scenario::parse(scen_str).map_err(|e| Error::Config {
            line: scen_line,
            msg: e.to_string(),
        })?;

        let defaults = BenchmarkSpec::defaults(scenario, seed);
        let benchmark = BenchmarkSpec {
            scenario,
            seed,
            height: raw.usize_in("data.height", defaults.height, 2, 512)?,
            width: raw.usize_in("data.width", defaults.width, 2, 512)?,
            channels: raw.usize_in("data.channels", defaults.channels, 1, 64)?,
            classes: raw.usize_in("data.classes", defaults.classes, 2, 64)?,
            source_images: raw.usize_in("data.source_images", defaults.source_images, 1, 100_000)?,
            eval_images: raw.usize_in("data.eval_images", defaults.eval_images, 1, 100_000)?,
            clients: raw.usize_in("data.clients", defaults.clients, 1, 100_000)?,
            min_images: raw.usize_in("data.min_images", defaults.min_images, 2, 10_000)?,
            max_images: raw.usize_in("data.max_images", defaults.max_images, 1, 10_000)?,
        };
        if benchmark.max_images < benchmark.min_images {
            return Err(Error::Config {
                line: scen_line,
                msg: format!(
                    "data.max_images {} below data.min_images {}",
                    benchmark.max_images, benchmark.min_images
                ),
            });
        }

        let hidden = raw.usize_in("model.hidden", 16, 1, 4096)?;
        let feature = raw.usize_in("model.feature", 8, 1, 4096)?;

        let augment = AugmentConfig {
            flip_prob: raw.f64_in("augment.flip_prob", 0.5, 0.0, 1.0)?,
            sigma_weak: raw.f64_in("augment.sigma_weak", 0.02, 0.0, 10.0)?,
            sigma_strong: raw.f64_in("augment.sigma_strong", 0.1, 0.0, 10.0)?,
            gain_lo: raw.f64_in("augment.gain_lo", 0.7, 1e-6, 10.0)?,
            gain_hi: raw.f64_in("augment.gain_hi", 1.3, 1e-6, 10.0)?,
            gray_prob: raw.f64_in("augment.gray_prob", 0.2, 0.0, 1.0)?,
            dropout_prob: raw.f64_in("augment.dropout_prob", 0.5, 0.0, 0.999)?,
            cutmix: raw.bool_or("augment.cutmix", true)?,
        };

        let weights = LossWeights {
            lambda_cons: raw.f64_in("loss.lambda_cons", 1.0, 0.0, 100.0)?,
            lambda_t: raw.f64_in("loss.lambda_t", 1.0, 0.0, 100.0)?,
            lambda_mclip0: raw.f64_in("loss.lambda_mclip", 0.1, 0.0, 100.0)?,
        };
        let tau = raw.f64_in("loss.tau", 0.9, 0.0, 1.0)?;
        let tau_t = raw.f64_in("loss.tau_t", 0.9, 0.0, 1.0)?;
        let tau_p = raw.f64_in("loss.tau_p", 0.9, 0.0, 1.0)?;
        let ohem_keep = raw.f64_in("loss.ohem_keep", 1.0, 1e-6, 1.0)?;
        let prior_distill = raw.bool_or("loss.prior", true)?;

        let pretrain = PretrainSpec {
            epochs: raw.usize_in("pretrain.epochs", 100, 0, 1_000_000)?,
            batch_size: raw.usize_in("pretrain.batch_size", 8, 1, 100_000)?,
            eta: raw.f64_in("pretrain.eta", 0.05, 0.0, 1000.0)?,
            poly_power: raw.f64_in("pretrain.poly_power", 0.9, 0.5, 16.0)?,
            poly_rho: raw.f64_in("pretrain.poly_rho", 0.0, 0.0, 1.0)?,
            unlabeled_fraction: raw.f64_in("pretrain.unlabeled_fraction", 0.0, 0.0, 1.0)?,
            ohem_keep,
            tau,
            tau_p,
            lambda_cons: weights.lambda_cons,
            lambda_mclip0: weights.lambda_mclip0,
            ema_teacher: raw.bool_or("pretrain.ema_teacher", false)?,
            gamma_ema: raw.f64_in("pretrain.gamma_ema", 0.996, 0.0, 1.0)?,
            augment,
            seed,
        };

        let fed = FedConfig {
            rounds: raw.usize_in("fed.rounds", 100, 0, 1_000_000)?,
            clients_per_round: raw.usize_in("fed.clients_per_round", 5, 1, 100_000)?,
            local_epochs: raw.usize_in("fed.local_epochs", 1, 1, 100_000)?,
            batch_size: raw.usize_in("fed.batch_size", 4, 1, 100_000)?,
            aggregator: raw.enum_or("fed.agg", Aggregator::FedSwa, Aggregator::parse)?,
            mode: raw.enum_or("fed.mode", TrainMode::Unsup, TrainMode::parse)?,
            gamma_swa: raw.f64_in("fed.gamma_swa", 0.5, 0.0, 1.0)?,
            swa_weighting: raw.enum_or(
                "fed.swa_weighting",
                SwaWeighting::Uniform,
                SwaWeighting::parse,
            )?,
            eta: raw.f64_in("fed.eta", 0.002, 0.0, 1000.0)?,
            fedswa_delta: raw.f64_in("fed.fedswa_delta", 0.1, 0.0, 1.0)?,
            poly_power: raw.f64_in("fed.poly_power", 0.9, 0.5, 16.0)?,
            poly_rho: raw.f64_in("fed.poly_rho", 0.55, 0.0, 1.0)?,
            progress: raw.enum_or("fed.progress", Progress::PerRound, Progress::parse)?,
            weights,
            tau,
            tau_t,
            tau_p,
            ohem_keep,
            teacher: raw.enum_or("fed.teacher", TeacherSource::FrozenRound, TeacherSource::parse)?,
            gamma_ema: raw.f64_in("fed.gamma_ema", 0.996, 0.0, 1.0)?,
            label_fraction: raw.f64_in("fed.label_fraction", 0.25, 0.0, 1.0)?,
            augment,
            eval_every: raw.usize_in("fed.eval_every", 1, 1, 1_000_000)?,
            prior_distill,
            seed,
        };

        let cust = CustOverrides {
            rounds: raw.usize_in("cust.rounds", fed.rounds, 0, 1_000_000)?,
            eta: raw.f64_in("cust.eta", 0.003, 0.0, 1000.0)?,
            // 0 means one full-pool batch per step
            batch_size: raw.usize_in("cust.batch_size", 0, 0, 1_000_000)?,
        };

        raw.reject_unknown()?;
        Ok(RunConfig {
            seed,
            benchmark,
            hidden,
            feature,
            pretrain,
            fed,
            cust,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\ndata.scenario = clear2adverse\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.benchmark.scenario, Scenario::Clear2Adverse);
        assert_eq!(cfg.benchmark.clients, 28);
        assert_eq!(cfg.fed.rounds, 100);
        assert_eq!(cfg.hidden, 16);
        assert_eq!(cfg.model_dims().input_channels, 6);
    }

    #[test]
    fn missing_required_key_named() {
        let err = RunConfig::parse("data.scenario = syn2real\n").unwrap_err();
        assert!(matches!(err, Error::MissingKey(ref k) if k == "seed"));
        let err = RunConfig::parse("seed = 1\n").unwrap_err();
        assert!(matches!(err, Error::MissingKey(ref k) if k == "data.scenario"));
    }

    #[test]
    fn unknown_key_line_precise() {
        let text = format!("{MINIMAL}fed.runds = 100\n");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Config { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("fed.runds"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_value_line_precise() {
        let text = format!("{MINIMAL}loss.tau = 1.5\n");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Config { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("loss.tau"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_overrides() {
        let text = "\
# experiment
seed = 3            # inline comment
data.scenario = syn2real
fed.rounds = 12
fed.agg = fedavg
fed.mode = semisup
augment.cutmix = off
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.fed.rounds, 12);
        assert_eq!(cfg.fed.aggregator, Aggregator::FedAvg);
        assert_eq!(cfg.fed.mode, TrainMode::Semisup);
        assert!(!cfg.fed.augment.cutmix);
        assert_eq!(cfg.benchmark.clients, 144);
    }

    #[test]
    fn malformed_line_reported() {
        let text = format!("{MINIMAL}this is not a pair\n");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Config { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = format!("{MINIMAL}seed = 9\n");
        assert!(matches!(
            RunConfig::parse(&text),
            Err(Error::Config { line: 3, .. })
        ));
    }
}
