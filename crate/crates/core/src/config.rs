//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. All randomness flows from the single `seed` key.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::model::{ModelConfig, Normalization};
use crate::tokenizer::{TokenClass, TokenizerConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub threshold: f64,
    /// Matching corpus size, logged products plus random distractors.
    pub corpus_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 100,
            threshold: 0.55,
            corpus_size: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}: expected true or false"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or("auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.tokenizer;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,

            "tokenizer.lowercase" => t.lowercase = parse_bool(key, v)?,
            "tokenizer.unigrams" => t.use_unigrams = parse_bool(key, v)?,
            "tokenizer.char_trigrams" => t.use_char_trigrams = parse_bool(key, v)?,
            "tokenizer.ngram_orders" => {
                t.ngram_orders = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|n| parse(key, n.trim())).collect::<Result<_>>()?
                }
            }
            "tokenizer.oov_bins" => t.oov_bins = parse(key, v)?,
            "tokenizer.query_max_tokens" => t.query_max_tokens = parse_opt(key, v)?,
            "tokenizer.product_max_tokens" => t.product_max_tokens = parse_opt(key, v)?,

            "model.dim" => self.model.dim = parse(key, v)?,
            "model.shared" => self.model.shared = parse_bool(key, v)?,
            "model.normalization" => self.model.normalization = parse::<Normalization>(key, v)?,
            "model.bn_momentum" => self.model.bn_momentum = parse(key, v)?,
            "model.bn_epsilon" => self.model.bn_epsilon = parse(key, v)?,

            "loss.kind" => self.loss.kind = parse::<LossKind>(key, v)?,
            "loss.m" => self.loss.m = parse(key, v)?,
            "loss.eps_plus" => self.loss.eps_plus = parse(key, v)?,
            "loss.eps_minus" => self.loss.eps_minus = parse(key, v)?,
            "loss.eps_zero" => self.loss.eps_zero = parse(key, v)?,

            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.shuffle" => self.train.shuffle = parse_bool(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam.eps = parse(key, v)?,
            "train.impressed_per_purchase" => self.train.impressed_per_purchase = parse(key, v)?,
            "train.random_per_purchase" => self.train.random_per_purchase = parse(key, v)?,

            "synth.concepts" => self.synth.concepts = parse(key, v)?,
            "synth.synonyms" => self.synth.synonyms = parse(key, v)?,
            "synth.products" => self.synth.products = parse(key, v)?,
            "synth.products_per_signature" => self.synth.products_per_signature = parse(key, v)?,
            "synth.queries" => self.synth.queries = parse(key, v)?,
            "synth.eval_fraction" => self.synth.eval_fraction = parse(key, v)?,
            "synth.typo_rate" => self.synth.typo_rate = parse(key, v)?,
            "synth.morph_rate" => self.synth.morph_rate = parse(key, v)?,
            "synth.code_rate" => self.synth.code_rate = parse(key, v)?,
            "synth.order_pair_rate" => self.synth.order_pair_rate = parse(key, v)?,
            "synth.impressed_per_purchase" => self.synth.impressed_per_purchase = parse(key, v)?,

            "eval.k" => self.eval.k = parse(key, v)?,
            "eval.threshold" => self.eval.threshold = parse(key, v)?,
            "eval.corpus_size" => self.eval.corpus_size = parse(key, v)?,

            _ => {
                if let Some(class) = key.strip_prefix("tokenizer.budget.") {
                    let class: TokenClass = class
                        .parse()
                        .map_err(|_| Error::Config(format!("unknown config key {key:?}")))?;
                    t.budgets.insert(class, parse(key, v)?);
                } else {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
        RunConfig::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate(self.model.normalization)?;
        self.synth.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval.threshold must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Generator settings with the run seed applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Every setting, in a form `parse_str` reads back to the same config.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let t = &self.tokenizer;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("workers".into(), self.workers.to_string()),
            ("tokenizer.lowercase".into(), t.lowercase.to_string()),
            ("tokenizer.unigrams".into(), t.use_unigrams.to_string()),
            ("tokenizer.char_trigrams".into(), t.use_char_trigrams.to_string()),
            (
                "tokenizer.ngram_orders".into(),
                if t.ngram_orders.is_empty() {
                    "none".into()
                } else {
                    t.ngram_orders.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
                },
            ),
            ("tokenizer.oov_bins".into(), t.oov_bins.to_string()),
            ("tokenizer.query_max_tokens".into(), show_opt(t.query_max_tokens)),
            ("tokenizer.product_max_tokens".into(), show_opt(t.product_max_tokens)),
        ];
        for (class, budget) in &t.budgets {
            out.push((format!("tokenizer.budget.{class}"), budget.to_string()));
        }
        let m = &self.model;
        let l = &self.loss;
        let tr = &self.train;
        let s = &self.synth;
        let e = &self.eval;
        out.extend([
            ("model.dim".into(), m.dim.to_string()),
            ("model.shared".into(), m.shared.to_string()),
            ("model.normalization".into(), m.normalization.to_string()),
            ("model.bn_momentum".into(), m.bn_momentum.to_string()),
            ("model.bn_epsilon".into(), m.bn_epsilon.to_string()),
            ("loss.kind".into(), l.kind.to_string()),
            ("loss.m".into(), l.m.to_string()),
            ("loss.eps_plus".into(), l.eps_plus.to_string()),
            ("loss.eps_minus".into(), l.eps_minus.to_string()),
            ("loss.eps_zero".into(), l.eps_zero.to_string()),
            ("train.batch_size".into(), tr.batch_size.to_string()),
            ("train.epochs".into(), tr.epochs.to_string()),
            ("train.shuffle".into(), tr.shuffle.to_string()),
            ("train.lr".into(), tr.adam.lr.to_string()),
            ("train.beta1".into(), tr.adam.beta1.to_string()),
            ("train.beta2".into(), tr.adam.beta2.to_string()),
            ("train.adam_eps".into(), tr.adam.eps.to_string()),
            ("train.impressed_per_purchase".into(), tr.impressed_per_purchase.to_string()),
            ("train.random_per_purchase".into(), tr.random_per_purchase.to_string()),
            ("synth.concepts".into(), s.concepts.to_string()),
            ("synth.synonyms".into(), s.synonyms.to_string()),
            ("synth.products".into(), s.products.to_string()),
            ("synth.products_per_signature".into(), s.products_per_signature.to_string()),
            ("synth.queries".into(), s.queries.to_string()),
            ("synth.eval_fraction".into(), s.eval_fraction.to_string()),
            ("synth.typo_rate".into(), s.typo_rate.to_string()),
            ("synth.morph_rate".into(), s.morph_rate.to_string()),
            ("synth.code_rate".into(), s.code_rate.to_string()),
            ("synth.order_pair_rate".into(), s.order_pair_rate.to_string()),
            ("synth.impressed_per_purchase".into(), s.impressed_per_purchase.to_string()),
            ("eval.k".into(), e.k.to_string()),
            ("eval.threshold".into(), e.threshold.to_string()),
            ("eval.corpus_size".into(), e.corpus_size.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse_str("# comment\nseed = 7\n\nmodel.dim = 64\nloss.kind = mse\ntokenizer.budget.ngram3 = 10\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.loss.kind, LossKind::Mse);
        assert_eq!(cfg.tokenizer.budget(TokenClass::Ngram(3)), 10);
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(cfg.synth_config().seed, 7);

        let err = RunConfig::parse_str("model.dimension = 3").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        assert!(RunConfig::parse_str("tokenizer.budget.char4 = 3").is_err());
        assert!(RunConfig::parse_str("seed 7").is_err());
        assert!(RunConfig::parse_str("model.shared = maybe").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("tokenizer.ngram_orders=2,3").unwrap();
        cfg.set_pair("tokenizer.query_max_tokens=40").unwrap();
        cfg.set_pair("train.lr=0.0005").unwrap();
        cfg.set_pair("model.normalization=layer").unwrap();
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse_str(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut cfg = RunConfig::default();
        cfg.set("eval.threshold", "1.5").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("loss.m", "3").unwrap();
        assert!(cfg.validate().is_err());
    }
}
