//! End-to-end helpers: fit a model on a training log and evaluate it.

use std::collections::HashMap;

use crate::data::{LogRecord, SyntheticData};
use crate::error::Result;
use crate::eval::{eval_queries, run_matching_eval, run_ranking_eval, EvalQuery, MetricReport};
use crate::index::{build_index, ProductIndex};
use crate::losses::LossSpec;
use crate::model::{EmbeddingModel, ModelConfig};
use crate::rng;
use crate::tokenizer::{build_vocabulary, encode, Side, TokenizerConfig, Vocabulary};
use crate::training::{preprocess_logs, train, History, TrainConfig, TrainData};

/// Everything needed to train one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub vocab: Vocabulary,
    pub model: EmbeddingModel,
    pub history: History,
}

/// Vocabulary over the query and product texts of a training log.
pub fn log_vocabulary(log: &[LogRecord], config: &TokenizerConfig) -> Result<Vocabulary> {
    let corpus = log
        .iter()
        .flat_map(|r| [(Side::Query, r.query.as_str()), (Side::Product, r.product_text.as_str())]);
    build_vocabulary(corpus, config)
}

/// Builds the vocabulary from `log`, initializes a model and trains it with
/// random negatives drawn from `catalog`.
pub fn fit(log: &[LogRecord], catalog: &[(String, String)], setup: &Setup) -> Result<Fitted> {
    let vocab = log_vocabulary(log, &setup.tokenizer)?;
    fit_with_vocabulary(log, catalog, setup, vocab)
}

pub fn fit_with_vocabulary(
    log: &[LogRecord],
    catalog: &[(String, String)],
    setup: &Setup,
    vocab: Vocabulary,
) -> Result<Fitted> {
    let (records, _) = preprocess_logs(log.iter().cloned(), &vocab, &setup.tokenizer)?;
    let bags = catalog
        .iter()
        .map(|(_, t)| encode(t, Side::Product, &vocab, &setup.tokenizer))
        .collect();
    let data = TrainData::new(records, bags)?;
    let mut init = rng::derive(setup.train.seed, "model-init");
    let mut model = EmbeddingModel::new(setup.model, vocab.size(), vocab.oov_bins(), &mut init)?;
    let history = train(&mut model, &data, &setup.loss, &setup.train)?;
    Ok(Fitted { vocab, model, history })
}

/// Matching over the whole catalog plus ranking of logged candidates.
pub fn evaluate(
    fitted: &Fitted,
    config: &TokenizerConfig,
    queries: &[EvalQuery],
    catalog: &[(String, String)],
    k: usize,
) -> Result<(MetricReport, ProductIndex)> {
    let index = build_index(catalog.iter().map(|(id, t)| (id.as_str(), t.as_str())), &fitted.model, &fitted.vocab, config)?;
    let matching = run_matching_eval(&fitted.model, &fitted.vocab, config, queries, &index, k)?;
    let texts: HashMap<String, String> = catalog.iter().cloned().collect();
    let ranking = run_ranking_eval(&fitted.model, &fitted.vocab, config, queries, &texts)?;
    Ok((matching.merge(ranking), index))
}

/// Fits on the synthetic training log and evaluates on its eval log.
pub fn fit_and_evaluate(data: &SyntheticData, setup: &Setup, k: usize) -> Result<(Fitted, MetricReport)> {
    let fitted = fit(&data.train_log, &data.catalog, setup)?;
    let queries = eval_queries(&data.eval_log);
    let (report, _) = evaluate(&fitted, &setup.tokenizer, &queries, &data.catalog, k)?;
    Ok((fitted, report))
}
