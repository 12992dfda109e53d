//! Trains the loss, tokenization and embedding-sharing variants on the two
//! synthetic fixtures and prints one metric row per run.
//!
//! ```text
//! cargo run --release --example ablation -- [seed]
//! ```

use std::time::Instant;

use semmatch::data::{gen_synthetic, SynthConfig, SyntheticData};
use semmatch::pipeline::{fit_and_evaluate, Setup};
use semmatch::tokenizer::TokenClass;
use semmatch::training::TrainConfig;
use semmatch::{LossKind, LossSpec, ModelConfig, TokenizerConfig};

fn desk_tokenizer() -> TokenizerConfig {
    let mut t = TokenizerConfig::default();
    t.budgets.insert(TokenClass::Unigram, 1_250);
    t.budgets.insert(TokenClass::Ngram(2), 250);
    t.budgets.insert(TokenClass::CharTrigram, 640);
    t.oov_bins = 5_000;
    t
}

fn unigrams(budget: usize, oov_bins: usize) -> TokenizerConfig {
    TokenizerConfig {
        oov_bins,
        ..TokenizerConfig::unigrams(budget)
    }
}

fn run(name: &str, data: &SyntheticData, setup: &Setup) -> semmatch::Result<()> {
    let t = Instant::now();
    let (fitted, report) = fit_and_evaluate(data, setup, 100)?;
    println!(
        "{name:<26} recall {:.4}  map {:.4}  rank-ndcg {:.4}  rank-mrr {:.4}  params {:>8}  {:.1}s",
        report.recall().unwrap_or(f64::NAN),
        report.map().unwrap_or(f64::NAN),
        report.ranking_ndcg().unwrap_or(f64::NAN),
        report.ranking_mrr().unwrap_or(f64::NAN),
        fitted.model.parameter_count(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> semmatch::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let base = Setup {
        tokenizer: desk_tokenizer(),
        model: ModelConfig {
            dim: 64,
            ..ModelConfig::default()
        },
        loss: LossSpec::hinge3(2),
        train: TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    };
    let with = |f: &dyn Fn(&mut Setup)| {
        let mut s = base.clone();
        f(&mut s);
        s
    };

    let standard = gen_synthetic(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    println!("standard fixture");
    run("hinge3 L2", &standard, &base)?;
    run("hinge2 L2", &standard, &with(&|s| s.loss = LossSpec::hinge2(2)))?;
    run("MSE", &standard, &with(&|s| s.loss = LossSpec::new(LossKind::Mse, 2)))?;
    run("decoupled, dim 32", &standard, &with(&|s| {
        s.model.shared = false;
        s.model.dim = 32;
    }))?;

    let long_tail = gen_synthetic(&SynthConfig {
        products: 50_000,
        products_per_signature: 1,
        morph_rate: 0.2,
        code_rate: 0.5,
        seed,
        ..SynthConfig::default()
    })?;
    println!("long-tail fixture");
    run("unigrams 1250", &long_tail, &with(&|s| s.tokenizer = unigrams(1_250, 0)))?;
    run("+ bigrams + char3", &long_tail, &with(&|s| s.tokenizer.oov_bins = 0))?;
    run("+ OOV 5000", &long_tail, &base)?;
    run("unigrams 2000", &long_tail, &with(&|s| s.tokenizer = unigrams(2_000, 0)))?;
    run("unigrams 500 + OOV 1500", &long_tail, &with(&|s| s.tokenizer = unigrams(500, 1_500)))?;
    Ok(())
}
