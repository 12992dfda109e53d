use semmatch::data::{gen_synthetic, SynthConfig, SyntheticData};
use semmatch::eval::eval_queries;
use semmatch::index::{build_index, top_k};
use semmatch::pipeline::{evaluate, fit, fit_and_evaluate, Setup};
use semmatch::training::TrainConfig;
use semmatch::{LossSpec, ModelConfig, TokenClass, TokenizerConfig};

fn small_data() -> SyntheticData {
    gen_synthetic(&SynthConfig {
        products: 1_500,
        queries: 300,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_setup() -> Setup {
    let mut tokenizer = TokenizerConfig::default();
    tokenizer.budgets.insert(TokenClass::Unigram, 500);
    tokenizer.budgets.insert(TokenClass::Ngram(2), 100);
    tokenizer.budgets.insert(TokenClass::CharTrigram, 300);
    tokenizer.oov_bins = 1_000;
    Setup {
        tokenizer,
        model: ModelConfig {
            dim: 16,
            ..ModelConfig::default()
        },
        loss: LossSpec::hinge3(2),
        train: TrainConfig {
            epochs: 3,
            batch_size: 64,
            seed: 5,
            ..TrainConfig::default()
        },
    }
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let data = small_data();
    let setup = small_setup();
    let run = || {
        let (fitted, report) = fit_and_evaluate(&data, &setup, 50).unwrap();
        let mut ckpt = Vec::new();
        fitted.model.write_to(&mut ckpt).unwrap();
        (report.to_kv(), ckpt)
    };
    let one = in_pool(1, run);
    let four = in_pool(4, run);
    assert_eq!(one.0, four.0);
    assert_eq!(one.1, four.1);
}

#[test]
fn training_beats_an_untrained_model() {
    let data = small_data();
    let mut setup = small_setup();
    let (fitted, trained) = fit_and_evaluate(&data, &setup, 50).unwrap();
    let losses = &fitted.history.epoch_loss;
    assert_eq!(losses.len(), 3);
    assert!(losses[2] < losses[0], "{losses:?}");

    setup.train.epochs = 0;
    let (_, untrained) = fit_and_evaluate(&data, &setup, 50).unwrap();
    assert!(trained.recall().unwrap() > untrained.recall().unwrap());
    assert!(trained.ranking_ndcg().unwrap() > untrained.ranking_ndcg().unwrap());
}

#[test]
fn retrieval_respects_k_and_threshold() {
    let data = small_data();
    let setup = small_setup();
    let fitted = fit(&data.train_log, &data.catalog, &setup).unwrap();
    let index = build_index(data.catalog.iter().cloned(), &fitted.model, &fitted.vocab, &setup.tokenizer).unwrap();
    let queries = eval_queries(&data.eval_log);
    for q in queries.iter().take(20) {
        let all = top_k(&q.text, &index, &fitted.model, &fitted.vocab, &setup.tokenizer, 25, -1.0).unwrap();
        assert_eq!(all.hits.len(), 25);
        assert!(all.hits.windows(2).all(|w| w[0].1 >= w[1].1));
        let cut = top_k(&q.text, &index, &fitted.model, &fitted.vocab, &setup.tokenizer, 25, 0.55).unwrap();
        assert!(cut.hits.iter().all(|(_, s)| *s >= 0.55));
        assert_eq!(cut.hits[..], all.hits[..cut.hits.len()]);
    }
}

#[test]
fn evaluation_counts_every_query() {
    let data = small_data();
    let setup = small_setup();
    let fitted = fit(&data.train_log, &data.catalog, &setup).unwrap();
    let queries = eval_queries(&data.eval_log);
    let (report, index) = evaluate(&fitted, &setup.tokenizer, &queries, &data.catalog, 50).unwrap();
    assert_eq!(index.len(), data.catalog.len());
    let scored = report.per_query.values().filter(|m| m.recall.is_some()).count();
    assert_eq!(scored + report.matching_excluded, queries.len());
    for m in report.per_query.values() {
        for v in [m.recall, m.average_precision, m.matching_ndcg, m.ranking_ndcg].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
