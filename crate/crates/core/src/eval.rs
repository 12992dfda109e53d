//! Matching and ranking evaluation: Recall@K, MAP, NDCG and MRR.
//!
//! Every metric returns `None` when it is undefined for a query (no relevant
//! items, or no positive gain). Such queries are excluded from the means and
//! counted instead.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use rand::seq::SliceRandom;

use crate::data::{LogLabel, LogRecord};
use crate::error::{Error, Result};
use crate::index::{query_embedding, unit_normalize, ProductIndex};
use crate::model::{dot, Arm, EmbeddingModel};
use crate::par;
use crate::rng::Rng;
use crate::tokenizer::{encode, Side, TokenizerConfig, Vocabulary};

fn discount(rank: usize) -> f64 {
    // `rank` is 1-based.
    ((rank + 1) as f64).log2()
}

/// `|top-K ∩ relevant| / |relevant|`.
pub fn recall_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(id)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Average precision with everything past `cutoff` counting as missed.
pub fn average_precision<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, cutoff: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(cutoff).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// NDCG over the first `k` ranks. The ideal ordering takes the `k` largest
/// gains of the whole gain map, so relevant items missing from the ranking
/// still count against it.
pub fn ndcg_at<T: Eq + Hash>(ranked: &[T], gains: &HashMap<T, f64>, k: usize) -> Option<f64> {
    let mut ideal: Vec<f64> = gains.values().copied().filter(|&g| g > 0.0).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g / discount(i + 1)).sum();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gains.get(id).copied().unwrap_or(0.0) / discount(i + 1))
        .sum();
    Some(dcg / idcg)
}

/// NDCG over the whole ranking.
pub fn ndcg<T: Eq + Hash>(ranked: &[T], gains: &HashMap<T, f64>) -> Option<f64> {
    ndcg_at(ranked, gains, ranked.len().max(gains.len()))
}

/// Reciprocal rank of the first relevant item, 0 if none is ranked.
pub fn mrr<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(
        ranked
            .iter()
            .position(|id| relevant.contains(id))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64),
    )
}

/// One evaluation query with its logged outcomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalQuery {
    pub id: String,
    pub text: String,
    /// Purchased product ids with purchase counts.
    pub purchased: BTreeMap<String, u64>,
    pub impressed: BTreeSet<String>,
}

/// Groups log rows by query text. Products both purchased and impressed for
/// the same query are kept as purchased only.
pub fn eval_queries(log: &[LogRecord]) -> Vec<EvalQuery> {
    let mut by_text: BTreeMap<&str, EvalQuery> = BTreeMap::new();
    for r in log {
        let q = by_text.entry(&r.query).or_insert_with(|| EvalQuery {
            id: r.query.clone(),
            text: r.query.clone(),
            purchased: BTreeMap::new(),
            impressed: BTreeSet::new(),
        });
        match r.label {
            LogLabel::Purchased => *q.purchased.entry(r.product_id.clone()).or_insert(0) += r.count,
            LogLabel::Impressed => {
                q.impressed.insert(r.product_id.clone());
            }
        }
    }
    by_text
        .into_values()
        .map(|mut q| {
            let purchased = &q.purchased;
            q.impressed.retain(|p| !purchased.contains_key(p));
            q
        })
        .collect()
}

/// Evaluation corpus: every product logged for `queries`, padded with
/// uniformly drawn catalog products up to `size`. Keeps catalog order.
pub fn matching_corpus<'a>(
    catalog: &'a [(String, String)],
    queries: &[EvalQuery],
    size: usize,
    rng: &mut Rng,
) -> Vec<&'a (String, String)> {
    let mut keep: HashSet<&str> = HashSet::new();
    for q in queries {
        keep.extend(q.purchased.keys().map(String::as_str));
        keep.extend(q.impressed.iter().map(String::as_str));
    }
    let mut rest: Vec<usize> = (0..catalog.len()).filter(|&i| !keep.contains(catalog[i].0.as_str())).collect();
    rest.shuffle(rng);
    let extra = size.saturating_sub(keep.len()).min(rest.len());
    let mut chosen: HashSet<usize> = rest[..extra].iter().copied().collect();
    chosen.extend((0..catalog.len()).filter(|&i| keep.contains(catalog[i].0.as_str())));
    (0..catalog.len()).filter(|i| chosen.contains(i)).map(|i| &catalog[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryMetrics {
    pub recall: Option<f64>,
    pub average_precision: Option<f64>,
    pub matching_ndcg: Option<f64>,
    pub matching_mrr: Option<f64>,
    pub ranking_ndcg: Option<f64>,
    pub ranking_mrr: Option<f64>,
}

/// Per-query metrics keyed by query id, with means over defined values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub k: usize,
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub matching_excluded: usize,
    pub ranking_excluded: usize,
}

/// The six reported columns: name and per-query accessor.
type Column = (&'static str, fn(&QueryMetrics) -> Option<f64>);

const COLUMNS: [Column; 6] = [
    ("recall", |m| m.recall),
    ("map", |m| m.average_precision),
    ("matching_ndcg", |m| m.matching_ndcg),
    ("matching_mrr", |m| m.matching_mrr),
    ("ranking_ndcg", |m| m.ranking_ndcg),
    ("ranking_mrr", |m| m.ranking_mrr),
];

impl MetricReport {
    fn mean(&self, f: fn(&QueryMetrics) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.per_query.values().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        self.mean(|m| m.recall)
    }

    pub fn map(&self) -> Option<f64> {
        self.mean(|m| m.average_precision)
    }

    pub fn matching_ndcg(&self) -> Option<f64> {
        self.mean(|m| m.matching_ndcg)
    }

    pub fn matching_mrr(&self) -> Option<f64> {
        self.mean(|m| m.matching_mrr)
    }

    pub fn ranking_ndcg(&self) -> Option<f64> {
        self.mean(|m| m.ranking_ndcg)
    }

    pub fn ranking_mrr(&self) -> Option<f64> {
        self.mean(|m| m.ranking_mrr)
    }

    /// Combines a matching report and a ranking report over the same queries.
    pub fn merge(mut self, other: MetricReport) -> MetricReport {
        if self.k == 0 {
            self.k = other.k;
        }
        for (id, m) in other.per_query {
            let e = self.per_query.entry(id).or_default();
            e.recall = e.recall.or(m.recall);
            e.average_precision = e.average_precision.or(m.average_precision);
            e.matching_ndcg = e.matching_ndcg.or(m.matching_ndcg);
            e.matching_mrr = e.matching_mrr.or(m.matching_mrr);
            e.ranking_ndcg = e.ranking_ndcg.or(m.ranking_ndcg);
            e.ranking_mrr = e.ranking_mrr.or(m.ranking_mrr);
        }
        self.matching_excluded += other.matching_excluded;
        self.ranking_excluded += other.ranking_excluded;
        self
    }

    fn counted(&self, f: fn(&QueryMetrics) -> Option<f64>) -> usize {
        self.per_query.values().filter(|m| f(m).is_some()).count()
    }

    /// Aligned text table with one column per reported metric.
    pub fn to_table(&self) -> String {
        let headers = [
            format!("Recall@{}", self.k),
            "MAP".to_string(),
            "Matching NDCG".to_string(),
            "Matching MRR".to_string(),
            "Ranking NDCG".to_string(),
            "Ranking MRR".to_string(),
        ];
        let cells: Vec<String> = COLUMNS
            .iter()
            .map(|(_, f)| self.mean(*f).map_or("-".to_string(), |v| format!("{v:.4}")))
            .collect();
        let widths: Vec<usize> = headers.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut out = String::new();
        let row = |out: &mut String, items: &[String]| {
            let parts: Vec<String> = items.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "| {} |", parts.join(" | "));
        };
        row(&mut out, &headers);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        row(&mut out, &cells);
        let _ = writeln!(
            out,
            "matching queries: {} (excluded {}), ranking queries: {} (excluded {})",
            self.counted(|m| m.recall),
            self.matching_excluded,
            self.counted(|m| m.ranking_ndcg),
            self.ranking_excluded
        );
        out
    }

    /// `metric = value` lines; values print in shortest round-trip form.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k = {}", self.k);
        for (name, f) in COLUMNS {
            match self.mean(f) {
                Some(v) => writeln!(out, "{name} = {v}"),
                None => writeln!(out, "{name} = n/a"),
            }
            .expect("writing to a String cannot fail");
        }
        let _ = writeln!(out, "matching_queries = {}", self.counted(|m| m.recall));
        let _ = writeln!(out, "matching_excluded = {}", self.matching_excluded);
        let _ = writeln!(out, "ranking_queries = {}", self.counted(|m| m.ranking_ndcg));
        let _ = writeln!(out, "ranking_excluded = {}", self.ranking_excluded);
        out
    }
}

/// Ranks the whole `corpus` for every query and scores the top `k` with
/// purchased products as relevant.
pub fn run_matching_eval(
    model: &EmbeddingModel,
    vocab: &Vocabulary,
    config: &TokenizerConfig,
    queries: &[EvalQuery],
    corpus: &ProductIndex,
    k: usize,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let results = par::map(queries, |q| -> Result<Option<QueryMetrics>> {
        if q.purchased.is_empty() {
            return Ok(None);
        }
        let e = query_embedding(&q.text, model, vocab, config)?;
        let ranked: Vec<&str> = corpus
            .top_k_positions(&e, k, f64::NEG_INFINITY)?
            .into_iter()
            .map(|(i, _)| corpus.ids()[i].as_str())
            .collect();
        let relevant: HashSet<&str> = q.purchased.keys().map(String::as_str).collect();
        let gains: HashMap<&str, f64> = relevant.iter().map(|&p| (p, 1.0)).collect();
        Ok(Some(QueryMetrics {
            recall: recall_at_k(&ranked, &relevant, k),
            average_precision: average_precision(&ranked, &relevant, k),
            matching_ndcg: ndcg_at(&ranked, &gains, k),
            matching_mrr: mrr(&ranked, &relevant),
            ..QueryMetrics::default()
        }))
    });
    let mut report = MetricReport {
        k,
        ..MetricReport::default()
    };
    for (q, r) in queries.iter().zip(results) {
        match r? {
            Some(m) => {
                report.per_query.insert(q.id.clone(), m);
            }
            None => report.matching_excluded += 1,
        }
    }
    Ok(report)
}

/// Orders ids by score descending, then id ascending.
pub fn rank_by_score<'a>(scored: &mut [(&'a str, f64)]) -> Vec<&'a str> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.iter().map(|(id, _)| *id).collect()
}

fn product_embedding(text: &str, model: &EmbeddingModel, vocab: &Vocabulary, config: &TokenizerConfig) -> Result<Vec<f64>> {
    let mut e = model.embed(&encode(text, Side::Product, vocab, config), Arm::Product)?;
    unit_normalize(&mut e);
    Ok(e)
}

/// Ranks each query's purchased and impressed candidates. NDCG uses purchase
/// counts as gains, MRR uses purchased items as relevant.
pub fn run_ranking_eval(
    model: &EmbeddingModel,
    vocab: &Vocabulary,
    config: &TokenizerConfig,
    queries: &[EvalQuery],
    catalog: &HashMap<String, String>,
) -> Result<MetricReport> {
    let results = par::map(queries, |q| -> Result<Option<QueryMetrics>> {
        if q.purchased.is_empty() || q.impressed.is_empty() {
            return Ok(None);
        }
        let e = query_embedding(&q.text, model, vocab, config)?;
        let mut scored = Vec::with_capacity(q.purchased.len() + q.impressed.len());
        for id in q.purchased.keys().chain(q.impressed.iter()) {
            let text = catalog
                .get(id)
                .ok_or_else(|| Error::Format(format!("product {id:?} is not in the catalog")))?;
            scored.push((id.as_str(), dot(&e, &product_embedding(text, model, vocab, config)?)));
        }
        let ranked = rank_by_score(&mut scored);
        let relevant: HashSet<&str> = q.purchased.keys().map(String::as_str).collect();
        let gains: HashMap<&str, f64> = q.purchased.iter().map(|(p, &c)| (p.as_str(), c as f64)).collect();
        Ok(Some(QueryMetrics {
            ranking_ndcg: ndcg(&ranked, &gains),
            ranking_mrr: mrr(&ranked, &relevant),
            ..QueryMetrics::default()
        }))
    });
    let mut report = MetricReport::default();
    for (q, r) in queries.iter().zip(results) {
        match r? {
            Some(m) => {
                report.per_query.insert(q.id.clone(), m);
            }
            None => report.ranking_excluded += 1,
        }
    }
    Ok(report)
}

/// Model scores of eval pairs grouped by outcome.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSamples {
    pub purchased: Vec<f64>,
    pub impressed: Vec<f64>,
    pub random: Vec<f64>,
}

/// Scores every logged pair plus `random_per_query` uniformly drawn catalog
/// products not logged for the query.
pub fn score_samples(
    model: &EmbeddingModel,
    vocab: &Vocabulary,
    config: &TokenizerConfig,
    queries: &[EvalQuery],
    catalog: &[(String, String)],
    random_per_query: usize,
    rng: &mut Rng,
) -> Result<ScoreSamples> {
    let texts: HashMap<&str, &str> = catalog.iter().map(|(id, t)| (id.as_str(), t.as_str())).collect();
    let mut out = ScoreSamples::default();
    for q in queries {
        let e = query_embedding(&q.text, model, vocab, config)?;
        let score = |id: &str| -> Result<f64> {
            let text = texts
                .get(id)
                .ok_or_else(|| Error::Format(format!("product {id:?} is not in the catalog")))?;
            Ok(dot(&e, &product_embedding(text, model, vocab, config)?))
        };
        for id in q.purchased.keys() {
            out.purchased.push(score(id)?);
        }
        for id in &q.impressed {
            out.impressed.push(score(id)?);
        }
        if catalog.len() > q.purchased.len() + q.impressed.len() {
            let mut drawn = 0;
            while drawn < random_per_query {
                let (id, _) = catalog.choose(rng).expect("catalog is not empty");
                if q.purchased.contains_key(id) || q.impressed.contains(id) {
                    continue;
                }
                out.random.push(score(id)?);
                drawn += 1;
            }
        }
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::build_index;
    use crate::model::{ModelConfig, Normalization};
    use crate::tokenizer::build_vocabulary;

    fn set<'a>(items: &[&'a str]) -> HashSet<&'a str> {
        items.iter().copied().collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&["a", "b", "c"], &set(&["b", "d"]), 2), Some(0.5));
        assert_eq!(recall_at_k(&["a", "b"], &set(&["a", "b"]), 2), Some(1.0));
        assert_eq!(recall_at_k(&["a", "b"], &set(&["x"]), 2), Some(0.0));
        assert_eq!(recall_at_k(&["a"], &set(&[]), 2), None);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&["r"], &set(&["r"]), 100), Some(1.0));
        assert_eq!(average_precision(&["x", "r", "y", "s"], &set(&["r", "s"]), 100), Some(0.5));
        assert_eq!(average_precision(&["x", "y"], &set(&["r"]), 100), Some(0.0));
        assert_eq!(average_precision(&["x", "r", "y", "s"], &set(&["r", "s"]), 2), Some(0.25));
    }

    #[test]
    fn ndcg_examples() {
        let gains: HashMap<&str, f64> = [("a", 1.0), ("b", 0.0)].into_iter().collect();
        assert_eq!(ndcg(&["a", "b"], &gains), Some(1.0));
        let v = ndcg(&["b", "a"], &gains).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        let single: HashMap<&str, f64> = [("p", 3.0)].into_iter().collect();
        assert_eq!(ndcg(&["p"], &single), Some(1.0));
        let zero: HashMap<&str, f64> = [("a", 0.0)].into_iter().collect();
        assert_eq!(ndcg(&["a"], &zero), None);

        // Counts {2, 1, 0} ranked as [0, 2, 1].
        let g: HashMap<&str, f64> = [("x", 2.0), ("y", 1.0), ("z", 0.0)].into_iter().collect();
        let dcg = 2.0 / 3f64.log2() + 1.0 / 4f64.log2();
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert!((ndcg(&["z", "x", "y"], &g).unwrap() - dcg / idcg).abs() < 1e-15);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&["r", "x"], &set(&["r"])), Some(1.0));
        assert_eq!(mrr(&["a", "b", "c", "r"], &set(&["r"])), Some(0.25));
        assert_eq!(mrr(&["a", "b"], &set(&["r"])), Some(0.0));
        assert_eq!(mrr(&["i", "p"], &set(&["p"])), Some(0.5));
    }

    #[test]
    fn monotone_in_k() {
        let ranked = ["a", "r1", "b", "r2", "c", "r3"];
        let rel = set(&["r1", "r2", "r3", "r4"]);
        let mut prev = (0.0, 0.0);
        for k in 1..=8 {
            let r = recall_at_k(&ranked, &rel, k).unwrap();
            let ap = average_precision(&ranked, &rel, k).unwrap();
            assert!(r >= prev.0 && ap >= prev.1);
            prev = (r, ap);
        }
    }

    #[test]
    fn eval_queries_group_and_deduplicate() {
        let rec = |q: &str, p: &str, label, count| LogRecord {
            query: q.into(),
            product_id: p.into(),
            product_text: String::new(),
            label,
            count,
        };
        let log = vec![
            rec("q", "p1", LogLabel::Purchased, 2),
            rec("q", "p1", LogLabel::Purchased, 1),
            rec("q", "p1", LogLabel::Impressed, 1),
            rec("q", "p2", LogLabel::Impressed, 1),
            rec("r", "p3", LogLabel::Impressed, 1),
        ];
        let qs = eval_queries(&log);
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].purchased["p1"], 3);
        assert_eq!(qs[0].impressed.iter().collect::<Vec<_>>(), ["p2"]);
        assert!(qs[1].purchased.is_empty());
    }

    fn fixture() -> (EmbeddingModel, Vocabulary, TokenizerConfig, Vec<(String, String)>) {
        let cfg = TokenizerConfig::unigrams(100);
        let catalog: Vec<(String, String)> = ["red dress", "blue dress", "red shoe", "green hat", "blue hat", "red hat"]
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t.to_string()))
            .collect();
        let vocab = build_vocabulary(catalog.iter().map(|(_, t)| (Side::Product, t.as_str())), &cfg).unwrap();
        let mc = ModelConfig {
            dim: 4,
            normalization: Normalization::None,
            ..ModelConfig::default()
        };
        let model = EmbeddingModel::zeros(mc, vocab.size(), vocab.oov_bins()).unwrap();
        (model, vocab, cfg, catalog)
    }

    fn query(text: &str, purchased: &[(&str, u64)], impressed: &[&str]) -> EvalQuery {
        EvalQuery {
            id: text.into(),
            text: text.into(),
            purchased: purchased.iter().map(|(p, c)| (p.to_string(), *c)).collect(),
            impressed: impressed.iter().map(|p| p.to_string()).collect(),
        }
    }

    /// Sets each word row to a one-hot of its own dimension.
    fn one_hot(model: &mut EmbeddingModel, vocab: &Vocabulary, words: &[(&str, usize)]) {
        for (w, d) in words {
            let id = vocab.get(crate::tokenizer::TokenClass::Unigram, w).unwrap() as usize;
            model.tables_mut()[0].row_mut(id)[*d] = 1.0;
        }
    }

    #[test]
    fn matching_on_hand_built_fixture() {
        let (mut model, vocab, cfg, catalog) = fixture();
        one_hot(&mut model, &vocab, &[("red", 0), ("blue", 1), ("dress", 2), ("shoe", 3), ("hat", 3)]);
        let index = build_index(catalog.iter().cloned(), &model, &vocab, &cfg).unwrap();
        // "red dress": p0 = 1, p1 = p2 = 1/2, p5 = 1/2, p3 = 0, p4 = 0.
        // Order: p0, then p1, p2, p5 tied at 0.5 by id, then p3, p4.
        let q = query("red dress", &[("p2", 1), ("p4", 1)], &["p0"]);
        let report = run_matching_eval(&model, &vocab, &cfg, &[q], &index, 3).unwrap();
        let m = &report.per_query["red dress"];
        assert_eq!(m.recall, Some(0.5));
        assert_eq!(m.average_precision, Some((1.0 / 3.0) / 2.0));
        assert_eq!(m.matching_mrr, Some(1.0 / 3.0));
        let expected_ndcg = (1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((m.matching_ndcg.unwrap() - expected_ndcg).abs() < 1e-15);
    }

    #[test]
    fn equal_scores_fall_back_to_id_order() {
        let (model, vocab, cfg, catalog) = fixture();
        let index = build_index(catalog.iter().cloned(), &model, &vocab, &cfg).unwrap();
        let q = query("anything", &[("p1", 1), ("p4", 2)], &["p0", "p3"]);
        let report = run_matching_eval(&model, &vocab, &cfg, std::slice::from_ref(&q), &index, 2).unwrap();
        let m = &report.per_query["anything"];
        assert_eq!(m.recall, Some(0.5));
        assert_eq!(m.matching_mrr, Some(0.5));
        let texts: HashMap<String, String> = catalog.iter().cloned().collect();
        let r = run_ranking_eval(&model, &vocab, &cfg, &[q], &texts).unwrap();
        // Candidates p0, p1, p3, p4 all score 0 and stay in id order.
        let m = &r.per_query["anything"];
        assert_eq!(m.ranking_mrr, Some(0.5));
        let dcg = 1.0 / 3f64.log2() + 2.0 / 5f64.log2();
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert!((m.ranking_ndcg.unwrap() - dcg / idcg).abs() < 1e-15);
    }

    #[test]
    fn corpus_of_purchases_gives_full_recall() {
        let (mut model, vocab, cfg, catalog) = fixture();
        one_hot(&mut model, &vocab, &[("red", 0), ("blue", 1), ("dress", 2), ("hat", 3)]);
        let qs = vec![query("red dress", &[("p0", 1), ("p5", 1)], &[]), query("blue hat", &[("p4", 1)], &[])];
        let corpus: Vec<(String, String)> = catalog.iter().filter(|(id, _)| ["p0", "p4", "p5"].contains(&id.as_str())).cloned().collect();
        let index = build_index(corpus, &model, &vocab, &cfg).unwrap();
        let report = run_matching_eval(&model, &vocab, &cfg, &qs, &index, 100).unwrap();
        assert_eq!(report.recall(), Some(1.0));
        assert_eq!(report.ranking_excluded, 0);
        let ranking = run_ranking_eval(&model, &vocab, &cfg, &qs, &catalog.iter().cloned().collect()).unwrap();
        assert_eq!(ranking.ranking_excluded, 2);
    }

    #[test]
    fn ranking_purchase_first_gives_mrr_one() {
        let (mut model, vocab, cfg, catalog) = fixture();
        one_hot(&mut model, &vocab, &[("red", 0), ("blue", 1), ("dress", 2), ("hat", 3)]);
        let q = query("red dress", &[("p0", 1)], &["p4", "p3"]);
        let report = run_ranking_eval(&model, &vocab, &cfg, &[q], &catalog.iter().cloned().collect()).unwrap();
        assert_eq!(report.ranking_mrr(), Some(1.0));
        assert_eq!(report.ranking_ndcg(), Some(1.0));
    }

    #[test]
    fn corpus_keeps_logged_products() {
        let (_, _, _, catalog) = fixture();
        let q = query("x", &[("p5", 1)], &["p2"]);
        let mut rng = crate::rng::seeded(1);
        let c = matching_corpus(&catalog, std::slice::from_ref(&q), 4, &mut rng);
        assert_eq!(c.len(), 4);
        assert!(c.iter().any(|(id, _)| id == "p5") && c.iter().any(|(id, _)| id == "p2"));
        assert_eq!(matching_corpus(&catalog, &[q], 100, &mut rng).len(), 6);
    }

    #[test]
    fn report_formats() {
        let mut r = MetricReport {
            k: 100,
            ..MetricReport::default()
        };
        r.per_query.insert(
            "a".into(),
            QueryMetrics {
                recall: Some(0.5),
                ranking_mrr: Some(1.0),
                ..QueryMetrics::default()
            },
        );
        r.per_query.insert(
            "b".into(),
            QueryMetrics {
                recall: Some(1.0),
                ..QueryMetrics::default()
            },
        );
        assert_eq!(r.recall(), Some(0.75));
        let kv = r.to_kv();
        assert!(kv.contains("recall = 0.75\n"));
        assert!(kv.contains("map = n/a\n"));
        assert!(kv.contains("ranking_mrr = 1\n"));
        let table = r.to_table();
        assert!(table.contains("Recall@100"));
        assert!(table.contains("0.7500"));
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
