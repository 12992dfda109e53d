//! Exact top-k cosine retrieval over precomputed product embeddings.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{norm2, read_f64s, read_u32, read_u64, write_f64s, Arm, EmbeddingModel};
use crate::par;
use crate::tokenizer::{encode, Side, TokenizerConfig, Vocabulary};

const MAGIC: &[u8; 4] = b"SMIX";
const VERSION: u32 = 1;

/// Unit-normalized inference-phase product embeddings, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    fingerprint: u64,
    positions: HashMap<String, usize>,
}

/// Scales `v` to unit length in place; the zero vector stays zero.
pub fn unit_normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit query embedding for `text`.
pub fn query_embedding(text: &str, model: &EmbeddingModel, vocab: &Vocabulary, config: &TokenizerConfig) -> Result<Vec<f64>> {
    let bag = encode(text, Side::Query, vocab, config);
    let mut e = model.embed(&bag, Arm::Query)?;
    unit_normalize(&mut e);
    Ok(e)
}

pub fn build_index<I, S, T>(products: I, model: &EmbeddingModel, vocab: &Vocabulary, config: &TokenizerConfig) -> Result<ProductIndex>
where
    I: IntoIterator<Item = (S, T)>,
    S: Into<String>,
    T: AsRef<str>,
{
    let mut ids = Vec::new();
    let mut texts = Vec::new();
    let mut positions = HashMap::new();
    for (id, text) in products {
        let id = id.into();
        if positions.insert(id.clone(), ids.len()).is_some() {
            return Err(Error::DuplicateProduct(id));
        }
        ids.push(id);
        texts.push(text.as_ref().to_owned());
    }
    let dim = model.dim();
    let rows = par::map(&texts, |t| {
        let bag = encode(t, Side::Product, vocab, config);
        model.embed(&bag, Arm::Product).map(|mut e| {
            unit_normalize(&mut e);
            e
        })
    });
    let mut data = Vec::with_capacity(ids.len() * dim);
    for r in rows {
        data.extend(r?);
    }
    Ok(ProductIndex {
        ids,
        dim,
        data,
        fingerprint: model.fingerprint(),
        positions,
    })
}

/// Ranked retrieval output.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub query: String,
    pub threshold: f64,
    pub hits: Vec<(String, f64)>,
}

impl ProductIndex {
    pub fn from_parts(ids: Vec<String>, dim: usize, data: Vec<f64>, fingerprint: u64) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} ids × {dim} dims needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateProduct(id.clone()));
            }
        }
        Ok(ProductIndex {
            ids,
            dim,
            data,
            fingerprint,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Dot product of `query` with every stored embedding.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("query of dim {} against index of dim {}", query.len(), self.dim)));
        }
        let mut out = vec![0.0; self.len()];
        const CHUNK: usize = 4096;
        par::for_each_chunk_mut(&mut out, CHUNK, |c, chunk| {
            for (j, o) in chunk.iter_mut().enumerate() {
                let e = self.embedding(c * CHUNK + j);
                *o = e.iter().zip(query).map(|(a, b)| a * b).sum();
            }
        });
        Ok(out)
    }

    fn rank_order(&self, scores: &[f64], a: usize, b: usize) -> Ordering {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.ids[a].cmp(&self.ids[b]))
    }

    /// Positions and scores of up to `k` products scoring at least
    /// `threshold`, by score descending then id ascending.
    pub fn top_k_positions(&self, query: &[f64], k: usize, threshold: f64) -> Result<Vec<(usize, f64)>> {
        let scores = self.scores(query)?;
        let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
        if k == 0 {
            return Ok(Vec::new());
        }
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, |&a, &b| self.rank_order(&scores, a, b));
            cand.truncate(k);
        }
        cand.sort_unstable_by(|&a, &b| self.rank_order(&scores, a, b));
        Ok(cand.into_iter().map(|i| (i, scores[i])).collect())
    }

    /// Every product ranked, by score descending then id ascending.
    pub fn rank_all(&self, query: &[f64]) -> Result<Vec<usize>> {
        Ok(self
            .top_k_positions(query, self.len(), f64::NEG_INFINITY)?
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        write_f64s(&mut w, &self.data)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let count = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let fingerprint = read_u64(&mut r)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| Error::Format("product id is not UTF-8".into()))?);
        }
        let data = read_f64s(&mut r, count * dim)?;
        ProductIndex::from_parts(ids, dim, data, fingerprint)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(Error::io_at(path))?);
        self.write_to(&mut w)?;
        w.flush().map_err(Error::io_at(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        ProductIndex::read_from(BufReader::new(File::open(path).map_err(Error::io_at(path))?))
    }
}

pub fn top_k(
    query_text: &str,
    index: &ProductIndex,
    model: &EmbeddingModel,
    vocab: &Vocabulary,
    config: &TokenizerConfig,
    k: usize,
    threshold: f64,
) -> Result<MatchResult> {
    let q = query_embedding(query_text, model, vocab, config)?;
    let hits = index
        .top_k_positions(&q, k, threshold)?
        .into_iter()
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect();
    Ok(MatchResult {
        query: query_text.to_owned(),
        threshold,
        hits,
    })
}

/// Model, vocabulary and index checked to belong together.
pub struct Retriever<'a> {
    pub model: &'a EmbeddingModel,
    pub vocab: &'a Vocabulary,
    pub config: &'a TokenizerConfig,
    pub index: &'a ProductIndex,
}

impl<'a> Retriever<'a> {
    pub fn new(model: &'a EmbeddingModel, vocab: &'a Vocabulary, config: &'a TokenizerConfig, index: &'a ProductIndex) -> Result<Self> {
        if index.fingerprint() != model.fingerprint() {
            return Err(Error::Format("index was built with a different model".into()));
        }
        if model.rows() != vocab.rows() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} rows, vocabulary addresses {}",
                model.rows(),
                vocab.rows()
            )));
        }
        Ok(Retriever {
            model,
            vocab,
            config,
            index,
        })
    }

    pub fn top_k(&self, query_text: &str, k: usize, threshold: f64) -> Result<MatchResult> {
        top_k(query_text, self.index, self.model, self.vocab, self.config, k, threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Normalization};
    use crate::rng::seeded;
    use crate::tokenizer::build_vocabulary;
    use proptest::prelude::*;

    fn toy_index() -> ProductIndex {
        let raw = [
            ("p1", [1.0, 0.0]),
            ("p2", [0.0, 1.0]),
            ("p3", [1.0, 1.0]),
            ("p4", [-1.0, 0.5]),
            ("p5", [3.0, 1.0]),
        ];
        let mut data = Vec::new();
        for (_, v) in raw {
            let mut v = v.to_vec();
            unit_normalize(&mut v);
            data.extend(v);
        }
        ProductIndex::from_parts(raw.iter().map(|(id, _)| id.to_string()).collect(), 2, data, 0).unwrap()
    }

    #[test]
    fn hand_computed_ranking() {
        let idx = toy_index();
        let q = [1.0, 0.0];
        let got = idx.top_k_positions(&q, 5, -1.0).unwrap();
        let ids: Vec<&str> = got.iter().map(|(i, _)| idx.ids()[*i].as_str()).collect();
        assert_eq!(ids, ["p1", "p5", "p3", "p2", "p4"]);
        assert!((got[1].1 - 3.0 / 10f64.sqrt()).abs() < 1e-15);
        assert!((got[2].1 - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((got[4].1 + 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(idx.top_k_positions(&q, 2, -1.0).unwrap().len(), 2);
        assert_eq!(idx.top_k_positions(&q, 5, 0.5).unwrap().len(), 3);
        assert_eq!(idx.top_k_positions(&q, 5, 1.0).unwrap().len(), 1);
        assert!(idx.top_k_positions(&q, 5, 1.0 + 1e-12).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let idx = ProductIndex::from_parts(
            vec!["b".into(), "c".into(), "a".into()],
            1,
            vec![1.0, 1.0, 1.0],
            0,
        )
        .unwrap();
        let got = idx.top_k_positions(&[1.0], 2, 0.0).unwrap();
        let ids: Vec<&str> = got.iter().map(|(i, _)| idx.ids()[*i].as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    fn small_model(norm: Normalization) -> (EmbeddingModel, Vocabulary, TokenizerConfig) {
        let cfg = TokenizerConfig {
            query_max_tokens: Some(64),
            product_max_tokens: Some(64),
            ..TokenizerConfig::default()
        };
        let corpus = [
            (Side::Product, "red cotton dress"),
            (Side::Product, "blue denim jacket"),
            (Side::Query, "red dress"),
        ];
        let vocab = build_vocabulary(corpus, &cfg).unwrap().with_oov_bins(16);
        let mc = ModelConfig {
            dim: 8,
            normalization: norm,
            ..ModelConfig::default()
        };
        let model = EmbeddingModel::new(mc, vocab.size(), vocab.oov_bins(), &mut seeded(5)).unwrap();
        (model, vocab, cfg)
    }

    #[test]
    fn identical_text_ranks_first() {
        let (model, vocab, cfg) = small_model(Normalization::None);
        let products = [("x1", "red cotton dress"), ("x2", "blue denim jacket"), ("x3", "green wool scarf")];
        let idx = build_index(products, &model, &vocab, &cfg).unwrap();
        for i in 0..idx.len() {
            assert!((norm2(idx.embedding(i)) - 1.0).abs() < 1e-12);
        }
        let r = Retriever::new(&model, &vocab, &cfg, &idx).unwrap();
        let res = r.top_k("blue denim jacket", 3, -1.0).unwrap();
        assert_eq!(res.hits[0].0, "x2");
        assert!((res.hits[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_duplicate_and_round_trip() {
        let (model, vocab, cfg) = small_model(Normalization::Batch);
        let empty = build_index(Vec::<(String, String)>::new(), &model, &vocab, &cfg).unwrap();
        assert!(empty.is_empty());
        let dup = build_index([("a", "red"), ("a", "blue")], &model, &vocab, &cfg);
        assert!(matches!(dup, Err(Error::DuplicateProduct(_))));
        let one = build_index([("a", "red dress")], &model, &vocab, &cfg).unwrap();
        assert!((norm2(one.embedding(0)) - 1.0).abs() < 1e-12);

        let mut bytes = Vec::new();
        one.write_to(&mut bytes).unwrap();
        let back = ProductIndex::read_from(&bytes[..]).unwrap();
        assert_eq!(back, one);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let (model, vocab, cfg) = small_model(Normalization::None);
        let idx = build_index([("a", "red dress")], &model, &vocab, &cfg).unwrap();
        let (mut other, _, _) = small_model(Normalization::None);
        other.tables_mut()[0].row_mut(1)[0] += 1.0;
        assert!(Retriever::new(&other, &vocab, &cfg, &idx).is_err());
    }

    fn naive(idx: &ProductIndex, q: &[f64], k: usize, eps: f64) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..idx.len())
            .map(|i| (i, idx.embedding(i).iter().zip(q).map(|(a, b)| a * b).sum()))
            .filter(|&(_, s)| s >= eps)
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(idx.ids()[a.0].cmp(&idx.ids()[b.0])));
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn matches_full_sort(
            raw in proptest::collection::vec(proptest::collection::vec(-2i8..3, 3), 1..60),
            q in proptest::collection::vec(-2i8..3, 3),
            k in 1usize..70,
            eps in -1.0f64..1.0,
        ) {
            // Small integer coordinates produce many exact ties.
            let n = raw.len();
            let mut data = Vec::new();
            for v in &raw {
                let mut v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                unit_normalize(&mut v);
                data.extend(v);
            }
            let ids = (0..n).map(|i| format!("id{:03}", (i * 37) % 1000)).collect();
            let idx = ProductIndex::from_parts(ids, 3, data, 0).unwrap();
            let mut q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
            unit_normalize(&mut q);
            prop_assert_eq!(idx.top_k_positions(&q, k, eps).unwrap(), naive(&idx, &q, k, eps));
            let higher = idx.top_k_positions(&q, k, eps + 0.1).unwrap();
            let base: Vec<usize> = idx.top_k_positions(&q, n, eps).unwrap().into_iter().map(|x| x.0).collect();
            prop_assert!(higher.iter().all(|(i, _)| base.contains(i)));
        }
    }
}
