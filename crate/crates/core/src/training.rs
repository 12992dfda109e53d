//! Weighted training records, 1:6:7 epoch sampling, Xavier initialization,
//! lazy sparse ADAM and the training loop.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{LogLabel, LogRecord};
use crate::error::{Error, Result};
use crate::losses::{Label3, LossSpec};
use crate::model::{read_f64, read_u32, read_u64, EmbeddingModel, Embeddings, Gradients, Normalization, Phase};
use crate::rng::{self, Rng};
use crate::tokenizer::{encode, Side, TokenBag, TokenizerConfig, Vocabulary};

/// One weighted (query, product, label) example.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub query: TokenBag,
    pub product: TokenBag,
    pub label: Label3,
    pub weight: f64,
}

pub type TrainingExample = Record;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessStats {
    pub rows: usize,
    pub records: usize,
    pub per_label: BTreeMap<Label3, usize>,
}

/// Groups identical (query, product, label) rows, sums their counts into
/// the weight and encodes both sides once.
pub fn preprocess_logs<I>(logs: I, vocab: &Vocabulary, config: &TokenizerConfig) -> Result<(Vec<Record>, PreprocessStats)>
where
    I: IntoIterator<Item = LogRecord>,
{
    let mut groups: BTreeMap<(String, String, Label3), (String, u64)> = BTreeMap::new();
    let mut stats = PreprocessStats::default();
    for row in logs {
        stats.rows += 1;
        let label = match row.label {
            LogLabel::Purchased => Label3::Purchased,
            LogLabel::Impressed => Label3::Impressed,
        };
        let entry = groups
            .entry((row.query, row.product_id, label))
            .or_insert_with(|| (row.product_text, 0));
        entry.1 += row.count;
    }
    if groups.is_empty() {
        return Err(Error::NoData("no usable log rows".into()));
    }
    let records: Vec<Record> = groups
        .into_iter()
        .map(|((query, _, label), (product_text, count))| Record {
            query: encode(&query, Side::Query, vocab, config),
            product: encode(&product_text, Side::Product, vocab, config),
            label,
            weight: count as f64,
        })
        .collect();
    stats.records = records.len();
    for r in &records {
        *stats.per_label.entry(r.label).or_insert(0) += 1;
    }
    Ok((records, stats))
}

const RECORD_MAGIC: &[u8; 4] = b"SMRC";
const RECORD_VERSION: u32 = 1;
const RECORD_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// Writes the fixed-width binary record file.
pub fn write_records<W: Write>(mut w: W, query_len: usize, product_len: usize, records: &[Record]) -> Result<()> {
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&RECORD_VERSION.to_le_bytes())?;
    w.write_all(&(query_len as u32).to_le_bytes())?;
    w.write_all(&(product_len as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(record_width(query_len, product_len));
    for r in records {
        if r.query.len() != query_len || r.product.len() != product_len {
            return Err(Error::ShapeMismatch(format!(
                "record bags of length {}/{} in a {query_len}/{product_len} file",
                r.query.len(),
                r.product.len()
            )));
        }
        buf.clear();
        buf.push(r.label.to_byte());
        buf.extend_from_slice(&r.weight.to_le_bytes());
        for id in r.query.ids.iter().chain(&r.product.ids) {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_records(path: impl AsRef<Path>, query_len: usize, product_len: usize, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(Error::io_at(path))?;
    let mut w = BufWriter::new(f);
    write_records(&mut w, query_len, product_len, records)?;
    w.flush()?;
    Ok(())
}

fn record_width(query_len: usize, product_len: usize) -> usize {
    1 + 8 + 4 * (query_len + product_len)
}

/// Memory-mapped, offset-addressed view of a record file.
pub struct RecordStore {
    map: memmap2::Mmap,
    query_len: usize,
    product_len: usize,
    count: usize,
}

impl RecordStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(Error::io_at(path))?;
        // SAFETY: the file is opened read-only and treated as immutable for
        // the lifetime of the map.
        let map = unsafe { memmap2::Mmap::map(&f) }.map_err(Error::io_at(path))?;
        let mut header = &map[..map.len().min(RECORD_HEADER_LEN)];
        let mut magic = [0u8; 4];
        header
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated record file header".into()))?;
        if &magic != RECORD_MAGIC {
            return Err(Error::Format("not a record file".into()));
        }
        let version = read_u32(&mut header)?;
        if version != RECORD_VERSION {
            return Err(Error::Format(format!("unsupported record file version {version}")));
        }
        let query_len = read_u32(&mut header)? as usize;
        let product_len = read_u32(&mut header)? as usize;
        let count = read_u64(&mut header)? as usize;
        let expected = RECORD_HEADER_LEN + count * record_width(query_len, product_len);
        if map.len() != expected {
            return Err(Error::Format(format!(
                "record file is {} bytes, header implies {expected}",
                map.len()
            )));
        }
        Ok(RecordStore {
            map,
            query_len,
            product_len,
            count,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn product_len(&self) -> usize {
        self.product_len
    }

    pub fn get(&self, i: usize) -> Result<Record> {
        if i >= self.count {
            return Err(Error::Format(format!("record {i} out of range ({})", self.count)));
        }
        let width = record_width(self.query_len, self.product_len);
        let mut bytes = &self.map[RECORD_HEADER_LEN + i * width..RECORD_HEADER_LEN + (i + 1) * width];
        let mut label = [0u8; 1];
        bytes.read_exact(&mut label)?;
        let label = Label3::from_byte(label[0])?;
        let weight = read_f64(&mut bytes)?;
        let mut ids = |len: usize| -> Result<TokenBag> {
            let v = (0..len).map(|_| read_u32(&mut bytes)).collect::<Result<Vec<_>>>()?;
            Ok(TokenBag::from_ids(v, len))
        };
        let query = ids(self.query_len)?;
        let product = ids(self.product_len)?;
        Ok(Record {
            query,
            product,
            label,
            weight,
        })
    }

    pub fn to_vec(&self) -> Result<Vec<Record>> {
        (0..self.count).map(|i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Shuffle the epoch globally; otherwise keep each query's examples
    /// contiguous.
    pub shuffle: bool,
    pub adam: AdamConfig,
    pub impressed_per_purchase: usize,
    pub random_per_purchase: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 10,
            seed: 0,
            shuffle: true,
            adam: AdamConfig::default(),
            impressed_per_purchase: 6,
            random_per_purchase: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, normalization: Normalization) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if normalization == Normalization::Batch && self.batch_size < 2 {
            return Err(Error::Config("batch normalization needs batch_size >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct QueryGroup {
    purchased: Vec<usize>,
    impressed: Vec<usize>,
    seen: HashSet<TokenBag>,
}

/// Logged records indexed by query, plus the catalog random negatives are
/// drawn from.
#[derive(Debug)]
pub struct TrainData {
    records: Vec<Record>,
    catalog: Vec<TokenBag>,
    groups: BTreeMap<TokenBag, QueryGroup>,
}

impl TrainData {
    /// `catalog` holds the encoded product bags random negatives are drawn
    /// from; when empty, the distinct products of `records` are used.
    pub fn new(records: Vec<Record>, mut catalog: Vec<TokenBag>) -> Result<Self> {
        if catalog.is_empty() {
            let distinct: std::collections::BTreeSet<&TokenBag> = records.iter().map(|r| &r.product).collect();
            catalog = distinct.into_iter().cloned().collect();
        }
        let mut groups: BTreeMap<TokenBag, QueryGroup> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let g = groups.entry(r.query.clone()).or_default();
            match r.label {
                Label3::Purchased => g.purchased.push(i),
                Label3::Impressed => g.impressed.push(i),
                Label3::Random => {}
            }
            if r.label != Label3::Random {
                g.seen.insert(r.product.clone());
            }
        }
        if groups.values().all(|g| g.purchased.is_empty()) {
            return Err(Error::NoData("no purchased records".into()));
        }
        Ok(TrainData {
            records,
            catalog,
            groups,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn catalog(&self) -> &[TokenBag] {
        &self.catalog
    }

    pub fn purchases(&self) -> usize {
        self.groups.values().map(|g| g.purchased.len()).sum()
    }

    fn random_product(&self, group: &QueryGroup, rng: &mut Rng) -> Result<TokenBag> {
        for _ in 0..64 {
            let p = &self.catalog[rng.gen_range(0..self.catalog.len())];
            if !group.seen.contains(p) {
                return Ok(p.clone());
            }
        }
        let eligible: Vec<&TokenBag> = self.catalog.iter().filter(|p| !group.seen.contains(*p)).collect();
        eligible
            .choose(rng)
            .map(|p| (*p).clone())
            .ok_or_else(|| Error::NoData("catalog has no eligible random negatives for a query".into()))
    }
}

/// One epoch of examples: every purchased record followed by
/// `impressed_per_purchase` impressed records of the same query (sampled
/// with replacement; random negatives fill in when the query has none) and
/// `random_per_purchase` random catalog products unseen for that query.
pub fn sample_epoch(data: &TrainData, config: &TrainConfig, rng: &mut Rng) -> Result<Vec<Record>> {
    let per = 1 + config.impressed_per_purchase + config.random_per_purchase;
    let mut out = Vec::with_capacity(data.purchases() * per);
    for (query, group) in &data.groups {
        for &pi in &group.purchased {
            out.push(data.records[pi].clone());
            for _ in 0..config.impressed_per_purchase {
                if let Some(&ii) = group.impressed.choose(rng) {
                    out.push(data.records[ii].clone());
                } else {
                    out.push(Record {
                        query: query.clone(),
                        product: data.random_product(group, rng)?,
                        label: Label3::Random,
                        weight: 1.0,
                    });
                }
            }
            for _ in 0..config.random_per_purchase {
                out.push(Record {
                    query: query.clone(),
                    product: data.random_product(group, rng)?,
                    label: Label3::Random,
                    weight: 1.0,
                });
            }
        }
    }
    if config.shuffle {
        out.shuffle(rng);
    }
    Ok(out)
}

/// Xavier-uniform rows with fan-in = fan-out = `dim`: entries uniform on
/// `±sqrt(3 / dim)`. Row 0 is zeroed.
pub fn xavier_init(rows: usize, dim: usize, rng: &mut Rng) -> Embeddings {
    let bound = (3.0 / dim as f64).sqrt();
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
    let mut m = Embeddings::from_vec(rows, dim, data).expect("shape is consistent");
    if rows > 0 {
        m.row_mut(0).fill(0.0);
    }
    m
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    m_norm: [[Vec<f64>; 2]; 2],
    v_norm: [[Vec<f64>; 2]; 2],
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel) -> Self {
        let n = model.dim();
        let size = model.rows() * n;
        let tables = model.tables().len();
        let z = || [vec![0.0; n], vec![0.0; n]];
        AdamState {
            m: vec![vec![0.0; size]; tables],
            v: vec![vec![0.0; size]; tables],
            m_norm: [z(), z()],
            v_norm: [z(), z()],
            t: 0,
        }
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, bc1: f64, bc2: f64) {
    for k in 0..p.len() {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        let mhat = m[k] / bc1;
        let vhat = v[k] / bc2;
        p[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Bias-corrected ADAM step. Embedding rows (and gamma/beta vectors) whose
/// gradient is entirely zero are skipped, moments included.
pub fn adam_step(model: &mut EmbeddingModel, grads: &Gradients, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    let n = model.dim();
    let rows = model.rows();
    if grads.tables.len() != model.tables().len() || state.m.len() != model.tables().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient tables for {} embedding tables",
            grads.tables.len(),
            model.tables().len()
        )));
    }
    if state.m.iter().any(|m| m.len() != rows * n) {
        return Err(Error::ShapeMismatch("optimizer state does not match the model".into()));
    }
    for t in &grads.tables {
        for (&row, g) in t {
            if row as usize >= rows || row == 0 || g.len() != n {
                return Err(Error::ShapeMismatch(format!("gradient for row {row} of length {}", g.len())));
            }
        }
    }
    for k in 0..2 {
        if grads.gamma[k].len() != n || grads.beta[k].len() != n {
            return Err(Error::ShapeMismatch("normalization gradient length".into()));
        }
    }

    state.t += 1;
    let bc1 = 1.0 - config.beta1.powi(state.t as i32);
    let bc2 = 1.0 - config.beta2.powi(state.t as i32);
    for (ti, t) in grads.tables.iter().enumerate() {
        let table = &mut model.tables_mut()[ti];
        for (&row, g) in t {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let r = row as usize * n..(row as usize + 1) * n;
            adam_update(
                table.row_mut(row as usize),
                g,
                &mut state.m[ti][r.clone()],
                &mut state.v[ti][r],
                config,
                bc1,
                bc2,
            );
        }
    }
    for arm in crate::model::Arm::BOTH {
        let k = arm.index();
        let norm = model.norm_mut(arm);
        for (which, (param, g)) in [(&mut norm.gamma, &grads.gamma[k]), (&mut norm.beta, &grads.beta[k])]
            .into_iter()
            .enumerate()
        {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            adam_update(
                param,
                g,
                &mut state.m_norm[k][which],
                &mut state.v_norm[k][which],
                config,
                bc1,
                bc2,
            );
        }
    }
    Ok(())
}

/// Weighted mean loss `Σ wᵢ Lᵢ / Σ wᵢ`.
pub fn weighted_mean_loss(scores: &[f64], examples: &[&Record], loss: &LossSpec) -> f64 {
    let total: f64 = examples.iter().map(|e| e.weight).sum();
    let sum: f64 = scores
        .iter()
        .zip(examples)
        .map(|(&s, e)| e.weight * loss.loss(s, e.label))
        .sum();
    sum / total
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    /// Weighted mean loss per epoch, from the scores seen before each update.
    pub epoch_loss: Vec<f64>,
    /// Optional validation value per epoch.
    pub validation: Vec<f64>,
    /// Examples skipped because a side encoded to an empty bag.
    pub dropped_empty: usize,
    /// Size-1 tail batches skipped under batch normalization.
    pub dropped_tail: usize,
}

/// Runs one pass over `examples` in the given order.
fn run_epoch(
    model: &mut EmbeddingModel,
    examples: &[&Record],
    loss: &LossSpec,
    config: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
    history: &mut History,
) -> Result<f64> {
    let batch_norm = model.config().normalization == Normalization::Batch;
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    for (bi, batch) in examples.chunks(config.batch_size).enumerate() {
        if batch_norm && batch.len() < 2 {
            history.dropped_tail += 1;
            continue;
        }
        let pairs: Vec<(&TokenBag, &TokenBag)> = batch.iter().map(|e| (&e.query, &e.product)).collect();
        let cache = model.forward(&pairs, Phase::Train)?;
        let scores = cache.scores();
        let batch_loss = weighted_mean_loss(scores, batch, loss);
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: bi,
                loss: batch_loss,
            });
        }
        let total: f64 = batch.iter().map(|e| e.weight).sum();
        loss_sum += batch_loss * total;
        weight_sum += total;
        let dscores: Vec<f64> = scores
            .iter()
            .zip(batch.iter())
            .map(|(&s, e)| e.weight * loss.grad(s, e.label) / total)
            .collect();
        let grads = model.backward(&cache, &dscores)?;
        adam_step(model, &grads, state, &config.adam)?;
    }
    Ok(if weight_sum > 0.0 { loss_sum / weight_sum } else { 0.0 })
}

fn usable<'a>(examples: impl IntoIterator<Item = &'a Record>, history: &mut History) -> Vec<&'a Record> {
    let mut out = Vec::new();
    for e in examples {
        if e.query.is_empty() || e.product.is_empty() {
            history.dropped_empty += 1;
        } else {
            out.push(e);
        }
    }
    out
}

/// Trains on a fixed list of examples for `config.epochs` epochs.
pub fn train_examples(
    model: &mut EmbeddingModel,
    examples: &[Record],
    loss: &LossSpec,
    config: &TrainConfig,
) -> Result<History> {
    loss.validate()?;
    config.validate(model.config().normalization)?;
    let mut history = History::default();
    let mut state = AdamState::new(model);
    let mut rng = rng::derive(config.seed, "train-examples");
    let mut order = usable(examples, &mut history);
    if order.is_empty() {
        return Err(Error::NoData("no non-empty training examples".into()));
    }
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let l = run_epoch(model, &order, loss, config, &mut state, epoch, &mut history)?;
        history.epoch_loss.push(l);
    }
    Ok(history)
}

/// Trains with freshly sampled 1:6:7 epochs.
pub fn train(model: &mut EmbeddingModel, data: &TrainData, loss: &LossSpec, config: &TrainConfig) -> Result<History> {
    train_with_validation(model, data, loss, config, None::<fn(&EmbeddingModel) -> f64>)
}

/// Like [`train`], calling `validate` after every epoch.
pub fn train_with_validation<F>(
    model: &mut EmbeddingModel,
    data: &TrainData,
    loss: &LossSpec,
    config: &TrainConfig,
    mut validate: Option<F>,
) -> Result<History>
where
    F: FnMut(&EmbeddingModel) -> f64,
{
    loss.validate()?;
    config.validate(model.config().normalization)?;
    let mut history = History::default();
    let mut state = AdamState::new(model);
    let mut rng = rng::derive(config.seed, "sample-epoch");
    for epoch in 0..config.epochs {
        let examples = sample_epoch(data, config, &mut rng)?;
        let order = usable(&examples, &mut history);
        let l = run_epoch(model, &order, loss, config, &mut state, epoch, &mut history)?;
        history.epoch_loss.push(l);
        if let Some(f) = validate.as_mut() {
            history.validation.push(f(model));
        }
    }
    Ok(history)
}
