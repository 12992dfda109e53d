//! The Siamese embedding-bag model.
//!
//! Each arm averages the embedding rows of its bag's non-zero ids,
//! normalizes the pooled vector (batch, layer, or no normalization, with
//! separate state per arm) and the score is the cosine of the two arms'
//! outputs. Embedding rows are either shared by both arms or held in two
//! separate tables. Row 0 is the mask row: it stays zero and never receives
//! gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::tokenizer::TokenBag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Query,
    Product,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Query, Arm::Product];

    pub fn index(self) -> usize {
        match self {
            Arm::Query => 0,
            Arm::Product => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    Batch,
    Layer,
    None,
}

impl Normalization {
    fn code(self) -> u8 {
        match self {
            Normalization::None => 0,
            Normalization::Batch => 1,
            Normalization::Layer => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Normalization::None),
            1 => Ok(Normalization::Batch),
            2 => Ok(Normalization::Layer),
            _ => Err(Error::Format(format!("unknown normalization code {c}"))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Batch => "batch",
            Normalization::Layer => "layer",
            Normalization::None => "none",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Normalization::Batch),
            "layer" => Ok(Normalization::Layer),
            "none" => Ok(Normalization::None),
            _ => Err(Error::Config(format!("unknown normalization {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub shared: bool,
    pub normalization: Normalization,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            shared: true,
            normalization: Normalization::Batch,
            bn_momentum: 0.99,
            bn_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1)".into()));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("bn_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embeddings {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{dim} matrix",
                data.len()
            )));
        }
        Ok(Embeddings { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Embeddings {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Embeddings {
            rows: self.rows,
            dim: width,
            data,
        }
    }
}

/// Per-arm normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormState {
    pub fn new(dim: usize) -> Self {
        NormState {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

/// Sparse per-row gradients for one embedding table, keyed by row id.
pub type RowGrads = BTreeMap<u32, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// One entry per embedding table (one when shared, two otherwise).
    pub tables: Vec<RowGrads>,
    pub gamma: [Vec<f64>; 2],
    pub beta: [Vec<f64>; 2],
}

impl Gradients {
    fn zeros(tables: usize, dim: usize) -> Self {
        Gradients {
            tables: vec![RowGrads::new(); tables],
            gamma: [vec![0.0; dim], vec![0.0; dim]],
            beta: [vec![0.0; dim], vec![0.0; dim]],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tables
            .iter()
            .flat_map(|t| t.values())
            .chain(self.gamma.iter())
            .chain(self.beta.iter())
            .all(|v| v.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone)]
enum NormCache {
    Identity,
    /// Standardized values with one inverse std per example.
    Layer { xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Standardized values with one inverse std per dimension, from batch
    /// statistics.
    Batch { xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Batch mode with frozen running statistics: a per-dimension affine map.
    Frozen { xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
struct ArmCache {
    bags: Vec<Vec<u32>>,
    norm: NormCache,
    out: Vec<f64>,
}

/// Everything `backward` needs from a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    arms: [ArmCache; 2],
    scores: Vec<f64>,
}

impl ForwardCache {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Normalized output embeddings of one arm, row-major `batch × dim`.
    pub fn outputs(&self, arm: Arm) -> &[f64] {
        &self.arms[arm.index()].out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    config: ModelConfig,
    vocab_size: usize,
    oov_bins: usize,
    tables: Vec<Embeddings>,
    norms: [NormState; 2],
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

impl EmbeddingModel {
    /// Zero-initialized model for a vocabulary of `vocab_size` tokens and
    /// `oov_bins` hash bins.
    pub fn zeros(config: ModelConfig, vocab_size: usize, oov_bins: usize) -> Result<Self> {
        config.validate()?;
        let rows = vocab_size + oov_bins + 1;
        let n_tables = if config.shared { 1 } else { 2 };
        Ok(EmbeddingModel {
            tables: vec![Embeddings::zeros(rows, config.dim); n_tables],
            norms: [NormState::new(config.dim), NormState::new(config.dim)],
            config,
            vocab_size,
            oov_bins,
        })
    }

    /// Xavier-initialized model.
    pub fn new(config: ModelConfig, vocab_size: usize, oov_bins: usize, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(config, vocab_size, oov_bins)?;
        let rows = model.rows();
        for t in &mut model.tables {
            *t = crate::training::xavier_init(rows, config.dim, rng);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn oov_bins(&self) -> usize {
        self.oov_bins
    }

    pub fn rows(&self) -> usize {
        self.vocab_size + self.oov_bins + 1
    }

    /// Number of trainable parameters (embedding tables plus gamma/beta).
    pub fn parameter_count(&self) -> usize {
        let norm = match self.config.normalization {
            Normalization::None => 0,
            _ => 4 * self.config.dim,
        };
        self.tables.len() * self.rows() * self.config.dim + norm
    }

    pub fn tables(&self) -> &[Embeddings] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Embeddings] {
        &mut self.tables
    }

    pub fn table_index(&self, arm: Arm) -> usize {
        if self.config.shared {
            0
        } else {
            arm.index()
        }
    }

    pub fn table(&self, arm: Arm) -> &Embeddings {
        &self.tables[self.table_index(arm)]
    }

    pub fn norm(&self, arm: Arm) -> &NormState {
        &self.norms[arm.index()]
    }

    pub fn norm_mut(&mut self, arm: Arm) -> &mut NormState {
        &mut self.norms[arm.index()]
    }

    fn check_bag(&self, ids: impl IntoIterator<Item = u32>) -> Result<()> {
        let rows = self.rows();
        for id in ids {
            if id as usize >= rows {
                return Err(Error::IdOutOfBounds { id, rows });
            }
        }
        Ok(())
    }

    fn pool_into(&self, bag: &TokenBag, arm: Arm, out: &mut [f64]) {
        out.fill(0.0);
        let table = self.table(arm);
        let mut count = 0usize;
        for id in bag.valid_ids() {
            for (o, v) in out.iter_mut().zip(table.row(id as usize)) {
                *o += v;
            }
            count += 1;
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
    }

    /// Average of the embedding rows of the bag's non-zero ids; the zero
    /// vector for an all-padding bag.
    pub fn embed_bag(&self, bag: &TokenBag, arm: Arm) -> Result<Vec<f64>> {
        self.check_bag(bag.ids.iter().copied())?;
        let mut out = vec![0.0; self.dim()];
        self.pool_into(bag, arm, &mut out);
        Ok(out)
    }

    fn pool_batch(&self, bags: &[&TokenBag], arm: Arm) -> Result<Vec<f64>> {
        for bag in bags {
            self.check_bag(bag.ids.iter().copied())?;
        }
        let n = self.dim();
        let mut out = vec![0.0; bags.len() * n];
        par::for_each_chunk_mut(&mut out, n.max(1), |i, row| self.pool_into(bags[i], arm, row));
        Ok(out)
    }

    /// Normalizes a row-major batch of pooled vectors. In the train phase,
    /// batch mode uses (and updates) batch statistics.
    pub fn normalize(&mut self, pooled: &[f64], arm: Arm, phase: Phase) -> Result<Vec<f64>> {
        let (out, _) = self.normalize_cached(pooled, arm, phase)?;
        Ok(out)
    }

    /// Inference-phase normalization; never touches running statistics.
    pub fn normalize_infer(&self, pooled: &[f64], arm: Arm) -> Vec<f64> {
        norm_forward(&self.config, &self.norms[arm.index()], pooled, Phase::Infer)
            .map(|(out, _, _)| out)
            .expect("inference normalization is infallible")
    }

    fn normalize_cached(&mut self, pooled: &[f64], arm: Arm, phase: Phase) -> Result<(Vec<f64>, NormCache)> {
        let cfg = self.config;
        let state = &mut self.norms[arm.index()];
        let (out, cache, moments) = norm_forward(&cfg, state, pooled, phase)?;
        if let Some((mean, var)) = moments {
            let m = cfg.bn_momentum;
            for j in 0..cfg.dim {
                state.running_mean[j] = m * state.running_mean[j] + (1.0 - m) * mean[j];
                state.running_var[j] = m * state.running_var[j] + (1.0 - m) * var[j];
            }
        }
        Ok((out, cache))
    }

    /// Pooled and normalized inference embedding of one bag.
    pub fn embed(&self, bag: &TokenBag, arm: Arm) -> Result<Vec<f64>> {
        let pooled = self.embed_bag(bag, arm)?;
        Ok(self.normalize_infer(&pooled, arm))
    }

    /// Inference-phase score of one pair.
    pub fn score(&self, query: &TokenBag, product: &TokenBag) -> Result<f64> {
        let q = self.embed(query, Arm::Query)?;
        let p = self.embed(product, Arm::Product)?;
        Ok(cosine(&q, &p))
    }

    /// Batch forward pass. The train phase may update batch-norm running
    /// statistics; the infer phase leaves the model untouched.
    pub fn forward(&mut self, pairs: &[(&TokenBag, &TokenBag)], phase: Phase) -> Result<ForwardCache> {
        let n = self.dim();
        let b = pairs.len();
        let queries: Vec<&TokenBag> = pairs.iter().map(|p| p.0).collect();
        let products: Vec<&TokenBag> = pairs.iter().map(|p| p.1).collect();
        let qp = self.pool_batch(&queries, Arm::Query)?;
        let pp = self.pool_batch(&products, Arm::Product)?;
        let (qout, qnorm) = self.normalize_cached(&qp, Arm::Query, phase)?;
        let (pout, pnorm) = self.normalize_cached(&pp, Arm::Product, phase)?;
        let scores = par::map_range(b, |i| {
            cosine(&qout[i * n..(i + 1) * n], &pout[i * n..(i + 1) * n])
        });
        let bag_ids = |bags: &[&TokenBag]| bags.iter().map(|b| b.valid_ids().collect()).collect();
        Ok(ForwardCache {
            batch: b,
            arms: [
                ArmCache {
                    bags: bag_ids(&queries),
                    norm: qnorm,
                    out: qout,
                },
                ArmCache {
                    bags: bag_ids(&products),
                    norm: pnorm,
                    out: pout,
                },
            ],
            scores,
        })
    }

    /// Gradients of `Σ dscores[i] · score[i]` with respect to every
    /// embedding row touched by the batch and to gamma/beta of both arms.
    pub fn backward(&self, cache: &ForwardCache, dscores: &[f64]) -> Result<Gradients> {
        let n = self.dim();
        let b = cache.batch;
        if dscores.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} score gradients for a batch of {b}",
                dscores.len()
            )));
        }
        let q = &cache.arms[0].out;
        let p = &cache.arms[1].out;
        // d score / d normalized outputs, both arms.
        let per_pair: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(b, |i| {
            let a = &q[i * n..(i + 1) * n];
            let c = &p[i * n..(i + 1) * n];
            cosine_grads(a, c, dscores[i])
        });
        let mut dq = vec![0.0; b * n];
        let mut dp = vec![0.0; b * n];
        for (i, (ga, gc)) in per_pair.into_iter().enumerate() {
            dq[i * n..(i + 1) * n].copy_from_slice(&ga);
            dp[i * n..(i + 1) * n].copy_from_slice(&gc);
        }

        let mut grads = Gradients::zeros(self.tables.len(), n);
        for (arm, dout) in [(Arm::Query, dq), (Arm::Product, dp)] {
            let k = arm.index();
            let state = &self.norms[k];
            let dpooled = norm_backward(
                &cache.arms[k].norm,
                &dout,
                n,
                state,
                &mut grads.gamma[k],
                &mut grads.beta[k],
            );
            let table = &mut grads.tables[self.table_index(arm)];
            for (i, ids) in cache.arms[k].bags.iter().enumerate() {
                if ids.is_empty() {
                    continue;
                }
                let scale = 1.0 / ids.len() as f64;
                let g = &dpooled[i * n..(i + 1) * n];
                for &id in ids {
                    let row = table.entry(id).or_insert_with(|| vec![0.0; n]);
                    for (r, v) in row.iter_mut().zip(g) {
                        *r += v * scale;
                    }
                }
            }
            table.remove(&0);
        }
        if self.config.normalization == Normalization::None {
            for k in 0..2 {
                grads.gamma[k].fill(0.0);
                grads.beta[k].fill(0.0);
            }
        }
        Ok(grads)
    }

    /// Serializes the model (little-endian binary).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.vocab_size, self.oov_bins, self.config.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let flags = u8::from(self.config.shared) | (self.config.normalization.code() << 1);
        w.write_all(&[flags])?;
        w.write_all(&self.config.bn_momentum.to_le_bytes())?;
        w.write_all(&self.config.bn_epsilon.to_le_bytes())?;
        for t in &self.tables {
            write_f64s(&mut w, t.as_slice())?;
        }
        for s in &self.norms {
            for v in [&s.gamma, &s.beta, &s.running_mean, &s.running_var] {
                write_f64s(&mut w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let vocab_size = read_u64(&mut r)? as usize;
        let oov_bins = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        let config = ModelConfig {
            dim,
            shared: flags[0] & 1 == 1,
            normalization: Normalization::from_code(flags[0] >> 1)?,
            bn_momentum: read_f64(&mut r)?,
            bn_epsilon: read_f64(&mut r)?,
        };
        let mut model = Self::zeros(config, vocab_size, oov_bins)?;
        let rows = model.rows();
        for t in &mut model.tables {
            *t = Embeddings::from_vec(rows, dim, read_f64s(&mut r, rows * dim)?)?;
        }
        for s in &mut model.norms {
            for v in [&mut s.gamma, &mut s.beta, &mut s.running_mean, &mut s.running_var] {
                *v = read_f64s(&mut r, dim)?;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(Error::io_at(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(Error::io_at(path))?;
        Self::read_from(BufReader::new(f))
    }

    /// FNV-1a of the serialized checkpoint.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        crate::tokenizer::fnv1a64(&buf)
    }
}

type Moments = (Vec<f64>, Vec<f64>);

/// Normalization forward pass. Returns the batch moments when batch
/// statistics were used so the caller can update running state.
fn norm_forward(
    cfg: &ModelConfig,
    state: &NormState,
    pooled: &[f64],
    phase: Phase,
) -> Result<(Vec<f64>, NormCache, Option<Moments>)> {
    let n = cfg.dim;
    let b = pooled.len() / n;
    match (cfg.normalization, phase) {
        (Normalization::None, _) => Ok((pooled.to_vec(), NormCache::Identity, None)),
        (Normalization::Layer, _) => {
            let (out, cache) = layer_forward(pooled, n, state, cfg.bn_epsilon);
            Ok((out, cache, None))
        }
        (Normalization::Batch, Phase::Train) => {
            if b < 2 {
                return Err(Error::BatchTooSmall(b));
            }
            let (mean, var) = batch_moments(pooled, n);
            let (out, xhat, inv_std) = affine_forward(pooled, n, &mean, &var, state, cfg.bn_epsilon);
            Ok((out, NormCache::Batch { xhat, inv_std }, Some((mean, var))))
        }
        (Normalization::Batch, Phase::Infer) => {
            let (out, xhat, inv_std) = affine_forward(
                pooled,
                n,
                &state.running_mean,
                &state.running_var,
                state,
                cfg.bn_epsilon,
            );
            Ok((out, NormCache::Frozen { xhat, inv_std }, None))
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Per-dimension population mean and variance of a row-major batch.
fn batch_moments(x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let b = (x.len() / n) as f64;
    let mut mean = vec![0.0; n];
    for row in x.chunks_exact(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b);
    let mut var = vec![0.0; n];
    for row in x.chunks_exact(n) {
        for j in 0..n {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= b);
    (mean, var)
}

fn affine_forward(
    x: &[f64],
    n: usize,
    mean: &[f64],
    var: &[f64],
    state: &NormState,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ((row, xh), o) in x.chunks_exact(n).zip(xhat.chunks_exact_mut(n)).zip(out.chunks_exact_mut(n)) {
        for j in 0..n {
            xh[j] = (row[j] - mean[j]) * inv_std[j];
            o[j] = state.gamma[j] * xh[j] + state.beta[j];
        }
    }
    (out, xhat, inv_std)
}

fn layer_forward(x: &[f64], n: usize, state: &NormState, eps: f64) -> (Vec<f64>, NormCache) {
    let b = x.len() / n;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; b];
    for (i, row) in x.chunks_exact(n).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat[i * n + j] = h;
            out[i * n + j] = state.gamma[j] * h + state.beta[j];
        }
    }
    (out, NormCache::Layer { xhat, inv_std })
}

/// Backpropagates through a normalization layer, accumulating gamma/beta
/// gradients and returning the gradient with respect to its input.
fn norm_backward(
    cache: &NormCache,
    dout: &[f64],
    n: usize,
    state: &NormState,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let (xhat, inv_std) = match cache {
        NormCache::Identity => return dout.to_vec(),
        NormCache::Layer { xhat, inv_std }
        | NormCache::Batch { xhat, inv_std }
        | NormCache::Frozen { xhat, inv_std } => (xhat, inv_std),
    };
    let b = dout.len() / n;
    for i in 0..b {
        for j in 0..n {
            let k = i * n + j;
            dgamma[j] += dout[k] * xhat[k];
            dbeta[j] += dout[k];
        }
    }
    let dxhat: Vec<f64> = dout
        .iter()
        .enumerate()
        .map(|(k, d)| d * state.gamma[k % n])
        .collect();
    let mut dx = vec![0.0; dout.len()];
    match cache {
        NormCache::Layer { .. } => {
            for i in 0..b {
                let r = i * n..(i + 1) * n;
                let dh = &dxhat[r.clone()];
                let h = &xhat[r.clone()];
                let mean_dh = dh.iter().sum::<f64>() / n as f64;
                let mean_dhh = dot(dh, h) / n as f64;
                for j in 0..n {
                    dx[i * n + j] = inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dhh);
                }
            }
        }
        NormCache::Batch { .. } => {
            for j in 0..n {
                let mut mean_dh = 0.0;
                let mut mean_dhh = 0.0;
                for i in 0..b {
                    mean_dh += dxhat[i * n + j];
                    mean_dhh += dxhat[i * n + j] * xhat[i * n + j];
                }
                mean_dh /= b as f64;
                mean_dhh /= b as f64;
                for i in 0..b {
                    let k = i * n + j;
                    dx[k] = inv_std[j] * (dxhat[k] - mean_dh - xhat[k] * mean_dhh);
                }
            }
        }
        NormCache::Frozen { .. } => {
            for (k, d) in dx.iter_mut().enumerate() {
                *d = dxhat[k] * inv_std[k % n];
            }
        }
        NormCache::Identity => unreachable!(),
    }
    dx
}

/// `g · ∂cos(a, b)/∂a` and `g · ∂cos(a, b)/∂b`; zero when either norm is 0.
fn cosine_grads(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 || g == 0.0 {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let s = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (y * inv - s * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (x * inv - s * y / (nb * nb)))
        .collect();
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn bag(ids: &[u32], len: usize) -> TokenBag {
        TokenBag::from_ids(ids.to_vec(), len)
    }

    fn model(norm: Normalization, shared: bool) -> EmbeddingModel {
        let cfg = ModelConfig {
            dim: 4,
            shared,
            normalization: norm,
            ..ModelConfig::default()
        };
        EmbeddingModel::new(cfg, 6, 3, &mut seeded(7)).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[2.0, 1.0]), 0.0);
    }

    #[test]
    fn pooling_is_mean_of_valid_rows() {
        let m = model(Normalization::None, true);
        let t = m.table(Arm::Query);
        let pooled = m.embed_bag(&bag(&[1, 2], 5), Arm::Query).unwrap();
        for j in 0..4 {
            assert!((pooled[j] - (t.row(1)[j] + t.row(2)[j]) / 2.0).abs() < 1e-15);
        }
        assert_eq!(m.embed_bag(&bag(&[3], 5), Arm::Query).unwrap(), t.row(3));
        assert_eq!(m.embed_bag(&bag(&[], 5), Arm::Query).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn out_of_bounds_id() {
        let m = model(Normalization::None, true);
        let err = m.embed_bag(&bag(&[10], 2), Arm::Query).unwrap_err();
        assert!(matches!(err, Error::IdOutOfBounds { id: 10, rows: 10 }));
    }

    #[test]
    fn row_zero_is_zero() {
        let m = model(Normalization::Batch, false);
        for t in m.tables() {
            assert!(t.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn normalization_modes() {
        let cfg = ModelConfig {
            dim: 2,
            normalization: Normalization::Layer,
            ..ModelConfig::default()
        };
        let mut m = EmbeddingModel::zeros(cfg, 1, 0).unwrap();
        let out = m.normalize(&[1.0, 3.0], Arm::Query, Phase::Train).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);

        let mut m = EmbeddingModel::zeros(ModelConfig { normalization: Normalization::None, ..cfg }, 1, 0).unwrap();
        assert_eq!(m.normalize(&[1.0, 3.0], Arm::Query, Phase::Train).unwrap(), vec![1.0, 3.0]);

        let mut m = EmbeddingModel::zeros(ModelConfig { normalization: Normalization::Batch, ..cfg }, 1, 0).unwrap();
        m.norm_mut(Arm::Query).beta = vec![0.25, -0.5];
        let out = m.normalize(&[2.0, 7.0, 2.0, 7.0], Arm::Query, Phase::Train).unwrap();
        assert_eq!(out, vec![0.25, -0.5, 0.25, -0.5]);
        assert!(matches!(
            m.normalize(&[2.0, 7.0], Arm::Query, Phase::Train),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(m.normalize(&[2.0, 7.0], Arm::Query, Phase::Infer).is_ok());
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let cfg = ModelConfig {
            dim: 1,
            normalization: Normalization::Batch,
            bn_momentum: 0.9,
            ..ModelConfig::default()
        };
        let mut m = EmbeddingModel::zeros(cfg, 1, 0).unwrap();
        m.normalize(&[1.0, 3.0], Arm::Product, Phase::Train).unwrap();
        let s = m.norm(Arm::Product);
        assert!((s.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((s.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);
        assert_eq!(m.norm(Arm::Query).running_mean[0], 0.0);
    }

    #[test]
    fn forward_identity_and_empty() {
        let mut m = model(Normalization::None, true);
        let q = bag(&[1, 4, 5], 4);
        let c = m.forward(&[(&q, &q)], Phase::Infer).unwrap();
        assert!((c.scores()[0] - 1.0).abs() < 1e-12);
        let e = bag(&[], 4);
        let c = m.forward(&[(&e, &q)], Phase::Infer).unwrap();
        assert_eq!(c.scores()[0], 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for norm in [Normalization::Batch, Normalization::Layer, Normalization::None] {
            let mut m = model(norm, true);
            let (q, p) = (bag(&[1, 2], 3), bag(&[2, 3, 9], 3));
            let (q2, p2) = (bag(&[5], 3), bag(&[4, 6], 3));
            let c = m.forward(&[(&q, &p), (&q2, &p2)], Phase::Train).unwrap();
            assert!(m.backward(&c, &[0.0, 0.0]).unwrap().is_zero());
        }
    }

    #[test]
    fn empty_bag_contributes_no_row_gradients() {
        let mut m = model(Normalization::None, true);
        let (q, p) = (bag(&[], 3), bag(&[2, 3], 3));
        let c = m.forward(&[(&q, &p)], Phase::Train).unwrap();
        assert!(m.backward(&c, &[1.0]).unwrap().is_zero());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = model(Normalization::Layer, false);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = EmbeddingModel::read_from(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(EmbeddingModel::read_from(&buf[..10]).is_err());
    }
}
