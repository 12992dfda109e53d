//! Simulated model-parallel scoring.
//!
//! The embedding dimension is split across `n` shards. Every shard receives
//! the input bags, pools its own slice of the embedding columns and returns
//! three scalars per pair: the partial dot product and the two partial
//! squared norms. The aggregator sums them and forms the cosine. Shards run
//! as isolated threads exchanging messages over channels, and a ledger counts
//! what crossed the wire.

use std::sync::mpsc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{cosine, EmbeddingModel, Embeddings, Normalization, Arm};
use crate::tokenizer::TokenBag;

/// Partition of `dim` embedding columns over `shards` workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPlan {
    shards: usize,
    dim: usize,
}

impl ShardPlan {
    pub fn new(shards: usize, dim: usize) -> Result<Self> {
        if shards == 0 || dim == 0 || !dim.is_multiple_of(shards) {
            return Err(Error::UnevenShards { shards, dim });
        }
        Ok(ShardPlan { shards, dim })
    }

    pub fn shards(&self) -> usize {
        self.shards
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Columns per shard, `dim / shards`.
    pub fn slice_dim(&self) -> usize {
        self.dim / self.shards
    }

    pub fn range(&self, shard: usize) -> std::ops::Range<usize> {
        let r = self.slice_dim();
        r * shard..r * (shard + 1)
    }
}

/// The three scalars one shard contributes to a cosine.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShardPartials {
    pub dot: f64,
    pub sq_a: f64,
    pub sq_b: f64,
}

pub fn shard_partials(a: &[f64], b: &[f64]) -> Result<ShardPartials> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("slices of length {} and {}", a.len(), b.len())));
    }
    let mut p = ShardPartials::default();
    for (x, y) in a.iter().zip(b) {
        p.dot += x * y;
        p.sq_a += x * x;
        p.sq_b += y * y;
    }
    Ok(p)
}

/// Cosine from per-shard partials; 0 when either total squared norm is 0.
pub fn aggregate(partials: &[ShardPartials]) -> f64 {
    let (mut dot, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for p in partials {
        dot += p.dot;
        sa += p.sq_a;
        sb += p.sq_b;
    }
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    (dot / (sa.sqrt() * sb.sqrt())).clamp(-1.0, 1.0)
}

/// One shard's slice of the model: its embedding columns and the matching
/// per-dimension inference normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSlice {
    pub index: usize,
    pub columns: std::ops::Range<usize>,
    /// Same table layout as the model (one shared table or one per arm).
    pub tables: Vec<Embeddings>,
    shared: bool,
    /// Per arm: `(scale, shift)` so that `out = scale ⊙ pooled + shift`.
    affine: Option<[(Vec<f64>, Vec<f64>); 2]>,
}

impl ShardSlice {
    fn table(&self, arm: Arm) -> &Embeddings {
        if self.shared {
            &self.tables[0]
        } else {
            &self.tables[arm.index()]
        }
    }

    /// Pooled, normalized slice of one arm's embedding.
    pub fn embed(&self, bag: &TokenBag, arm: Arm) -> Vec<f64> {
        let table = self.table(arm);
        let mut out = vec![0.0; table.dim()];
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
        if let Some(aff) = &self.affine {
            let (scale, shift) = &aff[arm.index()];
            for j in 0..out.len() {
                out[j] = scale[j] * out[j] + shift[j];
            }
        }
        out
    }
}

/// Splits the model's embedding columns into `n` contiguous slices.
/// Layer normalization mixes all dimensions and cannot be sharded this way.
pub fn split_model(model: &EmbeddingModel, n: usize) -> Result<Vec<ShardSlice>> {
    let plan = ShardPlan::new(n, model.dim())?;
    let cfg = model.config();
    if cfg.normalization == Normalization::Layer {
        return Err(Error::Unsupported(
            "layer normalization needs whole-vector statistics; shard only batch or no normalization".into(),
        ));
    }
    let affine_full = (cfg.normalization == Normalization::Batch).then(|| {
        Arm::BOTH.map(|arm| {
            let s = model.norm(arm);
            let scale: Vec<f64> = (0..cfg.dim)
                .map(|j| s.gamma[j] / (s.running_var[j] + cfg.bn_epsilon).sqrt())
                .collect();
            let shift: Vec<f64> = (0..cfg.dim)
                .map(|j| s.beta[j] - scale[j] * s.running_mean[j])
                .collect();
            (scale, shift)
        })
    });
    Ok((0..n)
        .map(|s| {
            let r = plan.range(s);
            ShardSlice {
                index: s,
                columns: r.clone(),
                tables: model.tables().iter().map(|t| t.columns(r.start, r.end)).collect(),
                shared: cfg.shared,
                affine: affine_full.as_ref().map(|aff| {
                    [0, 1].map(|k| (aff[k].0[r.clone()].to_vec(), aff[k].1[r.clone()].to_vec()))
                }),
            }
        })
        .collect())
}

/// Reassembles full embedding tables from shard slices.
pub fn concat_shards(shards: &[ShardSlice]) -> Result<Vec<Embeddings>> {
    let first = shards.first().ok_or_else(|| Error::NoData("no shards".into()))?;
    let rows = first.tables[0].rows();
    let dim: usize = shards.iter().map(|s| s.tables[0].dim()).sum();
    let mut out = Vec::with_capacity(first.tables.len());
    for t in 0..first.tables.len() {
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            for s in shards {
                data.extend_from_slice(s.tables[t].row(r));
            }
        }
        out.push(Embeddings::from_vec(rows, dim, data)?);
    }
    Ok(out)
}

/// What the shards send back per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exchange {
    /// Three partial sums per shard.
    Partials,
    /// The full pooled slices of both arms (reference mode).
    Concatenate,
}

/// Message counts of one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommLedger {
    pub pairs: usize,
    pub shards: usize,
    /// Input messages sent to shards (one per shard per pair).
    pub broadcasts: usize,
    /// Messages returned to the aggregator.
    pub replies: usize,
    /// Floating-point scalars returned to the aggregator.
    pub scalars: usize,
}

impl CommLedger {
    pub fn scalars_per_pair(&self) -> f64 {
        self.scalars as f64 / self.pairs.max(1) as f64
    }
}

enum Reply {
    Partials(ShardPartials),
    Slices(Vec<f64>, Vec<f64>),
}

impl Reply {
    fn scalars(&self) -> usize {
        match self {
            Reply::Partials(_) => 3,
            Reply::Slices(a, b) => a.len() + b.len(),
        }
    }
}

/// Scores `pairs` with the model split over `plan.shards()` workers.
pub fn simulate(
    plan: &ShardPlan,
    pairs: &[(TokenBag, TokenBag)],
    model: &EmbeddingModel,
    exchange: Exchange,
) -> Result<(Vec<f64>, CommLedger)> {
    if plan.dim() != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "plan over {} dims for a {}-dim model",
            plan.dim(),
            model.dim()
        )));
    }
    let rows = model.rows();
    for (q, p) in pairs {
        for id in q.ids.iter().chain(&p.ids) {
            if *id as usize >= rows {
                return Err(Error::IdOutOfBounds { id: *id, rows });
            }
        }
    }
    let slices = split_model(model, plan.shards())?;
    let n = plan.shards();
    let mut ledger = CommLedger {
        pairs: pairs.len(),
        shards: n,
        ..CommLedger::default()
    };
    let mut replies: Vec<Vec<Option<Reply>>> = (0..pairs.len()).map(|_| (0..n).map(|_| None).collect()).collect();

    std::thread::scope(|scope| {
        let (reply_tx, reply_rx) = mpsc::channel::<(usize, usize, Reply)>();
        let mut inputs = Vec::with_capacity(n);
        for slice in slices {
            let (tx, rx) = mpsc::channel::<(usize, Arc<(TokenBag, TokenBag)>)>();
            inputs.push(tx);
            let reply_tx = reply_tx.clone();
            scope.spawn(move || {
                for (i, pair) in rx {
                    let a = slice.embed(&pair.0, Arm::Query);
                    let b = slice.embed(&pair.1, Arm::Product);
                    let reply = match exchange {
                        Exchange::Partials => Reply::Partials(shard_partials(&a, &b).expect("equal slice widths")),
                        Exchange::Concatenate => Reply::Slices(a, b),
                    };
                    if reply_tx.send((i, slice.index, reply)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(reply_tx);
        for (i, pair) in pairs.iter().enumerate() {
            let msg = Arc::new(pair.clone());
            for tx in &inputs {
                tx.send((i, Arc::clone(&msg))).expect("shard worker alive");
                ledger.broadcasts += 1;
            }
        }
        drop(inputs);
        for (i, s, reply) in reply_rx {
            ledger.replies += 1;
            ledger.scalars += reply.scalars();
            replies[i][s] = Some(reply);
        }
    });

    let scores = replies
        .into_iter()
        .map(|per_shard| {
            let per_shard: Vec<Reply> = per_shard.into_iter().map(|r| r.expect("every shard replied")).collect();
            match exchange {
                Exchange::Partials => {
                    let parts: Vec<ShardPartials> = per_shard
                        .iter()
                        .map(|r| match r {
                            Reply::Partials(p) => *p,
                            Reply::Slices(..) => unreachable!(),
                        })
                        .collect();
                    aggregate(&parts)
                }
                Exchange::Concatenate => {
                    let (mut a, mut b) = (Vec::new(), Vec::new());
                    for r in per_shard {
                        if let Reply::Slices(x, y) = r {
                            a.extend(x);
                            b.extend(y);
                        }
                    }
                    cosine(&a, &b)
                }
            }
        })
        .collect();
    Ok((scores, ledger))
}
