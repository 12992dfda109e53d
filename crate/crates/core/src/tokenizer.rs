//! Text to bag-of-tokens conversion.
//!
//! A text is split into word unigrams, '#'-joined word n-grams and
//! '#'-wrapped character trigrams. Each token class gets its own
//! frequency-ranked vocabulary budget; all retained tokens share one dense id
//! space `[1, V]`. Tokens outside the vocabulary either map to the reserved
//! id 0 or are hashed into `B` extra bins `[V+1, V+B]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

/// Continues an FNV-1a hash from a previous state.
pub fn fnv1a64_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenClass {
    Unigram,
    /// Word n-gram of the given order (≥ 2).
    Ngram(u8),
    CharTrigram,
}

impl TokenClass {
    /// Tag byte prefixed to the token bytes before OOV hashing.
    pub fn tag(self) -> u8 {
        match self {
            TokenClass::Unigram => 1,
            TokenClass::Ngram(n) => n,
            TokenClass::CharTrigram => 0xff,
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenClass::Unigram => f.write_str("unigram"),
            TokenClass::Ngram(n) => write!(f, "ngram{n}"),
            TokenClass::CharTrigram => f.write_str("char3"),
        }
    }
}

impl FromStr for TokenClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unigram" => Ok(TokenClass::Unigram),
            "char3" => Ok(TokenClass::CharTrigram),
            _ => {
                let n = s
                    .strip_prefix("ngram")
                    .and_then(|n| n.parse::<u8>().ok())
                    .filter(|&n| (2..0xff).contains(&n))
                    .ok_or_else(|| Error::Format(format!("unknown token class {s:?}")))?;
                Ok(TokenClass::Ngram(n))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Query,
    Product,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub use_unigrams: bool,
    /// Word n-gram orders, each ≥ 2.
    pub ngram_orders: Vec<usize>,
    pub use_char_trigrams: bool,
    /// Maximum retained vocabulary size per enabled class.
    pub budgets: BTreeMap<TokenClass, usize>,
    pub oov_bins: usize,
    /// Explicit bag lengths; derived from the corpus when `None`.
    pub query_max_tokens: Option<usize>,
    pub product_max_tokens: Option<usize>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        let mut budgets = BTreeMap::new();
        budgets.insert(TokenClass::Unigram, 125_000);
        budgets.insert(TokenClass::Ngram(2), 25_000);
        budgets.insert(TokenClass::CharTrigram, 64_000);
        TokenizerConfig {
            lowercase: true,
            use_unigrams: true,
            ngram_orders: vec![2],
            use_char_trigrams: true,
            budgets,
            oov_bins: 500_000,
            query_max_tokens: None,
            product_max_tokens: None,
        }
    }
}

impl TokenizerConfig {
    /// Unigrams only, no OOV hashing.
    pub fn unigrams(budget: usize) -> Self {
        let mut budgets = BTreeMap::new();
        budgets.insert(TokenClass::Unigram, budget);
        TokenizerConfig {
            lowercase: true,
            use_unigrams: true,
            ngram_orders: Vec::new(),
            use_char_trigrams: false,
            budgets,
            oov_bins: 0,
            query_max_tokens: None,
            product_max_tokens: None,
        }
    }

    /// Enabled classes in bag order.
    pub fn classes(&self) -> Vec<TokenClass> {
        let mut out = Vec::new();
        if self.use_unigrams {
            out.push(TokenClass::Unigram);
        }
        out.extend(self.ngram_orders.iter().map(|&n| TokenClass::Ngram(n as u8)));
        if self.use_char_trigrams {
            out.push(TokenClass::CharTrigram);
        }
        out
    }

    pub fn budget(&self, class: TokenClass) -> usize {
        self.budgets.get(&class).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.classes();
        if classes.is_empty() {
            return Err(Error::Config("no token class enabled".into()));
        }
        for &n in &self.ngram_orders {
            if !(2..0xff).contains(&n) {
                return Err(Error::Config(format!("n-gram order {n} out of range")));
            }
        }
        for class in classes {
            if self.budget(class) == 0 {
                return Err(Error::Config(format!("zero vocabulary budget for {class}")));
            }
        }
        if self.query_max_tokens == Some(0) || self.product_max_tokens == Some(0) {
            return Err(Error::Config("max token lengths must be positive".into()));
        }
        Ok(())
    }

    fn normalize<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        if self.lowercase {
            std::borrow::Cow::Owned(text.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(text)
        }
    }

    /// All tokens of `text`, class-tagged, in bag order.
    pub fn tokens(&self, text: &str) -> Vec<(TokenClass, String)> {
        let text = self.normalize(text);
        let words: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        let mut out = Vec::new();
        if self.use_unigrams {
            out.extend(words.iter().map(|w| (TokenClass::Unigram, w.clone())));
        }
        for &n in &self.ngram_orders {
            out.extend(word_ngrams(&words, n).into_iter().map(|t| (TokenClass::Ngram(n as u8), t)));
        }
        if self.use_char_trigrams {
            out.extend(char_trigrams(&text).into_iter().map(|t| (TokenClass::CharTrigram, t)));
        }
        out
    }
}

/// Whitespace-run split, lowercased when configured.
pub fn word_unigrams(text: &str, config: &TokenizerConfig) -> Vec<String> {
    config.normalize(text).split_whitespace().map(str::to_owned).collect()
}

/// Consecutive `n`-word windows joined with '#'.
pub fn word_ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Vec<String> {
    assert!(n >= 2, "n-gram order must be at least 2");
    if tokens.len() < n {
        return Vec::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("#"))
        .collect()
}

/// All length-3 windows of the text wrapped in '#', with each whitespace run
/// replaced by a single '#'. Operates on characters, not bytes.
pub fn char_trigrams(text: &str) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Vec::new();
    }
    let wrapped: Vec<char> = std::iter::once('#')
        .chain(words.join("#").chars())
        .chain(std::iter::once('#'))
        .collect();
    wrapped.windows(3).map(|w| w.iter().collect()).collect()
}

/// Id of an out-of-vocabulary token: `V + 1 + (fnv1a(tag ‖ token) mod B)`.
pub fn hash_oov(class: TokenClass, token: &str, bins: usize, vocab_size: usize) -> u32 {
    assert!(bins >= 1, "hash_oov needs at least one bin");
    let h = fnv1a64_extend(fnv1a64(&[class.tag()]), token.as_bytes());
    (vocab_size as u64 + 1 + h % bins as u64) as u32
}

/// Fixed-length, right-padded sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenBag {
    pub ids: Vec<u32>,
    pub valid_count: usize,
}

impl TokenBag {
    pub fn from_ids(mut ids: Vec<u32>, len: usize) -> Self {
        ids.truncate(len);
        ids.resize(len, 0);
        let valid_count = ids.iter().filter(|&&id| id != 0).count();
        TokenBag { ids, valid_count }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_count == 0
    }

    /// Non-zero ids in order.
    pub fn valid_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().copied().filter(|&id| id != 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<TokenClass, HashMap<String, u32>>,
    size: usize,
    oov_bins: usize,
    class_counts: BTreeMap<TokenClass, usize>,
    pub query_max_tokens: usize,
    pub product_max_tokens: usize,
}

impl Vocabulary {
    /// Number of in-vocabulary tokens `V`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn oov_bins(&self) -> usize {
        self.oov_bins
    }

    /// Embedding rows needed: `V + B + 1` (row 0 reserved).
    pub fn rows(&self) -> usize {
        self.size + self.oov_bins + 1
    }

    pub fn class_counts(&self) -> &BTreeMap<TokenClass, usize> {
        &self.class_counts
    }

    pub fn get(&self, class: TokenClass, token: &str) -> Option<u32> {
        self.token_to_id.get(&class)?.get(token).copied()
    }

    pub fn contains(&self, class: TokenClass, token: &str) -> bool {
        self.get(class, token).is_some()
    }

    /// In-vocabulary id, OOV bin id, or 0.
    pub fn lookup(&self, class: TokenClass, token: &str) -> u32 {
        match self.get(class, token) {
            Some(id) => id,
            None if self.oov_bins > 0 => hash_oov(class, token, self.oov_bins, self.size),
            None => 0,
        }
    }

    pub fn max_tokens(&self, side: Side) -> usize {
        match side {
            Side::Query => self.query_max_tokens,
            Side::Product => self.product_max_tokens,
        }
    }

    /// Entries sorted by id.
    pub fn entries(&self) -> Vec<(TokenClass, &str, u32)> {
        let mut out: Vec<_> = self
            .token_to_id
            .iter()
            .flat_map(|(c, m)| m.iter().map(move |(t, &id)| (*c, t.as_str(), id)))
            .collect();
        out.sort_by_key(|e| e.2);
        out
    }

    /// Same vocabulary with a different number of OOV bins.
    pub fn with_oov_bins(mut self, bins: usize) -> Self {
        self.oov_bins = bins;
        self
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "V={} B={} QMAX={} PMAX={}",
            self.size, self.oov_bins, self.query_max_tokens, self.product_max_tokens
        )?;
        for (class, token, id) in self.entries() {
            writeln!(w, "{class}\t{token}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))??;
        let mut fields: HashMap<&str, usize> = HashMap::new();
        for part in header.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad vocabulary header field {part:?}")))?;
            let v = v
                .parse()
                .map_err(|_| Error::Format(format!("bad vocabulary header value {part:?}")))?;
            fields.insert(k, v);
        }
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocabulary header missing {k}")))
        };
        let size = field("V")?;
        let oov_bins = field("B")?;
        let query_max_tokens = field("QMAX").unwrap_or(1);
        let product_max_tokens = field("PMAX").unwrap_or(1);

        let mut token_to_id: BTreeMap<TokenClass, HashMap<String, u32>> = BTreeMap::new();
        let mut class_counts = BTreeMap::new();
        let mut seen_ids = vec![false; size + 1];
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(c), Some(t), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("bad vocabulary line {line:?}")));
            };
            let class: TokenClass = c.parse()?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Format(format!("bad token id in {line:?}")))?;
            if id == 0 || id as usize > size {
                return Err(Error::Format(format!("token id {id} outside [1, {size}]")));
            }
            if std::mem::replace(&mut seen_ids[id as usize], true) {
                return Err(Error::Format(format!("duplicate token id {id}")));
            }
            if token_to_id.entry(class).or_default().insert(t.to_owned(), id).is_some() {
                return Err(Error::Format(format!("duplicate token {c}:{t}")));
            }
            *class_counts.entry(class).or_insert(0) += 1;
        }
        let entries: usize = token_to_id.values().map(HashMap::len).sum();
        if entries != size {
            return Err(Error::Format(format!(
                "vocabulary header says V={size} but file has {entries} entries"
            )));
        }
        Ok(Vocabulary {
            token_to_id,
            size,
            oov_bins,
            class_counts,
            query_max_tokens: query_max_tokens.max(1),
            product_max_tokens: product_max_tokens.max(1),
        })
    }
}

/// Nearest-rank 99th percentile of the lengths (at least 1).
fn percentile99(lengths: &mut [usize]) -> Option<usize> {
    if lengths.is_empty() {
        return None;
    }
    lengths.sort_unstable();
    let rank = (0.99 * lengths.len() as f64).ceil() as usize;
    Some(lengths[rank.clamp(1, lengths.len()) - 1].max(1))
}

/// Counts token frequencies per class over the corpus and keeps the
/// top-budget tokens of each (frequency descending, then token ascending).
pub fn build_vocabulary<I, S>(corpus: I, config: &TokenizerConfig) -> Result<Vocabulary>
where
    I: IntoIterator<Item = (Side, S)>,
    S: AsRef<str>,
{
    config.validate()?;
    let mut counts: BTreeMap<TokenClass, HashMap<String, u64>> = BTreeMap::new();
    let mut query_lengths = Vec::new();
    let mut product_lengths = Vec::new();
    let mut records = 0usize;
    for (side, text) in corpus {
        records += 1;
        let tokens = config.tokens(text.as_ref());
        match side {
            Side::Query => query_lengths.push(tokens.len()),
            Side::Product => product_lengths.push(tokens.len()),
        }
        for (class, token) in tokens {
            *counts.entry(class).or_default().entry(token).or_insert(0) += 1;
        }
    }
    if records == 0 {
        return Err(Error::NoData("empty corpus".into()));
    }

    let mut token_to_id: BTreeMap<TokenClass, HashMap<String, u32>> = BTreeMap::new();
    let mut class_counts = BTreeMap::new();
    let mut next_id = 1u32;
    for class in config.classes() {
        let Some(freq) = counts.remove(&class) else {
            continue;
        };
        let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(config.budget(class));
        class_counts.insert(class, ranked.len());
        let ids = token_to_id.entry(class).or_default();
        for (token, _) in ranked {
            ids.insert(token, next_id);
            next_id += 1;
        }
    }

    // A side without samples borrows the other side's length.
    let q99 = percentile99(&mut query_lengths);
    let p99 = percentile99(&mut product_lengths);
    Ok(Vocabulary {
        size: (next_id - 1) as usize,
        token_to_id,
        oov_bins: config.oov_bins,
        class_counts,
        query_max_tokens: config
            .query_max_tokens
            .unwrap_or_else(|| q99.or(p99).unwrap_or(1)),
        product_max_tokens: config
            .product_max_tokens
            .unwrap_or_else(|| p99.or(q99).unwrap_or(1)),
    })
}

/// Encodes a text into a bag of the side's fixed length.
pub fn encode(text: &str, side: Side, vocab: &Vocabulary, config: &TokenizerConfig) -> TokenBag {
    let ids = config
        .tokens(text)
        .into_iter()
        .map(|(class, token)| vocab.lookup(class, &token))
        .collect();
    TokenBag::from_ids(ids, vocab.max_tokens(side))
}
