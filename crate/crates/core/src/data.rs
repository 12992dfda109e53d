//! Interaction-log ingestion and a synthetic corpus generator.
//!
//! The generator plants the phenomena a semantic matcher has to cope with:
//! concepts with several synonymous surface forms, two-word categories that
//! differ only by word order, morphological variants, typos, and rare
//! product-line codes that end up outside a bounded vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogLabel {
    Purchased,
    Impressed,
}

impl fmt::Display for LogLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogLabel::Purchased => "purchased",
            LogLabel::Impressed => "impressed",
        })
    }
}

impl FromStr for LogLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "purchased" => Ok(LogLabel::Purchased),
            "impressed" => Ok(LogLabel::Impressed),
            _ => Err(Error::Format(format!("unknown label {s:?}"))),
        }
    }
}

/// One aggregated row of a query–product interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub query: String,
    pub product_id: String,
    /// Ordered attribute text of the product.
    pub product_text: String,
    pub label: LogLabel,
    pub count: u64,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.query, self.product_id, self.product_text, self.label, self.count
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [query, product_id, product_text, label, count] = fields[..] else {
            return None;
        };
        let count: u64 = count.trim().parse().ok().filter(|&c| c >= 1)?;
        if query.trim().is_empty() || product_id.is_empty() {
            return None;
        }
        Some(LogRecord {
            query: query.to_owned(),
            product_id: product_id.to_owned(),
            product_text: product_text.to_owned(),
            label: label.trim().parse().ok()?,
            count,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub lines: usize,
    pub malformed: usize,
}

/// Parses a tab-separated log (`query, product_id, product_text, label,
/// count`). Malformed lines are skipped and counted; more than 10% malformed
/// aborts.
pub fn parse_log<R: BufRead>(reader: R) -> Result<(Vec<LogRecord>, ParseStats)> {
    let mut records = Vec::new();
    let mut stats = ParseStats::default();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        stats.lines += 1;
        match LogRecord::parse_line(line) {
            Some(r) => records.push(r),
            None => stats.malformed += 1,
        }
    }
    if stats.malformed * 10 > stats.lines {
        return Err(Error::TooManyMalformed {
            bad: stats.malformed,
            total: stats.lines,
        });
    }
    Ok((records, stats))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<(Vec<LogRecord>, ParseStats)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(Error::io_at(path))?;
    parse_log(BufReader::new(f))
}

/// Reads `id\ttext` lines.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(Error::io_at(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected two tab-separated fields", path.display(), n + 1)))?;
        out.push((a.to_owned(), b.to_owned()));
    }
    Ok(out)
}

fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let f = File::create(path).map_err(Error::io_at(path))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        w.write_all(l.as_ref().as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Total concepts, split across category, brand, color and material.
    pub concepts: usize,
    pub synonyms: usize,
    pub products: usize,
    /// Products sharing one full concept signature.
    pub products_per_signature: usize,
    /// Queries, split into train and eval by `eval_fraction`.
    pub queries: usize,
    pub eval_fraction: f64,
    /// Per-word probability of a character edit in a query.
    pub typo_rate: f64,
    /// Per-word probability of a morphological variant in a query.
    pub morph_rate: f64,
    /// Probability that a query carries the product-line code.
    pub code_rate: f64,
    /// Fraction of categories that come in word-order-swapped pairs.
    pub order_pair_rate: f64,
    pub impressed_per_purchase: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            concepts: 100,
            synonyms: 3,
            products: 10_000,
            products_per_signature: 3,
            queries: 2_000,
            eval_fraction: 0.2,
            typo_rate: 0.05,
            morph_rate: 0.1,
            code_rate: 0.3,
            order_pair_rate: 0.2,
            impressed_per_purchase: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("concepts", self.concepts),
            ("synonyms", self.synonyms),
            ("products", self.products),
            ("products_per_signature", self.products_per_signature),
            ("queries", self.queries),
            ("impressed_per_purchase", self.impressed_per_purchase),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be at least 1")));
            }
        }
        if self.concepts < 4 {
            return Err(Error::Config("synthetic corpus needs at least 4 concepts".into()));
        }
        for (name, v) in [
            ("typo_rate", self.typo_rate),
            ("morph_rate", self.morph_rate),
            ("code_rate", self.code_rate),
            ("order_pair_rate", self.order_pair_rate),
            ("eval_fraction", self.eval_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synthetic {name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthQuery {
    pub id: String,
    pub text: String,
    pub eval: bool,
}

/// A generated corpus: catalog, train/eval logs and per-query ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub catalog: Vec<(String, String)>,
    pub queries: Vec<SynthQuery>,
    pub train_log: Vec<LogRecord>,
    pub eval_log: Vec<LogRecord>,
    /// `(query_id, product_id)` for every semantically matching product.
    pub ground_truth: Vec<(String, String)>,
}

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const EVAL_LOG_FILE: &str = "eval_log.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";

impl SyntheticData {
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(Error::io_at(dir))?;
        write_lines(&dir.join(CATALOG_FILE), self.catalog.iter().map(|(id, t)| format!("{id}\t{t}")))?;
        write_lines(&dir.join(TRAIN_LOG_FILE), self.train_log.iter().map(LogRecord::to_line))?;
        write_lines(&dir.join(EVAL_LOG_FILE), self.eval_log.iter().map(LogRecord::to_line))?;
        write_lines(
            &dir.join(QUERIES_FILE),
            self.queries
                .iter()
                .map(|q| format!("{}\t{}\t{}", q.id, if q.eval { "eval" } else { "train" }, q.text)),
        )?;
        write_lines(&dir.join(GROUND_TRUTH_FILE), self.ground_truth.iter().map(|(q, p)| format!("{q}\t{p}")))?;
        Ok(())
    }

    /// Query ids mapped to their ground-truth product ids.
    pub fn relevant_sets(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (q, p) in &self.ground_truth {
            out.entry(q).or_default().insert(p);
        }
        out
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if rng.gen_bool(0.5) {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    w
}

fn code_word(rng: &mut Rng) -> String {
    let a = *CONSONANTS.choose(rng).unwrap() as char;
    let b = *CONSONANTS.choose(rng).unwrap() as char;
    format!("{a}{b}{}", rng.gen_range(100..1000))
}

fn unique<F: FnMut(&mut Rng) -> String>(rng: &mut Rng, used: &mut HashSet<String>, mut f: F) -> String {
    loop {
        let w = f(rng);
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Plural-style morphological variant.
pub fn morph_variant(word: &str) -> String {
    if word.ends_with('s') {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

/// One random character edit (substitute, delete, insert or transpose),
/// never touching the first character.
pub fn typo(word: &str, rng: &mut Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() < 3 {
        return word.to_owned();
    }
    let pos = rng.gen_range(1..chars.len());
    let letter = (b'a' + rng.gen_range(0..26)) as char;
    match rng.gen_range(0..4) {
        0 => {
            let mut c = letter;
            while c == chars[pos] {
                c = (b'a' + rng.gen_range(0..26)) as char;
            }
            chars[pos] = c;
        }
        1 => {
            chars.remove(pos);
        }
        2 => chars.insert(pos, letter),
        _ => {
            if pos + 1 < chars.len() && chars[pos] != chars[pos + 1] {
                chars.swap(pos, pos + 1);
            } else {
                chars.remove(pos);
            }
        }
    }
    chars.into_iter().collect()
}

const SLOTS: usize = 4;
const CATEGORY: usize = 0;

struct World {
    /// `forms[slot][concept][synonym]` surface text.
    forms: Vec<Vec<Vec<String>>>,
    /// Signatures: one concept per slot.
    signatures: Vec<[usize; SLOTS]>,
    codes: Vec<String>,
    /// Product → (signature, chosen synonym per slot).
    products: Vec<(usize, [usize; SLOTS])>,
    /// Per slot and concept, the products carrying it.
    by_concept: Vec<Vec<Vec<usize>>>,
}

fn slot_sizes(concepts: usize) -> [usize; SLOTS] {
    let cat = (concepts * 40 / 100).max(1);
    let brand = (concepts * 25 / 100).max(1);
    let color = (concepts * 15 / 100).max(1);
    let material = concepts.saturating_sub(cat + brand + color).max(1);
    [cat, brand, color, material]
}

fn build_world(cfg: &SynthConfig, rng: &mut Rng) -> World {
    let sizes = slot_sizes(cfg.concepts);
    let mut used = HashSet::new();
    let mut forms: Vec<Vec<Vec<String>>> = Vec::with_capacity(SLOTS);
    for (slot, &size) in sizes.iter().enumerate() {
        let mut concepts: Vec<Vec<String>> = Vec::with_capacity(size);
        if slot == CATEGORY {
            let pairs = ((size as f64 * cfg.order_pair_rate) / 2.0).floor() as usize;
            for _ in 0..pairs {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for _ in 0..cfg.synonyms {
                    let m = unique(rng, &mut used, pseudo_word);
                    let h = unique(rng, &mut used, pseudo_word);
                    a.push(format!("{m} {h}"));
                    b.push(format!("{h} {m}"));
                }
                concepts.push(a);
                concepts.push(b);
            }
        }
        while concepts.len() < size {
            concepts.push((0..cfg.synonyms).map(|_| unique(rng, &mut used, pseudo_word)).collect());
        }
        forms.push(concepts);
    }

    let n_sig = (cfg.products / cfg.products_per_signature).max(1);
    let mut seen = HashSet::new();
    let mut signatures = Vec::with_capacity(n_sig);
    let space: usize = sizes.iter().product();
    while signatures.len() < n_sig.min(space) {
        let s = [
            rng.gen_range(0..sizes[0]),
            rng.gen_range(0..sizes[1]),
            rng.gen_range(0..sizes[2]),
            rng.gen_range(0..sizes[3]),
        ];
        if seen.insert(s) {
            signatures.push(s);
        }
    }
    let codes = (0..signatures.len()).map(|_| unique(rng, &mut used, code_word)).collect();

    let mut products = Vec::with_capacity(cfg.products);
    let mut by_concept: Vec<Vec<Vec<usize>>> = sizes.iter().map(|&s| vec![Vec::new(); s]).collect();
    for p in 0..cfg.products {
        let sig = p % signatures.len();
        let mut choice = [0usize; SLOTS];
        for c in choice.iter_mut() {
            *c = rng.gen_range(0..cfg.synonyms);
        }
        for slot in 0..SLOTS {
            by_concept[slot][signatures[sig][slot]].push(p);
        }
        products.push((sig, choice));
    }
    World {
        forms,
        signatures,
        codes,
        products,
        by_concept,
    }
}

impl World {
    fn product_id(p: usize) -> String {
        format!("P{p:06}")
    }

    fn product_text(&self, p: usize) -> String {
        let (sig, choice) = self.products[p];
        let s = self.signatures[sig];
        let f = |slot: usize| self.forms[slot][s[slot]][choice[slot]].as_str();
        // Ordered attributes: material + category (title), brand, color, code.
        format!("{} {} {} {} {}", f(3), f(0), f(1), f(2), self.codes[sig])
    }

    /// Products whose signature contains every (slot, concept) in `wanted`.
    fn matching(&self, wanted: &[(usize, usize)]) -> Vec<usize> {
        let (&(s0, c0), rest) = wanted.split_first().expect("at least one concept");
        self.by_concept[s0][c0]
            .iter()
            .copied()
            .filter(|&p| {
                let sig = self.signatures[self.products[p].0];
                rest.iter().all(|&(s, c)| sig[s] == c)
            })
            .collect()
    }
}

/// Draws a target product and a query text over a subset of its concepts.
fn draw_query(cfg: &SynthConfig, world: &World, rng: &mut Rng) -> (usize, Vec<(usize, usize)>, String) {
    let target = rng.gen_range(0..cfg.products);
    let (sig_idx, choice) = world.products[target];
    let sig = world.signatures[sig_idx];

    let mut extra: Vec<usize> = (1..SLOTS).collect();
    extra.shuffle(rng);
    let n_extra = rng.gen_range(1..=2);
    let mut slots = vec![CATEGORY];
    slots.extend_from_slice(&extra[..n_extra]);
    let wanted: Vec<(usize, usize)> = slots.iter().map(|&s| (s, sig[s])).collect();

    let mut phrases: Vec<String> = Vec::new();
    for &slot in &slots {
        // A different surface form than the target product uses.
        let syn = if cfg.synonyms >= 2 {
            let mut k = rng.gen_range(0..cfg.synonyms - 1);
            if k >= choice[slot] {
                k += 1;
            }
            k
        } else {
            0
        };
        let phrase = &world.forms[slot][sig[slot]][syn];
        let words: Vec<String> = phrase
            .split(' ')
            .map(|w| {
                let mut w = w.to_owned();
                if rng.gen_bool(cfg.morph_rate) {
                    w = morph_variant(&w);
                }
                if rng.gen_bool(cfg.typo_rate) {
                    w = typo(&w, rng);
                }
                w
            })
            .collect();
        phrases.push(words.join(" "));
    }
    phrases.shuffle(rng);
    if rng.gen_bool(cfg.code_rate) {
        phrases.push(world.codes[sig_idx].clone());
    }
    (target, wanted, phrases.join(" "))
}

/// Generates a synthetic corpus, fully determined by `cfg.seed`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = rng::derive(cfg.seed, "synthetic");
    let world = build_world(cfg, &mut rng);
    let catalog: Vec<(String, String)> = (0..cfg.products)
        .map(|p| (World::product_id(p), world.product_text(p)))
        .collect();

    let n_eval = ((cfg.queries as f64) * cfg.eval_fraction).round() as usize;
    let n_train = cfg.queries - n_eval.min(cfg.queries);
    let mut queries = Vec::with_capacity(cfg.queries);
    let mut train_log = Vec::new();
    let mut eval_log = Vec::new();
    let mut ground_truth = Vec::new();

    let mut texts: HashSet<String> = HashSet::new();
    for qi in 0..cfg.queries {
        let mut attempt = 0;
        let (target, wanted, text) = loop {
            let (target, wanted, text) = draw_query(cfg, &world, &mut rng);
            attempt += 1;
            if texts.insert(text.clone()) || attempt >= 100 {
                break (target, wanted, text);
            }
        };
        let (sig_idx, _) = world.products[target];
        let sig = world.signatures[sig_idx];
        let id = format!("Q{qi:06}");
        let eval = qi >= n_train;

        let relevant = world.matching(&wanted);
        for &p in &relevant {
            ground_truth.push((id.clone(), World::product_id(p)));
        }

        let siblings: Vec<usize> = world.by_concept[CATEGORY][sig[CATEGORY]]
            .iter()
            .copied()
            .filter(|&p| world.products[p].0 == sig_idx && p != target)
            .collect();
        let mut purchased = vec![target];
        if let Some(&s) = siblings.choose(&mut rng) {
            if rng.gen_bool(0.3) {
                purchased.push(s);
            }
        }
        let bought: HashSet<usize> = purchased.iter().copied().collect();

        // Impressed: products sharing part of the query's concepts. Relevant
        // but unbought products only fill in when no partial match exists.
        let relevant_set: HashSet<usize> = relevant.iter().copied().collect();
        let mut partial: Vec<usize> = Vec::new();
        for &(s, c) in &wanted {
            partial.extend(world.by_concept[s][c].iter().copied().filter(|p| !relevant_set.contains(p)));
        }
        partial.sort_unstable();
        partial.dedup();
        let pool: Vec<usize> = if partial.is_empty() {
            relevant.iter().copied().filter(|p| !bought.contains(p)).collect()
        } else {
            partial
        };
        let mut impressed: BTreeSet<usize> = BTreeSet::new();
        let want = cfg.impressed_per_purchase.min(pool.len());
        while impressed.len() < want {
            impressed.insert(*pool.choose(&mut rng).expect("pool is not empty"));
        }

        let log = if eval { &mut eval_log } else { &mut train_log };
        for &p in &purchased {
            log.push(LogRecord {
                query: text.clone(),
                product_id: World::product_id(p),
                product_text: catalog[p].1.clone(),
                label: LogLabel::Purchased,
                count: rng.gen_range(1..=3),
            });
        }
        for &p in &impressed {
            log.push(LogRecord {
                query: text.clone(),
                product_id: World::product_id(p),
                product_text: catalog[p].1.clone(),
                label: LogLabel::Impressed,
                count: rng.gen_range(1..=3),
            });
        }
        queries.push(SynthQuery { id, text, eval });
    }

    // Repeated query texts must not label one product both ways.
    let mut bought: HashSet<(String, String)> = HashSet::new();
    for r in train_log.iter().chain(&eval_log) {
        if r.label == LogLabel::Purchased {
            bought.insert((r.query.clone(), r.product_id.clone()));
        }
    }
    for log in [&mut train_log, &mut eval_log] {
        log.retain(|r| {
            r.label == LogLabel::Purchased || !bought.contains(&(r.query.clone(), r.product_id.clone()))
        });
    }

    Ok(SyntheticData {
        catalog,
        queries,
        train_log,
        eval_log,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn parse_valid_line() {
        let (recs, stats) = parse_log("red dress\tP1\tcrimson gown brandX red\tpurchased\t3\n".as_bytes()).unwrap();
        assert_eq!(stats, ParseStats { lines: 1, malformed: 0 });
        assert_eq!(
            recs[0],
            LogRecord {
                query: "red dress".into(),
                product_id: "P1".into(),
                product_text: "crimson gown brandX red".into(),
                label: LogLabel::Purchased,
                count: 3,
            }
        );
    }

    #[test]
    fn malformed_lines_are_counted() {
        let mut text = String::new();
        for i in 0..19 {
            text.push_str(&format!("q{i}\tP{i}\tt\timpressed\t1\n"));
        }
        text.push_str("only\tfour\tfields\tpurchased\n");
        let (recs, stats) = parse_log(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 19);
        assert_eq!(stats.malformed, 1);

        let zero = "q\tP\tt\tpurchased\t0\nq\tP\tt\tpurchased\t1\n";
        assert!(matches!(
            parse_log(zero.as_bytes()),
            Err(Error::TooManyMalformed { bad: 1, total: 2 })
        ));
        assert!(LogRecord::parse_line("q\tP\tt\tpurchased\t0").is_none());
        assert!(LogRecord::parse_line("q\tP\tt\tclicked\t1").is_none());
    }

    #[test]
    fn log_line_round_trip() {
        let r = LogRecord {
            query: "a b".into(),
            product_id: "P9".into(),
            product_text: "x y z".into(),
            label: LogLabel::Impressed,
            count: 7,
        };
        assert_eq!(LogRecord::parse_line(&r.to_line()), Some(r));
    }

    #[test]
    fn typo_changes_one_edit() {
        let mut rng = seeded(3);
        for _ in 0..200 {
            let t = typo("vamolek", &mut rng);
            assert_ne!(t, "vamolek");
            assert!(t.starts_with('v'));
            assert!((6..=8).contains(&t.len()));
        }
        assert_eq!(typo("ab", &mut rng), "ab");
    }

    fn small() -> SynthConfig {
        SynthConfig {
            concepts: 100,
            synonyms: 3,
            products: 2_000,
            queries: 300,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train_log, c.train_log);
    }

    #[test]
    fn degenerate_config_has_no_lexical_gap() {
        let cfg = SynthConfig {
            synonyms: 1,
            typo_rate: 0.0,
            morph_rate: 0.0,
            ..small()
        };
        let d = gen_synthetic(&cfg).unwrap();
        for r in d.train_log.iter().chain(&d.eval_log) {
            if r.label != LogLabel::Purchased {
                continue;
            }
            let product: HashSet<&str> = r.product_text.split(' ').collect();
            for w in r.query.split(' ') {
                assert!(product.contains(w), "{w:?} not in {:?}", r.product_text);
            }
        }
    }

    #[test]
    fn ground_truth_covers_purchases() {
        let d = gen_synthetic(&SynthConfig {
            concepts: 100,
            products: 10_000,
            ..small()
        })
        .unwrap();
        let by_text: BTreeMap<&str, &str> = d.queries.iter().map(|q| (q.text.as_str(), q.id.as_str())).collect();
        assert_eq!(by_text.len(), d.queries.len(), "query texts are unique");
        let relevant = d.relevant_sets();
        assert_eq!(relevant.len(), d.queries.len(), "every query has relevant products");
        for r in d.train_log.iter().chain(&d.eval_log) {
            if r.label == LogLabel::Purchased {
                assert!(relevant[by_text[r.query.as_str()]].contains(r.product_id.as_str()));
            }
        }
    }

    #[test]
    fn labels_are_exclusive() {
        // Few distinct texts are possible here, so repeats are forced.
        let d = gen_synthetic(&SynthConfig {
            concepts: 8,
            synonyms: 1,
            typo_rate: 0.0,
            morph_rate: 0.0,
            code_rate: 0.0,
            products: 50,
            queries: 200,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut labels: BTreeMap<(&str, &str), BTreeSet<LogLabel>> = BTreeMap::new();
        for r in d.train_log.iter().chain(&d.eval_log) {
            labels.entry((&r.query, &r.product_id)).or_default().insert(r.label);
        }
        assert!(labels.values().all(|s| s.len() == 1));
    }

    #[test]
    fn lexical_gap_exists_with_synonyms_and_typos() {
        let d = gen_synthetic(&SynthConfig { typo_rate: 0.1, ..small() }).unwrap();
        let catalog: BTreeMap<&str, HashSet<&str>> = d
            .catalog
            .iter()
            .map(|(id, t)| (id.as_str(), t.split(' ').collect()))
            .collect();
        let relevant = d.relevant_sets();
        let gap = d
            .queries
            .iter()
            .filter(|q| {
                let words: HashSet<&str> = q.text.split(' ').collect();
                relevant[q.id.as_str()]
                    .iter()
                    .any(|p| catalog[p].is_disjoint(&words))
            })
            .count();
        assert!(gap * 10 >= d.queries.len(), "only {gap} queries with a lexical gap");
    }

    #[test]
    fn writes_all_files() {
        let d = gen_synthetic(&SynthConfig {
            products: 200,
            queries: 20,
            ..small()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_dir(dir.path()).unwrap();
        let cat = read_pairs(dir.path().join(CATALOG_FILE)).unwrap();
        assert_eq!(cat, d.catalog);
        let (log, stats) = read_log(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(stats.malformed, 0);
        assert_eq!(log, d.train_log);
    }
}
