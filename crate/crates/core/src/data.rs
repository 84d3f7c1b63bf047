//! Corpus ingestion: QA and review dumps, product join, pair construction,
//! question-level splits and dataset statistics.
//!
//! Input files are JSON lines. QA lines carry `asin`, `question`,
//! `answers` (list of strings) and `questionType`; review lines carry
//! `asin` and `reviewText`. Extra fields are ignored. The upstream dumps use
//! Python-literal records (single quotes, `True`/`None`); [`normalize_loose`]
//! rewrites those into the strict form first.
//!
//! Pair files are tab separated: `kind, label-or-dash, question, candidate,
//! asin`. Gold files are tab separated: `question, sentence, label`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PairKind;
use crate::seed::derive_seed;

/// Share of malformed lines above which a file is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaRecord {
    pub asin: String,
    pub category: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReviewRecord {
    pub asin: String,
    pub category: String,
    pub text: String,
    pub sentences: Vec<String>,
}

/// Records read from one file plus what was dropped on the way.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseCounts {
    pub lines: usize,
    pub kept: usize,
    pub malformed: usize,
    /// Well-formed records dropped by a content rule (question type, empty
    /// text, no answers).
    pub filtered: usize,
    pub duplicates: usize,
}

#[derive(Clone, Debug)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub counts: ParseCounts,
    /// `(line number, reason)` for each malformed line.
    pub warnings: Vec<(usize, String)>,
}

#[derive(Deserialize)]
struct RawQa {
    asin: String,
    question: String,
    answers: Vec<String>,
    #[serde(rename = "questionType")]
    question_type: String,
}

#[derive(Deserialize)]
struct RawReview {
    asin: String,
    #[serde(rename = "reviewText")]
    review_text: Option<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn check_malformed<T>(path: &Path, parsed: &Parsed<T>) -> Result<()> {
    for (line, msg) in &parsed.warnings {
        log::warn!("{}:{line}: skipped: {msg}", path.display());
    }
    let c = &parsed.counts;
    if c.lines > 0 && c.malformed as f64 > MAX_MALFORMED_FRACTION * c.lines as f64 {
        let first = parsed.warnings.first().map_or(0, |w| w.0);
        return Err(Error::parse(
            path,
            first,
            format!(
                "{} of {} lines malformed (limit {:.0}%)",
                c.malformed,
                c.lines,
                100.0 * MAX_MALFORMED_FRACTION
            ),
        ));
    }
    Ok(())
}

/// Open-ended questions with at least one non-empty answer.
pub fn parse_qa_lines<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    category: &str,
) -> Parsed<QaRecord> {
    let mut out = Parsed {
        records: Vec::new(),
        counts: ParseCounts::default(),
        warnings: Vec::new(),
    };
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.counts.lines += 1;
        let raw: RawQa = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                out.counts.malformed += 1;
                out.warnings.push((i + 1, e.to_string()));
                continue;
            }
        };
        if raw.asin.trim().is_empty() {
            out.counts.malformed += 1;
            out.warnings.push((i + 1, "empty asin".into()));
            continue;
        }
        let answers: Vec<String> = raw
            .answers
            .into_iter()
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty())
            .collect();
        let question = raw.question.trim().to_string();
        if raw.question_type != "open-ended" || question.is_empty() || answers.is_empty() {
            out.counts.filtered += 1;
            continue;
        }
        out.counts.kept += 1;
        out.records.push(QaRecord {
            asin: raw.asin,
            category: category.to_string(),
            question,
            answers,
        });
    }
    out
}

pub fn parse_qa(path: &Path, category: &str) -> Result<Parsed<QaRecord>> {
    let lines = read_lines(path)?;
    let parsed = parse_qa_lines(lines.iter().map(String::as_str), category);
    check_malformed(path, &parsed)?;
    Ok(parsed)
}

/// Reviews with text, de-duplicated on `(asin, text)`.
pub fn parse_review_lines<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    category: &str,
) -> Parsed<ReviewRecord> {
    let mut out = Parsed {
        records: Vec::new(),
        counts: ParseCounts::default(),
        warnings: Vec::new(),
    };
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.counts.lines += 1;
        let raw: RawReview = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                out.counts.malformed += 1;
                out.warnings.push((i + 1, e.to_string()));
                continue;
            }
        };
        let Some(text) = raw.review_text else {
            out.counts.malformed += 1;
            out.warnings.push((i + 1, "missing reviewText".into()));
            continue;
        };
        if raw.asin.trim().is_empty() {
            out.counts.malformed += 1;
            out.warnings.push((i + 1, "empty asin".into()));
            continue;
        }
        let text = text.trim().to_string();
        if text.is_empty() {
            out.counts.filtered += 1;
            continue;
        }
        if !seen.insert((raw.asin.clone(), text.clone())) {
            out.counts.duplicates += 1;
            continue;
        }
        out.counts.kept += 1;
        out.records.push(ReviewRecord {
            asin: raw.asin,
            category: category.to_string(),
            sentences: split_sentences(&text),
            text,
        });
    }
    out
}

pub fn parse_reviews(path: &Path, category: &str) -> Result<Parsed<ReviewRecord>> {
    let lines = read_lines(path)?;
    let parsed = parse_review_lines(lines.iter().map(String::as_str), category);
    check_malformed(path, &parsed)?;
    Ok(parsed)
}

/// Lowercased words that end in a period without ending a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "vs.", "etc.", "e.g.", "i.e.",
    "approx.", "no.", "inc.", "ltd.", "co.", "fig.", "min.", "max.", "oz.", "lb.", "lbs.", "ft.",
    "in.", "mm.", "cm.", "qty.", "u.s.",
];

/// Splits after `.`, `!` or `?` when followed by whitespace, unless the word
/// ending there is a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, &(pos, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let next_is_space = chars.get(k + 1).is_some_and(|&(_, c)| c.is_whitespace());
        if !next_is_space {
            continue;
        }
        let end = pos + ch.len_utf8();
        let word_start = text[start..end]
            .rfind(char::is_whitespace)
            .map_or(start, |w| start + w + 1);
        let word = text[word_start..end].to_lowercase();
        if ch == '.' && ABBREVIATIONS.contains(&word.as_str()) {
            continue;
        }
        let sentence = text[start..end].trim();
        if !sentence.is_empty() {
            out.push(sentence.to_string());
        }
        start = end;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Product {
    pub asin: String,
    pub category: String,
    pub questions: Vec<QaRecord>,
    pub reviews: Vec<ReviewRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTotals {
    pub asins: usize,
    pub questions: usize,
    pub qa_pairs: usize,
    pub reviews: usize,
    pub review_sentences: usize,
}

/// Products that have both questions and reviews, keyed by ASIN.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchedSet {
    pub products: BTreeMap<String, Product>,
}

impl MatchedSet {
    pub fn unique_asins(&self) -> usize {
        self.products.len()
    }

    pub fn per_category(&self) -> BTreeMap<String, CategoryTotals> {
        let mut out: BTreeMap<String, CategoryTotals> = BTreeMap::new();
        for p in self.products.values() {
            let t = out.entry(p.category.clone()).or_default();
            t.asins += 1;
            t.questions += p.questions.len();
            t.qa_pairs += p.questions.iter().map(|q| q.answers.len()).sum::<usize>();
            t.reviews += p.reviews.len();
            t.review_sentences += p.reviews.iter().map(|r| r.sentences.len()).sum::<usize>();
        }
        out
    }
}

/// Keeps products present in both streams. A product takes the category
/// of its first question.
pub fn join_by_asin(qa: Vec<QaRecord>, reviews: Vec<ReviewRecord>) -> MatchedSet {
    let mut by_asin: BTreeMap<String, (Vec<QaRecord>, Vec<ReviewRecord>)> = BTreeMap::new();
    for q in qa {
        by_asin.entry(q.asin.clone()).or_default().0.push(q);
    }
    for r in reviews {
        if let Some(e) = by_asin.get_mut(&r.asin) {
            e.1.push(r);
        }
    }
    let products = by_asin
        .into_iter()
        .filter(|(_, (q, r))| !q.is_empty() && !r.is_empty())
        .map(|(asin, (questions, reviews))| {
            let category = questions[0].category.clone();
            (
                asin.clone(),
                Product {
                    asin,
                    category,
                    questions,
                    reviews,
                },
            )
        })
        .collect();
    MatchedSet { products }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub kind: PairKind,
    pub label: Option<u8>,
    pub question: String,
    pub candidate: String,
    /// Product of the question.
    pub asin: String,
    /// Product the candidate was taken from.
    pub candidate_asin: String,
}

impl SentencePair {
    fn question_key(&self) -> (&str, &str) {
        (&self.asin, &self.question)
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, pool: usize, k: usize) -> Vec<usize> {
    if k <= pool {
        index::sample(rng, pool, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..pool)).collect()
    }
}

/// Positive pairs for every (question, answer), plus negatives drawn from
/// answers to questions on other products of the same category. The number
/// of negatives tracks `neg_ratio` times the running positive count, so the
/// overall count is within one of the target. Returns warnings alongside.
pub fn build_qa_pairs(
    matched: &MatchedSet,
    neg_ratio: f64,
    seed: u64,
) -> Result<(Vec<SentencePair>, Vec<String>)> {
    if !(neg_ratio > 0.0) || !neg_ratio.is_finite() {
        return Err(Error::Parameter(format!("neg_ratio must be > 0, got {neg_ratio}")));
    }
    let mut by_category: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    let mut everything: Vec<(&str, &str)> = Vec::new();
    for p in matched.products.values() {
        for q in &p.questions {
            for a in &q.answers {
                by_category.entry(&p.category).or_default().push((&p.asin, a));
                everything.push((&p.asin, a));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for p in matched.products.values() {
        let in_category: Vec<(&str, &str)> = by_category[p.category.as_str()]
            .iter()
            .filter(|(asin, _)| *asin != p.asin)
            .copied()
            .collect();
        let pool = if in_category.is_empty() {
            warnings.push(format!(
                "category {:?} has no other products; drawing negatives for {} corpus-wide",
                p.category, p.asin
            ));
            everything.iter().filter(|(asin, _)| *asin != p.asin).copied().collect()
        } else {
            in_category
        };
        for q in &p.questions {
            for a in &q.answers {
                out.push(SentencePair {
                    kind: PairKind::Qa,
                    label: Some(1),
                    question: q.question.clone(),
                    candidate: a.clone(),
                    asin: p.asin.clone(),
                    candidate_asin: p.asin.clone(),
                });
            }
            positives += q.answers.len();
            let target = (neg_ratio * positives as f64).round() as usize;
            let k = target.saturating_sub(negatives);
            if k == 0 {
                continue;
            }
            if pool.is_empty() {
                warnings.push(format!("no negative candidates for a question on {}", p.asin));
                continue;
            }
            for i in sample_indices(&mut rng, pool.len(), k) {
                let (asin, answer) = pool[i];
                out.push(SentencePair {
                    kind: PairKind::Qa,
                    label: Some(0),
                    question: q.question.clone(),
                    candidate: answer.to_string(),
                    asin: p.asin.clone(),
                    candidate_asin: asin.to_string(),
                });
            }
            negatives += k;
        }
    }
    Ok((out, warnings))
}

/// Pairs each question with up to `cap` sentences from reviews of its own
/// product.
pub fn build_qr_pairs(matched: &MatchedSet, cap: usize, seed: u64) -> Result<Vec<SentencePair>> {
    if cap == 0 {
        return Err(Error::Parameter("per-question cap must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in matched.products.values() {
        let sentences: Vec<&str> = p
            .reviews
            .iter()
            .flat_map(|r| r.sentences.iter().map(String::as_str))
            .collect();
        if sentences.is_empty() {
            continue;
        }
        for q in &p.questions {
            let k = cap.min(sentences.len());
            for i in index::sample(&mut rng, sentences.len(), k) {
                out.push(SentencePair {
                    kind: PairKind::Qr,
                    label: None,
                    question: q.question.clone(),
                    candidate: sentences[i].to_string(),
                    asin: p.asin.clone(),
                    candidate_asin: p.asin.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Hand-labeled question/review-sentence rows. Every row must carry a 0/1
/// label.
pub fn load_gold_qr(path: &Path) -> Result<Vec<SentencePair>> {
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let label = match fields.as_slice() {
            [_, _, l] => parse_label(l.trim()),
            _ => None,
        };
        let Some(label) = label else {
            return Err(Error::parse(
                path,
                i + 1,
                "expected question<TAB>sentence<TAB>label with label 0 or 1",
            ));
        };
        out.push(SentencePair {
            kind: PairKind::Qr,
            label: Some(label),
            question: fields[0].trim().to_string(),
            candidate: fields[1].trim().to_string(),
            asin: String::new(),
            candidate_asin: String::new(),
        });
    }
    Ok(out)
}

fn parse_label(s: &str) -> Option<u8> {
    match s {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

/// `(share of label 0, share of label 1)` over labeled pairs.
pub fn label_proportions(pairs: &[SentencePair]) -> Option<(f64, f64)> {
    let labeled: Vec<u8> = pairs.iter().filter_map(|p| p.label).collect();
    if labeled.is_empty() {
        return None;
    }
    let ones = labeled.iter().filter(|&&l| l == 1).count();
    let n = labeled.len() as f64;
    let p1 = ones as f64 / n;
    Some((1.0 - p1, p1))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Partition sizes for `n` items by largest remainder.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(&raw) {
        *s = r.floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    sizes
}

/// Train/dev/test partitions at the question level: all pairs that share
/// `(asin, question)` land in the same partition.
pub fn split(pairs: Vec<SentencePair>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Parameter(format!("split ratios must be positive: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("split ratios sum to {sum}, not 1")));
    }
    let keys: BTreeSet<(String, String)> = pairs
        .iter()
        .map(|p| {
            let (a, q) = p.question_key();
            (a.to_string(), q.to_string())
        })
        .collect();
    let mut keys: Vec<(String, String)> = keys.into_iter().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = allocate(keys.len(), ratios);
    let mut part: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut cursor = 0;
    for (which, &size) in sizes.iter().enumerate() {
        for k in &keys[cursor..cursor + size] {
            part.insert(k.clone(), which);
        }
        cursor += size;
    }
    let mut out = Splits::default();
    for p in pairs {
        let (a, q) = p.question_key();
        let which = part[&(a.to_string(), q.to_string())];
        match which {
            0 => out.train.push(p),
            1 => out.dev.push(p),
            _ => out.test.push(p),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub pairs: usize,
    pub questions: usize,
    /// Shares of label 0 and label 1; absent for unlabeled sets.
    pub label_proportions: Option<(f64, f64)>,
}

impl SplitStats {
    pub fn of(pairs: &[SentencePair]) -> Self {
        let questions: BTreeSet<(&str, &str)> = pairs.iter().map(SentencePair::question_key).collect();
        SplitStats {
            pairs: pairs.len(),
            questions: questions.len(),
            label_proportions: label_proportions(pairs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub unique_asins: usize,
    pub total_qa_pairs: usize,
    pub total_reviews: usize,
    pub categories: BTreeMap<String, CategoryTotals>,
    pub parsing: BTreeMap<String, ParseCounts>,
    pub splits: BTreeMap<String, SplitStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySource {
    pub name: String,
    pub qa: PathBuf,
    pub reviews: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub categories: Vec<CategorySource>,
    pub gold: Option<PathBuf>,
    /// Input files hold upstream Python-literal records.
    pub loose: bool,
    pub neg_ratio: f64,
    pub qr_per_question: usize,
    pub split: [f64; 3],
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            categories: Vec::new(),
            gold: None,
            loose: false,
            neg_ratio: 1.0,
            qr_per_question: 3,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl IngestConfig {
    /// Every input path referenced by the config.
    pub fn input_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        for c in &self.categories {
            out.push(&c.qa);
            out.push(&c.reviews);
        }
        if let Some(g) = &self.gold {
            out.push(g);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("no input categories configured".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.categories {
            if !names.insert(&c.name) {
                return Err(Error::Config(format!("category {:?} listed twice", c.name)));
            }
        }
        for p in self.input_paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if !(self.neg_ratio > 0.0) || self.qr_per_question == 0 {
            return Err(Error::Config("neg_ratio and qr_per_question must be positive".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must be positive and sum to 1", self.split)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub qa: Splits,
    pub qr_train: Vec<SentencePair>,
    pub gold: Option<Vec<SentencePair>>,
    pub stats: DatasetStats,
    pub warnings: Vec<String>,
}

fn load_lines(path: &Path, loose: bool) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    if !loose {
        return Ok(lines);
    }
    // Unparseable loose lines pass through and are counted as malformed.
    Ok(lines
        .into_iter()
        .flat_map(|l| normalize_loose(&l).unwrap_or_else(|_| vec![l]))
        .collect())
}

/// Parse, join, build pairs, split. Categories are parsed in parallel;
/// everything after the join runs in a fixed order.
pub fn run_ingest(config: &IngestConfig, seed: u64) -> Result<IngestOutput> {
    config.validate()?;
    type Both = (Parsed<QaRecord>, Parsed<ReviewRecord>);
    let parsed: Vec<Result<Both>> = config
        .categories
        .par_iter()
        .map(|c| {
            let qa_lines = load_lines(&c.qa, config.loose)?;
            let qa = parse_qa_lines(qa_lines.iter().map(String::as_str), &c.name);
            check_malformed(&c.qa, &qa)?;
            let rv_lines = load_lines(&c.reviews, config.loose)?;
            let rv = parse_review_lines(rv_lines.iter().map(String::as_str), &c.name);
            check_malformed(&c.reviews, &rv)?;
            Ok((qa, rv))
        })
        .collect();

    let mut all_qa = Vec::new();
    let mut all_reviews = Vec::new();
    let mut parsing = BTreeMap::new();
    for (c, res) in config.categories.iter().zip(parsed) {
        let (qa, rv) = res?;
        parsing.insert(format!("{}/qa", c.name), qa.counts);
        parsing.insert(format!("{}/reviews", c.name), rv.counts);
        all_qa.extend(qa.records);
        all_reviews.extend(rv.records);
    }
    let matched = join_by_asin(all_qa, all_reviews);
    let (qa_pairs, warnings) = build_qa_pairs(&matched, config.neg_ratio, derive_seed(seed, "ingest/negatives"))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let qr_train = build_qr_pairs(&matched, config.qr_per_question, derive_seed(seed, "ingest/reviews"))?;
    let qa = split(qa_pairs, config.split, derive_seed(seed, "ingest/split"))?;
    let gold = config.gold.as_deref().map(load_gold_qr).transpose()?;

    let categories = matched.per_category();
    let mut splits = BTreeMap::new();
    splits.insert("qa_train".to_string(), SplitStats::of(&qa.train));
    splits.insert("qa_dev".to_string(), SplitStats::of(&qa.dev));
    splits.insert("qa_test".to_string(), SplitStats::of(&qa.test));
    splits.insert("qr_train".to_string(), SplitStats::of(&qr_train));
    if let Some(g) = &gold {
        splits.insert("gold_qr".to_string(), SplitStats::of(g));
    }
    let stats = DatasetStats {
        unique_asins: matched.unique_asins(),
        total_qa_pairs: categories.values().map(|c| c.qa_pairs).sum(),
        total_reviews: categories.values().map(|c| c.reviews).sum(),
        categories,
        parsing,
        splits,
    };
    Ok(IngestOutput {
        qa,
        qr_train,
        gold,
        stats,
        warnings,
    })
}

fn clean_field(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Writes pairs as `kind, label-or-dash, question, candidate, asin` rows.
/// Whitespace runs inside fields (including tabs and newlines) collapse to
/// one space.
pub fn write_pairs(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let label = p.label.map_or("-".to_string(), |l| l.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            p.kind.as_str(),
            label,
            clean_field(&p.question),
            clean_field(&p.candidate),
            p.asin
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::parse(path, i + 1, msg.to_string());
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let kind = match f[0] {
            "QA" => PairKind::Qa,
            "QR" => PairKind::Qr,
            _ => return Err(bad("pair kind must be QA or QR")),
        };
        let label = match f[1] {
            "-" => None,
            l => Some(parse_label(l).ok_or_else(|| bad("label must be 0, 1 or -"))?),
        };
        out.push(SentencePair {
            kind,
            label,
            question: f[2].to_string(),
            candidate: f[3].to_string(),
            asin: f[4].to_string(),
            candidate_asin: f[4].to_string(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loose record normalization
// ---------------------------------------------------------------------------

struct Literal<'a> {
    s: &'a [u8],
    src: &'a str,
    pos: usize,
}

impl<'a> Literal<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Data(format!("{msg} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", b as char)))
        }
    }

    fn value(&mut self) -> Result<serde_json::Value> {
        use serde_json::Value;
        match self.peek() {
            Some(b'{') => {
                self.pos += 1;
                let mut map = serde_json::Map::new();
                if self.peek() == Some(b'}') {
                    self.pos += 1;
                    return Ok(Value::Object(map));
                }
                loop {
                    let key = match self.value()? {
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    self.expect(b':')?;
                    let v = self.value()?;
                    map.insert(key, v);
                    match self.peek() {
                        Some(b',') => {
                            self.pos += 1;
                            if self.peek() == Some(b'}') {
                                self.pos += 1;
                                return Ok(Value::Object(map));
                            }
                        }
                        Some(b'}') => {
                            self.pos += 1;
                            return Ok(Value::Object(map));
                        }
                        _ => return Err(self.err("expected ',' or '}'")),
                    }
                }
            }
            Some(open @ (b'[' | b'(')) => {
                self.pos += 1;
                let close = if open == b'[' { b']' } else { b')' };
                let mut items = Vec::new();
                loop {
                    if self.peek() == Some(close) {
                        self.pos += 1;
                        return Ok(Value::Array(items));
                    }
                    items.push(self.value()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(c) if c == close => {}
                        _ => return Err(self.err("expected ',' or closing bracket")),
                    }
                }
            }
            Some(q @ (b'\'' | b'"')) => self.string(q).map(Value::String),
            Some(_) => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && !matches!(self.s[self.pos], b',' | b'}' | b']' | b')' | b':')
                    && !self.s[self.pos].is_ascii_whitespace()
                {
                    self.pos += 1;
                }
                let word = &self.src[start..self.pos];
                match word {
                    "True" | "true" => Ok(Value::Bool(true)),
                    "False" | "false" => Ok(Value::Bool(false)),
                    "None" | "null" => Ok(Value::Null),
                    _ => serde_json::from_str::<serde_json::Number>(word)
                        .map(Value::Number)
                        .map_err(|_| self.err(&format!("unknown literal {word:?}"))),
                }
            }
            None => Err(self.err("unexpected end of record")),
        }
    }

    fn string(&mut self, quote: u8) -> Result<String> {
        self.pos += 1;
        let mut out = String::new();
        loop {
            let rest = &self.src[self.pos..];
            let Some(ch) = rest.chars().next() else {
                return Err(self.err("unterminated string"));
            };
            self.pos += ch.len_utf8();
            if ch as u32 == u32::from(quote) {
                return Ok(out);
            }
            if ch != '\\' {
                out.push(ch);
                continue;
            }
            let Some(esc) = self.src[self.pos..].chars().next() else {
                return Err(self.err("dangling escape"));
            };
            self.pos += esc.len_utf8();
            match esc {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                'r' => out.push('\r'),
                '0' => out.push('\0'),
                'x' | 'u' => {
                    let width = if esc == 'x' { 2 } else { 4 };
                    let hex = self
                        .src
                        .get(self.pos..self.pos + width)
                        .ok_or_else(|| self.err("short escape"))?;
                    let code = u32::from_str_radix(hex, 16).map_err(|_| self.err("bad hex escape"))?;
                    out.push(char::from_u32(code).unwrap_or('\u{fffd}'));
                    self.pos += width;
                }
                other => out.push(other),
            }
        }
    }
}

fn text_of(v: &serde_json::Value) -> Option<String> {
    v.as_str().map(str::to_string)
}

/// Rewrites one Python-literal record into strict JSON lines. Multi-answer
/// records (`questions: [{questionText, questionType, answers: [{answerText}]}]`)
/// become one line per question; single-answer records (`question`,
/// `answer`) get an `answers` list; everything else is re-encoded as is.
pub fn normalize_loose(line: &str) -> Result<Vec<String>> {
    use serde_json::{json, Value};
    if line.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut p = Literal {
        s: line.as_bytes(),
        src: line,
        pos: 0,
    };
    let v = p.value()?;
    if p.peek().is_some() {
        return Err(p.err("trailing characters"));
    }
    let Value::Object(map) = v else {
        return Err(Error::Data("record is not a mapping".into()));
    };
    let asin = map.get("asin").cloned().unwrap_or(Value::Null);
    if let Some(Value::Array(questions)) = map.get("questions") {
        return Ok(questions
            .iter()
            .map(|q| {
                let answers: Vec<String> = match q.get("answers") {
                    Some(Value::Array(a)) => a
                        .iter()
                        .filter_map(|x| x.get("answerText").and_then(text_of).or_else(|| text_of(x)))
                        .collect(),
                    _ => Vec::new(),
                };
                json!({
                    "asin": asin,
                    "question": q.get("questionText").cloned().unwrap_or(Value::Null),
                    "answers": answers,
                    "questionType": q.get("questionType").cloned().unwrap_or(Value::Null),
                })
                .to_string()
            })
            .collect());
    }
    let mut map = map;
    if !map.contains_key("answers") {
        if let Some(a) = map.get("answer").cloned() {
            map.insert("answers".into(), Value::Array(vec![a]));
        }
    }
    Ok(vec![Value::Object(map).to_string()])
}

/// Converts a whole loose file; returns the number of lines written.
pub fn convert_loose_file(input: &Path, output: &Path) -> Result<usize> {
    let lines = read_lines(input)?;
    let file = File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = BufWriter::new(file);
    let mut written = 0;
    for (i, line) in lines.iter().enumerate() {
        let records = normalize_loose(line).map_err(|e| Error::parse(input, i + 1, e.to_string()))?;
        for r in records {
            writeln!(w, "{r}").map_err(|e| Error::io(output, e))?;
            written += 1;
        }
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    Ok(written)
}
