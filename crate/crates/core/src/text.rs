//! Tokenization, vocabulary and pretrained embedding rows.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Width of the GloVe vectors the model is built around.
pub const GLOVE_DIM: usize = 300;

/// Half-width of the uniform range used for rows without a pretrained vector.
pub const UNKNOWN_INIT_RANGE: f64 = 0.1;

/// Lowercases, splits on whitespace and emits every character that is
/// neither alphanumeric nor whitespace as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            index: HashMap::new(),
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose indices `2..` are `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        for t in tokens {
            let t = t.into();
            if t == PAD_TOKEN || t == UNK_TOKEN || vocab.index.contains_key(&t) {
                return Err(Error::Data(format!("duplicate or reserved token {t:?}")));
            }
            vocab.index.insert(t.clone(), vocab.tokens.len());
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `token`, or [`UNK`].
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Non-reserved tokens in index order.
    pub fn learned_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .filter(|&&i| i != PAD && i != UNK)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}

/// Tokens seen at least `min_count` times, most frequent first, ties in
/// lexicographic order.
pub fn build_vocab<'a, I, S>(corpus: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    if min_count == 0 {
        return Err(Error::Parameter("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for tok in seq.as_ref() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Token indices right-padded with [`PAD`] to `max_len`, and the number of
/// real tokens kept.
pub fn encode_sequence<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<usize>, usize)> {
    if max_len == 0 {
        return Err(Error::Parameter("max_len must be >= 1".into()));
    }
    let len = tokens.len().min(max_len);
    let mut out: Vec<usize> = tokens[..len]
        .iter()
        .map(|t| vocab.lookup(t.as_ref()))
        .collect();
    out.resize(max_len, PAD);
    Ok((out, len))
}

/// Row-major `[vocab, dim]` embedding matrix. Rows are never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    values: Vec<f64>,
    pretrained: Vec<bool>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, values: Vec<f64>, pretrained: Vec<bool>) -> Result<Self> {
        if dim == 0 || values.len() != dim * pretrained.len() {
            return Err(Error::Dimension {
                op: "embedding_table",
                lhs: vec![pretrained.len(), dim],
                rhs: vec![values.len()],
            });
        }
        Ok(EmbeddingTable {
            dim,
            values,
            pretrained,
        })
    }

    /// Every row uniform random except PAD, which is zero.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(vocab_size * dim);
        for row in 0..vocab_size {
            for _ in 0..dim {
                let v = rng.gen_range(-UNKNOWN_INIT_RANGE..=UNKNOWN_INIT_RANGE);
                values.push(if row == PAD { 0.0 } else { v });
            }
        }
        EmbeddingTable {
            dim,
            values,
            pretrained: vec![false; vocab_size],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.pretrained.len()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn is_pretrained(&self, index: usize) -> bool {
        self.pretrained[index]
    }

    pub fn pretrained_flags(&self) -> &[bool] {
        &self.pretrained
    }

    pub fn pretrained_count(&self) -> usize {
        self.pretrained.iter().filter(|&&p| p).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stacks the rows for `indices` into a `[len, dim]` buffer.
    pub fn gather(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::Usage(format!(
                    "token index {i} outside embedding table of {} rows",
                    self.rows()
                )));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(out)
    }
}

/// Reads a GloVe-format text file (`token v1 .. v_dim` per line). Vocabulary
/// tokens found in the file take their file vector; every other row is drawn
/// uniformly from the seeded generator, and the PAD row is zero.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let reader = BufReader::new(file);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        if rest.len() != dim {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected {} fields, found {}", dim + 1, rest.len() + 1),
            ));
        }
        let Some(idx) = vocab.get(token) else { continue };
        let row = &mut table.values[idx * dim..(idx + 1) * dim];
        for (slot, field) in row.iter_mut().zip(&rest) {
            *slot = field.parse().map_err(|_| {
                Error::parse(path, lineno + 1, format!("invalid float {field:?}"))
            })?;
        }
        table.pretrained[idx] = true;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Is this fit with 2002 Camry 2.4 L ?"),
            toks(&["is", "this", "fit", "with", "2002", "camry", "2", ".", "4", "l", "?"])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("Velcro, do they slide"),
            toks(&["velcro", ",", "do", "they", "slide"])
        );
        assert_eq!(tokenize("a\u{00a0}b\tc"), toks(&["a", "b", "c"]));
    }

    #[test]
    fn vocab_frequency_order_and_ties() {
        let v = build_vocab([toks(&["a", "a", "b"])].iter(), 1).unwrap();
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), Some(3));

        let v = build_vocab([toks(&["a", "b"])].iter(), 2).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.lookup("a"), UNK);

        let v = build_vocab([toks(&["b", "b", "a", "a"])].iter(), 1).unwrap();
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), Some(3));

        assert!(build_vocab([toks(&["a"])].iter(), 0).is_err());
    }

    #[test]
    fn encode_pads_truncates_and_maps_unknowns() {
        let v = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        assert_eq!(encode_sequence(&["a"], &v, 3).unwrap(), (vec![2, 0, 0], 1));
        let (ids, len) = encode_sequence(&["a", "b", "c", "a", "b"], &v, 3).unwrap();
        assert_eq!((ids, len), (vec![2, 3, 4], 3));
        assert_eq!(encode_sequence(&["zzz"], &v, 1).unwrap(), (vec![UNK], 1));
        assert!(encode_sequence(&["a"], &v, 0).is_err());
    }

    fn write_glove(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn glove_lookup_fallback_and_pad() {
        let dim = GLOVE_DIM;
        let vec_x: Vec<String> = (0..dim).map(|i| format!("{}", i as f64 * 0.5)).collect();
        let f = write_glove(&[format!("x {}", vec_x.join(" "))]);
        let vocab = Vocabulary::from_tokens(["x", "y"]).unwrap();
        let t = load_embeddings(f.path(), &vocab, dim, 7).unwrap();
        let x = vocab.get("x").unwrap();
        let y = vocab.get("y").unwrap();
        assert!(t.is_pretrained(x));
        assert_eq!(t.row(x)[3], 1.5);
        assert!(!t.is_pretrained(y));
        assert!(t.row(y).iter().all(|v| v.abs() <= UNKNOWN_INIT_RANGE));
        assert!(t.row(UNK).iter().all(|v| v.abs() <= UNKNOWN_INIT_RANGE));
        assert!(t.row(PAD).iter().all(|&v| v == 0.0));
        assert_eq!(t.row(PAD).len(), 300);

        let again = load_embeddings(f.path(), &vocab, dim, 7).unwrap();
        assert_eq!(t, again);
        let other = load_embeddings(f.path(), &vocab, dim, 8).unwrap();
        assert_ne!(t.row(y), other.row(y));
    }

    #[test]
    fn glove_malformed_line_reports_line_number() {
        let f = write_glove(&["a 1 2 3".into(), "b 1 2".into()]);
        let vocab = Vocabulary::from_tokens(["a"]).unwrap();
        match load_embeddings(f.path(), &vocab, 3, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing = load_embeddings(Path::new("/nonexistent/glove.txt"), &vocab, 3, 0);
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in prop::collection::vec("[a-e]{1,3}", 1..12)) {
            let vocab = build_vocab([words.clone()].iter(), 1).unwrap();
            let (ids, len) = encode_sequence(&words, &vocab, words.len()).unwrap();
            prop_assert_eq!(len, words.len());
            prop_assert!(ids.iter().all(|&i| i < vocab.len()));
            prop_assert_eq!(vocab.decode(&ids), words);
        }

        #[test]
        fn encoded_indices_stay_in_range(text in ".{0,60}", max_len in 1usize..20) {
            let vocab = Vocabulary::from_tokens(["the", "a", "."]).unwrap();
            let (ids, len) = encode_sequence(&tokenize(&text), &vocab, max_len).unwrap();
            prop_assert_eq!(ids.len(), max_len);
            prop_assert!(len <= max_len);
            prop_assert!(ids.iter().all(|&i| i < vocab.len()));
        }
    }
}
