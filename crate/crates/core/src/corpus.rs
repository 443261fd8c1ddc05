//! Corpus ingestion, tokenization, hint/target masking and synthetic data.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

/// Reserved vocabulary slots.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// One document: opaque id, token indices, optional ground-truth category.
#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub category: Option<String>,
    pub raw_text: String,
}

impl Document {
    /// The coarse part of a `top/leaf` category label.
    pub fn top_category(&self) -> Option<&str> {
        self.category
            .as_deref()
            .map(|c| c.split('/').next().unwrap_or(c))
    }
}

/// Token <-> index bijection with PAD and UNK reserved.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from word counts: words with count >= `min_count`
    /// sorted by frequency (descending) then lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>, min_count: usize) -> Self {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(w, &c)| (w, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(kept.into_iter().map(|(w, _)| w.clone()));
        Self::from_token_list(tokens)
    }

    /// Reconstructs a vocabulary from an ordered token list (checkpoints).
    pub fn from_token_list(tokens: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i as u32);
        }
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, idx: u32) -> Option<&str> {
        self.tokens.get(idx as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Visible/masked position split for one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HintMask {
    pub hint_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocabulary: Vocabulary,
    pub categories: Option<BTreeSet<String>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Corpus loading knobs.
#[derive(Debug, Clone)]
pub struct CorpusOptions {
    /// Documents are truncated to this many tokens.
    pub max_len: usize,
    /// Words rarer than this map to UNK.
    pub min_count: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            max_len: 64,
            min_count: 2,
        }
    }
}

/// Lowercased alphanumeric word split; punctuation separates.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Maps text to vocabulary indices; out-of-vocabulary words become UNK.
/// An empty or all-punctuation string yields an empty sequence.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    normalize_words(text)
        .iter()
        .map(|w| vocab.lookup(w).unwrap_or(UNK))
        .collect()
}

#[derive(Deserialize)]
struct RawDoc {
    doc_id: String,
    text: String,
    #[serde(default)]
    category: Option<String>,
}

/// Loads a JSONL corpus: one `{"doc_id", "text", "category"?}` per line.
pub fn load_corpus(path: &Path, opts: &CorpusOptions) -> Result<Corpus> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut raw: Vec<RawDoc> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDoc = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::validation(format!(
                "duplicate doc_id {:?} at line {line_no}",
                doc.doc_id
            )));
        }
        raw.push(doc);
    }

    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in &raw {
        for w in normalize_words(&doc.text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let vocabulary = Vocabulary::from_counts(&counts, opts.min_count);

    let mut documents = Vec::with_capacity(raw.len());
    let mut categories = BTreeSet::new();
    for doc in raw {
        let mut tokens = tokenize(&doc.text, &vocabulary);
        tokens.truncate(opts.max_len);
        if tokens.is_empty() {
            return Err(Error::validation(format!(
                "document {:?} has no tokens after tokenization",
                doc.doc_id
            )));
        }
        if let Some(c) = &doc.category {
            categories.insert(c.clone());
        }
        documents.push(Document {
            doc_id: doc.doc_id,
            tokens,
            category: doc.category,
            raw_text: doc.text,
        });
    }

    Ok(Corpus {
        documents,
        vocabulary,
        categories: if categories.is_empty() {
            None
        } else {
            Some(categories)
        },
    })
}

/// Loads documents against an existing vocabulary (checkpointed models
/// assigning unseen corpora). Out-of-vocabulary words become UNK.
pub fn load_documents_with_vocab(
    path: &Path,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Document>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDoc = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::validation(format!(
                "duplicate doc_id {:?} at line {line_no}",
                doc.doc_id
            )));
        }
        let mut tokens = tokenize(&doc.text, vocab);
        tokens.truncate(max_len);
        if tokens.is_empty() {
            return Err(Error::validation(format!(
                "document {:?} has no tokens after tokenization",
                doc.doc_id
            )));
        }
        documents.push(Document {
            doc_id: doc.doc_id,
            tokens,
            category: doc.category,
            raw_text: doc.text,
        });
    }
    Ok(documents)
}

/// Samples `floor(ratio * n)` hint positions uniformly without replacement;
/// the remainder are reconstruction targets. Pure in `(doc, ratio, seed)`.
pub fn sample_hints(doc: &Document, ratio: f64, seed: u64) -> Result<HintMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::validation(format!(
            "hint ratio {ratio} outside [0, 1)"
        )));
    }
    let n = doc.tokens.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "document {:?} too short for hint sampling ({n} tokens)",
            doc.doc_id
        )));
    }
    let n_hints = (ratio * n as f64).floor() as usize;
    let mut rng = derive(seed, Stream::Custom(0x68696e74)); // "hint"
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut hint_indices: Vec<usize> = idx[..n_hints].to_vec();
    let mut target_indices: Vec<usize> = idx[n_hints..].to_vec();
    hint_indices.sort_unstable();
    target_indices.sort_unstable();
    Ok(HintMask {
        hint_indices,
        target_indices,
    })
}

/// Planted-hierarchy synthetic corpus: `top` coarse categories, each with
/// `sub_per_top` leaves, each leaf holding `docs_per_leaf` documents of
/// `doc_len` tokens drawn 40% from the top's coarse pool, 30% from the
/// leaf's fine pool and 30% from a shared common pool.
pub fn synth_corpus(
    top: usize,
    sub_per_top: usize,
    docs_per_leaf: usize,
    doc_len: usize,
    seed: u64,
) -> Result<Corpus> {
    if top == 0 || sub_per_top == 0 || docs_per_leaf == 0 || doc_len == 0 {
        return Err(Error::validation(
            "synth_corpus counts must all be >= 1".to_string(),
        ));
    }
    const COARSE_POOL: usize = 12;
    const FINE_POOL: usize = 12;
    const COMMON_POOL: usize = 40;

    let coarse: Vec<Vec<String>> = (0..top)
        .map(|t| (0..COARSE_POOL).map(|j| format!("top{t}word{j}")).collect())
        .collect();
    let fine: Vec<Vec<Vec<String>>> = (0..top)
        .map(|t| {
            (0..sub_per_top)
                .map(|s| (0..FINE_POOL).map(|j| format!("leaf{t}x{s}word{j}")).collect())
                .collect()
        })
        .collect();
    let common: Vec<String> = (0..COMMON_POOL).map(|j| format!("common{j}")).collect();

    let mut rng = derive(seed, Stream::Synth);
    let mut raw_docs = Vec::with_capacity(top * sub_per_top * docs_per_leaf);
    for t in 0..top {
        for s in 0..sub_per_top {
            for d in 0..docs_per_leaf {
                let mut words = Vec::with_capacity(doc_len);
                for _ in 0..doc_len {
                    let u: f64 = rng.gen();
                    let pool: &[String] = if u < 0.4 {
                        &coarse[t]
                    } else if u < 0.7 {
                        &fine[t][s]
                    } else {
                        &common
                    };
                    let w = pool[rng.gen_range(0..pool.len())].clone();
                    words.push(w);
                }
                raw_docs.push((
                    format!("d{t}x{s}n{d}"),
                    words.join(" "),
                    format!("t{t}/s{s}"),
                ));
            }
        }
    }

    let mut counts: HashMap<String, usize> = HashMap::new();
    for (_, text, _) in &raw_docs {
        for w in normalize_words(text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let vocabulary = Vocabulary::from_counts(&counts, 1);

    let mut documents = Vec::with_capacity(raw_docs.len());
    let mut categories = BTreeSet::new();
    for (doc_id, text, category) in raw_docs {
        let tokens = tokenize(&text, &vocabulary);
        categories.insert(category.clone());
        documents.push(Document {
            doc_id,
            tokens,
            category: Some(category),
            raw_text: text,
        });
    }
    Ok(Corpus {
        documents,
        vocabulary,
        categories: Some(categories),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn doc(tokens: Vec<u32>) -> Document {
        Document {
            doc_id: "d".into(),
            tokens,
            category: None,
            raw_text: String::new(),
        }
    }

    #[test]
    fn load_three_documents() {
        let f = write_jsonl(&[
            r#"{"doc_id": "a", "text": "red lipstick set"}"#,
            r#"{"doc_id": "b", "text": "red nail polish", "category": "beauty"}"#,
            r#"{"doc_id": "c", "text": "blue tent red"}"#,
        ]);
        let corpus = load_corpus(f.path(), &CorpusOptions {
            max_len: 16,
            min_count: 1,
        })
        .unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(
            corpus.categories.as_ref().map(|c| c.len()),
            Some(1)
        );
    }

    #[test]
    fn missing_text_reports_line() {
        let f = write_jsonl(&[
            r#"{"doc_id": "a", "text": "fine here"}"#,
            r#"{"doc_id": "b"}"#,
        ]);
        let err = load_corpus(f.path(), &CorpusOptions::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_doc_id_rejected() {
        let f = write_jsonl(&[
            r#"{"doc_id": "a", "text": "one two"}"#,
            r#"{"doc_id": "a", "text": "three four"}"#,
        ]);
        let err = load_corpus(f.path(), &CorpusOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn min_count_sends_rare_words_to_unk() {
        // "red" x5, "blue" x2, min-count 3.
        let f = write_jsonl(&[
            r#"{"doc_id": "a", "text": "red red red blue"}"#,
            r#"{"doc_id": "b", "text": "red red blue"}"#,
        ]);
        let corpus = load_corpus(f.path(), &CorpusOptions {
            max_len: 16,
            min_count: 3,
        })
        .unwrap();
        assert!(corpus.vocabulary.lookup("red").is_some());
        assert!(corpus.vocabulary.lookup("blue").is_none());
        let ids = tokenize("blue", &corpus.vocabulary);
        assert_eq!(ids, vec![UNK]);
    }

    #[test]
    fn tokenize_known_words() {
        let mut counts = HashMap::new();
        for w in ["red", "lipstick", "set"] {
            counts.insert(w.to_string(), 5);
        }
        let vocab = Vocabulary::from_counts(&counts, 1);
        let ids = tokenize("Red lipstick set", &vocab);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i > UNK));
    }

    #[test]
    fn tokenize_oov_and_punctuation() {
        let mut counts = HashMap::new();
        counts.insert("red".to_string(), 5);
        let vocab = Vocabulary::from_counts(&counts, 1);
        assert_eq!(tokenize("zzzz", &vocab), vec![UNK]);
        let ids = tokenize("Red, red.", &vocab);
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert_eq!(tokenize("", &vocab), Vec::<u32>::new());
    }

    #[test]
    fn vocabulary_roundtrip_identity() {
        let mut counts = HashMap::new();
        for w in ["alpha", "beta", "gamma"] {
            counts.insert(w.to_string(), 3);
        }
        let vocab = Vocabulary::from_counts(&counts, 1);
        for w in ["alpha", "beta", "gamma"] {
            let idx = vocab.lookup(w).unwrap();
            assert_eq!(vocab.token(idx), Some(w));
        }
    }

    #[test]
    fn hints_half_of_ten() {
        let d = doc((0..10).collect());
        let mask = sample_hints(&d, 0.5, 7).unwrap();
        assert_eq!(mask.hint_indices.len(), 5);
        assert_eq!(mask.target_indices.len(), 5);
    }

    #[test]
    fn hints_zero_ratio() {
        let d = doc((0..10).collect());
        let mask = sample_hints(&d, 0.0, 7).unwrap();
        assert!(mask.hint_indices.is_empty());
        assert_eq!(mask.target_indices.len(), 10);
    }

    #[test]
    fn hints_deterministic() {
        let d = doc((0..17).collect());
        let a = sample_hints(&d, 0.3, 99).unwrap();
        let b = sample_hints(&d, 0.3, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_hints(&d, 0.3, 100).unwrap();
        assert!(a != c || a.hint_indices.is_empty());
    }

    #[test]
    fn hints_validation() {
        let d = doc(vec![1, 2, 3]);
        assert!(sample_hints(&d, 1.0, 0).is_err());
        assert!(sample_hints(&d, -0.1, 0).is_err());
        assert!(sample_hints(&doc(vec![1]), 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn hint_mask_partitions_positions(n in 2usize..40, ratio in 0.0f64..0.99, seed in 0u64..500) {
            let d = doc((0..n as u32).collect());
            let mask = sample_hints(&d, ratio, seed).unwrap();
            prop_assert!(!mask.target_indices.is_empty());
            let mut all: Vec<usize> = mask
                .hint_indices
                .iter()
                .chain(mask.target_indices.iter())
                .copied()
                .collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn synth_counts_and_balance() {
        let corpus = synth_corpus(4, 4, 50, 8, 3).unwrap();
        assert_eq!(corpus.len(), 800);
        let mut per_leaf: HashMap<&str, usize> = HashMap::new();
        for d in &corpus.documents {
            *per_leaf.entry(d.category.as_deref().unwrap()).or_insert(0) += 1;
        }
        assert_eq!(per_leaf.len(), 16);
        assert!(per_leaf.values().all(|&c| c == 50));
    }

    #[test]
    fn synth_single_category() {
        let corpus = synth_corpus(1, 1, 5, 6, 3).unwrap();
        let labels: BTreeSet<_> = corpus
            .documents
            .iter()
            .map(|d| d.category.clone().unwrap())
            .collect();
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn synth_deterministic() {
        let a = synth_corpus(2, 3, 4, 10, 11).unwrap();
        let b = synth_corpus(2, 3, 4, 10, 11).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.documents.iter().zip(b.documents.iter()) {
            assert_eq!(x.doc_id, y.doc_id);
            assert_eq!(x.raw_text, y.raw_text);
            assert_eq!(x.tokens, y.tokens);
        }
    }

    #[test]
    fn top_category_helper() {
        let d = Document {
            doc_id: "x".into(),
            tokens: vec![2],
            category: Some("t1/s2".into()),
            raw_text: String::new(),
        };
        assert_eq!(d.top_category(), Some("t1"));
    }
}
