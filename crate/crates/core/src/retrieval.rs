//! Downstream retrieval: fine-tuning the indexer on (text -> document ID)
//! pairs and prefix-tree-constrained beam search at inference time.
//!
//! Recommendation-shaped tasks use the same machinery: the interaction
//! history is concatenated into the input text and the target is the next
//! item's ID, so no separate model exists.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Deserialize;

use crate::corpus::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::idspace::{IdTable, PrefixTree};
use crate::model::{codebook_name, Dropout, Model, SUFFIX_CODEBOOK};
use crate::trainer::optim::{collect_gradients, Adam, AdamConfig};
use crate::rng::{derive, Stream};

/// One labeled training example: input text mapped to a target document.
#[derive(Debug, Clone)]
pub struct QueryDocPair {
    pub query_id: String,
    pub tokens: Vec<u32>,
    pub target_doc_id: String,
}

/// A parsed line of the queries file.
#[derive(Debug, Clone, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub relevant_doc_ids: Vec<String>,
}

/// Loads a JSONL queries file: `{"query_id", "text", "relevant_doc_ids"}`.
pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.query_id.clone()) {
            return Err(Error::validation(format!(
                "duplicate query_id {:?} at line {}",
                rec.query_id,
                i + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Expands query records into one training pair per (query, relevant doc),
/// tokenizing with the corpus vocabulary. Every referenced doc_id must
/// exist in the table.
pub fn pairs_from_records(
    records: &[QueryRecord],
    vocab: &Vocabulary,
    table: &IdTable,
    max_len: usize,
) -> Result<Vec<QueryDocPair>> {
    let mut out = Vec::new();
    for rec in records {
        let mut tokens = tokenize(&rec.text, vocab);
        tokens.truncate(max_len);
        if tokens.is_empty() {
            return Err(Error::validation(format!(
                "query {:?} tokenizes to nothing",
                rec.query_id
            )));
        }
        for doc_id in &rec.relevant_doc_ids {
            if table.get(doc_id).is_none() {
                return Err(Error::validation(format!(
                    "query {:?} references unknown doc_id {doc_id:?}",
                    rec.query_id
                )));
            }
            out.push(QueryDocPair {
                query_id: rec.query_id.clone(),
                tokens: tokens.clone(),
                target_doc_id: doc_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Fine-tuning knobs.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep every codebook fixed and update only the sequence model.
    pub freeze_codebooks: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            step_size: 1e-3,
            batch_size: 16,
            seed: 42,
            freeze_codebooks: false,
        }
    }
}

fn position_book_name(model: &Model, position: usize, full_len: usize) -> Result<String> {
    if position <= model.cfg.id_len {
        Ok(codebook_name(position))
    } else if position == model.cfg.id_len + 1 && position == full_len {
        Ok(SUFFIX_CODEBOOK.to_string())
    } else {
        Err(Error::contract(format!(
            "position {position} outside the {full_len}-long ID space"
        )))
    }
}

/// Teacher-forced cross-entropy of a batch of pairs over every position of
/// the full ID (suffix included when the table is disambiguated).
fn pair_batch_loss(
    g: &mut Graph,
    model: &Model,
    bp: &crate::model::BoundParams,
    batch: &[(&QueryDocPair, Vec<u32>)],
) -> Result<(crate::graph::NodeId, f64)> {
    let mut parts = Vec::with_capacity(batch.len());
    for (pair, full_codes) in batch {
        let enc = model.encode_tokens(g, bp, &pair.tokens, &mut Dropout::Off)?;
        let prefix_len = full_codes.len().min(model.cfg.id_len);
        let hidden = model.decode_hidden(g, bp, enc, &full_codes[..prefix_len], &mut Dropout::Off)?;
        let mut pos_parts = Vec::with_capacity(full_codes.len());
        for (j, &code) in full_codes.iter().enumerate() {
            let position = j + 1;
            let name = position_book_name(model, position, full_codes.len())?;
            let book = bp.try_node(&name)?;
            let h = g.slice_rows(hidden, j, j + 1);
            let logits = g.matmul_nt(h, book);
            let lp = g.row_log_softmax(logits);
            let picked = g.pick_per_row(lp, &[code as usize]);
            pos_parts.push(g.sum_all(picked));
        }
        let s = g.add_n(&pos_parts);
        parts.push(g.scale(s, -1.0));
    }
    let sum = g.add_n(&parts);
    let mean = g.scale(sum, 1.0 / batch.len() as f64);
    Ok((mean, g.value(mean).item()))
}

/// Fine-tunes the indexer on (input text -> document ID) pairs with
/// teacher forcing over the full ID length. Returns per-epoch mean losses.
/// Zero epochs leave the model bitwise untouched.
pub fn finetune(
    model: &mut Model,
    pairs: &[QueryDocPair],
    table: &IdTable,
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::validation("no training pairs".to_string()));
    }
    let resolved: Vec<(&QueryDocPair, Vec<u32>)> = pairs
        .iter()
        .map(|p| {
            let id = table.get(&p.target_doc_id).ok_or_else(|| {
                Error::validation(format!(
                    "pair references unknown doc_id {:?}",
                    p.target_doc_id
                ))
            })?;
            Ok((p, id.full_codes()))
        })
        .collect::<Result<_>>()?;

    // The suffix position needs its codebook before any epoch runs.
    for (_, codes) in &resolved {
        if codes.len() > model.cfg.id_len && !model.params.contains(SUFFIX_CODEBOOK) {
            return Err(Error::state(
                "table is disambiguated but the suffix codebook is missing".to_string(),
            ));
        }
    }

    let freeze = cfg.freeze_codebooks;
    let trainable = move |name: &str| {
        if name.starts_with("recon.") {
            false
        } else if name.starts_with("codebook.") {
            !freeze
        } else {
            true
        }
    };

    let mut adam = Adam::new(AdamConfig {
        step_size: cfg.step_size,
        ..AdamConfig::default()
    });
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..resolved.len()).collect();
        let mut rng = derive(cfg.seed, Stream::Shuffle(9000, 9, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(&QueryDocPair, Vec<u32>)> = chunk
                .iter()
                .map(|&i| (resolved[i].0, resolved[i].1.clone()))
                .collect();
            let mut g = Graph::new();
            let bp = model.bind(&mut g, &trainable);
            let (node, value) = pair_batch_loss(&mut g, model, &bp, &batch)?;
            let grads = g.backward(node);
            let named = collect_gradients(model, &bp, &grads, &trainable);
            adam.step(model, &named);
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        epoch_losses.push(sum / count.max(1) as f64);
    }
    Ok(epoch_losses)
}

/// A partial decode path in the beam.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub codes: Vec<u32>,
    pub log_prob: f64,
}

/// One retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.codes.cmp(&b.codes))
}

/// Beam search over ID positions where every expansion is restricted to the
/// children of the current trie node. Scores are sums of per-position
/// log-probabilities under the full-codebook softmax; ties break toward
/// lexicographically smaller code sequences.
pub fn constrained_beam_search(
    model: &Model,
    query_tokens: &[u32],
    trie: &PrefixTree,
    beam: usize,
    k: usize,
) -> Result<Vec<(Vec<u32>, f64)>> {
    if trie.is_empty() {
        return Err(Error::contract("empty prefix tree".to_string()));
    }
    if beam == 0 {
        return Err(Error::contract("beam must be >= 1".to_string()));
    }
    if k > beam {
        return Err(Error::contract(format!("k={k} exceeds beam={beam}")));
    }
    let depth = trie.depth();
    let mut g = Graph::inference();
    let bp = model.bind_frozen(&mut g);
    let enc = model.encode_tokens(&mut g, &bp, query_tokens, &mut Dropout::Off)?;

    let mut hyps = vec![Hypothesis {
        codes: Vec::new(),
        log_prob: 0.0,
    }];
    for level in 0..depth {
        let position = level + 1;
        let mut next: Vec<Hypothesis> = Vec::new();
        for hyp in &hyps {
            let children = trie.children(&hyp.codes);
            if children.is_empty() {
                continue;
            }
            let name = position_book_name(model, position, depth)?;
            let book = bp.try_node(&name)?;
            let prefix_len = hyp.codes.len().min(model.cfg.id_len);
            let hidden =
                model.decode_hidden(&mut g, &bp, enc, &hyp.codes[..prefix_len], &mut Dropout::Off)?;
            let last = g.value(hidden).rows() - 1;
            let h = g.slice_rows(hidden, last, last + 1);
            let logits = g.matmul_nt(h, book);
            let lp = g.row_log_softmax(logits);
            let row = g.value(lp).row(0);
            for &c in &children {
                let mut codes = hyp.codes.clone();
                codes.push(c);
                next.push(Hypothesis {
                    codes,
                    log_prob: hyp.log_prob + row[c as usize],
                });
            }
        }
        next.sort_by(hyp_order);
        next.truncate(beam);
        hyps = next;
    }
    Ok(hyps
        .into_iter()
        .take(k)
        .map(|h| (h.codes, h.log_prob))
        .collect())
}

/// Default beam width for search.
pub const DEFAULT_BEAM: usize = 20;

/// Tokenizes a query with the corpus vocabulary and decodes the top-k
/// document IDs under the trie constraint.
pub fn search(
    model: &Model,
    trie: &PrefixTree,
    vocab: &Vocabulary,
    query_text: &str,
    beam: usize,
    k: usize,
) -> Result<Vec<SearchHit>> {
    let mut tokens = tokenize(query_text, vocab);
    tokens.truncate(model.cfg.max_doc_len);
    if tokens.is_empty() {
        return Err(Error::validation(format!(
            "query {query_text:?} tokenizes to nothing"
        )));
    }
    let ranked = constrained_beam_search(model, &tokens, trie, beam, k)?;
    Ok(ranked
        .into_iter()
        .filter_map(|(codes, score)| {
            trie.docs_at(&codes).first().map(|d| SearchHit {
                doc_id: d.clone(),
                score,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idspace::{build_prefix_tree, disambiguate};
    use crate::model::{ModelConfig, SemanticId};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            id_len: 2,
            codebook_sizes: vec![3, 3],
            vocab_size: 16,
            max_doc_len: 8,
            recon_layers: 1,
            dropout: 0.0,
        }
    }

    fn random_book(k: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = derive(seed, Stream::Custom(99));
        Tensor::from_vec(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn ready_model(seed: u64) -> Model {
        let mut m = Model::init(cfg(), seed).unwrap();
        m.set_codebook(1, &random_book(3, 8, seed + 1));
        m.set_codebook(2, &random_book(3, 8, seed + 2));
        m.set_codebook_named(SUFFIX_CODEBOOK, &random_book(2, 8, seed + 3));
        m
    }

    fn seven_id_table() -> IdTable {
        let ids: Vec<(String, SemanticId)> = [
            vec![0u32, 0],
            vec![0, 1],
            vec![0, 2],
            vec![1, 0],
            vec![1, 2],
            vec![2, 1],
            vec![2, 1], // duplicate -> distinct suffixes
        ]
        .into_iter()
        .enumerate()
        .map(|(i, codes)| (format!("doc{i}"), SemanticId::new(codes)))
        .collect();
        disambiguate(&IdTable::new(ids).unwrap()).unwrap()
    }

    #[test]
    fn single_id_trie_returns_it() {
        let model = ready_model(3);
        let table = disambiguate(
            &IdTable::new(vec![("only".to_string(), SemanticId::new(vec![1, 2]))]).unwrap(),
        )
        .unwrap();
        let trie = build_prefix_tree(&table).unwrap();
        for beam in [1, 4, 16] {
            let hits = constrained_beam_search(&model, &[2, 3], &trie, beam, 1).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].0, vec![1, 2, 0]);
            assert!(hits[0].1 <= 0.0);
        }
    }

    /// With beam >= |IDs| the ranking equals exhaustive enumeration of all
    /// trie paths scored independently.
    #[test]
    fn oracle_equivalence_with_full_beam() {
        let model = ready_model(11);
        let table = seven_id_table();
        let trie = build_prefix_tree(&table).unwrap();
        let n = trie.len();
        let query = vec![4u32, 5, 6];

        // Independent oracle: enumerate every path and score it with fresh
        // forward passes.
        let mut scored: Vec<(Vec<u32>, f64)> = Vec::new();
        for path in trie.paths() {
            let mut lp_sum = 0.0;
            for j in 0..path.len() {
                let prefix = &path[..j.min(model.cfg.id_len)];
                let h = model.hidden_all(&query, prefix).unwrap();
                let last = h.rows() - 1;
                let book = if j < model.cfg.id_len {
                    model.codebook(j + 1).unwrap().to_tensor()
                } else {
                    model.params.get(SUFFIX_CODEBOOK).unwrap().to_tensor()
                };
                let logits: Vec<f64> = (0..book.rows())
                    .map(|r| crate::tensor::dot(h.row(last), book.row(r)))
                    .collect();
                let lse = crate::tensor::log_sum_exp(&logits);
                lp_sum += logits[path[j] as usize] - lse;
            }
            scored.push((path, lp_sum));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });

        let hits = constrained_beam_search(&model, &query, &trie, n, n).unwrap();
        assert_eq!(hits.len(), scored.len());
        for ((got_codes, got_score), (want_codes, want_score)) in hits.iter().zip(scored.iter()) {
            assert_eq!(got_codes, want_codes);
            assert!((got_score - want_score).abs() < 1e-9);
        }
    }

    #[test]
    fn constraint_soundness_random_queries() {
        let model = ready_model(17);
        let table = seven_id_table();
        let trie = build_prefix_tree(&table).unwrap();
        let valid: std::collections::BTreeSet<Vec<u32>> = trie.paths().into_iter().collect();
        let mut rng = derive(5, Stream::Custom(123));
        for _ in 0..40 {
            let len = rng.gen_range(1..6);
            let q: Vec<u32> = (0..len).map(|_| rng.gen_range(2..16)).collect();
            let hits = constrained_beam_search(&model, &q, &trie, 4, 4).unwrap();
            assert!(!hits.is_empty());
            for (codes, _) in hits {
                assert!(valid.contains(&codes));
            }
        }
    }

    #[test]
    fn rank_one_score_monotone_in_beam() {
        let model = ready_model(23);
        let table = seven_id_table();
        let trie = build_prefix_tree(&table).unwrap();
        let query = vec![7u32, 8];
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=7 {
            let hits = constrained_beam_search(&model, &query, &trie, beam, 1).unwrap();
            assert!(hits[0].1 >= prev - 1e-12);
            prev = hits[0].1;
        }
    }

    #[test]
    fn beam_contract_errors() {
        let model = ready_model(29);
        let table = seven_id_table();
        let trie = build_prefix_tree(&table).unwrap();
        assert!(constrained_beam_search(&model, &[2], &trie, 0, 0).is_err());
        assert!(constrained_beam_search(&model, &[2], &trie, 2, 3).is_err());
        let empty = build_prefix_tree(&IdTable::new(vec![]).unwrap()).unwrap();
        assert!(matches!(
            constrained_beam_search(&model, &[2], &empty, 4, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn search_tokenizes_and_maps_to_docs() {
        let model = ready_model(31);
        let table = seven_id_table();
        let trie = build_prefix_tree(&table).unwrap();
        let vocab = Vocabulary::from_token_list(
            ["<pad>", "<unk>", "red", "blue", "tent", "nail", "polish", "set", "a", "b", "c", "d", "e", "f", "g", "h"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let hits = search(&model, &trie, &vocab, "red tent", DEFAULT_BEAM.min(7), 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(hits[0].doc_id.starts_with("doc"));
        let again = search(&model, &trie, &vocab, "red tent", DEFAULT_BEAM.min(7), 1).unwrap();
        assert_eq!(hits[0].doc_id, again[0].doc_id);
        assert_eq!(hits[0].score, again[0].score);

        assert!(matches!(
            search(&model, &trie, &vocab, "...", 4, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let mut model = ready_model(37);
        let before = model.params.clone();
        let table = seven_id_table();
        let pairs = vec![QueryDocPair {
            query_id: "q".into(),
            tokens: vec![2, 3],
            target_doc_id: "doc0".into(),
        }];
        let losses = finetune(
            &mut model,
            &pairs,
            &table,
            &FinetuneConfig {
                epochs: 0,
                ..FinetuneConfig::default()
            },
        )
        .unwrap();
        assert!(losses.is_empty());
        assert!(crate::trainer::checkpoint::params_identical(
            &before,
            &model.params
        ));
    }

    #[test]
    fn finetune_rejects_unknown_doc() {
        let mut model = ready_model(41);
        let table = seven_id_table();
        let pairs = vec![QueryDocPair {
            query_id: "q".into(),
            tokens: vec![2],
            target_doc_id: "ghost".into(),
        }];
        assert!(matches!(
            finetune(&mut model, &pairs, &table, &FinetuneConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn finetune_loss_decreases() {
        let mut model = ready_model(43);
        let table = seven_id_table();
        let mut rng = derive(7, Stream::Custom(55));
        let pairs: Vec<QueryDocPair> = (0..50)
            .map(|i| {
                let target = format!("doc{}", i % 7);
                let tokens: Vec<u32> = (0..4).map(|_| rng.gen_range(2..16)).collect();
                QueryDocPair {
                    query_id: format!("q{i}"),
                    tokens,
                    target_doc_id: target,
                }
            })
            .collect();
        let losses = finetune(
            &mut model,
            &pairs,
            &table,
            &FinetuneConfig {
                epochs: 6,
                step_size: 3e-3,
                batch_size: 10,
                seed: 3,
                freeze_codebooks: false,
            },
        )
        .unwrap();
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "losses did not decrease: {losses:?}"
        );
    }

    #[test]
    fn freeze_codebooks_keeps_them_bitwise() {
        let mut model = ready_model(47);
        let book_before = model.params.get("codebook.1").unwrap().data.clone();
        let table = seven_id_table();
        let pairs = vec![QueryDocPair {
            query_id: "q".into(),
            tokens: vec![2, 3, 4],
            target_doc_id: "doc3".into(),
        }];
        finetune(
            &mut model,
            &pairs,
            &table,
            &FinetuneConfig {
                epochs: 2,
                freeze_codebooks: true,
                ..FinetuneConfig::default()
            },
        )
        .unwrap();
        assert_eq!(
            book_before,
            model.params.get("codebook.1").unwrap().data
        );
    }

    #[test]
    fn pairs_from_records_expands_and_validates() {
        let vocab = Vocabulary::from_token_list(
            ["<pad>", "<unk>", "red", "blue"].iter().map(|s| s.to_string()).collect(),
        );
        let table = seven_id_table();
        let records = vec![QueryRecord {
            query_id: "q1".into(),
            text: "red blue".into(),
            relevant_doc_ids: vec!["doc0".into(), "doc1".into()],
        }];
        let pairs = pairs_from_records(&records, &vocab, &table, 8).unwrap();
        assert_eq!(pairs.len(), 2);

        let bad = vec![QueryRecord {
            query_id: "q2".into(),
            text: "red".into(),
            relevant_doc_ids: vec!["ghost".into()],
        }];
        assert!(pairs_from_records(&bad, &vocab, &table, 8).is_err());
    }
}
