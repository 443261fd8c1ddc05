//! Training objectives.
//!
//! All three losses are means over the documents of a batch; the inner sums
//! (over masked targets, over earlier positions, over in-batch competitors)
//! are unnormalized. Each loss is non-negative, and the combined objective
//! node is the exact floating-point sum of the three parts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, HintMask};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{codebook_name, BoundParams, Dropout, Model, QuantMode};
use crate::tensor::Tensor;

/// Per-batch loss values. `total` is the sum of the three parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub contrastive: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Ablation toggles for the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossFlags {
    pub contrastive: bool,
    pub commitment: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            contrastive: true,
            commitment: true,
        }
    }
}

/// One document plus its hint mask inside a batch.
pub struct BatchItem<'a> {
    pub doc: &'a Document,
    pub mask: HintMask,
    /// Codes frozen at earlier positions; length t-1 for position-t training.
    pub prefix: &'a [u32],
}

/// The combined position-`t` objective over a batch, as graph nodes.
pub struct BatchObjective {
    pub total: NodeId,
    pub report: LossReport,
}

fn hint_tokens(doc: &Document, mask: &HintMask) -> (Vec<u32>, Vec<usize>) {
    let tokens: Vec<u32> = mask.hint_indices.iter().map(|&i| doc.tokens[i]).collect();
    (tokens, mask.hint_indices.clone())
}

/// Negative log-likelihood of every masked target under the pooled
/// reconstruction distribution; one scalar node per document.
fn doc_recon_nll(
    g: &mut Graph,
    logits: NodeId,
    doc: &Document,
    mask: &HintMask,
) -> NodeId {
    let lp = g.row_log_softmax(logits);
    let m = mask.target_indices.len();
    let expanded = g.gather_rows(lp, &vec![0; m]);
    let targets: Vec<usize> = mask
        .target_indices
        .iter()
        .map(|&i| doc.tokens[i] as usize)
        .collect();
    let picked = g.pick_per_row(expanded, &targets);
    let s = g.sum_all(picked);
    g.scale(s, -1.0)
}

/// Forward pass and reconstruction loss for one document at position `t`.
///
/// With `use_codebook` the t-th query is the straight-through quantized
/// hidden state; without it (the codebook warm-up objective) the raw hidden
/// state itself is the query. Earlier positions always contribute their
/// frozen codebook rows.
struct DocForward {
    /// Decoder outputs `h^1..h^t`, shape `[t, D]`.
    hidden: NodeId,
    logits: NodeId,
    recon_nll: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn doc_forward(
    g: &mut Graph,
    model: &Model,
    bp: &BoundParams,
    item: &BatchItem,
    position: usize,
    use_codebook: bool,
    quant: QuantMode,
    dropout: &mut Dropout,
) -> Result<DocForward> {
    if item.prefix.len() + 1 != position {
        return Err(Error::contract(format!(
            "prefix of length {} does not match position {position}",
            item.prefix.len()
        )));
    }
    let enc = model.encode_tokens(g, bp, &item.doc.tokens, dropout)?;
    let hidden = model.decode_hidden(g, bp, enc, item.prefix, dropout)?;
    let h_t = g.slice_rows(hidden, position - 1, position);

    let mut queries: Vec<NodeId> = Vec::with_capacity(position);
    for (j, &c) in item.prefix.iter().enumerate() {
        let book = bp.try_node(&codebook_name(j + 1))?;
        queries.push(g.gather_rows(book, &[c as usize]));
    }
    if use_codebook {
        let book = bp.try_node(&codebook_name(position))?;
        let (quantized, _) = crate::model::quantize(g, h_t, book, quant);
        queries.push(quantized);
    } else {
        queries.push(h_t);
    }
    let q = if queries.len() == 1 {
        queries[0]
    } else {
        g.concat_rows(&queries)
    };

    let (htoks, hpos) = hint_tokens(item.doc, &item.mask);
    let out = model.recon_logits(g, bp, Some(q), &htoks, &hpos, dropout)?;
    let recon_nll = doc_recon_nll(g, out.logits, item.doc, &item.mask);
    Ok(DocForward {
        hidden,
        logits: out.logits,
        recon_nll,
    })
}

/// Commitment: cross-entropy of the current model's code distributions at
/// every earlier position against the frozen assignments.
fn doc_commitment_nll(
    g: &mut Graph,
    bp: &BoundParams,
    hidden: NodeId,
    prefix: &[u32],
) -> Result<Option<NodeId>> {
    if prefix.is_empty() {
        return Ok(None);
    }
    let mut parts = Vec::with_capacity(prefix.len());
    for (j, &c) in prefix.iter().enumerate() {
        let h_j = g.slice_rows(hidden, j, j + 1);
        let book = bp.try_node(&codebook_name(j + 1))?;
        let logits = g.matmul_nt(h_j, book);
        let lp = g.row_log_softmax(logits);
        let picked = g.pick_per_row(lp, &[c as usize]);
        parts.push(g.sum_all(picked));
    }
    let s = g.add_n(&parts);
    Ok(Some(g.scale(s, -1.0)))
}

/// In-batch contrastive term over the position-`t` hidden states: each
/// document competes with the others sharing its full frozen prefix.
/// Documents whose prefix is unique in the batch contribute exactly zero.
fn contrastive_node(
    g: &mut Graph,
    h_nodes: &[NodeId],
    prefixes: &[&[u32]],
) -> Option<NodeId> {
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, p) in prefixes.iter().enumerate() {
        groups.entry(p.to_vec()).or_default().push(i);
    }
    let mut terms = Vec::new();
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        let rows: Vec<NodeId> = members.iter().map(|&i| h_nodes[i]).collect();
        let h = g.concat_rows(&rows);
        let scores = g.matmul_nt(h, h);
        let lse = g.lse_rows(scores);
        let diag_idx: Vec<usize> = (0..members.len()).collect();
        let diag = g.pick_per_row(scores, &diag_idx);
        let term = g.sub(lse, diag);
        terms.push(g.sum_all(term));
    }
    if terms.is_empty() {
        None
    } else {
        Some(g.add_n(&terms))
    }
}

/// Builds the combined objective `recon + contrastive + commitment` for a
/// batch at position `t` (all parts are batch means).
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    g: &mut Graph,
    model: &Model,
    bp: &BoundParams,
    batch: &[BatchItem],
    position: usize,
    use_codebook: bool,
    quant: QuantMode,
    dropout: &mut Dropout,
    flags: &LossFlags,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch".to_string()));
    }
    let inv_b = 1.0 / batch.len() as f64;

    let mut recon_parts = Vec::with_capacity(batch.len());
    let mut commit_parts = Vec::new();
    let mut h_nodes = Vec::with_capacity(batch.len());
    let mut prefixes: Vec<&[u32]> = Vec::with_capacity(batch.len());

    for item in batch {
        let fwd = doc_forward(g, model, bp, item, position, use_codebook, quant, dropout)?;
        recon_parts.push(fwd.recon_nll);
        if flags.commitment {
            if let Some(c) = doc_commitment_nll(g, bp, fwd.hidden, item.prefix)? {
                commit_parts.push(c);
            }
        }
        let h_t = g.slice_rows(fwd.hidden, position - 1, position);
        h_nodes.push(h_t);
        prefixes.push(item.prefix);
    }

    let recon_sum = g.add_n(&recon_parts);
    let recon = g.scale(recon_sum, inv_b);

    let contrastive = if flags.contrastive {
        contrastive_node(g, &h_nodes, &prefixes).map(|n| g.scale(n, inv_b))
    } else {
        None
    };
    let commitment = if commit_parts.is_empty() {
        None
    } else {
        let s = g.add_n(&commit_parts);
        Some(g.scale(s, inv_b))
    };

    let mut total = recon;
    if let Some(c) = contrastive {
        total = g.add(total, c);
    }
    if let Some(c) = commitment {
        total = g.add(total, c);
    }

    let report = LossReport {
        recon: g.value(recon).item(),
        contrastive: contrastive.map_or(0.0, |n| g.value(n).item()),
        commitment: commitment.map_or(0.0, |n| g.value(n).item()),
        total: g.value(total).item(),
    };
    Ok(BatchObjective { total, report })
}

/// The code-free reconstructor warm-up objective: predict masked targets
/// from the hints alone, with the learned fallback query standing in for
/// the absent code embeddings.
pub fn warmup_objective(
    g: &mut Graph,
    model: &Model,
    bp: &BoundParams,
    batch: &[(&Document, &HintMask)],
    dropout: &mut Dropout,
) -> Result<(NodeId, f64)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch".to_string()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for (doc, mask) in batch {
        let (htoks, hpos) = hint_tokens(doc, mask);
        let out = model.recon_logits(g, bp, None, &htoks, &hpos, dropout)?;
        parts.push(doc_recon_nll(g, out.logits, doc, mask));
    }
    let s = g.add_n(&parts);
    let mean = g.scale(s, 1.0 / batch.len() as f64);
    let value = g.value(mean).item();
    Ok((mean, value))
}

/// Reconstruction logits for one document under the trained quantization
/// path, for evaluation (top-m prediction).
pub fn recon_eval_logits(
    g: &mut Graph,
    model: &Model,
    bp: &BoundParams,
    item: &BatchItem,
    position: usize,
) -> Result<NodeId> {
    let fwd = doc_forward(
        g,
        model,
        bp,
        item,
        position,
        true,
        QuantMode::Hard,
        &mut Dropout::Off,
    )?;
    Ok(fwd.logits)
}

/// Value-only contrastive loss over explicit hidden states; mirrors the
/// in-graph computation for direct testing and diagnostics.
pub fn loss_contrastive_value(hidden: &Tensor, prefixes: &[Vec<u32>]) -> f64 {
    assert_eq!(hidden.rows(), prefixes.len());
    let mut g = Graph::inference();
    let h_all = g.constant(hidden.clone());
    let h_nodes: Vec<NodeId> = (0..hidden.rows())
        .map(|i| g.slice_rows(h_all, i, i + 1))
        .collect();
    let prefix_refs: Vec<&[u32]> = prefixes.iter().map(|p| p.as_slice()).collect();
    match contrastive_node(&mut g, &h_nodes, &prefix_refs) {
        None => 0.0,
        Some(n) => g.value(n).item() / hidden.rows() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sample_hints;
    use crate::model::ModelConfig;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            id_len: 3,
            codebook_sizes: vec![4, 4, 8],
            vocab_size: vocab,
            max_doc_len: 12,
            recon_layers: 1,
            dropout: 0.0,
        }
    }

    fn doc(id: &str, tokens: Vec<u32>) -> Document {
        Document {
            doc_id: id.into(),
            tokens,
            category: None,
            raw_text: String::new(),
        }
    }

    /// With the token embedding zeroed, the reconstruction distribution is
    /// exactly uniform, so a single masked token costs ln(V).
    #[test]
    fn recon_uniform_distribution_is_ln_v() {
        let vocab = 30;
        let mut model = Model::init(tiny_cfg(vocab), 3).unwrap();
        for v in &mut model.params.get_mut("tok_emb").unwrap().data {
            *v = 0.0;
        }
        let d = doc("a", vec![2, 3, 4, 5]);
        let mask = HintMask {
            hint_indices: vec![0, 1, 2],
            target_indices: vec![3],
        };
        let mut g = Graph::new();
        let bp = model.bind(&mut g, &|_| false);
        let item = BatchItem {
            doc: &d,
            mask,
            prefix: &[],
        };
        let obj = batch_objective(
            &mut g,
            &model,
            &bp,
            &[item],
            1,
            false,
            QuantMode::Hard,
            &mut Dropout::Off,
            &LossFlags::default(),
        )
        .unwrap();
        assert!((obj.report.recon - (vocab as f64).ln()).abs() < 1e-9);
        assert_eq!(obj.report.commitment, 0.0);
        // single doc: its own prefix group has size 1
        assert_eq!(obj.report.contrastive, 0.0);
        assert!((obj.report.total - obj.report.recon).abs() < 1e-12);
    }

    /// A crafted logits row with all mass on the target costs zero.
    #[test]
    fn recon_certain_prediction_costs_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::row_vector(vec![1000.0, 0.0, 0.0]));
        let d = doc("a", vec![0, 0]);
        let mask = HintMask {
            hint_indices: vec![1],
            target_indices: vec![0],
        };
        let nll = doc_recon_nll(&mut g, logits, &d, &mask);
        assert_eq!(g.value(nll).item(), 0.0);
    }

    #[test]
    fn contrastive_hand_cases() {
        // Unique prefixes: zero.
        let h = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = loss_contrastive_value(&h, &[vec![0], vec![1]]);
        assert_eq!(v, 0.0);

        // Two docs, same prefix, identical h: each term is ln 2.
        let h = Tensor::from_vec(2, 2, vec![0.7, -0.4, 0.7, -0.4]);
        let v = loss_contrastive_value(&h, &[vec![3], vec![3]]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        // At t=1 every doc shares the empty prefix.
        let h = Tensor::from_vec(2, 2, vec![0.7, -0.4, 0.7, -0.4]);
        let v = loss_contrastive_value(&h, &[vec![], vec![]]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn contrastive_non_negative_property() {
        let mut rng = crate::rng::derive(5, crate::rng::Stream::Custom(3));
        use rand::Rng;
        for _ in 0..50 {
            let b = rng.gen_range(2..6);
            let h = Tensor::from_vec(
                b,
                4,
                (0..b * 4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let prefixes: Vec<Vec<u32>> =
                (0..b).map(|_| vec![rng.gen_range(0..2u32)]).collect();
            assert!(loss_contrastive_value(&h, &prefixes) >= 0.0);
        }
    }

    /// Uniform code distributions at t=3 cost 2 ln K per document.
    #[test]
    fn commitment_uniform_is_two_ln_k() {
        let k = 8usize;
        let mut cfg = tiny_cfg(16);
        cfg.codebook_sizes = vec![k, k, k];
        let mut model = Model::init(cfg, 4).unwrap();
        // Zero codebooks make every code distribution uniform.
        model.set_codebook(1, &Tensor::zeros(k, 8));
        model.set_codebook(2, &Tensor::zeros(k, 8));
        let d = doc("a", vec![2, 3, 4, 5, 6]);
        let mask = HintMask {
            hint_indices: vec![0, 1],
            target_indices: vec![2, 3, 4],
        };
        let prefix = vec![3u32, 5];
        let mut g = Graph::new();
        let bp = model.bind(&mut g, &|_| false);
        let item = BatchItem {
            doc: &d,
            mask,
            prefix: &prefix,
        };
        let obj = batch_objective(
            &mut g,
            &model,
            &bp,
            &[item],
            3,
            false,
            QuantMode::Hard,
            &mut Dropout::Off,
            &LossFlags::default(),
        )
        .unwrap();
        assert!((obj.report.commitment - 2.0 * (k as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn commitment_zero_at_first_position() {
        let model = Model::init(tiny_cfg(16), 4).unwrap();
        let d = doc("a", vec![2, 3, 4, 5]);
        let mask = sample_hints(&d, 0.5, 1).unwrap();
        let mut g = Graph::new();
        let bp = model.bind(&mut g, &|_| false);
        let item = BatchItem {
            doc: &d,
            mask,
            prefix: &[],
        };
        let obj = batch_objective(
            &mut g,
            &model,
            &bp,
            &[item],
            1,
            false,
            QuantMode::Hard,
            &mut Dropout::Off,
            &LossFlags::default(),
        )
        .unwrap();
        assert_eq!(obj.report.commitment, 0.0);
    }

    /// total is the exact sum of the three parts, and every part is
    /// non-negative, across random batches.
    #[test]
    fn loss_report_sum_and_signs() {
        let mut model = Model::init(tiny_cfg(20), 9).unwrap();
        model.set_codebook(1, &{
            let mut rng = crate::rng::derive(1, crate::rng::Stream::Custom(4));
            use rand::Rng;
            Tensor::from_vec(4, 8, (0..32).map(|_| rng.gen_range(-0.5..0.5)).collect())
        });
        let docs = vec![
            doc("a", vec![2, 3, 4, 5, 6, 7]),
            doc("b", vec![3, 4, 5, 6, 7, 8]),
            doc("c", vec![9, 10, 11, 2, 3, 4]),
        ];
        let prefixes = [vec![1u32], vec![1u32], vec![2u32]];
        let mut g = Graph::new();
        let bp = model.bind(&mut g, &|n| n == "codebook.2" || !n.starts_with("codebook"));
        let items: Vec<BatchItem> = docs
            .iter()
            .zip(prefixes.iter())
            .enumerate()
            .map(|(i, (d, p))| BatchItem {
                doc: d,
                mask: sample_hints(d, 0.5, i as u64).unwrap(),
                prefix: p,
            })
            .collect();
        let obj = batch_objective(
            &mut g,
            &model,
            &bp,
            &items,
            2,
            false,
            QuantMode::Hard,
            &mut Dropout::Off,
            &LossFlags::default(),
        )
        .unwrap();
        let r = obj.report;
        assert!(r.recon >= 0.0 && r.contrastive >= 0.0 && r.commitment >= 0.0);
        assert!((r.total - (r.recon + r.contrastive + r.commitment)).abs() < 1e-6);
    }
}
