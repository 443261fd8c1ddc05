//! The semantic indexer: an encoder-decoder sequence model with one
//! codebook per ID position, plus the shallow reconstructor that supervises
//! it.
//!
//! Forward passes are expressed as [`Graph`] programs so the same builder
//! code serves training (gradients) and inference (forward-only). Parameter
//! freezing is a binding-time decision: a parameter bound as a constant
//! receives no gradient.

mod params;

pub use params::{Param, ParamStore};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{derive, Stream};
use crate::tensor::{softmax, Tensor};

/// Name of the per-position codebook tensor.
pub fn codebook_name(position: usize) -> String {
    format!("codebook.{position}")
}

/// Name of the disambiguation-position codebook tensor.
pub const SUFFIX_CODEBOOK: &str = "codebook.suffix";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Embedding / hidden width.
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Number of learned ID positions.
    pub id_len: usize,
    /// Codebook size per learned position.
    pub codebook_sizes: Vec<usize>,
    pub vocab_size: usize,
    pub max_doc_len: usize,
    pub recon_layers: usize,
    /// Dropout probability; 0 disables it.
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; vocabulary size is corpus-dependent.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            dim: 64,
            enc_layers: 2,
            dec_layers: 1,
            heads: 4,
            id_len: 3,
            codebook_sizes: vec![8, 8, 8],
            vocab_size,
            max_doc_len: 64,
            recon_layers: 1,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::validation(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.id_len == 0 {
            return Err(Error::validation("id_len must be >= 1".to_string()));
        }
        if self.codebook_sizes.len() != self.id_len {
            return Err(Error::validation(format!(
                "expected {} codebook sizes, got {}",
                self.id_len,
                self.codebook_sizes.len()
            )));
        }
        if self.codebook_sizes.iter().any(|&k| k < 2) {
            return Err(Error::validation(
                "every codebook size must be >= 2".to_string(),
            ));
        }
        if self.recon_layers == 0 {
            return Err(Error::validation("recon_layers must be >= 1".to_string()));
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size must be >= 2".to_string()));
        }
        if self.max_doc_len == 0 {
            return Err(Error::validation("max_doc_len must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// A length-T code sequence, optionally extended by a disambiguation code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<u32>,
    pub suffix: Option<u32>,
}

impl SemanticId {
    pub fn new(codes: Vec<u32>) -> Self {
        SemanticId {
            codes,
            suffix: None,
        }
    }

    pub fn with_suffix(codes: Vec<u32>, suffix: u32) -> Self {
        SemanticId {
            codes,
            suffix: Some(suffix),
        }
    }

    /// Learned codes followed by the suffix when present.
    pub fn full_codes(&self) -> Vec<u32> {
        let mut out = self.codes.clone();
        if let Some(s) = self.suffix {
            out.push(s);
        }
        out
    }

    pub fn full_len(&self) -> usize {
        self.codes.len() + usize::from(self.suffix.is_some())
    }
}

/// Softmax distribution over one position's codes.
#[derive(Debug, Clone)]
pub struct CodeDistribution {
    pub probs: Vec<f64>,
    pub chosen: u32,
}

/// Dot-product lookup of a hidden state against a codebook: softmax over
/// `h . e_j`, argmax choice with lowest-index tie-break.
pub fn code_lookup(h: &Tensor, book: &Tensor) -> Result<CodeDistribution> {
    if h.rows() != 1 || h.cols() != book.cols() {
        return Err(Error::contract(format!(
            "code_lookup width mismatch: h is {:?}, codebook is {:?}",
            h.shape(),
            book.shape()
        )));
    }
    if !h.is_finite() {
        return Err(Error::numeric("non-finite hidden state".to_string()));
    }
    let logits: Vec<f64> = (0..book.rows())
        .map(|j| crate::tensor::dot(h.row(0), book.row(j)))
        .collect();
    let probs = softmax(&logits);
    let t = Tensor::row_vector(logits);
    Ok(CodeDistribution {
        probs,
        chosen: t.row_argmax(0) as u32,
    })
}

/// Whether quantization keeps the hard argmax forward value or substitutes
/// the differentiable soft mixture (used by gradient checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Hard,
    Soft,
}

/// Quantizes each row of `h` against `book`. Returns the quantized rows
/// (argmax codebook rows under [`QuantMode::Hard`], exactly) and the chosen
/// code per row. Gradients follow the softmax-weighted mixture either way.
pub fn quantize(g: &mut Graph, h: NodeId, book: NodeId, mode: QuantMode) -> (NodeId, Vec<u32>) {
    let logits = g.matmul_nt(h, book);
    let chosen: Vec<u32> = (0..g.value(logits).rows())
        .map(|i| g.value(logits).row_argmax(i) as u32)
        .collect();
    let probs = g.row_softmax(logits);
    let mixture = g.matmul(probs, book);
    match mode {
        QuantMode::Soft => (mixture, chosen),
        QuantMode::Hard => {
            let (m, d) = g.value(mixture).shape();
            let mut hard = Tensor::zeros(m, d);
            for (i, &c) in chosen.iter().enumerate() {
                hard.row_mut(i)
                    .copy_from_slice(g.value(book).row(c as usize));
            }
            (g.hard_substitute(mixture, hard), chosen)
        }
    }
}

/// Parameter nodes bound into one graph.
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::state(format!("codebook tensor {name:?} not initialized")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }
}

/// Per-batch dropout state. [`Dropout::Off`] is the inference/eval mode.
pub enum Dropout {
    Off,
    On { p: f64, rng: ChaCha8Rng },
}

impl Dropout {
    pub fn apply(&mut self, g: &mut Graph, node: NodeId) -> NodeId {
        match self {
            Dropout::Off => node,
            Dropout::On { p, rng } => {
                let (m, n) = g.value(node).shape();
                let keep = 1.0 - *p;
                let mut mask = Tensor::zeros(m, n);
                for v in mask.data_mut() {
                    if rng.gen::<f64>() < keep {
                        *v = 1.0 / keep;
                    }
                }
                g.mul_const(node, mask)
            }
        }
    }
}

struct AttnWeights {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

/// The semantic indexer and its reconstructor, as one parameter store.
///
/// Name prefixes partition the parameters: `recon.*` is the reconstructor
/// (phi), `codebook.*` are the quantization codebooks, everything else is
/// the semantic encoder (theta).
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh random initialization. Codebooks are *not* created here; they
    /// appear when K-means initialization runs for each position.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, Stream::Init);
        let mut p = ParamStore::new();
        let d = cfg.dim;
        let ff = 4 * d;
        const STD: f64 = 0.02;

        p.insert("tok_emb", Param::gaussian(cfg.vocab_size, d, STD, &mut rng));
        p.insert("enc_pos", Param::gaussian(cfg.max_doc_len, d, STD, &mut rng));
        for l in 0..cfg.enc_layers {
            p.insert(format!("enc.{l}.attn.wq"), Param::gaussian(d, d, STD, &mut rng));
            p.insert(format!("enc.{l}.attn.wk"), Param::gaussian(d, d, STD, &mut rng));
            p.insert(format!("enc.{l}.attn.wv"), Param::gaussian(d, d, STD, &mut rng));
            p.insert(format!("enc.{l}.attn.wo"), Param::zeros(d, d));
            p.insert(format!("enc.{l}.attn.norm"), Param::constant(1, d, 1.0));
            p.insert(format!("enc.{l}.ffn.w1"), Param::gaussian(ff, d, STD, &mut rng));
            p.insert(format!("enc.{l}.ffn.w2"), Param::zeros(d, ff));
            p.insert(format!("enc.{l}.ffn.norm"), Param::constant(1, d, 1.0));
        }
        p.insert("enc.final_norm", Param::constant(1, d, 1.0));

        p.insert("dec.bos", Param::gaussian(1, d, STD, &mut rng));
        p.insert("dec_pos", Param::gaussian(cfg.id_len + 1, d, STD, &mut rng));
        for l in 0..cfg.dec_layers {
            for block in ["self", "cross"] {
                p.insert(format!("dec.{l}.{block}.wq"), Param::gaussian(d, d, STD, &mut rng));
                p.insert(format!("dec.{l}.{block}.wk"), Param::gaussian(d, d, STD, &mut rng));
                p.insert(format!("dec.{l}.{block}.wv"), Param::gaussian(d, d, STD, &mut rng));
                p.insert(format!("dec.{l}.{block}.wo"), Param::zeros(d, d));
                p.insert(format!("dec.{l}.{block}.norm"), Param::constant(1, d, 1.0));
            }
            p.insert(format!("dec.{l}.ffn.w1"), Param::gaussian(ff, d, STD, &mut rng));
            p.insert(format!("dec.{l}.ffn.w2"), Param::zeros(d, ff));
            p.insert(format!("dec.{l}.ffn.norm"), Param::constant(1, d, 1.0));
        }
        p.insert("dec.final_norm", Param::constant(1, d, 1.0));

        for l in 0..cfg.recon_layers {
            p.insert(format!("recon.{l}.attn.wq"), Param::gaussian(d, d, STD, &mut rng));
            p.insert(format!("recon.{l}.attn.wk"), Param::gaussian(d, d, STD, &mut rng));
            p.insert(format!("recon.{l}.attn.wv"), Param::gaussian(d, d, STD, &mut rng));
            p.insert(format!("recon.{l}.attn.wo"), Param::zeros(d, d));
            p.insert(format!("recon.{l}.attn.norm"), Param::constant(1, d, 1.0));
            p.insert(format!("recon.{l}.ffn.w1"), Param::gaussian(ff, d, STD, &mut rng));
            p.insert(format!("recon.{l}.ffn.w2"), Param::zeros(d, ff));
            p.insert(format!("recon.{l}.ffn.norm"), Param::constant(1, d, 1.0));
        }
        p.insert("recon.fallback", Param::gaussian(1, d, STD, &mut rng));
        p.insert("recon.pos", Param::gaussian(cfg.max_doc_len, d, STD, &mut rng));

        Ok(Model { cfg, params: p })
    }

    /// True once the codebook for 1-based `position` exists.
    pub fn has_codebook(&self, position: usize) -> bool {
        self.params.contains(&codebook_name(position))
    }

    pub fn codebook(&self, position: usize) -> Result<&Param> {
        self.params.get(&codebook_name(position)).map_err(|_| {
            Error::state(format!("codebook for position {position} not initialized"))
        })
    }

    pub fn set_codebook(&mut self, position: usize, rows: &Tensor) {
        self.set_codebook_named(&codebook_name(position), rows);
    }

    pub fn set_codebook_named(&mut self, name: &str, rows: &Tensor) {
        let mut p = Param::zeros(rows.rows(), rows.cols());
        p.set_from_tensor(rows);
        self.params.insert(name.to_string(), p);
    }

    /// Creates the disambiguation-position codebook with `k` rows if it is
    /// absent. An existing codebook must already be large enough.
    pub fn ensure_suffix_codebook(&mut self, k: usize, seed: u64) -> Result<()> {
        if let Ok(existing) = self.params.get(SUFFIX_CODEBOOK) {
            if existing.rows < k {
                return Err(Error::state(format!(
                    "suffix codebook has {} rows but {k} are needed",
                    existing.rows
                )));
            }
            return Ok(());
        }
        let mut rng = derive(seed, Stream::SuffixInit);
        self.params.insert(
            SUFFIX_CODEBOOK,
            Param::gaussian(k.max(1), self.cfg.dim, 0.02, &mut rng),
        );
        Ok(())
    }

    /// Binds every parameter into `g`; `trainable` decides leaf vs constant.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> BoundParams {
        let mut nodes = BTreeMap::new();
        for (name, p) in self.params.iter() {
            let t = p.to_tensor();
            let id = if trainable(name) {
                g.leaf(t)
            } else {
                g.constant(t)
            };
            nodes.insert(name.to_string(), id);
        }
        BoundParams { nodes }
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.bind(g, &|_| false)
    }

    fn attn_weights(bp: &BoundParams, prefix: &str) -> AttnWeights {
        AttnWeights {
            wq: bp.node(&format!("{prefix}.wq")),
            wk: bp.node(&format!("{prefix}.wk")),
            wv: bp.node(&format!("{prefix}.wv")),
            wo: bp.node(&format!("{prefix}.wo")),
        }
    }

    fn mha(&self, g: &mut Graph, q_in: NodeId, kv_in: NodeId, w: &AttnWeights, causal: bool) -> NodeId {
        let hd = self.cfg.head_dim();
        let q = g.matmul_nt(q_in, w.wq);
        let k = g.matmul_nt(kv_in, w.wk);
        let v = g.matmul_nt(kv_in, w.wv);
        let (m, n) = (g.value(q).rows(), g.value(k).rows());
        let mask = if causal {
            debug_assert_eq!(m, n);
            let mut t = Tensor::zeros(m, n);
            for i in 0..m {
                for j in (i + 1)..n {
                    t.set(i, j, -1e30);
                }
            }
            Some(t)
        } else {
            None
        };
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (c0, c1) = (h * hd, (h + 1) * hd);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let mut scores = g.matmul_nt(qh, kh);
            scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
            if let Some(mk) = &mask {
                scores = g.add_const(scores, mk);
            }
            let p = g.row_softmax(scores);
            heads.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&heads);
        g.matmul_nt(cat, w.wo)
    }

    fn ffn(&self, g: &mut Graph, x: NodeId, w1: NodeId, w2: NodeId) -> NodeId {
        let h = g.matmul_nt(x, w1);
        let h = g.relu(h);
        g.matmul_nt(h, w2)
    }

    /// Bidirectional encoder over a token sequence; returns `[n, D]`.
    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        tokens: &[u32],
        dropout: &mut Dropout,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot encode an empty token sequence".to_string()));
        }
        if tokens.len() > self.cfg.max_doc_len {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_doc_len {}",
                tokens.len(),
                self.cfg.max_doc_len
            )));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.gather_rows(bp.node("tok_emb"), &idx);
        let pos = g.slice_rows(bp.node("enc_pos"), 0, tokens.len());
        let mut x = g.add(emb, pos);
        for l in 0..self.cfg.enc_layers {
            let norm1 = bp.node(&format!("enc.{l}.attn.norm"));
            let xn = g.rmsnorm(x, norm1);
            let w = Self::attn_weights(bp, &format!("enc.{l}.attn"));
            let a = self.mha(g, xn, xn, &w, false);
            let a = dropout.apply(g, a);
            x = g.add(x, a);
            let norm2 = bp.node(&format!("enc.{l}.ffn.norm"));
            let xn = g.rmsnorm(x, norm2);
            let f = self.ffn(
                g,
                xn,
                bp.node(&format!("enc.{l}.ffn.w1")),
                bp.node(&format!("enc.{l}.ffn.w2")),
            );
            let f = dropout.apply(g, f);
            x = g.add(x, f);
        }
        Ok(g.rmsnorm(x, bp.node("enc.final_norm")))
    }

    /// Autoregressive decoder over `[BOS, emb(c^1), ..., emb(c^p)]` with
    /// cross-attention to `enc_out`. Row `j` of the result is the hidden
    /// state for ID position `j+1`, so the output has `p+1` rows.
    ///
    /// Prefix embeddings reuse the codebook rows of the already-learned
    /// positions plus a learned decoder position embedding.
    pub fn decode_hidden(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        enc_out: NodeId,
        prefix: &[u32],
        dropout: &mut Dropout,
    ) -> Result<NodeId> {
        if prefix.len() > self.cfg.id_len {
            return Err(Error::contract(format!(
                "prefix of length {} exceeds ID length {}",
                prefix.len(),
                self.cfg.id_len
            )));
        }
        let mut parts = vec![bp.node("dec.bos")];
        for (j, &c) in prefix.iter().enumerate() {
            let position = j + 1;
            if c as usize >= self.cfg.codebook_sizes[j] {
                return Err(Error::contract(format!(
                    "code {c} out of range for position {position} (K={})",
                    self.cfg.codebook_sizes[j]
                )));
            }
            let book = bp.try_node(&codebook_name(position))?;
            parts.push(g.gather_rows(book, &[c as usize]));
        }
        let inp = g.concat_rows(&parts);
        let pos = g.slice_rows(bp.node("dec_pos"), 0, prefix.len() + 1);
        let mut x = g.add(inp, pos);
        for l in 0..self.cfg.dec_layers {
            let sn = bp.node(&format!("dec.{l}.self.norm"));
            let xn = g.rmsnorm(x, sn);
            let w = Self::attn_weights(bp, &format!("dec.{l}.self"));
            let a = self.mha(g, xn, xn, &w, true);
            let a = dropout.apply(g, a);
            x = g.add(x, a);

            let cn = bp.node(&format!("dec.{l}.cross.norm"));
            let xn = g.rmsnorm(x, cn);
            let w = Self::attn_weights(bp, &format!("dec.{l}.cross"));
            let a = self.mha(g, xn, enc_out, &w, false);
            let a = dropout.apply(g, a);
            x = g.add(x, a);

            let fnorm = bp.node(&format!("dec.{l}.ffn.norm"));
            let xn = g.rmsnorm(x, fnorm);
            let f = self.ffn(
                g,
                xn,
                bp.node(&format!("dec.{l}.ffn.w1")),
                bp.node(&format!("dec.{l}.ffn.w2")),
            );
            let f = dropout.apply(g, f);
            x = g.add(x, f);
        }
        Ok(g.rmsnorm(x, bp.node("dec.final_norm")))
    }

    /// The reconstructor stack plus the pooled output head.
    ///
    /// Queries (`[m, D]`, or the learned fallback query when `None`) cross-
    /// attend to the hint token embeddings; the per-query outputs are summed
    /// into a single vector `z` which scores every vocabulary entry through
    /// the tied token embedding matrix.
    pub fn recon_logits(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        queries: Option<NodeId>,
        hint_tokens: &[u32],
        hint_positions: &[usize],
        dropout: &mut Dropout,
    ) -> Result<ReconOut> {
        if hint_tokens.is_empty() {
            return Err(Error::contract(
                "reconstructor requires at least one hint token".to_string(),
            ));
        }
        assert_eq!(hint_tokens.len(), hint_positions.len());
        let tok_idx: Vec<usize> = hint_tokens.iter().map(|&t| t as usize).collect();
        let temb = g.gather_rows(bp.node("tok_emb"), &tok_idx);
        let pemb = g.gather_rows(bp.node("recon.pos"), hint_positions);
        let hints = g.add(temb, pemb);

        let mut q = queries.unwrap_or_else(|| bp.node("recon.fallback"));
        for l in 0..self.cfg.recon_layers {
            let an = bp.node(&format!("recon.{l}.attn.norm"));
            let qn = g.rmsnorm(q, an);
            let w = Self::attn_weights(bp, &format!("recon.{l}.attn"));
            let a = self.mha(g, qn, hints, &w, false);
            let a = dropout.apply(g, a);
            q = g.add(q, a);
            let fnorm = bp.node(&format!("recon.{l}.ffn.norm"));
            let qn = g.rmsnorm(q, fnorm);
            let f = self.ffn(
                g,
                qn,
                bp.node(&format!("recon.{l}.ffn.w1")),
                bp.node(&format!("recon.{l}.ffn.w2")),
            );
            let f = dropout.apply(g, f);
            q = g.add(q, f);
        }
        let z = g.sum_rows(q);
        let logits = g.matmul_nt(z, bp.node("tok_emb"));
        Ok(ReconOut { z, logits })
    }

    /// Hidden states `h^1..h^{p+1}` for a token sequence under a code
    /// prefix, forward-only. Row `t-1` is `h^t`.
    pub fn hidden_all(&self, tokens: &[u32], prefix: &[u32]) -> Result<Tensor> {
        self.session().hidden_all(tokens, prefix)
    }

    /// A reusable forward-only evaluation context; parameters are bound
    /// once and per-input nodes are dropped between calls.
    pub fn session(&self) -> InferenceSession<'_> {
        let mut g = Graph::inference();
        let bp = self.bind_frozen(&mut g);
        let mark = g.mark();
        InferenceSession {
            model: self,
            g,
            bp,
            mark,
        }
    }

    /// `h^t` for `t = prefix.len() + 1` (Eq-1-style encoding of a document
    /// under its learned prefix). The prefix must leave at least one
    /// learnable position, i.e. `prefix.len() < id_len`.
    pub fn encode(&self, doc: &Document, prefix: &[u32]) -> Result<Tensor> {
        if prefix.len() >= self.cfg.id_len {
            return Err(Error::contract(format!(
                "prefix length {} must be < ID length {}",
                prefix.len(),
                self.cfg.id_len
            )));
        }
        let h = self.hidden_all(&doc.tokens, prefix)?;
        let last = h.rows() - 1;
        Ok(Tensor::row_vector(h.row(last).to_vec()))
    }

    /// Greedy sequential argmax assignment of the first `upto` positions.
    pub fn assign_semantic_id(&self, doc: &Document, upto: usize) -> Result<Vec<u32>> {
        self.session().assign_semantic_id(doc, upto)
    }
}

/// Forward-only evaluation context with the parameters bound once.
pub struct InferenceSession<'m> {
    model: &'m Model,
    g: Graph,
    bp: BoundParams,
    mark: usize,
}

impl InferenceSession<'_> {
    /// Hidden states `h^1..h^{p+1}`; row `t-1` is `h^t`.
    pub fn hidden_all(&mut self, tokens: &[u32], prefix: &[u32]) -> Result<Tensor> {
        self.g.truncate(self.mark);
        let enc = self
            .model
            .encode_tokens(&mut self.g, &self.bp, tokens, &mut Dropout::Off)?;
        let dec = self
            .model
            .decode_hidden(&mut self.g, &self.bp, enc, prefix, &mut Dropout::Off)?;
        Ok(self.g.value(dec).clone())
    }

    /// Argmax code at position `prefix.len() + 1` under a frozen prefix.
    pub fn assign_position(&mut self, doc: &Document, prefix: &[u32]) -> Result<u32> {
        let book = self.model.codebook(prefix.len() + 1)?;
        let h = self.hidden_all(&doc.tokens, prefix)?;
        let last = h.rows() - 1;
        let dist = code_lookup(&Tensor::row_vector(h.row(last).to_vec()), &book.to_tensor())?;
        Ok(dist.chosen)
    }

    /// Greedy sequential argmax assignment of the first `upto` positions.
    pub fn assign_semantic_id(&mut self, doc: &Document, upto: usize) -> Result<Vec<u32>> {
        if upto > self.model.cfg.id_len {
            return Err(Error::contract(format!(
                "cannot assign {upto} positions; ID length is {}",
                self.model.cfg.id_len
            )));
        }
        let mut codes: Vec<u32> = Vec::with_capacity(upto);
        if upto == 0 {
            return Ok(codes);
        }
        self.g.truncate(self.mark);
        let enc = self
            .model
            .encode_tokens(&mut self.g, &self.bp, &doc.tokens, &mut Dropout::Off)?;
        for t in 1..=upto {
            let book = self.model.codebook(t)?;
            let dec = self
                .model
                .decode_hidden(&mut self.g, &self.bp, enc, &codes, &mut Dropout::Off)?;
            let last = self.g.value(dec).rows() - 1;
            let h = Tensor::row_vector(self.g.value(dec).row(last).to_vec());
            let dist = code_lookup(&h, &book.to_tensor())?;
            codes.push(dist.chosen);
        }
        Ok(codes)
    }
}

/// Reconstructor output: the pooled vector and the vocabulary logits.
#[derive(Debug, Clone, Copy)]
pub struct ReconOut {
    pub z: NodeId,
    pub logits: NodeId,
}
