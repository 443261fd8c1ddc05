//! Training: the reconstructor warm-up, the per-position encoder/codebook
//! warm-up with K-means initialization, the main progressive loop, and
//! checkpoint persistence.
//!
//! Each optimization phase is an independent minimization with a fresh
//! optimizer. Every random draw derives from the master seed plus phase
//! coordinates, so a run resumed from a position boundary is bitwise
//! identical to an uninterrupted one.

pub mod checkpoint;
pub mod kmeans;
pub mod losses;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use kmeans::kmeans;
pub use losses::{BatchItem, LossFlags, LossReport};
pub use optim::{Adam, AdamConfig};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_hints, Corpus, Document, HintMask};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{codebook_name, Dropout, Model, QuantMode};
use crate::rng::{derive, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Hint ratio per position; the reconstructor warm-up reuses the first.
    pub hint_ratios: Vec<f64>,
    pub warmup_recon_epochs: usize,
    pub warmup_enc_epochs: usize,
    pub main_epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    /// Contrastive objective toggle (ablation).
    pub use_contrastive: bool,
    /// Commitment objective toggle (ablation).
    pub use_commitment: bool,
    /// Encoder/codebook warm-up + K-means init toggle (ablation). When off,
    /// codebooks are random-initialized and the warm-up phase is skipped.
    pub use_warmup: bool,
    /// Reconstructor warm-up toggle (ablation).
    pub use_recon_warmup: bool,
    /// Compute per-epoch ID perplexity / diff ratio for the training log
    /// (one extra forward pass over the corpus per epoch).
    pub log_id_metrics: bool,
}

impl TrainConfig {
    pub fn desk_default(id_len: usize) -> Self {
        let base = [0.5, 0.3, 0.3];
        let hint_ratios = (0..id_len)
            .map(|i| base.get(i).copied().unwrap_or(0.3))
            .collect();
        TrainConfig {
            hint_ratios,
            warmup_recon_epochs: 3,
            warmup_enc_epochs: 3,
            main_epochs: 10,
            batch_size: 64,
            step_size: 1e-3,
            weight_decay: 0.0,
            seed: 42,
            kmeans_iters: 25,
            kmeans_restarts: 3,
            use_contrastive: true,
            use_commitment: true,
            use_warmup: true,
            use_recon_warmup: true,
            log_id_metrics: true,
        }
    }

    pub fn validate(&self, id_len: usize) -> Result<()> {
        if self.hint_ratios.len() != id_len {
            return Err(Error::validation(format!(
                "expected {} hint ratios, got {}",
                id_len,
                self.hint_ratios.len()
            )));
        }
        if self.hint_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::validation(
                "hint ratios must lie in [0, 1)".to_string(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::validation(
                "batch_size must be >= 2 (contrastive groups)".to_string(),
            ));
        }
        if self.step_size <= 0.0 {
            return Err(Error::validation("step_size must be positive".to_string()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn flags(&self) -> LossFlags {
        LossFlags {
            contrastive: self.use_contrastive,
            commitment: self.use_commitment,
        }
    }
}

/// Phase identifiers, also used as RNG stream coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ReconWarmup,
    EncoderWarmup,
    Main,
}

impl Phase {
    fn stream_id(self) -> u64 {
        match self {
            Phase::ReconWarmup => 0,
            Phase::EncoderWarmup => 1,
            Phase::Main => 2,
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, Serialize)]
pub struct TrainEvent {
    pub phase: Phase,
    /// 1-based ID position; 0 during the reconstructor warm-up.
    pub position: usize,
    pub epoch: usize,
    pub losses: LossReport,
    /// Perplexity of the current position's argmax assignment.
    pub perplexity: Option<f64>,
    /// Diff ratio at the current position (needs position >= 2 and at
    /// least one prefix-sharing pair).
    pub diff_ratio: Option<f64>,
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, position: usize, phase: Phase, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive(
        seed,
        Stream::Shuffle(position as u64, phase.stream_id(), epoch as u64),
    );
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn sample_batch_masks(
    corpus: &Corpus,
    batch: &[usize],
    ratio: f64,
    seed: u64,
    position: usize,
    phase: Phase,
    epoch: usize,
    batch_no: usize,
) -> Result<Vec<HintMask>> {
    let mut rng = derive(
        seed,
        Stream::Hints(
            position as u64,
            phase.stream_id(),
            epoch as u64,
            batch_no as u64,
        ),
    );
    batch
        .iter()
        .map(|&i| sample_hints(&corpus.documents[i], ratio, rng.gen()))
        .collect()
}

fn dropout_for(model: &Model, seed: u64, position: usize, phase: Phase, epoch: usize, batch_no: usize) -> Dropout {
    if model.cfg.dropout > 0.0 {
        Dropout::On {
            p: model.cfg.dropout,
            rng: derive(
                seed,
                Stream::Dropout(
                    position as u64,
                    phase.stream_id(),
                    epoch as u64,
                    batch_no as u64,
                ),
            ),
        }
    } else {
        Dropout::Off
    }
}

/// Trains the reconstructor against hints alone (the code-free warm-up),
/// with every semantic-encoder parameter frozen bitwise.
pub fn warmup_reconstructor(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<()> {
    let trainable = |name: &str| name.starts_with("recon.");
    let ratio = cfg.hint_ratios[0];
    let mut adam = Adam::new(cfg.adam());
    for epoch in 0..cfg.warmup_recon_epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (bno, batch) in epoch_batches(
            corpus.len(),
            cfg.batch_size,
            cfg.seed,
            0,
            Phase::ReconWarmup,
            epoch,
        )
        .iter()
        .enumerate()
        {
            let masks = sample_batch_masks(
                corpus,
                batch,
                ratio,
                cfg.seed,
                0,
                Phase::ReconWarmup,
                epoch,
                bno,
            )?;
            let mut g = Graph::new();
            let bp = model.bind(&mut g, &trainable);
            let pairs: Vec<(&Document, &HintMask)> = batch
                .iter()
                .zip(masks.iter())
                .map(|(&i, m)| (&corpus.documents[i], m))
                .collect();
            let mut dropout = dropout_for(model, cfg.seed, 0, Phase::ReconWarmup, epoch, bno);
            let (node, value) = losses::warmup_objective(&mut g, model, &bp, &pairs, &mut dropout)?;
            let grads = g.backward(node);
            let named = optim::collect_gradients(model, &bp, &grads, &trainable);
            adam.step(model, &named);
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        let mean = sum / count.max(1) as f64;
        events(&TrainEvent {
            phase: Phase::ReconWarmup,
            position: 0,
            epoch,
            losses: LossReport {
                recon: mean,
                contrastive: 0.0,
                commitment: 0.0,
                total: mean,
            },
            perplexity: None,
            diff_ratio: None,
        });
    }
    Ok(())
}

/// Hidden states `h^t` for the whole corpus under frozen prefixes, one row
/// per document.
pub fn corpus_hidden_at(
    model: &Model,
    corpus: &Corpus,
    assignments: &[Vec<u32>],
    position: usize,
) -> Result<Tensor> {
    let mut session = model.session();
    let mut out = Tensor::zeros(corpus.len(), model.cfg.dim);
    for (i, doc) in corpus.documents.iter().enumerate() {
        let prefix = &assignments[i][..position - 1];
        let h = session.hidden_all(&doc.tokens, prefix)?;
        out.row_mut(i).copy_from_slice(h.row(position - 1));
    }
    Ok(out)
}

/// Argmax code at `position = prefix.len() + 1` under a frozen prefix.
pub fn assign_position(model: &Model, doc: &Document, prefix: &[u32]) -> Result<u32> {
    model.session().assign_position(doc, prefix)
}

/// The current-model argmax code at `position` for every document, under
/// the frozen prefixes.
pub fn assign_position_all(
    model: &Model,
    corpus: &Corpus,
    assignments: &[Vec<u32>],
    position: usize,
) -> Result<Vec<u32>> {
    let mut session = model.session();
    let mut out = Vec::with_capacity(corpus.len());
    for (i, doc) in corpus.documents.iter().enumerate() {
        out.push(session.assign_position(doc, &assignments[i][..position - 1])?);
    }
    Ok(out)
}

/// Greedy re-assignment of the first `upto` positions for every document
/// with the current model (each position conditions on the codes just
/// derived, not on training-time frozen ones).
pub fn reassign_all(model: &Model, corpus: &Corpus, upto: usize) -> Result<Vec<Vec<u32>>> {
    let mut session = model.session();
    corpus
        .documents
        .iter()
        .map(|d| session.assign_semantic_id(d, upto))
        .collect()
}

fn position_metrics(
    model: &Model,
    corpus: &Corpus,
    assignments: &[Vec<u32>],
    position: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    if !model.has_codebook(position) {
        return Ok((None, None));
    }
    let codes = assign_position_all(model, corpus, assignments, position)?;
    let perplexity = crate::metrics::id_perplexity(&codes)?;
    let diff = if position >= 2 {
        let ids: Vec<Vec<u32>> = assignments
            .iter()
            .zip(codes.iter())
            .map(|(prefix, &c)| {
                let mut v = prefix[..position - 1].to_vec();
                v.push(c);
                v
            })
            .collect();
        crate::metrics::diff_ratio(&ids, position)?
    } else {
        None
    };
    Ok((Some(perplexity), diff))
}

/// One optimization phase at `position`: `use_codebook = false` is the
/// encoder/codebook warm-up objective (raw `h^t` as the t-th query),
/// `true` is the main objective with straight-through quantization.
#[allow(clippy::too_many_arguments)]
fn run_position_phase(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    position: usize,
    assignments: &[Vec<u32>],
    phase: Phase,
    epochs: usize,
    use_codebook: bool,
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<()> {
    let current_book = codebook_name(position);
    let trainable = move |name: &str| {
        if name.starts_with("codebook.") {
            use_codebook && name == current_book
        } else {
            true
        }
    };
    let ratio = cfg.hint_ratios[position - 1];
    let mut adam = Adam::new(cfg.adam());
    for epoch in 0..epochs {
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for (bno, batch) in
            epoch_batches(corpus.len(), cfg.batch_size, cfg.seed, position, phase, epoch)
                .iter()
                .enumerate()
        {
            let masks =
                sample_batch_masks(corpus, batch, ratio, cfg.seed, position, phase, epoch, bno)?;
            let items: Vec<BatchItem> = batch
                .iter()
                .zip(masks.into_iter())
                .map(|(&i, mask)| BatchItem {
                    doc: &corpus.documents[i],
                    mask,
                    prefix: &assignments[i][..position - 1],
                })
                .collect();
            let mut g = Graph::new();
            let bp = model.bind(&mut g, &trainable);
            let mut dropout = dropout_for(model, cfg.seed, position, phase, epoch, bno);
            let obj = losses::batch_objective(
                &mut g,
                model,
                &bp,
                &items,
                position,
                use_codebook,
                QuantMode::Hard,
                &mut dropout,
                &cfg.flags(),
            )?;
            let grads = g.backward(obj.total);
            let named = optim::collect_gradients(model, &bp, &grads, &trainable);
            adam.step(model, &named);
            let b = batch.len() as f64;
            sums[0] += obj.report.recon * b;
            sums[1] += obj.report.contrastive * b;
            sums[2] += obj.report.commitment * b;
            sums[3] += obj.report.total * b;
            count += batch.len();
        }
        let n = count.max(1) as f64;
        let (perplexity, diff) = if cfg.log_id_metrics && use_codebook {
            position_metrics(model, corpus, assignments, position)?
        } else {
            (None, None)
        };
        events(&TrainEvent {
            phase,
            position,
            epoch,
            losses: LossReport {
                recon: sums[0] / n,
                contrastive: sums[1] / n,
                commitment: sums[2] / n,
                total: sums[3] / n,
            },
            perplexity,
            diff_ratio: diff,
        });
    }
    Ok(())
}

/// Encoder/codebook warm-up for one position: trains with the codebook
/// bypassed, then initializes the position's codebook from K-means over the
/// corpus hidden states.
pub fn warmup_encoder_and_codebook(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    position: usize,
    assignments: &[Vec<u32>],
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<()> {
    run_position_phase(
        model,
        corpus,
        cfg,
        position,
        assignments,
        Phase::EncoderWarmup,
        cfg.warmup_enc_epochs,
        false,
        events,
    )?;
    let h = corpus_hidden_at(model, corpus, assignments, position)?;
    let k = model.cfg.codebook_sizes[position - 1];
    let centroids = kmeans(
        &h,
        k,
        cfg.kmeans_iters,
        cfg.kmeans_restarts,
        cfg.seed.wrapping_add(position as u64),
    )?;
    model.set_codebook(position, &centroids);
    Ok(())
}

/// The full progressive procedure: reconstructor warm-up once, then for
/// each position an encoder/codebook warm-up, K-means initialization, main
/// training, and a frozen greedy assignment.
///
/// `start_position` resumes after that many completed positions (0 trains
/// from scratch); `stop_after` ends the loop early at a position boundary.
/// Returns the frozen per-position assignments, one code vector per
/// document in corpus order.
pub fn train_progressive(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    start_position: usize,
    stop_after: Option<usize>,
    prior_assignments: Vec<Vec<u32>>,
    events: &mut dyn FnMut(&TrainEvent),
) -> Result<Vec<Vec<u32>>> {
    cfg.validate(model.cfg.id_len)?;
    if corpus.is_empty() {
        return Err(Error::validation("empty corpus".to_string()));
    }
    let mut assignments = if start_position == 0 {
        vec![Vec::new(); corpus.len()]
    } else {
        if prior_assignments.len() != corpus.len()
            || prior_assignments
                .iter()
                .any(|a| a.len() != start_position)
        {
            return Err(Error::state(format!(
                "resume assignments do not cover {start_position} positions for every document"
            )));
        }
        prior_assignments
    };

    if start_position == 0 && cfg.use_recon_warmup {
        warmup_reconstructor(model, corpus, cfg, events)?;
    }

    for position in (start_position + 1)..=model.cfg.id_len {
        if cfg.use_warmup {
            warmup_encoder_and_codebook(model, corpus, cfg, position, &assignments, events)?;
        } else {
            // Ablation: random codebook, no warm-up phase.
            let k = model.cfg.codebook_sizes[position - 1];
            let mut rng = derive(cfg.seed, Stream::Kmeans(position as u64));
            let t = Tensor::from_vec(
                k,
                model.cfg.dim,
                (0..k * model.cfg.dim)
                    .map(|_| rng.gen_range(-0.02..0.02))
                    .collect(),
            );
            model.set_codebook(position, &t);
        }

        run_position_phase(
            model,
            corpus,
            cfg,
            position,
            &assignments,
            Phase::Main,
            cfg.main_epochs,
            true,
            events,
        )?;

        let codes = assign_position_all(model, corpus, &assignments, position)?;
        for (a, code) in assignments.iter_mut().zip(codes) {
            a.push(code);
        }

        if stop_after == Some(position) {
            break;
        }
    }
    Ok(assignments)
}

/// Reconstruction quality of the current model on a sampled batch: top-m
/// pooled predictions against the true masked sets, macro-averaged F1.
pub fn reconstruction_macro_f1(
    model: &Model,
    corpus: &Corpus,
    assignments: &[Vec<u32>],
    position: usize,
    ratio: f64,
    seed: u64,
    sample: usize,
) -> Result<f64> {
    let mut rng = derive(seed, Stream::Custom(0xf1));
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(sample.max(1));

    let mut predicted = Vec::with_capacity(idx.len());
    let mut truth = Vec::with_capacity(idx.len());
    for &i in &idx {
        let doc = &corpus.documents[i];
        let mask = sample_hints(doc, ratio, rng.gen())?;
        let prefix = &assignments[i][..position - 1];

        let mut g = Graph::inference();
        let bp = model.bind_frozen(&mut g);
        let item = BatchItem {
            doc,
            mask: mask.clone(),
            prefix,
        };
        let logits = losses::recon_eval_logits(&mut g, model, &bp, &item, position)?;
        let m = mask.target_indices.len();
        let mut order: Vec<usize> = (0..model.cfg.vocab_size).collect();
        let row = g.value(logits).row(0).to_vec();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let pred: BTreeSet<u32> = order[..m.min(order.len())]
            .iter()
            .map(|&w| w as u32)
            .collect();
        let tru: BTreeSet<u32> = mask
            .target_indices
            .iter()
            .map(|&p| doc.tokens[p])
            .collect();
        predicted.push(pred);
        truth.push(tru);
    }
    crate::metrics::macro_f1(&predicted, &truth)
}
