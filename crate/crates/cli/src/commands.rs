//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use semindex_core::corpus::{
    load_corpus, load_documents_with_vocab, synth_corpus, Corpus, CorpusOptions,
};
use semindex_core::idspace::{
    build_prefix_tree, disambiguate, duplication_stats, hc_baseline_ids, IdTable,
};
use semindex_core::metrics::{self, RankedList};
use semindex_core::model::{Model, ModelConfig, SemanticId};
use semindex_core::retrieval::{
    self, load_queries, pairs_from_records, FinetuneConfig, QueryRecord, DEFAULT_BEAM,
};
use semindex_core::trainer::{
    self,
    checkpoint::{load_checkpoint, save_checkpoint, write_ids_tsv, CheckpointState},
    TrainConfig, TrainEvent,
};

use crate::config::{pick, resolve_seed, FileConfig};
use crate::util::{file_hash, input_hashes, parse_list, write_report};

// ---------------------------------------------------------------- synth --

#[derive(Args)]
pub struct SynthArgs {
    /// Number of top-level categories.
    #[arg(long)]
    top: usize,
    /// Leaves per top-level category.
    #[arg(long)]
    sub: usize,
    /// Documents per leaf.
    #[arg(long = "per-leaf")]
    per_leaf: usize,
    /// Tokens per document.
    #[arg(long = "doc-len", default_value_t = 40)]
    doc_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SynthLine<'a> {
    doc_id: &'a str,
    text: &'a str,
    category: &'a str,
}

pub fn run_synth(args: SynthArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, &FileConfig::default());
    let corpus = synth_corpus(args.top, args.sub, args.per_leaf, args.doc_len, seed)?;
    let mut out = String::new();
    for d in &corpus.documents {
        let line = SynthLine {
            doc_id: &d.doc_id,
            text: &d.raw_text,
            category: d.category.as_deref().unwrap_or_default(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {:?}", args.out))?;
    eprintln!(
        "wrote {} documents ({} categories) to {:?}",
        corpus.len(),
        corpus.categories.map(|c| c.len()).unwrap_or(0),
        args.out
    );
    Ok(())
}

// ---------------------------------------------------------------- train --

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus JSONL file.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,

    // model shape
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "enc-layers")]
    enc_layers: Option<usize>,
    #[arg(long = "dec-layers")]
    dec_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long = "recon-layers")]
    recon_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Learned ID length T.
    #[arg(long = "id-len")]
    id_len: Option<usize>,
    /// One codebook size for every position.
    #[arg(long = "codebook-size")]
    codebook_size: Option<usize>,
    /// Per-position codebook sizes, comma-separated (overrides --codebook-size).
    #[arg(long = "codebook-sizes")]
    codebook_sizes: Option<String>,
    /// Maximum document length in tokens.
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    /// Minimum word frequency for vocabulary inclusion.
    #[arg(long = "min-count")]
    min_count: Option<usize>,

    // training
    /// Per-position hint ratios, comma-separated.
    #[arg(long = "hint-ratios")]
    hint_ratios: Option<String>,
    #[arg(long = "epochs-recon-warmup")]
    warmup_recon_epochs: Option<usize>,
    #[arg(long = "epochs-enc-warmup")]
    warmup_enc_epochs: Option<usize>,
    #[arg(long = "epochs-main")]
    main_epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Optimizer step size.
    #[arg(long = "lr")]
    step_size: Option<f64>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    #[arg(long = "kmeans-iters")]
    kmeans_iters: Option<usize>,
    #[arg(long = "kmeans-restarts")]
    kmeans_restarts: Option<usize>,

    // ablations
    /// Drop the contrastive objective.
    #[arg(long = "no-contrastive")]
    no_contrastive: bool,
    /// Drop the commitment objective.
    #[arg(long = "no-commitment")]
    no_commitment: bool,
    /// Skip the encoder/codebook warm-up and K-means init (random codebooks).
    #[arg(long = "no-warmup")]
    no_warmup: bool,
    /// Skip the reconstructor warm-up.
    #[arg(long = "no-recon-warmup")]
    no_recon_warmup: bool,
    /// Skip per-epoch ID metrics in the training log (faster).
    #[arg(long = "no-id-log")]
    no_id_log: bool,

    /// Resume from a checkpoint written with --stop-after.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this position completes and checkpoint there.
    #[arg(long = "stop-after")]
    stop_after: Option<usize>,
}

struct ResolvedTrain {
    seed: u64,
    corpus_opts: CorpusOptions,
    model_shape: (usize, usize, usize, usize, usize, f64), // dim, enc, dec, heads, recon, dropout
    id_len: usize,
    codebook_sizes: Vec<usize>,
    train: TrainConfig,
}

fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &file);
    let id_len = pick(args.id_len, file.id_len, 3);
    let codebook_sizes = match (&args.codebook_sizes, &file.codebook_sizes) {
        (Some(s), _) => parse_list(s)?,
        (None, Some(v)) => v.clone(),
        (None, None) => {
            let k = pick(args.codebook_size, file.codebook_size, 8);
            vec![k; id_len]
        }
    };
    let hint_ratios = match (&args.hint_ratios, &file.hint_ratios) {
        (Some(s), _) => parse_list(s)?,
        (None, Some(v)) => v.clone(),
        (None, None) => TrainConfig::desk_default(id_len).hint_ratios,
    };
    let defaults = TrainConfig::desk_default(id_len);
    let train = TrainConfig {
        hint_ratios,
        warmup_recon_epochs: pick(
            args.warmup_recon_epochs,
            file.warmup_recon_epochs,
            defaults.warmup_recon_epochs,
        ),
        warmup_enc_epochs: pick(
            args.warmup_enc_epochs,
            file.warmup_enc_epochs,
            defaults.warmup_enc_epochs,
        ),
        main_epochs: pick(args.main_epochs, file.main_epochs, defaults.main_epochs),
        batch_size: pick(args.batch_size, file.batch_size, defaults.batch_size),
        step_size: pick(args.step_size, file.step_size, defaults.step_size),
        weight_decay: pick(args.weight_decay, file.weight_decay, defaults.weight_decay),
        seed,
        kmeans_iters: pick(args.kmeans_iters, file.kmeans_iters, defaults.kmeans_iters),
        kmeans_restarts: pick(
            args.kmeans_restarts,
            file.kmeans_restarts,
            defaults.kmeans_restarts,
        ),
        use_contrastive: !args.no_contrastive,
        use_commitment: !args.no_commitment,
        use_warmup: !args.no_warmup,
        use_recon_warmup: !args.no_recon_warmup,
        log_id_metrics: !args.no_id_log,
    };
    Ok(ResolvedTrain {
        seed,
        corpus_opts: CorpusOptions {
            max_len: pick(args.max_len, file.max_len, 64),
            min_count: pick(args.min_count, file.min_count, 2),
        },
        model_shape: (
            pick(args.dim, file.dim, 64),
            pick(args.enc_layers, file.enc_layers, 2),
            pick(args.dec_layers, file.dec_layers, 1),
            pick(args.heads, file.heads, 4),
            pick(args.recon_layers, file.recon_layers, 1),
            pick(args.dropout, file.dropout, 0.0),
        ),
        id_len,
        codebook_sizes,
        train,
    })
}

fn exported_table(model: &Model, corpus: &Corpus) -> Result<IdTable> {
    let codes = trainer::reassign_all(model, corpus, model.cfg.id_len)?;
    let entries = corpus
        .documents
        .iter()
        .zip(codes)
        .map(|(d, c)| (d.doc_id.clone(), SemanticId::new(c)))
        .collect();
    Ok(IdTable::new(entries)?)
}

fn id_quality_report(corpus: &Corpus, table: &IdTable) -> Result<serde_json::Value> {
    let learned = table.learned_codes();
    let id_len = learned.first().map(|c| c.len()).unwrap_or(0);
    let mut perplexity = BTreeMap::new();
    let mut diff = BTreeMap::new();
    for t in 1..=id_len {
        let codes: Vec<u32> = learned.iter().map(|c| c[t - 1]).collect();
        perplexity.insert(t.to_string(), metrics::id_perplexity(&codes)?);
        if t >= 2 {
            diff.insert(t.to_string(), metrics::diff_ratio(&learned, t)?);
        }
    }
    let duplication: BTreeMap<String, usize> = duplication_stats(table)?
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();

    let mut ami = serde_json::Map::new();
    let labeled: Vec<(&str, &str)> = corpus
        .documents
        .iter()
        .filter_map(|d| {
            d.category
                .as_deref()
                .map(|c| (d.doc_id.as_str(), c))
        })
        .collect();
    if labeled.len() == corpus.len() && !labeled.is_empty() {
        let tops: Vec<String> = corpus
            .documents
            .iter()
            .map(|d| d.top_category().unwrap_or_default().to_string())
            .collect();
        let fulls: Vec<String> = corpus
            .documents
            .iter()
            .map(|d| d.category.clone().unwrap_or_default())
            .collect();
        let c1: Vec<u32> = corpus
            .documents
            .iter()
            .map(|d| table.get(&d.doc_id).map(|id| id.codes[0]).unwrap_or(0))
            .collect();
        let full_codes: Vec<Vec<u32>> = corpus
            .documents
            .iter()
            .map(|d| table.get(&d.doc_id).map(|id| id.codes.clone()).unwrap_or_default())
            .collect();
        ami.insert(
            "learned_c1_vs_top".to_string(),
            json!(metrics::ami(&c1, &tops)?),
        );
        ami.insert(
            "learned_full_vs_category".to_string(),
            json!(metrics::ami(&full_codes, &fulls)?),
        );
    }

    Ok(json!({
        "documents": table.len(),
        "perplexity": perplexity,
        "diff_ratio": diff,
        "duplication": duplication,
        "ami": ami,
    }))
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let resolved = resolve_train(&args)?;
    let corpus = load_corpus(&args.corpus, &resolved.corpus_opts)?;
    if corpus.is_empty() {
        bail!(semindex_core::Error::validation("corpus is empty".to_string()));
    }

    let (dim, enc_layers, dec_layers, heads, recon_layers, dropout) = resolved.model_shape;
    let model_cfg = ModelConfig {
        dim,
        enc_layers,
        dec_layers,
        heads,
        id_len: resolved.id_len,
        codebook_sizes: resolved.codebook_sizes.clone(),
        vocab_size: corpus.vocabulary.size(),
        max_doc_len: resolved.corpus_opts.max_len,
        recon_layers,
        dropout,
    };

    let (mut model, start_position, prior) = match &args.resume {
        None => (Model::init(model_cfg.clone(), resolved.seed)?, 0, Vec::new()),
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            if ckpt.manifest.disambiguated {
                bail!(semindex_core::Error::validation(
                    "checkpoint is already fully trained".to_string()
                ));
            }
            if ckpt.manifest.model_config != model_cfg {
                bail!(semindex_core::Error::validation(
                    "resume model configuration differs from the requested one".to_string()
                ));
            }
            let start = ckpt.manifest.positions_done;
            let by_doc = semindex_core::trainer::checkpoint::assignments_map(&ckpt.assignments);
            let prior: Vec<Vec<u32>> = corpus
                .documents
                .iter()
                .map(|d| {
                    by_doc
                        .get(d.doc_id.as_str())
                        .map(|id| id.codes.clone())
                        .ok_or_else(|| {
                            semindex_core::Error::validation(format!(
                                "checkpoint has no assignment for doc {:?}",
                                d.doc_id
                            ))
                        })
                })
                .collect::<semindex_core::Result<_>>()?;
            (ckpt.model, start, prior)
        }
    };

    let run_config = json!({
        "command": "train",
        "seed": resolved.seed,
        "model": model_cfg,
        "train": resolved.train,
        "corpus": args.corpus.to_string_lossy(),
        "stop_after": args.stop_after,
        "resumed_from": args.resume.as_ref().map(|p| p.to_string_lossy().to_string()),
        "input_hashes": input_hashes(&[("corpus", args.corpus.as_path())])?,
    });

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let mut on_event = |e: &TrainEvent| {
        let line = serde_json::to_string(e).expect("event serializes");
        let _ = writeln!(log, "{line}");
        eprintln!(
            "{:?} position={} epoch={} total={:.4}",
            e.phase, e.position, e.epoch, e.losses.total
        );
    };

    let frozen = trainer::train_progressive(
        &mut model,
        &corpus,
        &resolved.train,
        start_position,
        args.stop_after,
        prior,
        &mut on_event,
    )?;
    drop(log);

    let completed = frozen.iter().all(|a| a.len() == model.cfg.id_len);
    let ckpt_dir = args.out.join("checkpoint");
    if completed {
        // Export the final model's own greedy assignments so that
        // re-assigning the corpus with this checkpoint reproduces ids.tsv
        // exactly; report how far training-time frozen codes drifted.
        let table = exported_table(&model, &corpus)?;
        let drift = corpus
            .documents
            .iter()
            .zip(frozen.iter())
            .filter(|(d, frozen_codes)| {
                table.get(&d.doc_id).map(|id| &id.codes) != Some(frozen_codes)
            })
            .count();
        let full = disambiguate(&table)?;
        let max_group = duplication_stats(&table)?
            .keys()
            .max()
            .copied()
            .unwrap_or(1);
        model.ensure_suffix_codebook(max_group, resolved.seed)?;
        save_checkpoint(
            &ckpt_dir,
            &CheckpointState {
                model: &model,
                vocabulary: &corpus.vocabulary,
                train_config: Some(&resolved.train),
                run_config: run_config.clone(),
                positions_done: model.cfg.id_len,
                disambiguated: true,
                assignments: full.entries(),
            },
        )?;
        let mut report = id_quality_report(&corpus, &table)?;
        report["frozen_vs_exported_drift"] = json!(drift);
        report["run_config"] = run_config;
        write_report(&args.out.join("report.json"), &report)?;
        eprintln!(
            "training complete: {} documents, drift {}, checkpoint at {:?}",
            corpus.len(),
            drift,
            ckpt_dir
        );
    } else {
        let positions_done = frozen.first().map(|a| a.len()).unwrap_or(0);
        let entries: Vec<(String, SemanticId)> = corpus
            .documents
            .iter()
            .zip(frozen.iter())
            .map(|(d, codes)| (d.doc_id.clone(), SemanticId::new(codes.clone())))
            .collect();
        save_checkpoint(
            &ckpt_dir,
            &CheckpointState {
                model: &model,
                vocabulary: &corpus.vocabulary,
                train_config: Some(&resolved.train),
                run_config: run_config.clone(),
                positions_done,
                disambiguated: false,
                assignments: &entries,
            },
        )?;
        eprintln!(
            "stopped after position {positions_done}; resume with --resume {:?}",
            ckpt_dir
        );
    }
    Ok(())
}

// --------------------------------------------------------------- assign --

#[derive(Args)]
pub struct AssignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus of (possibly unseen) documents to assign.
    #[arg(long)]
    corpus: PathBuf,
    /// Output ids.tsv path.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report (collisions with existing IDs).
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run_assign(args: AssignArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let docs = load_documents_with_vocab(&args.corpus, &ckpt.vocabulary, ckpt.model.cfg.max_doc_len)?;

    let mut existing: BTreeMap<Vec<u32>, Vec<String>> = BTreeMap::new();
    for (doc_id, id) in &ckpt.assignments {
        existing.entry(id.codes.clone()).or_default().push(doc_id.clone());
    }

    let mut session = ckpt.model.session();
    let mut out = Vec::with_capacity(docs.len());
    let mut collisions = Vec::new();
    for doc in &docs {
        let codes = session.assign_semantic_id(doc, ckpt.model.cfg.id_len)?;
        if let Some(owners) = existing.get(&codes) {
            collisions.push(json!({
                "doc_id": doc.doc_id,
                "codes": codes,
                "existing_doc_ids": owners,
            }));
        }
        out.push((doc.doc_id.clone(), SemanticId::new(codes)));
    }
    write_ids_tsv(&args.out, &out)?;
    eprintln!(
        "assigned {} documents ({} collide with existing IDs)",
        out.len(),
        collisions.len()
    );
    if let Some(report_path) = &args.report {
        let report = json!({
            "run_config": {
                "command": "assign",
                "checkpoint": args.checkpoint.to_string_lossy(),
                "corpus": args.corpus.to_string_lossy(),
                "input_hashes": input_hashes(&[("corpus", args.corpus.as_path())])?,
            },
            "assigned": out.len(),
            "collisions": collisions,
        });
        write_report(report_path, &report)?;
    }
    Ok(())
}

// ------------------------------------------------------------- finetune --

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL pairs file: {"query_id", "text", "relevant_doc_ids"}.
    #[arg(long)]
    pairs: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long = "lr", default_value_t = 1e-3)]
    step_size: f64,
    #[arg(long = "batch-size", default_value_t = 16)]
    batch_size: usize,
    /// Keep codebooks fixed; update only the sequence model.
    #[arg(long = "freeze-codebooks")]
    freeze_codebooks: bool,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, &FileConfig::default());
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut model = ckpt.model;
    let table = IdTable::new(ckpt.assignments.clone())?;
    let records = load_queries(&args.pairs)?;
    let pairs = pairs_from_records(&records, &ckpt.vocabulary, &table, model.cfg.max_doc_len)?;

    let cfg = FinetuneConfig {
        epochs: args.epochs,
        step_size: args.step_size,
        batch_size: args.batch_size,
        seed,
        freeze_codebooks: args.freeze_codebooks,
    };
    let losses = retrieval::finetune(&mut model, &pairs, &table, &cfg)?;
    for (i, l) in losses.iter().enumerate() {
        eprintln!("finetune epoch={i} loss={l:.4}");
    }

    let run_config = json!({
        "command": "finetune",
        "seed": seed,
        "epochs": args.epochs,
        "step_size": args.step_size,
        "batch_size": args.batch_size,
        "freeze_codebooks": args.freeze_codebooks,
        "checkpoint": args.checkpoint.to_string_lossy(),
        "pairs": args.pairs.to_string_lossy(),
        "input_hashes": input_hashes(&[("pairs", args.pairs.as_path())])?,
        "epoch_losses": losses,
    });
    fs::create_dir_all(&args.out)?;
    save_checkpoint(
        &args.out.join("checkpoint"),
        &CheckpointState {
            model: &model,
            vocabulary: &ckpt.vocabulary,
            train_config: ckpt.manifest.train_config.as_ref(),
            run_config: run_config.clone(),
            positions_done: ckpt.manifest.positions_done,
            disambiguated: ckpt.manifest.disambiguated,
            assignments: &ckpt.assignments,
        },
    )?;
    write_report(&args.out.join("report.json"), &run_config)?;
    Ok(())
}

// --------------------------------------------------------------- search --

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL queries file.
    #[arg(long)]
    queries: PathBuf,
    /// Output run file (TSV: query_id, rank, doc_id, score).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    /// Results per query.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

pub fn run_search(args: SearchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let table = IdTable::new(ckpt.assignments.clone())?;
    let trie = build_prefix_tree(&table)?;
    let records = load_queries(&args.queries)?;
    let k = args.k.min(args.beam);
    let mut out = String::new();
    for rec in &records {
        let hits = retrieval::search(
            &ckpt.model,
            &trie,
            &ckpt.vocabulary,
            &rec.text,
            args.beam,
            k,
        )?;
        for (rank, hit) in hits.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                rec.query_id,
                rank + 1,
                hit.doc_id,
                hit.score
            ));
        }
    }
    fs::write(&args.out, out).with_context(|| format!("writing {:?}", args.out))?;
    eprintln!("wrote rankings for {} queries to {:?}", records.len(), args.out);
    Ok(())
}

// ----------------------------------------------------------------- eval --

#[derive(Args)]
pub struct EvalArgs {
    /// Run TSV produced by `search`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Queries JSONL with relevance judgments.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Cutoffs for the IR metrics.
    #[arg(long, default_value = "5,10")]
    k: String,
    /// ids.tsv to evaluate for ID quality.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Category-bearing corpus (required for AMI).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also compute the hierarchical-clustering baseline IDs and their AMI.
    #[arg(long = "hc-baseline")]
    hc_baseline: bool,
    /// Branching factors for the HC baseline.
    #[arg(long, default_value = "8,8")]
    branching: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output report path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_run_tsv(path: &Path) -> Result<BTreeMap<String, Vec<(usize, String)>>> {
    let mut by_query: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            bail!(semindex_core::Error::Parse {
                line: i + 1,
                message: format!("expected 4 tab-separated columns, got {}", cols.len()),
            });
        }
        let rank: usize = cols[1].parse().map_err(|e| {
            semindex_core::Error::Parse {
                line: i + 1,
                message: format!("bad rank {:?}: {e}", cols[1]),
            }
        })?;
        by_query
            .entry(cols[0].to_string())
            .or_default()
            .push((rank, cols[2].to_string()));
    }
    for ranks in by_query.values_mut() {
        ranks.sort();
    }
    Ok(by_query)
}

fn ir_section(
    run_path: &Path,
    queries_path: &Path,
    ks: &[usize],
) -> Result<serde_json::Value> {
    let run = parse_run_tsv(run_path)?;
    let records = load_queries(queries_path)?;
    let mut lists = Vec::new();
    for rec in &records {
        let ranked: Vec<String> = run
            .get(&rec.query_id)
            .map(|v| v.iter().map(|(_, d)| d.clone()).collect())
            .unwrap_or_default();
        lists.push(RankedList::new(
            rec.query_id.clone(),
            ranked,
            rec.relevant_doc_ids.iter().cloned().collect(),
        )?);
    }
    let mut section = serde_json::Map::new();
    for &k in ks {
        let r = metrics::recall_at_k(&lists, k)?;
        let n = metrics::ndcg_at_k(&lists, k)?;
        let m = metrics::mrr_at_k(&lists, k)?;
        section.insert(format!("recall@{k}"), json!(r.value));
        section.insert(format!("ndcg@{k}"), json!(n.value));
        section.insert(format!("mrr@{k}"), json!(m.value));
        section.insert(
            format!("counts@{k}"),
            json!({"evaluated": r.evaluated, "skipped_no_relevant": r.skipped_no_relevant}),
        );
    }
    Ok(serde_json::Value::Object(section))
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, &FileConfig::default());
    let ks: Vec<usize> = parse_list(&args.k)?;
    let mut report = serde_json::Map::new();
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();

    let mut did_anything = false;
    if let (Some(run), Some(queries)) = (&args.run, &args.queries) {
        report.insert("ir".to_string(), ir_section(run, queries, &ks)?);
        hashes.insert("run".to_string(), file_hash(run)?);
        hashes.insert("queries".to_string(), file_hash(queries)?);
        did_anything = true;
    }

    if let Some(ids_path) = &args.ids {
        let corpus_path = args.corpus.as_ref().ok_or_else(|| {
            semindex_core::Error::validation("--ids requires --corpus for labels".to_string())
        })?;
        let corpus = load_corpus(corpus_path, &CorpusOptions { max_len: 64, min_count: 1 })?;
        let ids = semindex_core::trainer::checkpoint::read_ids_tsv(ids_path)?;
        let by_doc: BTreeMap<&str, &Vec<u32>> =
            ids.iter().map(|(d, c)| (d.as_str(), c)).collect();
        for d in &corpus.documents {
            if !by_doc.contains_key(d.doc_id.as_str()) {
                bail!(semindex_core::Error::validation(format!(
                    "ids file has no entry for doc {:?}",
                    d.doc_id
                )));
            }
        }
        let entries: Vec<(String, SemanticId)> = corpus
            .documents
            .iter()
            .map(|d| {
                let codes = by_doc[d.doc_id.as_str()].clone();
                (d.doc_id.clone(), SemanticId::new(codes))
            })
            .collect();
        let table = IdTable::new(entries)?;
        let mut section = id_quality_report(&corpus, &table)?;

        if args.hc_baseline {
            let branching: Vec<usize> = parse_list(&args.branching)?;
            let hc = hc_baseline_ids(&corpus, &branching, seed)?;
            if corpus.categories.is_some() {
                let tops: Vec<String> = corpus
                    .documents
                    .iter()
                    .map(|d| d.top_category().unwrap_or_default().to_string())
                    .collect();
                let fulls: Vec<String> = corpus
                    .documents
                    .iter()
                    .map(|d| d.category.clone().unwrap_or_default())
                    .collect();
                let c1: Vec<u32> = hc.entries().iter().map(|(_, id)| id.codes[0]).collect();
                let full_codes: Vec<Vec<u32>> =
                    hc.entries().iter().map(|(_, id)| id.codes.clone()).collect();
                section["ami"]["hc_c1_vs_top"] = json!(metrics::ami(&c1, &tops)?);
                section["ami"]["hc_full_vs_category"] =
                    json!(metrics::ami(&full_codes, &fulls)?);
            }
        }
        report.insert("ids".to_string(), section);
        hashes.insert("ids".to_string(), file_hash(ids_path)?);
        hashes.insert("corpus".to_string(), file_hash(corpus_path)?);
        did_anything = true;
    }

    if !did_anything {
        bail!(semindex_core::Error::validation(
            "nothing to evaluate: pass --run/--queries and/or --ids/--corpus".to_string()
        ));
    }

    report.insert(
        "run_config".to_string(),
        json!({
            "command": "eval",
            "seed": seed,
            "k": ks,
            "hc_baseline": args.hc_baseline,
            "input_hashes": hashes,
        }),
    );
    write_report(&args.out, &serde_json::Value::Object(report))?;
    eprintln!("wrote report to {:?}", args.out);
    Ok(())
}
