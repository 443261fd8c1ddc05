use semindex_core::corpus::synth_corpus;
use semindex_core::model::{Model, ModelConfig};
use semindex_core::trainer::{train_progressive, TrainConfig, TrainEvent};
use std::time::Instant;

fn main() {
    let corpus = synth_corpus(4, 4, 50, 40, 1).unwrap();
    println!("corpus: {} docs, vocab {}", corpus.len(), corpus.vocabulary.size());
    let cfg = ModelConfig {
        dim: 64, enc_layers: 2, dec_layers: 1, heads: 4,
        id_len: 2, codebook_sizes: vec![8, 8],
        vocab_size: corpus.vocabulary.size(),
        max_doc_len: 40, recon_layers: 1, dropout: 0.0,
    };
    let mut model = Model::init(cfg, 1).unwrap();
    let mut tc = TrainConfig::desk_default(2);
    tc.hint_ratios = vec![0.5, 0.3];
    tc.warmup_recon_epochs = 1;
    tc.warmup_enc_epochs = 1;
    tc.main_epochs = 2;
    tc.batch_size = 64;
    tc.log_id_metrics = true;
    tc.seed = 7;
    let t0 = Instant::now();
    let assigned = train_progressive(&mut model, &corpus, &tc, 0, None, vec![], &mut |e: &TrainEvent| {
        println!("[{:6.1?}] {:?} t={} e={} total={:.4} ppl={:?} diff={:?}",
            t0.elapsed(), e.phase, e.position, e.epoch, e.losses.total, e.perplexity, e.diff_ratio);
    }).unwrap();
    println!("total time: {:?}", t0.elapsed());
    println!("sample ids: {:?} {:?}", assigned[0], assigned[401]);
    let c1: Vec<u32> = assigned.iter().map(|a| a[0]).collect();
    println!("pos-1 frozen perplexity: {:.3}", semindex_core::metrics::id_perplexity(&c1).unwrap());
    let labels: Vec<String> = corpus.documents.iter().map(|d| d.top_category().unwrap().to_string()).collect();
    println!("AMI(c1, top): {:.4}", semindex_core::metrics::ami(&c1, &labels).unwrap());
}
