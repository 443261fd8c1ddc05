//! Final ID bookkeeping: duplicate disambiguation, the document/ID table,
//! duplication statistics, the decoding prefix tree, and the hierarchical
//! clustering baseline indexer.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::SemanticId;
use crate::tensor::Tensor;
use crate::trainer::kmeans::kmeans;

/// doc_id <-> SemanticId lookup in both directions.
#[derive(Debug, Clone, Default)]
pub struct IdTable {
    /// Insertion order is preserved; it is the corpus order on the training
    /// path and determines disambiguation suffixes.
    entries: Vec<(String, SemanticId)>,
    by_doc: HashMap<String, usize>,
}

impl IdTable {
    pub fn new(entries: Vec<(String, SemanticId)>) -> Result<Self> {
        let mut by_doc = HashMap::with_capacity(entries.len());
        for (i, (doc_id, _)) in entries.iter().enumerate() {
            if by_doc.insert(doc_id.clone(), i).is_some() {
                return Err(Error::validation(format!(
                    "duplicate doc_id {doc_id:?} in ID table"
                )));
            }
        }
        Ok(IdTable { entries, by_doc })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, SemanticId)] {
        &self.entries
    }

    pub fn get(&self, doc_id: &str) -> Option<&SemanticId> {
        self.by_doc.get(doc_id).map(|&i| &self.entries[i].1)
    }

    /// Documents grouped by full ID (learned codes + suffix when present).
    pub fn reverse(&self) -> BTreeMap<Vec<u32>, Vec<&str>> {
        let mut out: BTreeMap<Vec<u32>, Vec<&str>> = BTreeMap::new();
        for (doc_id, id) in &self.entries {
            out.entry(id.full_codes()).or_default().push(doc_id);
        }
        out
    }

    /// Code sequences of the learned positions only, in table order.
    pub fn learned_codes(&self) -> Vec<Vec<u32>> {
        self.entries.iter().map(|(_, id)| id.codes.clone()).collect()
    }
}

/// Appends a disambiguation position: documents sharing a learned ID get
/// suffixes 0, 1, 2, ... in table order; unique documents get suffix 0.
/// The resulting full IDs are globally unique.
pub fn disambiguate(table: &IdTable) -> Result<IdTable> {
    let mut counters: HashMap<Vec<u32>, u32> = HashMap::new();
    let mut out = Vec::with_capacity(table.len());
    for (doc_id, id) in table.entries() {
        let counter = counters.entry(id.codes.clone()).or_insert(0);
        out.push((
            doc_id.clone(),
            SemanticId::with_suffix(id.codes.clone(), *counter),
        ));
        *counter += 1;
    }
    IdTable::new(out)
}

/// Histogram of (documents per learned ID) -> count of IDs of that size.
pub fn duplication_stats(table: &IdTable) -> Result<BTreeMap<usize, usize>> {
    if table.is_empty() {
        return Err(Error::validation("empty ID table".to_string()));
    }
    let mut groups: HashMap<&[u32], usize> = HashMap::new();
    for (_, id) in table.entries() {
        *groups.entry(id.codes.as_slice()).or_insert(0) += 1;
    }
    let mut hist = BTreeMap::new();
    for size in groups.values() {
        *hist.entry(*size).or_insert(0) += 1;
    }
    Ok(hist)
}

#[derive(Debug, Default)]
struct TrieNode {
    children: BTreeMap<u32, TrieNode>,
    doc_ids: Vec<String>,
}

/// Trie over full (disambiguated) IDs; every root-to-leaf path is a valid
/// corpus ID and leaves carry the owning document.
#[derive(Debug)]
pub struct PrefixTree {
    root: TrieNode,
    len: usize,
    depth: usize,
}

impl PrefixTree {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Uniform full-ID length.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Codes available after `prefix`, in ascending code order.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        match self.node(prefix) {
            Some(n) => n.children.keys().copied().collect(),
            None => Vec::new(),
        }
    }

    /// Documents at a full path.
    pub fn docs_at(&self, path: &[u32]) -> &[String] {
        match self.node(path) {
            Some(n) => &n.doc_ids,
            None => &[],
        }
    }

    fn node(&self, path: &[u32]) -> Option<&TrieNode> {
        let mut cur = &self.root;
        for c in path {
            cur = cur.children.get(c)?;
        }
        Some(cur)
    }

    /// Every root-to-leaf path, sorted.
    pub fn paths(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack: Vec<(Vec<u32>, &TrieNode)> = vec![(Vec::new(), &self.root)];
        while let Some((path, node)) = stack.pop() {
            if node.children.is_empty() {
                if !path.is_empty() {
                    out.push(path);
                }
                continue;
            }
            for (&c, child) in node.children.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((p, child));
            }
        }
        out.sort();
        out
    }
}

/// Builds the decoding trie from a disambiguated table.
pub fn build_prefix_tree(table: &IdTable) -> Result<PrefixTree> {
    let mut root = TrieNode::default();
    let mut depth = 0;
    for (doc_id, id) in table.entries() {
        let codes = id.full_codes();
        depth = depth.max(codes.len());
        let mut cur = &mut root;
        for c in &codes {
            cur = cur.children.entry(*c).or_default();
        }
        if !cur.doc_ids.is_empty() {
            return Err(Error::contract(format!(
                "duplicate full ID {codes:?} for {doc_id:?} and {:?}",
                cur.doc_ids[0]
            )));
        }
        if !cur.children.is_empty() {
            return Err(Error::contract(format!(
                "ID {codes:?} is a prefix of a longer ID"
            )));
        }
        cur.doc_ids.push(doc_id.clone());
    }
    Ok(PrefixTree {
        root,
        len: table.len(),
        depth,
    })
}

/// Length-normalized TF-IDF rows for every document over the corpus
/// vocabulary.
pub fn tfidf_embed(corpus: &Corpus) -> Tensor {
    let n = corpus.len();
    let v = corpus.vocabulary.size();
    let mut df = vec![0usize; v];
    for doc in &corpus.documents {
        let mut seen: Vec<u32> = doc.tokens.clone();
        seen.sort_unstable();
        seen.dedup();
        for &t in &seen {
            df[t as usize] += 1;
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let mut out = Tensor::zeros(n, v);
    for (i, doc) in corpus.documents.iter().enumerate() {
        let row = out.row_mut(i);
        for &t in &doc.tokens {
            row[t as usize] += 1.0;
        }
        let total = doc.tokens.len() as f64;
        let mut norm = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x / total) * idf[j];
            norm += *x * *x;
        }
        if norm > 0.0 {
            let inv = 1.0 / norm.sqrt();
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
    }
    out
}

/// The two-step baseline indexer: TF-IDF embeddings, then recursive K-means
/// with the given branching factors; the code at level `t` is the cluster
/// index. The result still needs [`disambiguate`] to become unique.
pub fn hc_baseline_ids(corpus: &Corpus, branching: &[usize], seed: u64) -> Result<IdTable> {
    if corpus.is_empty() {
        return Err(Error::validation("empty corpus".to_string()));
    }
    if branching.is_empty() {
        return Err(Error::validation("empty branching factors".to_string()));
    }
    let embeddings = tfidf_embed(corpus);
    let mut codes: Vec<Vec<u32>> = vec![Vec::with_capacity(branching.len()); corpus.len()];
    let mut groups: Vec<Vec<usize>> = vec![(0..corpus.len()).collect()];
    for (level, &k) in branching.iter().enumerate() {
        let mut next_groups = Vec::new();
        for group in &groups {
            let mut pts = Tensor::zeros(group.len(), embeddings.cols());
            for (r, &i) in group.iter().enumerate() {
                pts.row_mut(r).copy_from_slice(embeddings.row(i));
            }
            let centroids = kmeans(
                &pts,
                k,
                50,
                3,
                seed.wrapping_mul(31).wrapping_add(level as u64),
            )?;
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (r, &i) in group.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let d: f64 = pts
                        .row(r)
                        .iter()
                        .zip(centroids.row(c))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                codes[i].push(best as u32);
                members[best].push(i);
            }
            next_groups.extend(members.into_iter().filter(|m| !m.is_empty()));
        }
        groups = next_groups;
    }
    let entries = corpus
        .documents
        .iter()
        .zip(codes.into_iter())
        .map(|(d, c)| (d.doc_id.clone(), SemanticId::new(c)))
        .collect();
    IdTable::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use crate::metrics::ami;
    use proptest::prelude::*;

    fn table(ids: &[(&str, &[u32])]) -> IdTable {
        IdTable::new(
            ids.iter()
                .map(|(d, c)| (d.to_string(), SemanticId::new(c.to_vec())))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn disambiguate_counter_semantics() {
        let t = table(&[("a", &[3, 1, 7]), ("b", &[3, 1, 7])]);
        let d = disambiguate(&t).unwrap();
        assert_eq!(d.get("a").unwrap().full_codes(), vec![3, 1, 7, 0]);
        assert_eq!(d.get("b").unwrap().full_codes(), vec![3, 1, 7, 1]);
    }

    #[test]
    fn disambiguate_unique_table_gets_zero_suffixes() {
        let t = table(&[("a", &[0, 1]), ("b", &[0, 2]), ("c", &[1, 1])]);
        let d = disambiguate(&t).unwrap();
        for (_, id) in d.entries() {
            assert_eq!(id.suffix, Some(0));
        }
    }

    proptest! {
        #[test]
        fn disambiguated_ids_globally_unique(
            codes in proptest::collection::vec(
                proptest::collection::vec(0u32..4, 2..4usize),
                1..60,
            )
        ) {
            let len = codes[0].len();
            let entries: Vec<(String, SemanticId)> = codes
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut c = c.clone();
                    c.resize(len, 0);
                    (format!("d{i}"), SemanticId::new(c))
                })
                .collect();
            let t = IdTable::new(entries).unwrap();
            let d = disambiguate(&t).unwrap();
            let unique: std::collections::BTreeSet<Vec<u32>> =
                d.entries().iter().map(|(_, id)| id.full_codes()).collect();
            prop_assert_eq!(unique.len(), d.len());

            // conservation through duplication stats
            let hist = duplication_stats(&t).unwrap();
            let mass: usize = hist.iter().map(|(size, count)| size * count).sum();
            prop_assert_eq!(mass, t.len());
        }
    }

    #[test]
    fn duplication_stats_cases() {
        let t = table(&[("a", &[0]), ("b", &[1]), ("c", &[2])]);
        let h = duplication_stats(&t).unwrap();
        assert_eq!(h.get(&1), Some(&3));

        let t = table(&[
            ("a", &[0]),
            ("b", &[0]),
            ("c", &[1]),
            ("d", &[2]),
            ("e", &[3]),
        ]);
        let h = duplication_stats(&t).unwrap();
        assert_eq!(h.get(&1), Some(&3));
        assert_eq!(h.get(&2), Some(&1));
    }

    #[test]
    fn prefix_tree_enumeration() {
        let t = table(&[("a", &[0, 1]), ("b", &[0, 2]), ("c", &[1, 0])]);
        let d = disambiguate(&t).unwrap();
        let tree = build_prefix_tree(&d).unwrap();
        assert_eq!(tree.children(&[]), vec![0, 1]);
        assert_eq!(tree.children(&[0]), vec![1, 2]);
        assert_eq!(tree.len(), 3);
        assert_eq!(tree.depth(), 3);
        // bijection between paths and table IDs
        let paths = tree.paths();
        let mut expected: Vec<Vec<u32>> =
            d.entries().iter().map(|(_, id)| id.full_codes()).collect();
        expected.sort();
        assert_eq!(paths, expected);
        assert_eq!(tree.docs_at(&[0, 1, 0]), &["a".to_string()]);
    }

    #[test]
    fn prefix_tree_single_id_and_leaf_count() {
        let t = disambiguate(&table(&[("solo", &[4, 4])])).unwrap();
        let tree = build_prefix_tree(&t).unwrap();
        assert_eq!(tree.paths(), vec![vec![4, 4, 0]]);
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn prefix_tree_rejects_duplicate_full_ids() {
        let t = table(&[("a", &[1, 2]), ("b", &[1, 2])]);
        assert!(matches!(build_prefix_tree(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn hc_baseline_trivial_branching() {
        let corpus = synth_corpus(2, 2, 5, 10, 3).unwrap();
        let t = hc_baseline_ids(&corpus, &[1, 1], 5).unwrap();
        for (_, id) in t.entries() {
            assert_eq!(id.codes, vec![0, 0]);
        }
        let d = disambiguate(&t).unwrap();
        let unique: std::collections::BTreeSet<Vec<u32>> =
            d.entries().iter().map(|(_, id)| id.full_codes()).collect();
        assert_eq!(unique.len(), corpus.len());
    }

    #[test]
    fn hc_baseline_separates_planted_tops() {
        // Two tops, one leaf each, so the top-level TF-IDF structure is
        // strong and K-means with k=2 should align with the planted labels.
        let corpus = synth_corpus(2, 1, 30, 30, 9).unwrap();
        let t = hc_baseline_ids(&corpus, &[2], 7).unwrap();
        let codes: Vec<u32> = t.entries().iter().map(|(_, id)| id.codes[0]).collect();
        let labels: Vec<String> = corpus
            .documents
            .iter()
            .map(|d| d.top_category().unwrap().to_string())
            .collect();
        let v = ami(&codes, &labels).unwrap();
        assert!(v > 0.99, "AMI of HC level-1 vs planted tops = {v}");
    }

    #[test]
    fn hc_baseline_deterministic_and_order_invariant() {
        let corpus = synth_corpus(2, 2, 8, 16, 13).unwrap();
        let a = hc_baseline_ids(&corpus, &[2, 2], 3).unwrap();
        let b = hc_baseline_ids(&corpus, &[2, 2], 3).unwrap();
        assert_eq!(a.learned_codes(), b.learned_codes());

        // Permuted document order: level-1 codes must agree up to cluster
        // relabeling, i.e. AMI 1 between the two runs joined by doc_id.
        let mut permuted = corpus.clone();
        permuted.documents.reverse();
        let c = hc_baseline_ids(&permuted, &[2, 2], 3).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (doc_id, id) in a.entries() {
            x.push(id.codes[0]);
            y.push(c.get(doc_id).unwrap().codes[0]);
        }
        let v = ami(&x, &y).unwrap();
        assert!(v > 0.99, "level-1 clustering changed under permutation: AMI = {v}");
    }
}
