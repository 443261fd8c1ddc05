//! Evaluation computations: clustering agreement, ID diversity and IR
//! ranking quality. Everything here is a pure function.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use crate::error::{Error, Result};

/// Contingency counts between two labelings, plus marginals.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// counts[(i, j)] over dense label indices.
    pub counts: BTreeMap<(usize, usize), usize>,
    pub row_marginals: Vec<usize>,
    pub col_marginals: Vec<usize>,
    pub total: usize,
}

impl ContingencyTable {
    pub fn build<T: Hash + Eq, U: Hash + Eq>(a: &[T], b: &[U]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::validation(format!(
                "label sequences differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::validation("empty labelings".to_string()));
        }
        let mut amap: HashMap<&T, usize> = HashMap::new();
        let mut bmap: HashMap<&U, usize> = HashMap::new();
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (x, y) in a.iter().zip(b.iter()) {
            let next_a = amap.len();
            let i = *amap.entry(x).or_insert(next_a);
            let next_b = bmap.len();
            let j = *bmap.entry(y).or_insert(next_b);
            *counts.entry((i, j)).or_insert(0) += 1;
        }
        let mut row_marginals = vec![0usize; amap.len()];
        let mut col_marginals = vec![0usize; bmap.len()];
        for (&(i, j), &c) in &counts {
            row_marginals[i] += c;
            col_marginals[j] += c;
        }
        Ok(ContingencyTable {
            counts,
            row_marginals,
            col_marginals,
            total: a.len(),
        })
    }

    fn entropy(marginals: &[usize], n: usize) -> f64 {
        let nf = n as f64;
        marginals
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (&(i, j), &c) in &self.counts {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = self.row_marginals[i] as f64 / n;
            let pj = self.col_marginals[j] as f64 / n;
            mi += pij * (pij / (pi * pj)).ln();
        }
        mi.max(0.0)
    }

    /// Expected MI under the hypergeometric permutation model.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.total;
        let lf = log_factorials(n);
        let nf = n as f64;
        let mut emi = 0.0;
        for &ai in &self.row_marginals {
            for &bj in &self.col_marginals {
                // n_ij = 0 contributes nothing, so start at 1 (or the
                // hypergeometric lower bound when it is higher).
                let start = if ai + bj > n { ai + bj - n } else { 1 };
                let end = ai.min(bj);
                for nij in start..=end {
                    let term = (nij as f64 / nf) * ((nf * nij as f64) / (ai as f64 * bj as f64)).ln();
                    let log_p = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                        - lf[n]
                        - lf[nij]
                        - lf[ai - nij]
                        - lf[bj - nij]
                        - lf[n + nij - ai - bj];
                    emi += term * log_p.exp();
                }
            }
        }
        emi
    }

    pub fn entropies(&self) -> (f64, f64) {
        (
            Self::entropy(&self.row_marginals, self.total),
            Self::entropy(&self.col_marginals, self.total),
        )
    }
}

/// ln(k!) for k in 0..=n.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for k in 2..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    lf
}

/// Adjusted Mutual Information between two labelings, chance-corrected with
/// the hypergeometric expected MI and normalized by the arithmetic mean of
/// the entropies. Natural logarithms throughout.
pub fn ami<T: Hash + Eq, U: Hash + Eq>(a: &[T], b: &[U]) -> Result<f64> {
    let table = ContingencyTable::build(a, b)?;
    let (hu, hv) = table.entropies();
    if table.row_marginals.len() == 1 && table.col_marginals.len() == 1 {
        // Both partitions are trivial and therefore equal.
        return Ok(1.0);
    }
    let mi = table.mutual_information();
    let emi = table.expected_mutual_information();
    let normalizer = 0.5 * (hu + hv);
    let mut denominator = normalizer - emi;
    if denominator < 0.0 {
        denominator = denominator.min(-f64::EPSILON);
    } else {
        denominator = denominator.max(f64::EPSILON);
    }
    Ok((mi - emi) / denominator)
}

/// Exponentiated Shannon entropy (natural log) of the empirical code
/// distribution: 1.0 when all codes agree, K when uniform over K codes.
pub fn id_perplexity(codes: &[u32]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::validation("empty code list".to_string()));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in codes {
        *counts.entry(c).or_insert(0) += 1;
    }
    let n = codes.len() as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Among unordered document pairs whose codes agree on positions `1..t`,
/// the fraction that differ at position `t` (1-based). `None` when no pair
/// shares a prefix.
pub fn diff_ratio(ids: &[Vec<u32>], t: usize) -> Result<Option<f64>> {
    if t < 2 {
        return Err(Error::contract(format!(
            "diff_ratio requires position >= 2, got {t}"
        )));
    }
    for codes in ids {
        if codes.len() < t {
            return Err(Error::contract(format!(
                "id of length {} shorter than position {t}",
                codes.len()
            )));
        }
    }
    let mut groups: BTreeMap<&[u32], Vec<u32>> = BTreeMap::new();
    for codes in ids {
        groups
            .entry(&codes[..t - 1])
            .or_default()
            .push(codes[t - 1]);
    }
    let mut total_pairs = 0u64;
    let mut same_pairs = 0u64;
    for members in groups.values() {
        let m = members.len() as u64;
        total_pairs += m * (m - 1) / 2;
        let mut per_code: BTreeMap<u32, u64> = BTreeMap::new();
        for &c in members {
            *per_code.entry(c).or_insert(0) += 1;
        }
        for &c in per_code.values() {
            same_pairs += c * (c - 1) / 2;
        }
    }
    if total_pairs == 0 {
        return Ok(None);
    }
    Ok(Some((total_pairs - same_pairs) as f64 / total_pairs as f64))
}

/// Macro-averaged F1 between predicted and true token sets, one pair of sets
/// per document. Per-token precision/recall are pooled over the whole batch
/// and averaged over every token that appears in either side.
pub fn macro_f1(predicted: &[BTreeSet<u32>], truth: &[BTreeSet<u32>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::validation(format!(
            "prediction/truth batch size mismatch: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let mut tp: BTreeMap<u32, u64> = BTreeMap::new();
    let mut fp: BTreeMap<u32, u64> = BTreeMap::new();
    let mut fnc: BTreeMap<u32, u64> = BTreeMap::new();
    let mut universe: BTreeSet<u32> = BTreeSet::new();
    for (pred, tru) in predicted.iter().zip(truth.iter()) {
        universe.extend(pred.iter().copied());
        universe.extend(tru.iter().copied());
        for &w in pred {
            if tru.contains(&w) {
                *tp.entry(w).or_insert(0) += 1;
            } else {
                *fp.entry(w).or_insert(0) += 1;
            }
        }
        for &w in tru {
            if !pred.contains(&w) {
                *fnc.entry(w).or_insert(0) += 1;
            }
        }
    }
    if universe.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &w in &universe {
        let tp = *tp.get(&w).unwrap_or(&0) as f64;
        let fp = *fp.get(&w).unwrap_or(&0) as f64;
        let fnv = *fnc.get(&w).unwrap_or(&0) as f64;
        let denom = 2.0 * tp + fp + fnv;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    Ok(sum / universe.len() as f64)
}

/// One query's ranked output plus binary relevance judgments.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    pub ranked: Vec<String>,
    pub relevant: BTreeSet<String>,
}

impl RankedList {
    pub fn new(
        query_id: impl Into<String>,
        ranked: Vec<String>,
        relevant: BTreeSet<String>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &ranked {
            if !seen.insert(d) {
                return Err(Error::validation(format!(
                    "duplicate doc_id {d:?} in ranked list"
                )));
            }
        }
        Ok(RankedList {
            query_id: query_id.into(),
            ranked,
            relevant,
        })
    }
}

/// A macro-averaged IR metric plus the query counts behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrSummary {
    pub value: f64,
    /// Queries that entered the average.
    pub evaluated: usize,
    /// Queries skipped for having no relevant documents.
    pub skipped_no_relevant: usize,
}

fn averaged(
    runs: &[RankedList],
    k: usize,
    per_query: impl Fn(&RankedList, usize) -> f64,
) -> Result<IrSummary> {
    if k == 0 {
        return Err(Error::contract("k must be >= 1".to_string()));
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for run in runs {
        if run.relevant.is_empty() {
            skipped += 1;
            continue;
        }
        sum += per_query(run, k);
        evaluated += 1;
    }
    Ok(IrSummary {
        value: if evaluated > 0 {
            sum / evaluated as f64
        } else {
            0.0
        },
        evaluated,
        skipped_no_relevant: skipped,
    })
}

/// Binary-relevance Recall@k, macro-averaged over queries.
pub fn recall_at_k(runs: &[RankedList], k: usize) -> Result<IrSummary> {
    averaged(runs, k, |run, k| {
        let hits = run
            .ranked
            .iter()
            .take(k)
            .filter(|d| run.relevant.contains(*d))
            .count();
        hits as f64 / run.relevant.len() as f64
    })
}

/// NDCG@k with unit gains and a `1/log2(rank+1)` discount.
pub fn ndcg_at_k(runs: &[RankedList], k: usize) -> Result<IrSummary> {
    averaged(runs, k, |run, k| {
        let dcg: f64 = run
            .ranked
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, d)| run.relevant.contains(*d))
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..run.relevant.len().min(k))
            .map(|i| 1.0 / ((i + 2) as f64).log2())
            .sum();
        if ideal > 0.0 {
            dcg / ideal
        } else {
            0.0
        }
    })
}

/// MRR@k: reciprocal rank of the first relevant hit within the top k.
pub fn mrr_at_k(runs: &[RankedList], k: usize) -> Result<IrSummary> {
    averaged(runs, k, |run, k| {
        run.ranked
            .iter()
            .take(k)
            .position(|d| run.relevant.contains(d))
            .map(|i| 1.0 / (i + 1) as f64)
            .unwrap_or(0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn ami_identical_is_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert!((ami(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ami_permutation_invariant() {
        let a = vec![0, 0, 1, 1, 2, 2];
        let b = vec![7, 7, 3, 3, 9, 9];
        assert!((ami(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ami_two_by_two_hand_case() {
        // n = [[1,1],[1,1]]: MI = 0, H(U) = H(V) = ln 2, and the
        // hypergeometric expectation works out to E[MI] = ln(2)/3:
        // per cell only n_ij = 2 contributes (1/2)ln(2) * 1/6, times 4 cells.
        // AMI = (0 - ln2/3) / (ln2 - ln2/3) = -1/2.
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 1, 0, 1];
        assert!((ami(&a, &b).unwrap() - (-0.5)).abs() < 1e-10);
    }

    #[test]
    fn ami_symmetry() {
        let a = vec![0, 1, 1, 2, 2, 2, 0, 1];
        let b = vec![1, 1, 0, 0, 2, 2, 2, 0];
        let xy = ami(&a, &b).unwrap();
        let yx = ami(&b, &a).unwrap();
        assert!((xy - yx).abs() < 1e-10);
    }

    #[test]
    fn ami_single_cluster_pair_is_one() {
        let a = vec![5, 5, 5];
        let b = vec![1, 1, 1];
        assert_eq!(ami(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ami_length_mismatch() {
        assert!(ami(&[1, 2], &[1, 2, 3]).is_err());
    }

    #[test]
    fn ami_independent_random_near_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let a: Vec<u32> = (0..2000).map(|_| rng.gen_range(0..10)).collect();
        let b: Vec<u32> = (0..2000).map(|_| rng.gen_range(0..10)).collect();
        let v = ami(&a, &b).unwrap();
        assert!(v.abs() < 0.05, "AMI of independent labelings = {v}");
    }

    proptest! {
        #[test]
        fn ami_relabeling_invariance(labels in proptest::collection::vec(0u8..4, 4..40)) {
            let relabeled: Vec<u8> = labels.iter().map(|&x| 3 - x).collect();
            let other: Vec<u8> = labels.iter().enumerate().map(|(i, &x)| x ^ ((i as u8) & 1)).collect();
            let v1 = ami(&labels, &other).unwrap();
            let v2 = ami(&relabeled, &other).unwrap();
            prop_assert!((v1 - v2).abs() < 1e-10);
        }
    }

    #[test]
    fn perplexity_cases() {
        assert!((id_perplexity(&[3, 3, 3]).unwrap() - 1.0).abs() < 1e-12);
        assert!((id_perplexity(&[0, 0, 1, 1]).unwrap() - 2.0).abs() < 1e-12);
        let uniform: Vec<u32> = (0..8).collect();
        assert!((id_perplexity(&uniform).unwrap() - 8.0).abs() < 1e-9);
        assert!(id_perplexity(&[]).is_err());
    }

    #[test]
    fn diff_ratio_cases() {
        // One prefix group {a,b,c} with position-2 codes {1,1,2}: 2 of 3
        // unordered pairs differ.
        let ids = vec![vec![4, 1], vec![4, 1], vec![4, 2]];
        assert!((diff_ratio(&ids, 2).unwrap().unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let same = vec![vec![4, 1], vec![4, 1]];
        assert_eq!(diff_ratio(&same, 2).unwrap(), Some(0.0));

        let all_diff = vec![vec![4, 1], vec![4, 2], vec![5, 1], vec![5, 3]];
        assert_eq!(diff_ratio(&all_diff, 2).unwrap(), Some(1.0));

        let no_pairs = vec![vec![1, 0], vec![2, 0]];
        assert_eq!(diff_ratio(&no_pairs, 2).unwrap(), None);

        assert!(diff_ratio(&no_pairs, 1).is_err());
    }

    #[test]
    fn macro_f1_cases() {
        let t = |xs: &[u32]| xs.iter().copied().collect::<BTreeSet<u32>>();
        // Exact predictions.
        let v = macro_f1(&[t(&[1, 2]), t(&[3])], &[t(&[1, 2]), t(&[3])]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        // Fully disjoint predictions.
        let v = macro_f1(&[t(&[1])], &[t(&[2])]).unwrap();
        assert_eq!(v, 0.0);
        // masked {w1,w2}, predicted {w1,w3}: F1s are 1, 0, 0.
        let v = macro_f1(&[t(&[1, 3])], &[t(&[1, 2])]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    fn run(ranked: &[&str], relevant: &[&str]) -> RankedList {
        RankedList::new(
            "q",
            ranked.iter().map(|s| s.to_string()).collect(),
            relevant.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ir_rank_one_hand_cases() {
        let runs = vec![run(&["a", "b", "c", "d", "e"], &["a"])];
        assert_eq!(recall_at_k(&runs, 5).unwrap().value, 1.0);
        assert_eq!(ndcg_at_k(&runs, 5).unwrap().value, 1.0);
        assert_eq!(mrr_at_k(&runs, 10).unwrap().value, 1.0);
    }

    #[test]
    fn ndcg_rank_two_discount() {
        let runs = vec![run(&["x", "a", "c", "d", "e"], &["a"])];
        let expected = 1.0 / 3f64.log2();
        let got = ndcg_at_k(&runs, 5).unwrap().value;
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
        assert!((got - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn mrr_rank_three() {
        let runs = vec![run(&["x", "y", "a"], &["a"])];
        assert!((mrr_at_k(&runs, 10).unwrap().value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn queries_without_judgments_are_skipped_and_counted() {
        let runs = vec![
            run(&["a", "b"], &["a"]),
            run(&["c", "d"], &[]),
        ];
        let s = recall_at_k(&runs, 2).unwrap();
        assert_eq!(s.evaluated, 1);
        assert_eq!(s.skipped_no_relevant, 1);
        assert_eq!(s.value, 1.0);
    }

    #[test]
    fn duplicate_in_ranked_list_rejected() {
        let r = RankedList::new(
            "q",
            vec!["a".into(), "a".into()],
            BTreeSet::new(),
        );
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(
            ranked in proptest::collection::vec(0u8..20, 1..15),
            relevant in proptest::collection::btree_set(0u8..20, 1..6),
        ) {
            let mut seen = BTreeSet::new();
            let ranked: Vec<String> = ranked
                .into_iter()
                .filter(|x| seen.insert(*x))
                .map(|x| x.to_string())
                .collect();
            let relevant: BTreeSet<String> = relevant.into_iter().map(|x| x.to_string()).collect();
            let runs = vec![RankedList::new("q", ranked, relevant).unwrap()];
            let mut prev = 0.0;
            for k in 1..12 {
                let v = recall_at_k(&runs, k).unwrap().value;
                prop_assert!(v >= prev - 1e-12);
                prop_assert!((0.0..=1.0).contains(&v));
                let n = ndcg_at_k(&runs, k).unwrap().value;
                let m = mrr_at_k(&runs, k).unwrap().value;
                prop_assert!((0.0..=1.0).contains(&n));
                prop_assert!((0.0..=1.0).contains(&m));
                prev = v;
            }
        }
    }
}
