//! Generation-quality metrics: BLEU, Distinct, averaged-highest BLEU, and
//! perplexity.
//!
//! Everything is generic over the token type so tests can use string tokens
//! while the trainer passes vocabulary ids.

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

/// Epsilon for add-epsilon smoothing of zero-count n-gram precisions.
pub const BLEU_SMOOTH_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Each precision becomes `(clipped + eps) / (total + eps)`. Short
    /// dialogue responses almost always have some zero higher-order count,
    /// which would otherwise collapse the whole geometric mean to 0.
    AddEpsilon,
}

#[derive(Clone, Copy, Debug)]
pub struct BleuConfig {
    /// Highest n-gram order entering the geometric mean (2 or 4 in reports).
    pub max_order: usize,
    pub smoothing: Smoothing,
    pub brevity_penalty: bool,
}

impl BleuConfig {
    pub fn order(max_order: usize) -> Self {
        BleuConfig { max_order, smoothing: Smoothing::AddEpsilon, brevity_penalty: true }
    }
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU of one candidate against one or more references.
///
/// Modified n-gram precisions clip each candidate count against the maximum
/// count over the references; orders the candidate is too short to populate
/// are skipped rather than scored zero. The brevity penalty compares against
/// the reference length closest to the candidate's, ties broken toward the
/// shorter reference.
pub fn bleu<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    cfg: &BleuConfig,
) -> Result<f64> {
    if cfg.max_order < 1 {
        return Err(Error::Config(format!(
            "bleu max_order must be >= 1, got {}",
            cfg.max_order
        )));
    }
    if candidate.is_empty() {
        return Err(Error::contract("bleu", "candidate is empty"));
    }
    if references.is_empty() {
        return Err(Error::contract("bleu", "reference set is empty"));
    }

    let mut product = 1.0f64;
    let mut scored_orders = 0usize;
    for n in 1..=cfg.max_order {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            continue;
        }
        let ref_counts: Vec<HashMap<Vec<T>, usize>> =
            references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut clipped = 0usize;
        for (gram, &count) in &cand {
            let best = ref_counts
                .iter()
                .map(|rc| rc.get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(best);
        }
        let precision = match cfg.smoothing {
            Smoothing::None => clipped as f64 / total as f64,
            Smoothing::AddEpsilon => {
                (clipped as f64 + BLEU_SMOOTH_EPS) / (total as f64 + BLEU_SMOOTH_EPS)
            }
        };
        scored_orders += 1;
        product *= precision;
    }
    debug_assert!(scored_orders >= 1, "nonempty candidate always has unigrams");
    let geo_mean = product.powf(1.0 / scored_orders as f64);

    let bp = if cfg.brevity_penalty {
        let c = candidate.len();
        let r = references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| (len.abs_diff(c), len))
            .unwrap();
        if c >= r {
            1.0
        } else {
            (1.0 - r as f64 / c as f64).exp()
        }
    } else {
        1.0
    };
    Ok(bp * geo_mean)
}

/// Corpus diversity: unique n-grams across all responses divided by the
/// total n-gram count across all responses.
pub fn distinct_n<T: Eq + Hash + Clone>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Config(format!("distinct order must be >= 1, got {}", n)));
    }
    if responses.is_empty() {
        return Err(Error::contract("distinct_n", "response corpus is empty"));
    }
    let mut unique: HashSet<Vec<T>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if r.len() >= n {
            for w in r.windows(n) {
                total += 1;
                unique.insert(w.to_vec());
            }
        }
    }
    if total == 0 {
        return Err(Error::contract(
            "distinct_n",
            format!("every response is shorter than {}", n),
        ));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Averaged-highest BLEU: for each context, the best single-reference BLEU
/// of its candidate; returns the mean of those maxima.
///
/// A candidate the generator left empty scores 0 for its context instead of
/// failing the whole evaluation.
pub fn ah_bleu<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    reference_sets: &[Vec<Vec<T>>],
    order: usize,
) -> Result<f64> {
    if candidates.len() != reference_sets.len() {
        return Err(Error::contract(
            "ah_bleu",
            format!(
                "{} candidates vs {} reference sets",
                candidates.len(),
                reference_sets.len()
            ),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::contract("ah_bleu", "no contexts to evaluate"));
    }
    let cfg = BleuConfig::order(order);
    let mut sum = 0.0f64;
    for (cand, refs) in candidates.iter().zip(reference_sets) {
        if cand.is_empty() {
            continue;
        }
        let mut best = 0.0f64;
        for r in refs {
            let score = bleu(cand, std::slice::from_ref(r), &cfg)?;
            if score > best {
                best = score;
            }
        }
        sum += best;
    }
    Ok(sum / candidates.len() as f64)
}

/// `exp(total_nll / token_count)`.
pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::contract("perplexity", "token count is zero"));
    }
    Ok((total_nll / token_count as f64).exp())
}

/// One evaluation's worth of metrics plus the evaluated set sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub ppl: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub ah_bleu2: f64,
    pub contexts: usize,
    pub pairs: usize,
}

impl MetricReport {
    /// Column order of the comparison table. BLEU-style scores are reported
    /// as fractions in [0,1].
    pub const TABLE_COLUMNS: [&'static str; 6] =
        ["PPL", "BLEU-2", "BLEU-4", "DIS-1", "DIS-2", "AH-BLEU-2"];

    /// Flat `key = value` block, one metric per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ppl = {:.6}", self.ppl);
        let _ = writeln!(out, "bleu2 = {:.6}", self.bleu2);
        let _ = writeln!(out, "bleu4 = {:.6}", self.bleu4);
        let _ = writeln!(out, "distinct1 = {:.6}", self.distinct1);
        let _ = writeln!(out, "distinct2 = {:.6}", self.distinct2);
        let _ = writeln!(out, "ah_bleu2 = {:.6}", self.ah_bleu2);
        let _ = writeln!(out, "contexts = {}", self.contexts);
        let _ = writeln!(out, "pairs = {}", self.pairs);
        out
    }

    /// Header of the tab-separated comparison table.
    pub fn table_header() -> String {
        let mut out = String::from("Model");
        for col in Self::TABLE_COLUMNS {
            out.push('\t');
            out.push_str(col);
        }
        out
    }

    /// One tab-separated table row labeled with a model/strategy name.
    pub fn to_table_row(&self, label: &str) -> String {
        format!(
            "{}\t{:.3}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            label, self.ppl, self.bleu2, self.bleu4, self.distinct1, self.distinct2, self.ah_bleu2
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_candidate_scores_one() {
        let cand = toks("the quick fox");
        let refs = vec![toks("something else here"), toks("the quick fox")];
        for order in [2, 4] {
            let score = bleu(&cand, &refs, &BleuConfig::order(order)).unwrap();
            assert_eq!(score, 1.0);
        }
    }

    #[test]
    fn disjoint_candidate_scores_near_zero() {
        let cand = toks("x y z");
        let refs = vec![toks("a b c d")];
        let score = bleu(&cand, &refs, &BleuConfig::order(2)).unwrap();
        assert!(score < 1e-6, "score {}", score);
    }

    #[test]
    fn hand_computed_brevity_case() {
        // unigrams 3/3, bigrams 2/2, BP = exp(1 - 4/3)
        let cand = toks("the cat sat");
        let refs = vec![toks("the cat sat down")];
        let score = bleu(&cand, &refs, &BleuConfig::order(2)).unwrap();
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((score - expect).abs() < 1e-9, "score {}", score);
        assert!((score - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn clipping_limits_repeated_tokens() {
        // "the the the the" vs "the cat": clipped unigram count is 1, not 4.
        let cand = toks("the the the the");
        let refs = vec![toks("the cat")];
        let cfg = BleuConfig { max_order: 1, smoothing: Smoothing::None, brevity_penalty: false };
        let score = bleu(&cand, &refs, &cfg).unwrap();
        assert!((score - 0.25).abs() < 1e-12);
    }

    #[test]
    fn short_candidate_skips_unreachable_orders() {
        let cand = toks("hello");
        let refs = vec![toks("hello")];
        let score = bleu(&cand, &refs, &BleuConfig::order(4)).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let empty: Vec<&str> = Vec::new();
        let refs = vec![toks("a b")];
        assert!(bleu(&empty, &refs, &BleuConfig::order(2)).is_err());
        let no_refs: Vec<Vec<&str>> = Vec::new();
        assert!(bleu(&toks("a"), &no_refs, &BleuConfig::order(2)).is_err());
    }

    #[test]
    fn distinct_ratios() {
        let one = vec![toks("a a a a")];
        assert_eq!(distinct_n(&one, 1).unwrap(), 0.25);

        let unique = vec![toks("a b"), toks("c d")];
        assert_eq!(distinct_n(&unique, 1).unwrap(), 1.0);

        let bigrams = vec![toks("a b"), toks("a b")];
        assert_eq!(distinct_n(&bigrams, 2).unwrap(), 0.5);
    }

    #[test]
    fn distinct_rejects_degenerate_corpora() {
        let empty: Vec<Vec<&str>> = Vec::new();
        assert!(distinct_n(&empty, 1).is_err());
        let too_short = vec![toks("a")];
        assert!(distinct_n(&too_short, 2).is_err());
    }

    #[test]
    fn ah_bleu_degenerate_equals_bleu() {
        let cand = vec![toks("the cat sat")];
        let refs = vec![vec![toks("the cat sat down")]];
        let ah = ah_bleu(&cand, &refs, 2).unwrap();
        let plain = bleu(&cand[0], &refs[0], &BleuConfig::order(2)).unwrap();
        assert_eq!(ah, plain);
    }

    #[test]
    fn ah_bleu_exact_match_per_context_is_one() {
        let cands = vec![toks("a b c"), toks("d e")];
        let refs = vec![
            vec![toks("z z z"), toks("a b c")],
            vec![toks("d e"), toks("q r s")],
        ];
        assert_eq!(ah_bleu(&cands, &refs, 2).unwrap(), 1.0);
    }

    #[test]
    fn ah_bleu_averages_constructed_maxima() {
        // Context 1 best: unigram precision 2/5 = 0.4 (equal lengths, BP 1).
        // Context 2 best: 3/5 = 0.6. Mean 0.5.
        let cands = vec![toks("a b v w x"), toks("c d e y z")];
        let refs = vec![
            vec![toks("a b q q q"), toks("m m m m m")],
            vec![toks("c d e q q"), toks("m m m m m")],
        ];
        let ah = ah_bleu(&cands, &refs, 1).unwrap();
        assert!((ah - 0.5).abs() < 1e-9, "ah {}", ah);
    }

    #[test]
    fn ah_bleu_rejects_misalignment() {
        let cands = vec![toks("a")];
        let refs: Vec<Vec<Vec<&str>>> = vec![vec![toks("a")], vec![toks("b")]];
        assert!(ah_bleu(&cands, &refs, 2).is_err());
    }

    #[test]
    fn perplexity_uniform_and_zero() {
        let v = 480usize;
        let n = 37usize;
        let total_nll = (v as f64).ln() * n as f64;
        let ppl = perplexity(total_nll, n).unwrap();
        assert!((ppl - v as f64).abs() < 1e-9);

        assert_eq!(perplexity(0.0, 5).unwrap(), 1.0);
        assert!(perplexity(1.0, 0).is_err());
    }

    #[test]
    fn report_serialization_shapes() {
        let r = MetricReport {
            ppl: 9.41,
            bleu2: 0.123456,
            bleu4: 0.05,
            distinct1: 0.8,
            distinct2: 0.9,
            ah_bleu2: 0.3,
            contexts: 10,
            pairs: 42,
        };
        let kv = r.to_key_value();
        for key in ["ppl", "bleu2", "bleu4", "distinct1", "distinct2", "ah_bleu2", "contexts", "pairs"] {
            assert!(kv.lines().any(|l| l.starts_with(&format!("{} = ", key))), "missing {}", key);
        }
        let header = MetricReport::table_header();
        assert_eq!(header.split('\t').count(), 7);
        assert!(header.starts_with("Model\tPPL\t"));
        let row = r.to_table_row("teacher");
        assert_eq!(row.split('\t').count(), 7);
        assert!(row.starts_with("teacher\t"));
    }

    fn token_seq(max_token: u8, max_len: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..max_token, 1..=max_len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bleu_invariant_under_reference_reordering(
            cand in token_seq(5, 6),
            mut refs in prop::collection::vec(token_seq(5, 6), 1..4),
        ) {
            let cfg = BleuConfig::order(2);
            let forward = bleu(&cand, &refs, &cfg).unwrap();
            refs.reverse();
            let backward = bleu(&cand, &refs, &cfg).unwrap();
            prop_assert_eq!(forward, backward);
        }

        #[test]
        fn candidate_in_reference_set_scores_one(
            cand in token_seq(5, 6),
            mut refs in prop::collection::vec(token_seq(5, 6), 0..3),
        ) {
            refs.push(cand.clone());
            for order in [2usize, 4] {
                let score = bleu(&cand, &refs, &BleuConfig::order(order)).unwrap();
                prop_assert_eq!(score, 1.0);
            }
        }

        #[test]
        fn multi_reference_dominates_single_without_bp(
            cand in token_seq(4, 6),
            refs in prop::collection::vec(token_seq(4, 6), 1..4),
        ) {
            // Clipping dominance holds for the precision part; the brevity
            // penalty is length-based and orthogonal, so it is disabled here.
            let cfg = BleuConfig {
                max_order: 2,
                smoothing: Smoothing::AddEpsilon,
                brevity_penalty: false,
            };
            let multi = bleu(&cand, &refs, &cfg).unwrap();
            for r in &refs {
                let single = bleu(&cand, std::slice::from_ref(r), &cfg).unwrap();
                prop_assert!(
                    multi >= single - 1e-12,
                    "multi {} < single {}", multi, single
                );
            }
        }

        #[test]
        fn multi_reference_dominates_single_equal_lengths_with_bp(
            cand in token_seq(4, 6),
            refs_raw in prop::collection::vec(token_seq(4, 5), 1..4),
        ) {
            // With all references the same length the BP term is identical
            // for every subset, so dominance holds with BP enabled too.
            let len = 5usize;
            let refs: Vec<Vec<u8>> = refs_raw
                .iter()
                .map(|r| r.iter().cycle().take(len).cloned().collect())
                .collect();
            let cfg = BleuConfig::order(2);
            let multi = bleu(&cand, &refs, &cfg).unwrap();
            for r in &refs {
                let single = bleu(&cand, std::slice::from_ref(r), &cfg).unwrap();
                prop_assert!(multi >= single - 1e-12);
            }
        }

        #[test]
        fn distinct_reorder_invariant_and_bounded(
            mut responses in prop::collection::vec(token_seq(6, 5), 1..6),
        ) {
            let forward = distinct_n(&responses, 1).unwrap();
            prop_assert!(forward > 0.0 && forward <= 1.0);
            responses.reverse();
            let backward = distinct_n(&responses, 1).unwrap();
            prop_assert_eq!(forward, backward);
        }

        #[test]
        fn ah_bleu_invariant_within_reference_sets(
            cands in prop::collection::vec(token_seq(5, 5), 1..4),
        ) {
            let refs: Vec<Vec<Vec<u8>>> = cands
                .iter()
                .map(|c| {
                    let mut set = vec![c.clone(), vec![9u8; 3]];
                    set.push(c.iter().rev().cloned().collect());
                    set
                })
                .collect();
            let forward = ah_bleu(&cands, &refs, 2).unwrap();
            let shuffled: Vec<Vec<Vec<u8>>> = refs
                .iter()
                .map(|set| set.iter().rev().cloned().collect())
                .collect();
            let backward = ah_bleu(&cands, &shuffled, 2).unwrap();
            prop_assert!((forward - backward).abs() < 1e-15);
        }
    }
}
