//! Vocabulary construction, corpus file I/O, context-level splitting, and
//! the synthetic one-to-many dialogue generator.
//!
//! A corpus file is UTF-8 text, one context-response pair per line, the two
//! sides separated by a single TAB. Lines sharing an identical context are
//! grouped into one [`TextDialogue`] holding all of that context's
//! references. Tokenization is whitespace splitting throughout.

mod synth;

pub use synth::{synth_corpus, SynthParams};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Most responses kept per context; later duplicates of a context beyond
/// this are dropped at load time.
pub const MAX_RESPONSES_PER_CONTEXT: usize = 20;

/// One context with every reference response observed for it, as text
/// tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextDialogue {
    pub context: Vec<String>,
    pub responses: Vec<Vec<String>>,
}

/// One context with its references encoded to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialoguePair {
    pub context: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
}

/// Token-id bijection with four fixed reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from an ordered token list, e.g. out of a
    /// checkpoint. The list must start with the reserved tokens.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(Error::VocabMismatch(format!(
                "token list of {} is shorter than the reserved prefix",
                tokens.len()
            )));
        }
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *reserved {
                return Err(Error::VocabMismatch(format!(
                    "token {} must be the reserved {:?}, got {:?}",
                    i, reserved, tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token {:?}", tok)));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Ordered id-to-token list, the checkpoint serialization form.
    pub fn token_list(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes pre-split tokens; out-of-vocabulary tokens become the
    /// unknown id.
    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index.get(t.as_str()).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Whitespace-splits and encodes a text line.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Inverse of encode for valid ids; errors on ids outside the table.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.tokens.get(id) {
                Some(tok) => parts.push(tok.as_str()),
                None => {
                    return Err(Error::VocabMismatch(format!(
                        "id {} outside vocabulary of size {}",
                        id,
                        self.tokens.len()
                    )))
                }
            }
        }
        Ok(parts.join(" "))
    }
}

/// Builds a vocabulary from token frequencies, keeping the most frequent
/// tokens up to `max_size` total entries (reserved ids included). Frequency
/// ties break lexicographically.
pub fn build_vocab(corpus: &[TextDialogue], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::contract("build_vocab", "corpus is empty"));
    }
    if max_size <= RESERVED_TOKENS.len() {
        return Err(Error::Config(format!(
            "vocab max_size must exceed the {} reserved ids, got {}",
            RESERVED_TOKENS.len(),
            max_size
        )));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for pair in corpus {
        for tok in &pair.context {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
        for resp in &pair.responses {
            for tok in resp {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
    }
    for reserved in RESERVED_TOKENS {
        freq.remove(reserved);
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED_TOKENS.len());

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_token_list(tokens)
}

/// Encodes a text corpus against a vocabulary.
pub fn encode_corpus(corpus: &[TextDialogue], vocab: &Vocabulary) -> Vec<DialoguePair> {
    corpus
        .iter()
        .map(|pair| DialoguePair {
            context: vocab.encode_tokens(&pair.context),
            responses: pair.responses.iter().map(|r| vocab.encode_tokens(r)).collect(),
        })
        .collect()
}

fn parse_line(line_no: usize, line: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut sides = line.split('\t');
    let context = sides.next().unwrap_or("");
    let response = match sides.next() {
        Some(r) => r,
        None => {
            return Err(Error::CorpusParse {
                line: line_no,
                message: "missing TAB separator between context and response".into(),
            })
        }
    };
    if sides.next().is_some() {
        return Err(Error::CorpusParse {
            line: line_no,
            message: "more than one TAB on the line".into(),
        });
    }
    let context: Vec<String> = context.split_whitespace().map(str::to_string).collect();
    let response: Vec<String> = response.split_whitespace().map(str::to_string).collect();
    if context.is_empty() {
        return Err(Error::CorpusParse { line: line_no, message: "empty context".into() });
    }
    if response.is_empty() {
        return Err(Error::CorpusParse { line: line_no, message: "empty response".into() });
    }
    Ok((context, response))
}

/// Loads a corpus file, grouping lines that share an identical context into
/// one [`TextDialogue`]. Contexts appear in first-seen order, responses in
/// file order; responses beyond [`MAX_RESPONSES_PER_CONTEXT`] are dropped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TextDialogue>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs: Vec<TextDialogue> = Vec::new();
    let mut by_context: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let (context, response) = parse_line(idx + 1, line)?;
        let key = context.join(" ");
        match by_context.get(&key) {
            Some(&slot) => {
                let pair = &mut pairs[slot];
                if pair.responses.len() < MAX_RESPONSES_PER_CONTEXT {
                    pair.responses.push(response);
                }
            }
            None => {
                by_context.insert(key, pairs.len());
                pairs.push(TextDialogue { context, responses: vec![response] });
            }
        }
    }
    Ok(pairs)
}

/// Writes a corpus in the line format `load_corpus` reads; loading the
/// result reproduces the input exactly.
pub fn save_corpus(path: impl AsRef<Path>, corpus: &[TextDialogue]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for pair in corpus {
        let context = pair.context.join(" ");
        for resp in &pair.responses {
            out.push_str(&context);
            out.push('\t');
            out.push_str(&resp.join(" "));
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Optional cleanup: drops responses contained in their context (or whose
/// context is contained in them) as contiguous token runs; drops a context
/// entirely once it has no responses left.
pub fn filter_containment(corpus: Vec<TextDialogue>) -> Vec<TextDialogue> {
    corpus
        .into_iter()
        .filter_map(|mut pair| {
            pair.responses.retain(|r| {
                !contains_subsequence(&pair.context, r) && !contains_subsequence(r, &pair.context)
            });
            if pair.responses.is_empty() {
                None
            } else {
                Some(pair)
            }
        })
        .collect()
}

/// Splits a corpus by context: each element keeps all its responses and
/// lands in exactly one of train/valid/test. Deterministic in `seed`.
pub fn split<P>(corpus: Vec<P>, ratios: [f64; 3], seed: u64) -> Result<(Vec<P>, Vec<P>, Vec<P>)> {
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!("split ratios must be nonnegative: {:?}", ratios)));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {:?} (sum {})",
            ratios, sum
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = corpus.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut slots: Vec<Option<P>> = corpus.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<P> {
        idx.iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let valid = take(&order[n_train..n_train + n_valid]);
    let test = take(&order[n_train + n_valid..]);
    Ok((train, valid, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dialogue(context: &str, responses: &[&str]) -> TextDialogue {
        TextDialogue {
            context: context.split_whitespace().map(str::to_string).collect(),
            responses: responses
                .iter()
                .map(|r| r.split_whitespace().map(str::to_string).collect())
                .collect(),
        }
    }

    #[test]
    fn vocab_counts_reserved_in_the_cap() {
        let corpus = vec![dialogue("alpha beta", &["gamma", "beta gamma"])];
        let vocab = build_vocab(&corpus, 10).unwrap();
        assert_eq!(vocab.size(), 3 + RESERVED_TOKENS.len());
        assert_eq!(vocab.id("<pad>"), Some(PAD_ID));
        assert_eq!(vocab.id("<unk>"), Some(UNK_ID));
    }

    #[test]
    fn vocab_prefers_frequency_then_lexicographic() {
        // zeta appears 3 times; apple/pear once each and tie on frequency.
        let corpus = vec![dialogue("zeta zeta", &["zeta pear apple"])];
        let vocab = build_vocab(&corpus, RESERVED_TOKENS.len() + 2).unwrap();
        assert_eq!(vocab.size(), RESERVED_TOKENS.len() + 2);
        assert_eq!(vocab.token(4), Some("zeta"));
        assert_eq!(vocab.token(5), Some("apple"));
        assert_eq!(vocab.id("pear"), None);
    }

    #[test]
    fn encode_decode_round_trip_and_unk() {
        let corpus = vec![dialogue("a b c", &["d e"])];
        let vocab = build_vocab(&corpus, 64).unwrap();
        let ids = vocab.encode("a c e");
        assert_eq!(vocab.decode(&ids).unwrap(), "a c e");
        assert_eq!(vocab.encode("a mystery")[1], UNK_ID);
        assert!(vocab.decode(&[vocab.size()]).is_err());
    }

    #[test]
    fn token_list_round_trip() {
        let corpus = vec![dialogue("x y", &["z"])];
        let vocab = build_vocab(&corpus, 32).unwrap();
        let rebuilt = Vocabulary::from_token_list(vocab.token_list().to_vec()).unwrap();
        assert_eq!(rebuilt, vocab);

        assert!(Vocabulary::from_token_list(vec!["<pad>".into()]).is_err());
        assert!(Vocabulary::from_token_list(vec![
            "<pad>".into(),
            "<bos>".into(),
            "<eos>".into(),
            "oops".into(),
        ])
        .is_err());
    }

    #[test]
    fn build_vocab_rejects_empty_and_tiny_caps() {
        assert!(build_vocab(&[], 10).is_err());
        let corpus = vec![dialogue("a", &["b"])];
        assert!(build_vocab(&corpus, RESERVED_TOKENS.len()).is_err());
    }

    #[test]
    fn load_groups_lines_by_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "how are you\tfine thanks\nhow are you\tnot bad\nbye now\tsee you\n")
            .unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].responses.len(), 2);
        assert_eq!(corpus[0].context.join(" "), "how are you");
        assert_eq!(corpus[1].responses.len(), 1);
    }

    #[test]
    fn load_empty_file_is_valid_and_round_trip_preserves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());

        let corpus = vec![
            dialogue("a b", &["c d", "e f g"]),
            dialogue("h", &["i j"]),
        ];
        let path = dir.path().join("round.tsv");
        save_corpus(&path, &corpus).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn load_reports_malformed_lines_with_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");

        std::fs::write(&path, "ok line\tfine\nno separator here\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{}", err);

        std::fs::write(&path, "a\tb\tc\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("TAB"), "{}", err);

        std::fs::write(&path, "ctx\t   \n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("empty response"), "{}", err);
    }

    #[test]
    fn load_caps_responses_per_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.tsv");
        let mut text = String::new();
        for i in 0..25 {
            text.push_str(&format!("same context\treply number{}\n", i));
        }
        std::fs::write(&path, text).unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].responses.len(), MAX_RESPONSES_PER_CONTEXT);
        assert_eq!(corpus[0].responses[0].join(" "), "reply number0");
    }

    #[test]
    fn containment_filter_drops_echoes() {
        let corpus = vec![
            dialogue("please say hello world", &["say hello", "novel reply"]),
            dialogue("short", &["short"]),
        ];
        let kept = filter_containment(corpus);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].responses.len(), 1);
        assert_eq!(kept[0].responses[0].join(" "), "novel reply");
    }

    #[test]
    fn split_everything_to_train() {
        let corpus: Vec<u32> = (0..10).collect();
        let (train, valid, test) = split(corpus, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(train.len(), 10);
        assert!(valid.is_empty() && test.is_empty());
    }

    #[test]
    fn split_partitions_without_straddling() {
        let corpus: Vec<u32> = (0..100).collect();
        let (train, valid, test) = split(corpus, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(train.len() + valid.len() + test.len(), 100);
        let mut seen = HashSet::new();
        for x in train.iter().chain(&valid).chain(&test) {
            assert!(seen.insert(*x), "context {} appears twice", x);
        }
        assert_eq!(train.len(), 80);
        assert_eq!(valid.len(), 10);
    }

    #[test]
    fn split_is_deterministic_and_validates_ratios() {
        let a = split((0..50).collect::<Vec<u32>>(), [0.6, 0.2, 0.2], 7).unwrap();
        let b = split((0..50).collect::<Vec<u32>>(), [0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!(a, b);
        let c = split((0..50).collect::<Vec<u32>>(), [0.6, 0.2, 0.2], 8).unwrap();
        assert_ne!(a, c);

        assert!(split(vec![1u32], [0.5, 0.2, 0.2], 0).is_err());
        assert!(split(vec![1u32], [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn encode_corpus_maps_all_sequences() {
        let corpus = vec![dialogue("a b", &["c", "a d"])];
        let vocab = build_vocab(&corpus, 32).unwrap();
        let encoded = encode_corpus(&corpus, &vocab);
        assert_eq!(encoded.len(), 1);
        assert_eq!(encoded[0].context.len(), 2);
        assert_eq!(encoded[0].responses.len(), 2);
        assert!(encoded[0].responses.iter().flatten().all(|&id| id < vocab.size()));
    }
}
