//! Synthetic one-to-many dialogue corpus.
//!
//! Every context gets several references built from a shared random stem
//! followed by a context-specific tail, so references of one context always
//! overlap (same stem bigram) yet never coincide (tails start with distinct
//! tokens). Tail tokens are reused across contexts, which makes them
//! plausible continuations everywhere and gives one-to-many structure some
//! bite: a model can score well on token likelihood while collapsing to
//! stem-only replies.
//!
//! Hot stems sharpen that failure mode: a handful of designated stems are
//! shared by a large fraction of contexts, so after one of them the next
//! token is nearly unpredictable from the response prefix alone and a
//! decoder must consult the context to continue correctly. A model that
//! never conditions on its own output during training tends to produce one
//! prefix-driven continuation for the whole cohort.

use super::TextDialogue;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub num_contexts: usize,
    /// References generated per context; at least 2.
    pub responses_per_context: usize,
    /// Distinct tokens contexts draw from.
    pub context_pool: usize,
    /// Tokens per context.
    pub context_len: usize,
    /// Distinct tokens stems draw from.
    pub common_pool: usize,
    /// Stem length; at least 2 so references share a bigram.
    pub stem_len: usize,
    /// Distinct tail tokens; 0 collapses every reference to the bare stem.
    pub specific_pool: usize,
    /// Inclusive total response length range when tails are in play.
    pub response_len: (usize, usize),
    /// Designated high-frequency stems shared across contexts; 0 disables.
    pub hot_stems: usize,
    /// Fraction of contexts assigned a hot stem instead of a fresh one.
    pub hot_frac: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_contexts: 200,
            responses_per_context: 3,
            context_pool: 40,
            context_len: 3,
            common_pool: 30,
            stem_len: 2,
            specific_pool: 126,
            response_len: (5, 8),
            hot_stems: 0,
            hot_frac: 0.0,
            seed: 13,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_contexts == 0 {
            return fail("num_contexts must be positive".into());
        }
        if self.responses_per_context < 2 {
            return fail(format!(
                "responses_per_context must be at least 2, got {}",
                self.responses_per_context
            ));
        }
        if self.context_pool == 0 || self.context_len == 0 {
            return fail("context pool and context length must be positive".into());
        }
        let combos = (self.context_pool as f64).powi(self.context_len as i32);
        if combos < 2.0 * self.num_contexts as f64 {
            return fail(format!(
                "context pool {} with length {} cannot yield {} distinct contexts comfortably",
                self.context_pool, self.context_len, self.num_contexts
            ));
        }
        if self.common_pool == 0 {
            return fail("common_pool must be positive".into());
        }
        if self.stem_len < 2 {
            return fail(format!("stem_len must be at least 2, got {}", self.stem_len));
        }
        if !(0.0..=1.0).contains(&self.hot_frac) {
            return fail(format!("hot_frac must be in [0, 1], got {}", self.hot_frac));
        }
        if self.hot_frac > 0.0 && self.hot_stems == 0 {
            return fail("hot_frac > 0 needs at least one hot stem".into());
        }
        if self.specific_pool > 0 {
            if self.specific_pool < self.responses_per_context {
                return fail(format!(
                    "specific_pool {} must cover {} responses per context",
                    self.specific_pool, self.responses_per_context
                ));
            }
            let (lo, hi) = self.response_len;
            if lo > hi {
                return fail(format!("response_len range ({}, {}) is inverted", lo, hi));
            }
            if lo <= self.stem_len {
                return fail(format!(
                    "response_len minimum {} leaves no room for a tail after a stem of {}",
                    lo, self.stem_len
                ));
            }
        }
        Ok(())
    }
}

fn pool_token(prefix: &str, i: usize) -> String {
    format!("{}{:03}", prefix, i)
}

/// Generates a corpus per `params`; identical params give identical output.
pub fn synth_corpus(params: &SynthParams) -> Result<Vec<TextDialogue>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut contexts: Vec<Vec<String>> = Vec::with_capacity(params.num_contexts);
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut attempts = 0usize;
    let attempt_budget = 100 * params.num_contexts + 1000;
    while contexts.len() < params.num_contexts {
        attempts += 1;
        if attempts > attempt_budget {
            return Err(Error::contract(
                "synth_corpus",
                "exhausted attempts drawing distinct contexts; enlarge the context pool",
            ));
        }
        let ctx: Vec<String> = (0..params.context_len)
            .map(|_| pool_token("ctx", rng.random_range(0..params.context_pool)))
            .collect();
        if seen.insert(ctx.clone()) {
            contexts.push(ctx);
        }
    }

    let draw_stem = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..params.stem_len)
            .map(|_| pool_token("com", rng.random_range(0..params.common_pool)))
            .collect()
    };

    // The hot path consumes randomness only when enabled, so corpora with
    // hot_frac 0 are unchanged by the feature existing.
    let mut hot: Vec<Vec<String>> = Vec::new();
    if params.hot_frac > 0.0 {
        let mut seen_hot: HashSet<Vec<String>> = HashSet::new();
        let mut attempts = 0usize;
        while hot.len() < params.hot_stems {
            attempts += 1;
            if attempts > 100 * params.hot_stems + 1000 {
                return Err(Error::contract(
                    "synth_corpus",
                    "exhausted attempts drawing distinct hot stems; enlarge the common pool",
                ));
            }
            let stem = draw_stem(&mut rng);
            if seen_hot.insert(stem.clone()) {
                hot.push(stem);
            }
        }
    }

    let mut tail_firsts: Vec<usize> = (0..params.specific_pool).collect();
    let mut corpus = Vec::with_capacity(params.num_contexts);
    for context in contexts {
        let stem: Vec<String> = if params.hot_frac > 0.0 && rng.random::<f64>() < params.hot_frac {
            hot[rng.random_range(0..hot.len())].clone()
        } else {
            draw_stem(&mut rng)
        };
        let mut responses = Vec::with_capacity(params.responses_per_context);
        if params.specific_pool == 0 {
            responses.resize(params.responses_per_context, stem.clone());
        } else {
            // Distinct leading tail tokens per context keep every pair of
            // references apart; stem tokens never occur in tails, so the
            // bigram (last stem token, first tail token) is unique to its
            // reference.
            tail_firsts.shuffle(&mut rng);
            for r in 0..params.responses_per_context {
                let (lo, hi) = params.response_len;
                let total = rng.random_range(lo..=hi);
                let mut resp = stem.clone();
                resp.push(pool_token("spe", tail_firsts[r]));
                for _ in resp.len()..total {
                    resp.push(pool_token("spe", rng.random_range(0..params.specific_pool)));
                }
                responses.push(resp);
            }
        }
        corpus.push(TextDialogue { context, responses });
    }
    Ok(corpus)
}
