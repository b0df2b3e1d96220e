//! Decoder-input samplers: teacher forcing, word-level scheduled sampling,
//! and the similarity-gated switch.
//!
//! All three take the generated sequence from the same teacher-forced
//! forward pass (argmax per step, conditioned on gold prefixes), so it is
//! always position-aligned with the ground truth. Mixing is discrete: the
//! output is a token sequence plus provenance flags, and no gradient ever
//! flows through the selection.
//!
//! Similarity is computed in 64-bit regardless of model precision. Two
//! bitwise-identical nonzero embedding rows score exactly 1.0.

use crate::error::{Error, Result};
use crate::model::{BOS_ID, PAD_ID};
use crate::tensor::Real;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Teacher,
    Scheduled,
    Adapbridge,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Teacher, Strategy::Scheduled, Strategy::Adapbridge];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Teacher => "teacher",
            Strategy::Scheduled => "scheduled",
            Strategy::Adapbridge => "adapbridge",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Strategy::Teacher),
            "scheduled" => Ok(Strategy::Scheduled),
            "adapbridge" => Ok(Strategy::Adapbridge),
            other => Err(Error::Config(format!(
                "unknown strategy {:?}, expected teacher, scheduled, or adapbridge",
                other
            ))),
        }
    }
}

/// Cosine similarities between generated-token embeddings (rows) and
/// ground-truth-token embeddings (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds from raw row-major data; every entry must be a cosine.
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "similarity",
                format!("{}x{} matrix needs {} entries, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::contract(
                "similarity",
                format!("entry {} outside [-1, 1]", bad),
            ));
        }
        Ok(SimilarityMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Largest similarity between generated token `i` and any gold token.
    pub fn row_max(&self, i: usize) -> f64 {
        self.data[i * self.cols..(i + 1) * self.cols]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-position switch decisions; true takes the generated token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchMask(pub Vec<bool>);

/// A decoder input sequence mixing gold and generated tokens, with the
/// provenance of every position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSequence {
    pub tokens: Vec<usize>,
    /// true where the token came from the generated sequence.
    pub from_generated: Vec<bool>,
}

impl MixedSequence {
    fn all_gold(gold: &[usize]) -> Self {
        MixedSequence { tokens: gold.to_vec(), from_generated: vec![false; gold.len()] }
    }

    pub fn replaced_count(&self) -> usize {
        self.from_generated.iter().filter(|&&f| f).count()
    }
}

/// Argmax per step distribution; exact ties resolve to the lowest id.
pub fn argmax_generate<T: Real>(distributions: &[Vec<T>]) -> Vec<usize> {
    distributions.iter().map(|d| argmax(d)).collect()
}

/// Argmax over each `vocab`-wide row of a flat buffer, lowest id on ties.
pub fn argmax_rows<T: Real>(flat: &[T], vocab: usize) -> Vec<usize> {
    flat.chunks_exact(vocab).map(argmax).collect()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn embedding_row<T: Real>(emb: &[T], dim: usize, id: usize) -> Result<&[T]> {
    let rows = emb.len() / dim;
    if id >= rows {
        return Err(Error::contract(
            "sim_matrix",
            format!("token id {} outside embedding table of {} rows", id, rows),
        ));
    }
    Ok(&emb[id * dim..(id + 1) * dim])
}

fn norm_f64<T: Real>(row: &[T]) -> f64 {
    row.iter().map(|v|{
        let x = v.to_f64().unwrap_or(0.0);
        x * x
    }).sum::<f64>().sqrt()
}

/// Cosine similarity matrix between the embeddings of two token sequences,
/// generated ids as rows and gold ids as columns.
pub fn sim_matrix<T: Real>(
    gen: &[usize],
    gold: &[usize],
    emb: &[T],
    dim: usize,
) -> Result<SimilarityMatrix> {
    if gen.is_empty() || gold.is_empty() {
        return Err(Error::contract("sim_matrix", "both sequences must be nonempty"));
    }
    if dim == 0 || emb.len() % dim != 0 {
        return Err(Error::contract(
            "sim_matrix",
            format!("embedding buffer of {} does not tile into rows of {}", emb.len(), dim),
        ));
    }
    let row_of = |id: usize| embedding_row(emb, dim, id);
    let norm_of = |id: usize| -> Result<f64> {
        let n = norm_f64(row_of(id)?);
        if n == 0.0 {
            return Err(Error::contract(
                "sim_matrix",
                format!("embedding row for token id {} has zero norm; similarity is undefined", id),
            ));
        }
        Ok(n)
    };
    let gen_norms: Vec<f64> = gen.iter().map(|&id| norm_of(id)).collect::<Result<_>>()?;
    let gold_norms: Vec<f64> = gold.iter().map(|&id| norm_of(id)).collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(gen.len() * gold.len());
    for (i, &g) in gen.iter().enumerate() {
        let grow = row_of(g)?;
        for (j, &t) in gold.iter().enumerate() {
            let trow = row_of(t)?;
            // Identical nonzero rows give exactly 1: the common case of
            // the generated token matching the gold token must clear any
            // threshold below 1 regardless of rounding.
            let cos = if grow == trow {
                1.0
            } else {
                let dot: f64 = grow
                    .iter()
                    .zip(trow)
                    .map(|(a, b)| a.to_f64().unwrap_or(0.0) * b.to_f64().unwrap_or(0.0))
                    .sum();
                (dot / (gen_norms[i] * gold_norms[j])).clamp(-1.0, 1.0)
            };
            data.push(cos);
        }
    }
    SimilarityMatrix::from_data(gen.len(), gold.len(), data)
}

/// Thresholds row maxima strictly above `beta`.
pub fn switch_mask(sim: &SimilarityMatrix, beta: f64) -> Result<SwitchMask> {
    if !beta.is_finite() {
        return Err(Error::contract("switch_mask", format!("beta must be finite, got {}", beta)));
    }
    Ok(SwitchMask((0..sim.rows()).map(|i| sim.row_max(i) > beta).collect()))
}

/// Per-position select: mask true takes `gen`, false keeps `gold`.
pub fn mix(gen: &[usize], gold: &[usize], mask: &SwitchMask) -> Result<MixedSequence> {
    if gen.len() != gold.len() || mask.0.len() != gold.len() {
        return Err(Error::contract(
            "mix",
            format!(
                "length mismatch: {} generated, {} gold, {} mask entries",
                gen.len(),
                gold.len(),
                mask.0.len()
            ),
        ));
    }
    let tokens = mask
        .0
        .iter()
        .zip(gen.iter().zip(gold))
        .map(|(&take_gen, (&g, &t))| if take_gen { g } else { t })
        .collect();
    Ok(MixedSequence { tokens, from_generated: mask.0.clone() })
}

fn is_special(id: usize) -> bool {
    id == PAD_ID || id == BOS_ID
}

/// Clears mask entries at positions whose gold token is reserved; those
/// positions always keep the ground truth.
pub fn protect_special(mask: &mut SwitchMask, gold: &[usize]) {
    for (m, &g) in mask.0.iter_mut().zip(gold) {
        if is_special(g) {
            *m = false;
        }
    }
}

/// Teacher forcing: the decoder input is the ground truth.
pub fn samfun_teacher(_gen: &[usize], gold: &[usize]) -> MixedSequence {
    MixedSequence::all_gold(gold)
}

/// Word-level scheduled sampling: each position independently keeps the
/// gold token with probability `alpha_keep`, otherwise takes the
/// generated one.
pub fn samfun_scheduled<R: Rng>(
    gen: &[usize],
    gold: &[usize],
    alpha_keep: f64,
    rng: &mut R,
) -> Result<MixedSequence> {
    if gen.len() != gold.len() {
        return Err(Error::contract(
            "samfun_scheduled",
            format!("{} generated vs {} gold tokens", gen.len(), gold.len()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha_keep) {
        return Err(Error::contract(
            "samfun_scheduled",
            format!("alpha must be in [0,1], got {}", alpha_keep),
        ));
    }
    let mut mask = SwitchMask(
        (0..gold.len()).map(|_| rng.random::<f64>() >= alpha_keep).collect(),
    );
    protect_special(&mut mask, gold);
    mix(gen, gold, &mask)
}

/// Similarity-gated mixing: one uniform draw gates the whole sequence;
/// when it clears `alpha`, positions whose generated token is closer than
/// `beta` to some gold token take the generated token.
pub fn samfun_adapbridge<T: Real, R: Rng>(
    gen: &[usize],
    gold: &[usize],
    emb: &[T],
    dim: usize,
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<MixedSequence> {
    if gen.len() != gold.len() {
        return Err(Error::contract(
            "samfun_adapbridge",
            format!("{} generated vs {} gold tokens", gen.len(), gold.len()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(
            "samfun_adapbridge",
            format!("alpha must be in [0,1], got {}", alpha),
        ));
    }
    // Exactly one gate draw per call, taken before branching so the rng
    // stream does not depend on the outcome.
    let m = rng.random::<f64>();
    if m >= alpha || gold.is_empty() {
        return Ok(MixedSequence::all_gold(gold));
    }
    let sim = sim_matrix(gen, gold, emb, dim)?;
    let mut mask = switch_mask(&sim, beta)?;
    protect_special(&mut mask, gold);
    mix(gen, gold, &mask)
}
