//! Forward passes bound to an autodiff graph, plus greedy and beam search.
//!
//! A session clones the parameters into graph leaves once; every method
//! then appends ops to the same tape. Batches are right-padded and masked:
//! padded key positions get -1e9 before softmax (their weight underflows
//! to exactly zero), padded target rows get loss weight zero, so batch
//! composition never changes the numbers computed for real rows.

use super::{Model, ModelConfig, BOS_ID, EOS_ID, LN_EPS, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Session<'m, T: Real> {
    pub graph: Graph<T>,
    model: &'m Model<T>,
    param_ids: Vec<TensorId>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Graph-resident encoder output for one batch.
pub struct EncoderState {
    pub hidden: TensorId,
    pub batch: usize,
    pub src_len: usize,
    /// true per slot holding a real token, row-major `[batch * src_len]`.
    pub src_mask: Vec<bool>,
}

/// Teacher-forced (or mixed-input) batch forward.
pub struct TeacherBatch {
    /// `[batch * dec_len, V]` next-token logits.
    pub logits: TensorId,
    /// Scalar total negative log-likelihood over real target rows.
    pub nll: TensorId,
    pub batch: usize,
    pub dec_len: usize,
    /// Real (unpadded) target rows summed into `nll`.
    pub token_count: usize,
    pub targets: Vec<usize>,
    pub row_weights: Vec<f64>,
}

impl<T: Real> Model<T> {
    /// Binds the parameters into a fresh graph. Training sessions record
    /// ops for backward and apply dropout (seeded); evaluation sessions do
    /// neither.
    pub fn session(&self, training: bool, dropout_seed: u64) -> Session<'_, T> {
        let mut graph = Graph::new(training);
        let param_ids = self
            .tensors()
            .map(|(_, shape, vals)| {
                graph
                    .leaf(vals.to_vec(), shape, training)
                    .expect("parameter storage is internally consistent")
            })
            .collect();
        Session {
            graph,
            model: self,
            param_ids,
            training,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }
}

impl<'m, T: Real> Session<'m, T> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn p(&self, name: &str) -> TensorId {
        self.param_ids[self.model.index_of(name)]
    }

    /// Per-parameter gradients in `param_names` order, after `backward`.
    pub fn param_gradients(&self) -> Result<Vec<Vec<T>>> {
        self.param_ids
            .iter()
            .map(|&id| {
                self.graph
                    .grad(id)
                    .map(<[T]>::to_vec)
                    .ok_or_else(|| Error::contract("param_gradients", "no gradients recorded"))
            })
            .collect()
    }

    fn maybe_dropout(&mut self, x: TensorId) -> Result<TensorId> {
        let rate = self.config().dropout_rate;
        if self.training && rate > 0.0 {
            self.graph.dropout(x, rate, &mut self.rng)
        } else {
            Ok(x)
        }
    }

    fn validate_sequences(&self, seqs: &[&[usize]], what: &str, max_len: usize) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::contract("forward", format!("empty {} batch", what)));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::contract("forward", format!("empty {} sequence", what)));
            }
            if s.len() > max_len {
                return Err(Error::contract(
                    "forward",
                    format!("{} of {} tokens exceeds limit {}", what, s.len(), max_len),
                ));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.config().vocab_size) {
                return Err(Error::contract(
                    "forward",
                    format!("{} token id {} outside vocabulary of {}", what, bad, self.config().vocab_size),
                ));
            }
        }
        Ok(())
    }

    fn embed_positions(&mut self, ids: &[usize], batch: usize, len: usize) -> Result<TensorId> {
        let d = self.config().model_dim;
        let table = self.p("embedding");
        let e = self.graph.gather_rows(table, ids)?;
        let e = self.graph.scale(e, (d as f64).sqrt())?;
        let pe_rows = &self.model.positional_table()[..len * d];
        let mut tile = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            tile.extend_from_slice(pe_rows);
        }
        let pe = self.graph.constant(tile, &[batch * len, d])?;
        let x = self.graph.add(e, pe)?;
        self.maybe_dropout(x)
    }

    fn project(&mut self, x: TensorId, w: &str, b: &str) -> Result<TensorId> {
        let y = self.graph.matmul(x, self.p(w))?;
        self.graph.add_bias(y, self.p(b))
    }

    fn split_heads(&mut self, x: TensorId, batch: usize, len: usize) -> Result<TensorId> {
        let (h, dh) = (self.config().num_heads, self.config().head_dim());
        let x = self.graph.reshape(x, &[batch, len, h, dh])?;
        let x = self.graph.swap_axes_1_2(x)?;
        self.graph.reshape(x, &[batch * h, len, dh])
    }

    fn merge_heads(&mut self, x: TensorId, batch: usize, len: usize) -> Result<TensorId> {
        let (h, dh) = (self.config().num_heads, self.config().head_dim());
        let x = self.graph.reshape(x, &[batch, h, len, dh])?;
        let x = self.graph.swap_axes_1_2(x)?;
        self.graph.reshape(x, &[batch * len, h * dh])
    }

    /// Multi-head attention block named by `prefix` (holds wq/bq .. wo/bo).
    fn attention(
        &mut self,
        prefix: &str,
        q_in: TensorId,
        kv_in: TensorId,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        mask_bias: Vec<T>,
    ) -> Result<TensorId> {
        let h = self.config().num_heads;
        let dh = self.config().head_dim();
        let q = self.project(q_in, &format!("{}.wq", prefix), &format!("{}.bq", prefix))?;
        let k = self.project(kv_in, &format!("{}.wk", prefix), &format!("{}.bk", prefix))?;
        let v = self.project(kv_in, &format!("{}.wv", prefix), &format!("{}.bv", prefix))?;
        let q = self.split_heads(q, batch, q_len)?;
        let k = self.split_heads(k, batch, kv_len)?;
        let v = self.split_heads(v, batch, kv_len)?;
        let scores = self.graph.bmm_nt(q, k)?;
        let scores = self.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let bias = self.graph.constant(mask_bias, &[batch * h, q_len, kv_len])?;
        let scores = self.graph.add(scores, bias)?;
        let attn = self.graph.softmax(scores, 2)?;
        let ctx = self.graph.bmm(attn, v)?;
        let ctx = self.merge_heads(ctx, batch, q_len)?;
        self.project(ctx, &format!("{}.wo", prefix), &format!("{}.bo", prefix))
    }

    fn residual_norm(&mut self, x: TensorId, sublayer: TensorId, ln: &str) -> Result<TensorId> {
        let sublayer = self.maybe_dropout(sublayer)?;
        let y = self.graph.add(x, sublayer)?;
        let gain = self.p(&format!("{}.gain", ln));
        let bias = self.p(&format!("{}.bias", ln));
        self.graph.layer_norm(y, gain, bias, LN_EPS)
    }

    fn feedforward(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let h = self.project(x, &format!("{}.w1", prefix), &format!("{}.b1", prefix))?;
        let h = self.graph.relu(h)?;
        self.project(h, &format!("{}.w2", prefix), &format!("{}.b2", prefix))
    }

    fn key_padding_bias(&self, batch: usize, q_len: usize, kv_len: usize, real: &[bool]) -> Vec<T> {
        let heads = self.config().num_heads;
        let neg: T = crate::tensor::real(-1e9);
        let mut bias = vec![T::zero(); batch * heads * q_len * kv_len];
        for b in 0..batch {
            for k in 0..kv_len {
                if real[b * kv_len + k] {
                    continue;
                }
                for h in 0..heads {
                    let base = ((b * heads + h) * q_len) * kv_len + k;
                    for q in 0..q_len {
                        bias[base + q * kv_len] = neg;
                    }
                }
            }
        }
        bias
    }

    fn causal_bias(&self, batch: usize, len: usize) -> Vec<T> {
        let heads = self.config().num_heads;
        let neg: T = crate::tensor::real(-1e9);
        let mut bias = vec![T::zero(); batch * heads * len * len];
        for g in 0..batch * heads {
            for q in 0..len {
                for k in (q + 1)..len {
                    bias[(g * len + q) * len + k] = neg;
                }
            }
        }
        bias
    }

    fn pad_flat(seqs: &[&[usize]], len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut flat = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            flat.extend_from_slice(s);
            flat.extend(std::iter::repeat(PAD_ID).take(len - s.len()));
            mask.extend(std::iter::repeat(true).take(s.len()));
            mask.extend(std::iter::repeat(false).take(len - s.len()));
        }
        (flat, mask)
    }

    /// Encodes a batch of contexts; hidden row count per item equals the
    /// padded source length.
    pub fn encode_batch(&mut self, contexts: &[&[usize]]) -> Result<EncoderState> {
        self.validate_sequences(contexts, "context", self.config().max_sequence_length)?;
        let batch = contexts.len();
        let src_len = contexts.iter().map(|c| c.len()).max().unwrap();
        let (flat, src_mask) = Self::pad_flat(contexts, src_len);

        let mut x = self.embed_positions(&flat, batch, src_len)?;
        for i in 0..self.config().num_encoder_layers {
            let bias = self.key_padding_bias(batch, src_len, src_len, &src_mask);
            let a = self.attention(&format!("enc{}.attn", i), x, x, batch, src_len, src_len, bias)?;
            x = self.residual_norm(x, a, &format!("enc{}.ln1", i))?;
            let f = self.feedforward(x, &format!("enc{}.ffn", i))?;
            x = self.residual_norm(x, f, &format!("enc{}.ln2", i))?;
        }
        Ok(EncoderState { hidden: x, batch, src_len, src_mask })
    }

    /// Single-context wrapper around `encode_batch`.
    pub fn encode(&mut self, context: &[usize]) -> Result<EncoderState> {
        self.encode_batch(&[context])
    }

    fn decoder_hidden(
        &mut self,
        enc: &EncoderState,
        dec_flat: &[usize],
        dec_len: usize,
    ) -> Result<TensorId> {
        let batch = enc.batch;
        let mut x = self.embed_positions(dec_flat, batch, dec_len)?;
        for i in 0..self.config().num_decoder_layers {
            let causal = self.causal_bias(batch, dec_len);
            let a = self.attention(&format!("dec{}.self", i), x, x, batch, dec_len, dec_len, causal)?;
            x = self.residual_norm(x, a, &format!("dec{}.ln1", i))?;
            let bias = self.key_padding_bias(batch, dec_len, enc.src_len, &enc.src_mask);
            let c = self.attention(
                &format!("dec{}.cross", i),
                x,
                enc.hidden,
                batch,
                dec_len,
                enc.src_len,
                bias,
            )?;
            x = self.residual_norm(x, c, &format!("dec{}.ln2", i))?;
            let f = self.feedforward(x, &format!("dec{}.ffn", i))?;
            x = self.residual_norm(x, f, &format!("dec{}.ln3", i))?;
        }
        self.graph.matmul_nt(x, self.p("embedding"))
    }

    /// Distribution over the next token after `prefix` (which must start
    /// with BOS), length V, sums to 1.
    pub fn decode_step(&mut self, prefix: &[usize], enc: &EncoderState) -> Result<Vec<T>> {
        if enc.batch != 1 {
            return Err(Error::contract("decode_step", "needs a single-context encoder state"));
        }
        if prefix.is_empty() {
            return Err(Error::contract("decode_step", "empty prefix"));
        }
        if prefix[0] != BOS_ID {
            return Err(Error::contract(
                "decode_step",
                format!("prefix must start with BOS id {}, got {}", BOS_ID, prefix[0]),
            ));
        }
        self.validate_sequences(&[prefix], "prefix", self.config().max_sequence_length)?;
        let logits = self.decoder_hidden(enc, prefix, prefix.len())?;
        let probs = self.graph.softmax(logits, 1)?;
        let vocab = self.config().vocab_size;
        let vals = self.graph.values(probs);
        Ok(vals[(prefix.len() - 1) * vocab..prefix.len() * vocab].to_vec())
    }

    /// Decoder inputs are BOS then `inputs[i]`; loss targets are
    /// `targets[i]` then EOS. Padded rows carry zero loss weight.
    pub fn forward_mixed_batch(
        &mut self,
        contexts: &[&[usize]],
        inputs: &[&[usize]],
        targets: &[&[usize]],
    ) -> Result<TeacherBatch> {
        if inputs.len() != targets.len() || contexts.len() != targets.len() {
            return Err(Error::contract(
                "forward",
                format!(
                    "batch sides disagree: {} contexts, {} inputs, {} targets",
                    contexts.len(),
                    inputs.len(),
                    targets.len()
                ),
            ));
        }
        for (i, (inp, tgt)) in inputs.iter().zip(targets).enumerate() {
            if inp.len() != tgt.len() {
                return Err(Error::contract(
                    "forward",
                    format!("pair {}: {} input tokens vs {} targets", i, inp.len(), tgt.len()),
                ));
            }
        }
        self.validate_sequences(inputs, "response", self.config().max_sequence_length - 1)?;
        self.validate_sequences(targets, "target", self.config().max_sequence_length - 1)?;

        let enc = self.encode_batch(contexts)?;
        let batch = contexts.len();
        let dec_len = inputs.iter().map(|r| r.len()).max().unwrap() + 1;
        let mut dec_flat = Vec::with_capacity(batch * dec_len);
        let mut tgt_flat = Vec::with_capacity(batch * dec_len);
        let mut weights = Vec::with_capacity(batch * dec_len);
        let mut token_count = 0usize;
        for (inp, tgt) in inputs.iter().zip(targets) {
            dec_flat.push(BOS_ID);
            dec_flat.extend_from_slice(inp);
            dec_flat.extend(std::iter::repeat(PAD_ID).take(dec_len - 1 - inp.len()));
            tgt_flat.extend_from_slice(tgt);
            tgt_flat.push(EOS_ID);
            tgt_flat.extend(std::iter::repeat(PAD_ID).take(dec_len - 1 - tgt.len()));
            let real_rows = tgt.len() + 1;
            weights.extend(std::iter::repeat(T::one()).take(real_rows));
            weights.extend(std::iter::repeat(T::zero()).take(dec_len - real_rows));
            token_count += real_rows;
        }
        let logits = self.decoder_hidden(&enc, &dec_flat, dec_len)?;
        let nll = self.graph.cross_entropy_weighted(logits, &tgt_flat, &weights)?;
        Ok(TeacherBatch {
            logits,
            nll,
            batch,
            dec_len,
            token_count,
            targets: tgt_flat,
            row_weights: weights.iter().map(|w| w.to_f64().unwrap_or(0.0)).collect(),
        })
    }

    /// Ground-truth-fed forward: decoder inputs and loss targets are both
    /// the response.
    pub fn forward_teacher_batch(
        &mut self,
        contexts: &[&[usize]],
        responses: &[&[usize]],
    ) -> Result<TeacherBatch> {
        self.forward_mixed_batch(contexts, responses, responses)
    }

    /// Single-pair teacher forward returning the per-step distributions and
    /// the summed negative log-likelihood.
    pub fn forward_teacher(
        &mut self,
        context: &[usize],
        response: &[usize],
    ) -> Result<(Vec<Vec<T>>, T)> {
        let fwd = self.forward_teacher_batch(&[context], &[response])?;
        let probs = self.graph.softmax(fwd.logits, 1)?;
        let vocab = self.config().vocab_size;
        let dists = self
            .graph
            .values(probs)
            .chunks_exact(vocab)
            .map(<[T]>::to_vec)
            .collect();
        Ok((dists, self.graph.scalar_value(fwd.nll)?))
    }

    /// Single-pair mixed-input forward; returns total nll against `targets`.
    pub fn forward_mixed(
        &mut self,
        context: &[usize],
        inputs: &[usize],
        targets: &[usize],
    ) -> Result<T> {
        let fwd = self.forward_mixed_batch(&[context], &[inputs], &[targets])?;
        self.graph.scalar_value(fwd.nll)
    }
}

/// Length-normalized hypothesis score: total log-probability divided by
/// the number of scored emissions (EOS included) raised to `penalty`.
pub fn hypothesis_score(logprob: f64, scored_tokens: usize, penalty: f64) -> f64 {
    if scored_tokens == 0 {
        return f64::NEG_INFINITY;
    }
    logprob / (scored_tokens as f64).powf(penalty)
}

struct Candidate {
    tokens: Vec<usize>,
    logprob: f64,
    /// Emission count including the terminating EOS when present.
    scored: usize,
}

impl<T: Real> Model<T> {
    fn emission_cap(&self, max_len: usize) -> usize {
        max_len.min(self.config.max_sequence_length - 1)
    }

    fn greedy_candidate(&self, context: &[usize], max_len: usize) -> Result<Candidate> {
        let mut session = self.session(false, 0);
        let enc = session.encode(context)?;
        let mut prefix = vec![BOS_ID];
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let cap = self.emission_cap(max_len);
        for _ in 0..cap {
            let probs = session.decode_step(&prefix, &enc)?;
            let (tok, p) = argmax_generation(&probs);
            logprob += p.max(f64::MIN_POSITIVE).ln();
            if tok == EOS_ID {
                return Ok(Candidate { tokens, logprob, scored: prefix.len() });
            }
            tokens.push(tok);
            prefix.push(tok);
        }
        Ok(Candidate { tokens, logprob, scored: cap })
    }

    /// Feeds the model its own argmax predictions until EOS or `max_len`
    /// emissions; the returned sequence contains neither BOS nor EOS.
    pub fn generate_greedy(&self, context: &[usize], max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("generate", "max_len must be at least 1"));
        }
        Ok(self.greedy_candidate(context, max_len)?.tokens)
    }

    pub fn generate_beam(
        &self,
        context: &[usize],
        beam_width: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<Vec<usize>> {
        Ok(self.beam_candidate(context, beam_width, max_len, length_penalty)?.tokens)
    }

    /// Beam output together with its length-normalized score; the score of
    /// the pure greedy rollout never exceeds it.
    pub fn generate_beam_scored(
        &self,
        context: &[usize],
        beam_width: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<(Vec<usize>, f64)> {
        let c = self.beam_candidate(context, beam_width, max_len, length_penalty)?;
        Ok((c.tokens, hypothesis_score(c.logprob, c.scored, length_penalty)))
    }

    pub fn generate_greedy_scored(
        &self,
        context: &[usize],
        max_len: usize,
        length_penalty: f64,
    ) -> Result<(Vec<usize>, f64)> {
        if max_len == 0 {
            return Err(Error::contract("generate", "max_len must be at least 1"));
        }
        let c = self.greedy_candidate(context, max_len)?;
        Ok((c.tokens, hypothesis_score(c.logprob, c.scored, length_penalty)))
    }

    fn beam_candidate(
        &self,
        context: &[usize],
        beam_width: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<Candidate> {
        if beam_width == 0 {
            return Err(Error::contract("generate", "beam_width must be at least 1"));
        }
        if max_len == 0 {
            return Err(Error::contract("generate", "max_len must be at least 1"));
        }
        let mut session = self.session(false, 0);
        let enc = session.encode(context)?;
        let cap = self.emission_cap(max_len);

        // The greedy rollout seeds the pool, so the search result can only
        // score equal or better.
        let mut pool = vec![self.greedy_candidate(context, max_len)?];
        let mut frontier = vec![Candidate { tokens: Vec::new(), logprob: 0.0, scored: 0 }];
        for _ in 0..cap {
            if frontier.is_empty() {
                break;
            }
            let mut expansions: Vec<Candidate> = Vec::new();
            for hyp in &frontier {
                let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
                prefix.push(BOS_ID);
                prefix.extend_from_slice(&hyp.tokens);
                let probs = session.decode_step(&prefix, &enc)?;
                for (tok, p) in probs.iter().enumerate() {
                    if tok == PAD_ID || tok == BOS_ID {
                        continue;
                    }
                    let p = p.to_f64().unwrap_or(0.0);
                    let mut tokens = hyp.tokens.clone();
                    if tok != EOS_ID {
                        tokens.push(tok);
                    }
                    expansions.push(Candidate {
                        tokens,
                        logprob: hyp.logprob + p.max(f64::MIN_POSITIVE).ln(),
                        scored: hyp.scored + 1,
                    });
                }
            }
            // Keep the top beam_width continuations overall; completed ones
            // retire to the pool. With width 1 this reproduces the greedy
            // argmax walk exactly.
            expansions.sort_by(|a, b| {
                b.logprob
                    .partial_cmp(&a.logprob)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            expansions.truncate(beam_width);
            frontier = Vec::new();
            for cand in expansions {
                if cand.scored == cand.tokens.len() + 1 {
                    pool.push(cand);
                } else {
                    frontier.push(cand);
                }
            }
        }
        pool.extend(frontier);

        let mut best: Option<Candidate> = None;
        for cand in pool {
            let score = hypothesis_score(cand.logprob, cand.scored, length_penalty);
            let better = match &best {
                None => true,
                Some(b) => {
                    let bscore = hypothesis_score(b.logprob, b.scored, length_penalty);
                    score > bscore || (score == bscore && cand.tokens < b.tokens)
                }
            };
            if better {
                best = Some(cand);
            }
        }
        Ok(best.expect("pool always holds the greedy candidate"))
    }
}

/// Argmax over generable tokens: PAD and BOS can never be emitted; ties
/// resolve to the lowest id.
fn argmax_generation<T: Real>(probs: &[T]) -> (usize, f64) {
    let mut best = EOS_ID;
    let mut best_p = f64::NEG_INFINITY;
    for (tok, p) in probs.iter().enumerate() {
        if tok == PAD_ID || tok == BOS_ID {
            continue;
        }
        let p = p.to_f64().unwrap_or(f64::NEG_INFINITY);
        if p > best_p {
            best_p = p;
            best = tok;
        }
    }
    (best, best_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamState;

    fn config(vocab: usize, dim: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            model_dim: dim,
            num_heads: 2,
            num_encoder_layers: layers,
            num_decoder_layers: layers,
            feedforward_dim: dim * 2,
            max_sequence_length: 12,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn encoder_hidden_has_one_row_per_token() {
        let model: Model<f32> = Model::new(config(12, 8, 1), 1).unwrap();
        let mut s = model.session(false, 0);
        let enc = s.encode(&[4, 5, 6, 7]).unwrap();
        assert_eq!(s.graph.shape(enc.hidden), &[4, 8]);
        assert_eq!(enc.src_mask, vec![true; 4]);
    }

    #[test]
    fn encoding_is_deterministic_and_position_sensitive() {
        let model: Model<f32> = Model::new(config(12, 8, 1), 2).unwrap();
        let mut a = model.session(false, 0);
        let enc_a = a.encode(&[4, 5, 6]).unwrap();
        let ha = a.graph.values(enc_a.hidden).to_vec();
        let mut b = model.session(false, 9);
        let enc_b = b.encode(&[4, 5, 6]).unwrap();
        let hb = b.graph.values(enc_b.hidden).to_vec();
        assert_eq!(ha, hb);

        let mut c = model.session(false, 0);
        let enc_c = c.encode(&[6, 5, 4]).unwrap();
        let hc = c.graph.values(enc_c.hidden).to_vec();
        assert!(ha.iter().zip(&hc).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model: Model<f32> = Model::new(config(12, 8, 1), 3).unwrap();
        let mut s = model.session(false, 0);
        assert!(s.encode(&[]).is_err());
        assert!(s.encode(&[4; 13]).is_err());
        assert!(s.encode(&[4, 99]).is_err());
        let enc = s.encode(&[4, 5]).unwrap();
        assert!(s.decode_step(&[], &enc).is_err());
        assert!(s.decode_step(&[4, 5], &enc).is_err(), "prefix must start with BOS");
        assert!(s.forward_mixed(&[4], &[5, 6], &[5]).is_err());
    }

    #[test]
    fn decode_step_returns_a_distribution() {
        let model: Model<f64> = Model::new(config(64, 8, 1), 4).unwrap();
        let mut s = model.session(false, 0);
        let enc = s.encode(&[4, 5]).unwrap();
        let probs = s.decode_step(&[BOS_ID, 6], &enc).unwrap();
        assert_eq!(probs.len(), 64);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
        let max = probs.iter().cloned().fold(0.0, f64::max);
        assert!(max < 0.5, "untrained model should stay spread out, max {}", max);
    }

    #[test]
    fn joint_rows_match_stepwise_prefixes() {
        let model: Model<f64> = Model::new(config(14, 8, 2), 5).unwrap();
        let context = [4, 5, 6];
        let response = [7, 8, 9, 10];
        let mut joint = model.session(false, 0);
        let (dists, _) = joint.forward_teacher(&context, &response).unwrap();
        assert_eq!(dists.len(), response.len() + 1);
        for t in 0..dists.len() {
            let mut prefix = vec![BOS_ID];
            prefix.extend_from_slice(&response[..t]);
            let mut step = model.session(false, 0);
            let enc = step.encode(&context).unwrap();
            let probs = step.decode_step(&prefix, &enc).unwrap();
            for (a, b) in dists[t].iter().zip(&probs) {
                assert!((a - b).abs() < 1e-6, "row {} diverged: {} vs {}", t, a, b);
            }
        }
    }

    #[test]
    fn untrained_nll_is_near_uniform() {
        let model: Model<f32> = Model::new(config(20, 16, 1), 6).unwrap();
        let mut s = model.session(false, 0);
        let (_, nll) = s.forward_teacher(&[4, 5, 6], &[7, 8, 9]).unwrap();
        let per_token = nll as f64 / 4.0;
        assert!((per_token - (20f64).ln()).abs() < 0.2, "per-token nll {}", per_token);
    }

    #[test]
    fn nll_matches_returned_distributions() {
        let model: Model<f64> = Model::new(config(14, 8, 1), 7).unwrap();
        let response = [7, 8, 9];
        let mut s = model.session(false, 0);
        let (dists, nll) = s.forward_teacher(&[4, 5], &response).unwrap();
        let mut expected = 0.0;
        for (t, dist) in dists.iter().enumerate() {
            let target = if t < response.len() { response[t] } else { EOS_ID };
            expected -= dist[target].ln();
        }
        assert!((nll - expected).abs() < 1e-9, "{} vs {}", nll, expected);
    }

    #[test]
    fn mixed_equal_to_gold_is_bit_identical_to_teacher() {
        let model: Model<f32> = Model::new(config(14, 8, 2), 8).unwrap();
        let context = [4, 5, 6];
        let gold = [7, 8, 9, 10];
        let mut a = model.session(false, 0);
        let na = a.forward_mixed(&context, &gold, &gold).unwrap();
        let mut b = model.session(false, 0);
        let (_, nb) = b.forward_teacher(&context, &gold).unwrap();
        assert_eq!(na.to_bits(), nb.to_bits());
    }

    #[test]
    fn copied_embedding_rows_are_interchangeable_inputs() {
        let mut model: Model<f64> = Model::new(config(14, 8, 1), 9).unwrap();
        let dim = model.config.model_dim;
        let emb = model.param_values_mut("embedding").unwrap();
        let row7: Vec<f64> = emb[7 * dim..8 * dim].to_vec();
        emb[11 * dim..12 * dim].copy_from_slice(&row7);

        let context = [4, 5];
        let gold = [7, 8];
        let synonym = [11, 8];
        let mut a = model.session(false, 0);
        let na = a.forward_mixed(&context, &gold, &gold).unwrap();
        let mut b = model.session(false, 0);
        let nb = b.forward_mixed(&context, &synonym, &gold).unwrap();
        assert!((na - nb).abs() < 1e-6, "{} vs {}", na, nb);
    }

    #[test]
    fn batch_padding_never_leaks_into_real_rows() {
        let model: Model<f64> = Model::new(config(14, 8, 2), 10).unwrap();
        let ctx_a: &[usize] = &[4, 5, 6, 7];
        let ctx_b: &[usize] = &[8, 9];
        let resp_a: &[usize] = &[10, 11, 12];
        let resp_b: &[usize] = &[13];

        let mut batched = model.session(false, 0);
        let fwd = batched.forward_teacher_batch(&[ctx_a, ctx_b], &[resp_a, resp_b]).unwrap();
        let vocab = model.config.vocab_size;
        let batched_logits = batched.graph.values(fwd.logits).to_vec();
        let nll_batched = batched.graph.scalar_value(fwd.nll).unwrap();

        let mut nll_single = 0.0;
        for (i, (ctx, resp)) in [(ctx_a, resp_a), (ctx_b, resp_b)].iter().enumerate() {
            let mut single = model.session(false, 0);
            let sf = single.forward_teacher_batch(&[ctx], &[resp]).unwrap();
            let single_logits = single.graph.values(sf.logits);
            for t in 0..resp.len() + 1 {
                let brow = &batched_logits[(i * fwd.dec_len + t) * vocab..][..vocab];
                let srow = &single_logits[t * vocab..][..vocab];
                assert_eq!(brow, srow, "pair {} row {} differs under batching", i, t);
            }
            nll_single += single.graph.scalar_value(sf.nll).unwrap();
        }
        assert!((nll_batched - nll_single).abs() < 1e-12);
        assert_eq!(fwd.token_count, resp_a.len() + resp_b.len() + 2);
    }

    #[test]
    fn feeding_a_token_routes_input_gradient_to_its_row() {
        let model: Model<f64> = Model::new(config(14, 8, 1), 11).unwrap();
        let dim = model.config.model_dim;
        let grads_for = |inputs: &[usize]| {
            let mut s = model.session(true, 0);
            let fwd = s.forward_mixed_batch(&[&[4, 5]], &[inputs], &[&[7, 8]]).unwrap();
            s.graph.backward(fwd.nll).unwrap();
            s.param_gradients().unwrap()[0].clone()
        };
        let teacher = grads_for(&[7, 8]);
        let mixed = grads_for(&[12, 8]);
        let row = |g: &[f64], i: usize| g[i * dim..(i + 1) * dim].to_vec();
        assert_ne!(row(&teacher, 12), row(&mixed, 12), "fed row must receive input gradient");
        assert_ne!(row(&teacher, 7), row(&mixed, 7), "unfed gold row loses its input share");
    }

    #[test]
    fn gradients_match_finite_differences_on_small_model() {
        let cfg = ModelConfig {
            vocab_size: 20,
            model_dim: 16,
            num_heads: 2,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            feedforward_dim: 32,
            max_sequence_length: 8,
            dropout_rate: 0.0,
        };
        let mut model: Model<f64> = Model::new(cfg, 12).unwrap();
        let context = [4, 5, 6];
        let response = [7, 8, 9];

        let mut s = model.session(true, 0);
        let fwd = s.forward_teacher_batch(&[&context], &[&response]).unwrap();
        s.graph.backward(fwd.nll).unwrap();
        let analytic = s.param_gradients().unwrap();
        drop(s);

        let loss = |m: &Model<f64>| -> f64 {
            let mut s = m.session(false, 0);
            let fwd = s.forward_teacher_batch(&[&context], &[&response]).unwrap();
            s.graph.scalar_value(fwd.nll).unwrap()
        };
        let h = 1e-5;
        let names: Vec<String> = model.param_names().to_vec();
        for (pi, name) in names.iter().enumerate() {
            let len = model.param(name).unwrap().1.len();
            for j in 0..len {
                let orig = model.param(name).unwrap().1[j];
                model.param_values_mut(name).unwrap()[j] = orig + h;
                let up = loss(&model);
                model.param_values_mut(name).unwrap()[j] = orig - h;
                let down = loss(&model);
                model.param_values_mut(name).unwrap()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[pi][j];
                assert!(
                    (a - fd).abs() < 1e-8 + 1e-5 * a.abs().max(fd.abs()),
                    "{}[{}]: analytic {} vs finite difference {}",
                    name,
                    j,
                    a,
                    fd
                );
            }
        }
    }

    #[test]
    fn single_pair_overfit_reproduces_the_response() {
        let mut model: Model<f32> = Model::new(config(12, 16, 1), 13).unwrap();
        let context: &[usize] = &[4, 5, 6];
        let response: &[usize] = &[7, 8, 9, 10];
        let mut adam = AdamState::new(&model.param_lengths(), 5e-3);
        let mut final_nll = f32::INFINITY;
        for step in 0..200 {
            let mut s = model.session(true, step);
            let fwd = s.forward_teacher_batch(&[context], &[response]).unwrap();
            final_nll = s.graph.scalar_value(fwd.nll).unwrap();
            s.graph.backward(fwd.nll).unwrap();
            let grads = s.param_gradients().unwrap();
            drop(s);
            model.apply_adam(&grads, &mut adam).unwrap();
        }
        let per_token = final_nll / (response.len() + 1) as f32;
        assert!(per_token < 0.1, "per-token nll after overfit: {}", per_token);

        let out = model.generate_greedy(context, 8).unwrap();
        assert_eq!(out, response);
        let again = model.generate_greedy(context, 8).unwrap();
        assert_eq!(again, out, "greedy decoding must be deterministic");
        assert!(out.len() <= 8);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for seed in [1u64, 2, 3, 4] {
            let model: Model<f32> = Model::new(config(16, 8, 1), seed).unwrap();
            let context = [4, 5, 6];
            let greedy = model.generate_greedy(&context, 6).unwrap();
            let beam = model.generate_beam(&context, 1, 6, 1.0).unwrap();
            assert_eq!(beam, greedy, "seed {}", seed);
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        for seed in [5u64, 6, 7] {
            let model: Model<f32> = Model::new(config(16, 8, 1), seed).unwrap();
            let context = [4, 5];
            for width in [2usize, 3, 5] {
                let (_, gs) = model.generate_greedy_scored(&context, 6, 1.0).unwrap();
                let (_, bs) = model.generate_beam_scored(&context, width, 6, 1.0).unwrap();
                assert!(bs >= gs - 1e-12, "seed {} width {}: beam {} < greedy {}", seed, width, bs, gs);
            }
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        // Vocab 5 leaves three generable tokens (EOS, UNK, 4): the beam at
        // width 27 retains every incomplete prefix, so it must agree with
        // brute force over all emission sequences up to length 3.
        let cfg = ModelConfig {
            vocab_size: 5,
            num_heads: 1,
            model_dim: 8,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            feedforward_dim: 16,
            max_sequence_length: 6,
            dropout_rate: 0.0,
        };
        for seed in [21u64, 22, 23] {
            let model: Model<f64> = Model::new(cfg.clone(), seed).unwrap();
            let context = [4, 4];
            let max_len = 3;
            let penalty = 0.7;

            let mut session = model.session(false, 0);
            let enc = session.encode(&context).unwrap();
            let mut best: Option<(Vec<usize>, f64)> = None;
            let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
            while let Some((tokens, logprob)) = stack.pop() {
                let mut prefix = vec![BOS_ID];
                prefix.extend_from_slice(&tokens);
                let probs = session.decode_step(&prefix, &enc).unwrap();
                for tok in [EOS_ID, UNK, 4usize] {
                    let lp = logprob + probs[tok].ln();
                    if tok == EOS_ID {
                        consider(&mut best, tokens.clone(), lp, tokens.len() + 1, penalty);
                    } else {
                        let mut longer = tokens.clone();
                        longer.push(tok);
                        if longer.len() == max_len {
                            consider(&mut best, longer, lp, max_len, penalty);
                        } else {
                            stack.push((longer, lp));
                        }
                    }
                }
            }
            let (oracle_tokens, _) = best.unwrap();
            let beam = model.generate_beam(&context, 27, max_len, penalty).unwrap();
            assert_eq!(beam, oracle_tokens, "seed {}", seed);
        }
    }

    const UNK: usize = super::super::UNK_ID;

    fn consider(
        best: &mut Option<(Vec<usize>, f64)>,
        tokens: Vec<usize>,
        logprob: f64,
        scored: usize,
        penalty: f64,
    ) {
        let score = hypothesis_score(logprob, scored, penalty);
        let replace = match best {
            None => true,
            Some((btoks, bscore)) => score > *bscore || (score == *bscore && tokens < *btoks),
        };
        if replace {
            *best = Some((tokens, score));
        }
    }
}
