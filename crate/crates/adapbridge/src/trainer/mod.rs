//! Training harness: config parsing, batching, the epoch loop, and logs.
//!
//! A run is fully determined by its config (seed included): corpus
//! preparation, shuffling, gate draws, and dropout all derive their rng
//! streams from the one seed, and every iteration order is fixed, so two
//! identical configs produce bit-identical checkpoints and logs (the
//! wall-time column aside).

mod eval;

pub use eval::{compare, decode_lines, evaluate, CompareOutcome, EvalOptions};

use crate::corpus::{
    build_vocab, encode_corpus, load_corpus, split, synth_corpus, DialoguePair, SynthParams,
    TextDialogue, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::sampler::{
    argmax_rows, samfun_adapbridge, samfun_scheduled, samfun_teacher, Strategy,
};
use crate::schedule::{adap_alpha, adap_beta, ss_decay_alpha, ScheduleParams};
use crate::tensor::AdamState;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

/// Whether schedules advance once per epoch or once per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

impl FromStr for ScheduleUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(ScheduleUnit::Epoch),
            "step" => Ok(ScheduleUnit::Step),
            other => Err(Error::Config(format!(
                "schedule.unit must be epoch or step, got {:?}",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synth(SynthParams),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub schedule_unit: ScheduleUnit,
    pub strategy: Strategy,
    pub epochs: usize,
    /// Upper bound on decoder rows (targets plus their EOS row) per batch.
    pub batch_tokens: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub data: DataSource,
    pub split_ratios: [f64; 3],
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                vocab_size: 256,
                model_dim: 64,
                num_heads: 4,
                num_encoder_layers: 2,
                num_decoder_layers: 2,
                feedforward_dim: 128,
                max_sequence_length: 24,
                dropout_rate: 0.1,
            },
            schedule: ScheduleParams::default(),
            schedule_unit: ScheduleUnit::Epoch,
            strategy: Strategy::Adapbridge,
            epochs: 40,
            batch_tokens: 1024,
            learning_rate: 1e-3,
            seed: 7,
            checkpoint: PathBuf::from("adapbridge.ckpt"),
            log: None,
            data: DataSource::Synth(SynthParams::default()),
            split_ratios: [0.8, 0.1, 0.1],
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn log_path(&self) -> PathBuf {
        self.log
            .clone()
            .unwrap_or_else(|| self.checkpoint.with_extension("log"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_tokens < 2 {
            return Err(Error::Config("train.batch_tokens must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Flat `section.key = value` configuration, sourced from a file and
/// command-line overrides of the same dotted names.
#[derive(Clone, Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut map = ConfigMap::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected `key = value`, got {:?}",
                path.display(),
                i + 1,
                line
            )))?;
            map.entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {:?} is not of the form key=value", assignment))
        })?;
        self.entries.insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_parsed<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{} = {:?}: {}", key, raw, e))),
        }
    }

    /// Builds the final config; every key must be consumed, so typos fail
    /// loudly instead of silently keeping a default.
    pub fn into_config(mut self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let m = &mut cfg.model;
        if let Some(v) = self.take_parsed("model.vocab_size")? {
            m.vocab_size = v;
        }
        if let Some(v) = self.take_parsed("model.model_dim")? {
            m.model_dim = v;
        }
        if let Some(v) = self.take_parsed("model.num_heads")? {
            m.num_heads = v;
        }
        if let Some(v) = self.take_parsed("model.num_encoder_layers")? {
            m.num_encoder_layers = v;
        }
        if let Some(v) = self.take_parsed("model.num_decoder_layers")? {
            m.num_decoder_layers = v;
        }
        if let Some(v) = self.take_parsed("model.feedforward_dim")? {
            m.feedforward_dim = v;
        }
        if let Some(v) = self.take_parsed("model.max_sequence_length")? {
            m.max_sequence_length = v;
        }
        if let Some(v) = self.take_parsed("model.dropout_rate")? {
            m.dropout_rate = v;
        }

        let k = self.take_parsed("schedule.k")?.unwrap_or(cfg.schedule.k);
        let w = self.take_parsed("schedule.w")?.unwrap_or(cfg.schedule.w);
        let gamma = self.take_parsed("schedule.gamma")?.unwrap_or(cfg.schedule.gamma);
        cfg.schedule = ScheduleParams::new(k, w, gamma)?;
        if let Some(v) = self.take_parsed("schedule.unit")? {
            cfg.schedule_unit = v;
        }

        if let Some(v) = self.take_parsed("train.strategy")? {
            cfg.strategy = v;
        }
        if let Some(v) = self.take_parsed("train.epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.take_parsed("train.batch_tokens")? {
            cfg.batch_tokens = v;
        }
        if let Some(v) = self.take_parsed("train.learning_rate")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.take_parsed("train.seed")? {
            cfg.seed = v;
        }
        if let Some(v) = self.take("train.checkpoint") {
            cfg.checkpoint = PathBuf::from(v);
        }
        if let Some(v) = self.take("train.log") {
            cfg.log = Some(PathBuf::from(v));
        }

        let corpus_path = self.take("data.corpus");
        let mut synth = SynthParams::default();
        let mut synth_touched = false;
        if let Some(v) = self.take_parsed("synth.num_contexts")? {
            synth.num_contexts = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.responses_per_context")? {
            synth.responses_per_context = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.context_pool")? {
            synth.context_pool = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.context_len")? {
            synth.context_len = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.common_pool")? {
            synth.common_pool = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.stem_len")? {
            synth.stem_len = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.specific_pool")? {
            synth.specific_pool = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.hot_stems")? {
            synth.hot_stems = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.hot_frac")? {
            synth.hot_frac = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.response_len_min")? {
            synth.response_len.0 = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.response_len_max")? {
            synth.response_len.1 = v;
            synth_touched = true;
        }
        if let Some(v) = self.take_parsed("synth.seed")? {
            synth.seed = v;
            synth_touched = true;
        }
        match corpus_path {
            Some(path) => {
                if synth_touched {
                    return Err(Error::Config(
                        "data.corpus and synth.* keys are mutually exclusive".into(),
                    ));
                }
                cfg.data = DataSource::File(PathBuf::from(path));
            }
            None => cfg.data = DataSource::Synth(synth),
        }
        if let Some(v) = self.take("data.split") {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "data.split needs three comma-separated ratios, got {:?}",
                    v
                )));
            }
            for (slot, part) in cfg.split_ratios.iter_mut().zip(parts) {
                *slot = part.trim().parse().map_err(|_| {
                    Error::Config(format!("data.split ratio {:?} is not a number", part))
                })?;
            }
        }

        if let Some(v) = self.take_parsed("eval.beam_width")? {
            cfg.eval.beam_width = v;
        }
        if let Some(v) = self.take_parsed("eval.greedy")? {
            cfg.eval.greedy = v;
        }
        if let Some(v) = self.take_parsed("eval.max_decode_len")? {
            cfg.eval.max_decode_len = v;
        }
        if let Some(v) = self.take_parsed("eval.length_penalty")? {
            cfg.eval.length_penalty = v;
        }

        if let Some(key) = self.entries.keys().next() {
            return Err(Error::Config(format!("unknown config key {:?}", key)));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    /// Similarity threshold; only the adaptive strategy has one.
    pub beta: Option<f64>,
    pub mean_train_nll: f64,
    pub replaced_fraction: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn tsv_header() -> &'static str {
        "epoch\talpha\tbeta\tmean_train_nll\treplaced_fraction\twall_seconds"
    }

    pub fn to_tsv_row(&self) -> String {
        let beta = match self.beta {
            Some(b) => b.to_string(),
            None => "-".to_string(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch, self.alpha, beta, self.mean_train_nll, self.replaced_fraction,
            self.wall_seconds
        )
    }

    /// The row with volatile timing removed, for determinism comparisons.
    pub fn deterministic_part(&self) -> String {
        let row = self.to_tsv_row();
        match row.rfind('\t') {
            Some(cut) => row[..cut].to_string(),
            None => row,
        }
    }
}

/// Everything a finished run hands back for evaluation and inspection.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub logs: Vec<EpochLog>,
    pub valid: Vec<DialoguePair>,
    pub test: Vec<DialoguePair>,
    pub best_val_ppl: Option<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent stream seed derived from the run seed.
fn sub_seed(seed: u64, stream: u64, n: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F)) ^ n)
}

/// (context, response) training pairs with sequences cut to model limits.
fn flatten_pairs(groups: &[DialoguePair], max_ctx: usize, max_resp: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut pairs = Vec::new();
    for g in groups {
        let ctx: Vec<usize> = g.context.iter().copied().take(max_ctx).collect();
        if ctx.is_empty() {
            continue;
        }
        for r in &g.responses {
            let resp: Vec<usize> = r.iter().copied().take(max_resp).collect();
            if !resp.is_empty() {
                pairs.push((ctx.clone(), resp.clone()));
            }
        }
    }
    pairs
}

fn truncate_groups(groups: &mut [DialoguePair], max_ctx: usize, max_resp: usize) {
    for g in groups.iter_mut() {
        g.context.truncate(max_ctx);
        for r in g.responses.iter_mut() {
            r.truncate(max_resp);
        }
        g.responses.retain(|r| !r.is_empty());
    }
}

/// Groups pair indices into batches capped by decoder rows; assumes the
/// order given (shuffle first for training).
fn make_batches(lens: &[usize], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut max_rows = 0usize;
    for &idx in order {
        let rows = lens[idx] + 1;
        let new_max = max_rows.max(rows);
        if !current.is_empty() && new_max * (current.len() + 1) > batch_tokens {
            batches.push(std::mem::take(&mut current));
            max_rows = 0;
        }
        max_rows = max_rows.max(rows);
        current.push(idx);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train_groups: Vec<DialoguePair>,
    pub valid: Vec<DialoguePair>,
    pub test: Vec<DialoguePair>,
}

/// Loads or synthesizes the corpus, splits by context, builds the
/// vocabulary on the training split, and encodes everything.
pub fn prepare_data(config: &TrainConfig) -> Result<PreparedData> {
    let corpus: Vec<TextDialogue> = match &config.data {
        DataSource::File(path) => load_corpus(path)?,
        DataSource::Synth(params) => synth_corpus(params)?,
    };
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let split_seed = sub_seed(config.seed, 1, 0);
    let (train_text, valid_text, test_text) = split(corpus, config.split_ratios, split_seed)?;
    if train_text.is_empty() {
        return Err(Error::Config("training split is empty; adjust data.split".into()));
    }
    let vocab = build_vocab(&train_text, config.model.vocab_size)?;
    let max_ctx = config.model.max_sequence_length;
    let max_resp = config.model.max_sequence_length - 1;
    let mut train_groups = encode_corpus(&train_text, &vocab);
    let mut valid = encode_corpus(&valid_text, &vocab);
    let mut test = encode_corpus(&test_text, &vocab);
    truncate_groups(&mut train_groups, max_ctx, max_resp);
    truncate_groups(&mut valid, max_ctx, max_resp);
    truncate_groups(&mut test, max_ctx, max_resp);
    Ok(PreparedData { vocab, train_groups, valid, test })
}

/// Teacher-forced per-token nll over reference pairs, without gradients.
fn forced_nll(model: &Model<f32>, groups: &[DialoguePair], batch_tokens: usize) -> Result<(f64, usize)> {
    let pairs = flatten_pairs(groups, model.config.max_sequence_length, model.config.max_sequence_length - 1);
    let lens: Vec<usize> = pairs.iter().map(|(_, r)| r.len()).collect();
    let order: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for batch in make_batches(&lens, &order, batch_tokens) {
        let contexts: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].0.as_slice()).collect();
        let responses: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].1.as_slice()).collect();
        let mut session = model.session(false, 0);
        let fwd = session.forward_teacher_batch(&contexts, &responses)?;
        total += session.graph.scalar_value(fwd.nll)? as f64;
        tokens += fwd.token_count;
    }
    Ok((total, tokens))
}

/// Schedule values in force for schedule position `n` under `strategy`.
fn schedule_values(strategy: Strategy, n: usize, params: &ScheduleParams) -> Result<(f64, Option<f64>)> {
    match strategy {
        Strategy::Teacher => Ok((0.0, None)),
        Strategy::Scheduled => Ok((ss_decay_alpha(n, params.k)?, None)),
        Strategy::Adapbridge => {
            let alpha = adap_alpha(n, params);
            let beta = adap_beta(alpha, params.gamma)?;
            Ok((alpha, Some(beta)))
        }
    }
}

/// Runs the full training loop, writing the epoch log as it goes and the
/// checkpoint at the end (plus `<checkpoint>.best` at the lowest
/// validation perplexity).
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = prepare_data(config)?;
    let vocab = data.vocab;
    let mut model_cfg = config.model.clone();
    model_cfg.vocab_size = vocab.size();
    let mut model: Model<f32> = Model::new(model_cfg, sub_seed(config.seed, 2, 0))?;
    let mut adam = AdamState::new(&model.param_lengths(), config.learning_rate);

    let pairs = flatten_pairs(
        &data.train_groups,
        config.model.max_sequence_length,
        config.model.max_sequence_length - 1,
    );
    if pairs.is_empty() {
        return Err(Error::Config("no usable training pairs after truncation".into()));
    }
    let lens: Vec<usize> = pairs.iter().map(|(_, r)| r.len()).collect();

    let log_path = config.log_path();
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    writeln!(log_file, "{}", EpochLog::tsv_header())
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let mut logs: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut global_step = 0usize;
    let best_path = best_checkpoint_path(&config.checkpoint);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let epoch_n = match config.schedule_unit {
            ScheduleUnit::Epoch => epoch,
            ScheduleUnit::Step => global_step,
        };
        let (log_alpha, log_beta) = schedule_values(config.strategy, epoch_n, &config.schedule)?;

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 3, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        // Stable sort by length after the shuffle: batches stay dense while
        // the composition of equal-length groups still varies per epoch.
        order.sort_by_key(|&i| lens[i]);
        let batches = make_batches(&lens, &order, config.batch_tokens);

        let mut gate_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 4, epoch as u64));
        let mut epoch_nll = 0.0f64;
        let mut epoch_tokens = 0usize;
        let mut replaced_positions = 0usize;
        let mut total_positions = 0usize;

        for (batch_no, batch) in batches.iter().enumerate() {
            let contexts: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].0.as_slice()).collect();
            let responses: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].1.as_slice()).collect();
            let n = match config.schedule_unit {
                ScheduleUnit::Epoch => epoch,
                ScheduleUnit::Step => global_step,
            };
            let (alpha, beta) = schedule_values(config.strategy, n, &config.schedule)?;

            // Teacher forcing needs no generation pass; the other
            // strategies read generated tokens off an evaluation forward.
            let mixed_inputs: Vec<Vec<usize>> = match config.strategy {
                Strategy::Teacher => responses
                    .iter()
                    .map(|r| samfun_teacher(&[], r).tokens)
                    .collect(),
                Strategy::Scheduled | Strategy::Adapbridge => {
                    let mut eval_session = model.session(false, 0);
                    let fwd = eval_session.forward_teacher_batch(&contexts, &responses)?;
                    let vocab_size = model.config.vocab_size;
                    let logits = eval_session.graph.values(fwd.logits);
                    let mut mixed = Vec::with_capacity(batch.len());
                    for (i, resp) in responses.iter().enumerate() {
                        let rows = &logits[i * fwd.dec_len * vocab_size..][..resp.len() * vocab_size];
                        let gen = argmax_rows(rows, vocab_size);
                        let out = match config.strategy {
                            Strategy::Scheduled => {
                                samfun_scheduled(&gen, resp, alpha, &mut gate_rng)?
                            }
                            Strategy::Adapbridge => {
                                let beta = beta.expect("adaptive strategy always has beta");
                                samfun_adapbridge(
                                    &gen,
                                    resp,
                                    model.embedding(),
                                    model.config.model_dim,
                                    alpha,
                                    beta,
                                    &mut gate_rng,
                                )?
                            }
                            Strategy::Teacher => unreachable!(),
                        };
                        replaced_positions += out.replaced_count();
                        total_positions += resp.len();
                        mixed.push(out.tokens);
                    }
                    mixed
                }
            };
            if config.strategy == Strategy::Teacher {
                total_positions += responses.iter().map(|r| r.len()).sum::<usize>();
            }

            let mixed_refs: Vec<&[usize]> = mixed_inputs.iter().map(Vec::as_slice).collect();
            let dropout_seed = sub_seed(config.seed, 5, (epoch as u64) << 32 | batch_no as u64);
            let mut session = model.session(true, dropout_seed);
            let fwd = session.forward_mixed_batch(&contexts, &mixed_refs, &responses)?;
            let batch_nll = session.graph.scalar_value(fwd.nll)? as f64;
            if !batch_nll.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    message: format!("batch loss became {}", batch_nll),
                });
            }
            session.graph.backward(fwd.nll)?;
            let grads = session.param_gradients()?;
            drop(session);
            model.apply_adam(&grads, &mut adam)?;
            epoch_nll += batch_nll;
            epoch_tokens += fwd.token_count;
            global_step += 1;
        }

        let val_ppl = if data.valid.is_empty() {
            None
        } else {
            let (nll, tokens) = forced_nll(&model, &data.valid, config.batch_tokens)?;
            Some((nll / tokens.max(1) as f64).exp())
        };
        if let Some(ppl) = val_ppl {
            let is_best = best.as_ref().map(|(b, _)| ppl < *b).unwrap_or(true);
            if is_best {
                model.save(&vocab, &best_path)?;
                best = Some((ppl, Vec::new()));
            }
        }

        let row = EpochLog {
            epoch,
            alpha: log_alpha,
            beta: log_beta,
            mean_train_nll: epoch_nll / epoch_tokens.max(1) as f64,
            replaced_fraction: if total_positions == 0 {
                0.0
            } else {
                replaced_positions as f64 / total_positions as f64
            },
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{}", row.to_tsv_row())
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        logs.push(row);
    }

    model.save(&vocab, &config.checkpoint)?;
    if best.is_none() {
        // No validation split: the final model is the best model.
        model.save(&vocab, &best_path)?;
    }
    Ok(TrainOutcome {
        model,
        vocab,
        logs,
        valid: data.valid,
        test: data.test,
        best_val_ppl: best.map(|(p, _)| p),
    })
}

pub fn best_checkpoint_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".best");
    checkpoint.with_file_name(name)
}


#[cfg(test)]
mod tests {
    use super::tests_support::tiny_config;
    use super::*;

    #[test]
    fn config_file_and_overrides_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# toy run\nmodel.model_dim = 16\nmodel.num_heads = 2\ntrain.strategy = scheduled\n\
             train.epochs = 3\nschedule.k = 4\ndata.split = 0.6, 0.2, 0.2\n",
        )
        .unwrap();
        let mut map = ConfigMap::from_file(&path).unwrap();
        map.set("train.epochs=9").unwrap();
        map.set("eval.beam_width=2").unwrap();
        let cfg = map.into_config().unwrap();
        assert_eq!(cfg.model.model_dim, 16);
        assert_eq!(cfg.strategy, Strategy::Scheduled);
        assert_eq!(cfg.epochs, 9, "override wins over the file");
        assert_eq!(cfg.schedule.k, 4.0);
        assert_eq!(cfg.split_ratios, [0.6, 0.2, 0.2]);
        assert_eq!(cfg.eval.beam_width, 2);
    }

    #[test]
    fn unknown_keys_and_conflicts_are_rejected() {
        let mut map = ConfigMap::default();
        map.set("train.epoch=5").unwrap();
        assert!(map.into_config().is_err(), "misspelled key must not pass");

        let mut map = ConfigMap::default();
        map.set("data.corpus=/tmp/x.tsv").unwrap();
        map.set("synth.num_contexts=5").unwrap();
        assert!(map.into_config().is_err());

        let mut map = ConfigMap::default();
        map.set("model.model_dim=15").unwrap();
        assert!(map.into_config().is_err(), "dims must validate");
    }

    #[test]
    fn teacher_run_replaces_nothing_and_learns() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny_config(dir.path(), Strategy::Teacher)).unwrap();
        assert_eq!(out.logs.len(), 6);
        for row in &out.logs {
            assert_eq!(row.replaced_fraction, 0.0);
            assert_eq!(row.alpha, 0.0);
            assert_eq!(row.beta, None);
        }
        let first = out.logs.first().unwrap().mean_train_nll;
        let last = out.logs.last().unwrap().mean_train_nll;
        assert!(last < first, "nll should fall: {} -> {}", first, last);
        assert!(dir.path().join("m.ckpt").exists());
        assert!(dir.path().join("m.ckpt.best").exists());
        assert!(dir.path().join("m.log").exists());
    }

    #[test]
    fn logged_schedule_matches_the_schedule_module() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), Strategy::Adapbridge);
        let out = train(&cfg).unwrap();
        for (n, row) in out.logs.iter().enumerate() {
            assert_eq!(row.epoch, n);
            let alpha = adap_alpha(n, &cfg.schedule);
            assert_eq!(row.alpha, alpha, "epoch {} alpha", n);
            assert_eq!(row.beta, Some(adap_beta(alpha, cfg.schedule.gamma).unwrap()));
            assert!((0.0..=1.0).contains(&row.replaced_fraction));
        }
    }

    #[test]
    fn identical_configs_give_identical_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), Strategy::Adapbridge);
        cfg.model.dropout_rate = 0.1;
        let a = train(&cfg).unwrap();
        let bytes_a = std::fs::read(&cfg.checkpoint).unwrap();
        let log_a: Vec<String> = a.logs.iter().map(EpochLog::deterministic_part).collect();
        let b = train(&cfg).unwrap();
        let bytes_b = std::fs::read(&cfg.checkpoint).unwrap();
        let log_b: Vec<String> = b.logs.iter().map(EpochLog::deterministic_part).collect();
        assert_eq!(bytes_a, bytes_b, "checkpoints must be bit-identical");
        assert_eq!(log_a, log_b);

        let mut other = cfg.clone();
        other.seed = 12;
        other.checkpoint = dir.path().join("other.ckpt");
        let c = train(&other).unwrap();
        assert_ne!(
            a.logs.last().unwrap().mean_train_nll,
            c.logs.last().unwrap().mean_train_nll,
            "different seed should train differently"
        );
    }

    #[test]
    fn scheduled_run_replaces_more_as_alpha_decays() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), Strategy::Scheduled);
        cfg.epochs = 8;
        cfg.schedule = ScheduleParams::new(2.0, 4, 0.9).unwrap();
        let out = train(&cfg).unwrap();
        let early = out.logs[0].replaced_fraction;
        let late = out.logs[7].replaced_fraction;
        assert!(late > early, "decaying keep-probability must raise replacement: {} vs {}", early, late);
        for (n, row) in out.logs.iter().enumerate() {
            assert_eq!(row.alpha, ss_decay_alpha(n, 2.0).unwrap());
        }
    }

    #[test]
    fn divergent_learning_rate_reports_epoch_and_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), Strategy::Teacher);
        cfg.learning_rate = 1e9;
        cfg.epochs = 30;
        match train(&cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            Err(other) => panic!("expected a non-finite loss diagnostic, got {}", other),
            Ok(_) => panic!("a 1e9 learning rate should diverge"),
        }
    }
}
