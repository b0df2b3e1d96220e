//! Transformer encoder-decoder with one weight-tied embedding table.
//!
//! The model owns plain parameter storage; every forward pass binds the
//! parameters into a fresh autodiff graph through [`Model::session`]. Post-
//! norm residual blocks, ReLU feedforward, sinusoidal positions. The same
//! embedding matrix feeds the encoder input, the decoder input, and (as a
//! transposed projection) the output logits, so token geometry is one
//! shared space.

mod session;

pub use session::{hypothesis_score, EncoderState, Session, TeacherBatch};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{real, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

pub const PAD_ID: usize = crate::corpus::PAD_ID;
pub const BOS_ID: usize = crate::corpus::BOS_ID;
pub const EOS_ID: usize = crate::corpus::EOS_ID;
pub const UNK_ID: usize = crate::corpus::UNK_ID;

const CHECKPOINT_MAGIC: &str = "adapbridge-checkpoint-v1";
const HEADER_END: &[u8] = b"\n---\n";
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 200,
            model_dim: 32,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            feedforward_dim: 64,
            max_sequence_length: 24,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size must cover the 4 reserved token ids, got {}",
                self.vocab_size
            ));
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("feedforward_dim", self.feedforward_dim),
        ] {
            if v == 0 {
                return fail(format!("{} must be at least 1", name));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.max_sequence_length < 2 {
            return fail(format!(
                "max_sequence_length must be at least 2, got {}",
                self.max_sequence_length
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    by_name: HashMap<String, usize>,
    positional: Vec<T>,
}

fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.model_dim;
    let f = config.feedforward_dim;
    let mut layout = vec![("embedding".to_string(), vec![config.vocab_size, d])];
    let attn = |layout: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for proj in ["wq", "wk", "wv", "wo"] {
            layout.push((format!("{}.{}", prefix, proj), vec![d, d]));
            layout.push((format!("{}.{}", prefix, proj.replace('w', "b")), vec![d]));
        }
    };
    let ln = |layout: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        layout.push((format!("{}.gain", prefix), vec![d]));
        layout.push((format!("{}.bias", prefix), vec![d]));
    };
    let ffn = |layout: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        layout.push((format!("{}.w1", prefix), vec![d, f]));
        layout.push((format!("{}.b1", prefix), vec![f]));
        layout.push((format!("{}.w2", prefix), vec![f, d]));
        layout.push((format!("{}.b2", prefix), vec![d]));
    };
    for i in 0..config.num_encoder_layers {
        attn(&mut layout, &format!("enc{}.attn", i));
        ln(&mut layout, &format!("enc{}.ln1", i));
        ffn(&mut layout, &format!("enc{}.ffn", i));
        ln(&mut layout, &format!("enc{}.ln2", i));
    }
    for i in 0..config.num_decoder_layers {
        attn(&mut layout, &format!("dec{}.self", i));
        ln(&mut layout, &format!("dec{}.ln1", i));
        attn(&mut layout, &format!("dec{}.cross", i));
        ln(&mut layout, &format!("dec{}.ln2", i));
        ffn(&mut layout, &format!("dec{}.ffn", i));
        ln(&mut layout, &format!("dec{}.ln3", i));
    }
    layout
}

fn sinusoidal_positions<T: Real>(max_len: usize, dim: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); max_len * dim];
    for pos in 0..max_len {
        let mut i = 0;
        while 2 * i < dim {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[pos * dim + 2 * i] = real(angle.sin());
            if 2 * i + 1 < dim {
                pe[pos * dim + 2 * i + 1] = real(angle.cos());
            }
            i += 1;
        }
    }
    pe
}

impl<T: Real> Model<T> {
    /// Fresh model with uniform [-0.1, 0.1] weights; normalization gains
    /// start at 1 and all other biases at 0 so early layers pass signal
    /// through unscaled.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut shapes = Vec::with_capacity(layout.len());
        let mut values = Vec::with_capacity(layout.len());
        let mut by_name = HashMap::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let last = name.rsplit('.').next().unwrap_or(&name);
            let vals: Vec<T> = if last == "gain" {
                vec![T::one(); n]
            } else if last.starts_with('b') {
                vec![T::zero(); n]
            } else {
                (0..n).map(|_| real(rng.random_range(-0.1..0.1))).collect()
            };
            by_name.insert(name.clone(), names.len());
            names.push(name);
            shapes.push(shape);
            values.push(vals);
        }
        let positional = sinusoidal_positions(config.max_sequence_length, config.model_dim);
        Ok(Model { config, names, shapes, values, by_name, positional })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_tensors(&self) -> usize {
        self.names.len()
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<(&[usize], &[T])> {
        let &i = self.by_name.get(name)?;
        Some((&self.shapes[i], &self.values[i]))
    }

    pub fn param_values_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let &i = self.by_name.get(name)?;
        Some(&mut self.values[i])
    }

    /// Flat shared embedding matrix, row per token id.
    pub fn embedding(&self) -> &[T] {
        &self.values[0]
    }

    pub(crate) fn index_of(&self, name: &str) -> usize {
        self.by_name[name]
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[T])> {
        (0..self.names.len()).map(move |i| {
            (self.names[i].as_str(), self.shapes[i].as_slice(), self.values[i].as_slice())
        })
    }

    pub(crate) fn positional_table(&self) -> &[T] {
        &self.positional
    }

    /// One Adam update over every parameter; `grads` must be in
    /// `param_names` order.
    pub fn apply_adam(
        &mut self,
        grads: &[Vec<T>],
        state: &mut crate::tensor::AdamState<T>,
    ) -> Result<()> {
        let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        crate::tensor::adam_step(&mut self.values, &refs, state)
    }

    pub fn param_lengths(&self) -> Vec<usize> {
        self.values.iter().map(Vec::len).collect()
    }

    /// Writes the checkpoint: text header with config and vocabulary,
    /// then named tensors as little-endian 32-bit floats. Loading the file
    /// reproduces an f32 model bit for bit.
    pub fn save(&self, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if vocab.size() != self.config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "vocabulary of {} does not match model vocab_size {}",
                vocab.size(),
                self.config.vocab_size
            )));
        }
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        let header = format!(
            "vocab_size = {}\nmodel_dim = {}\nnum_heads = {}\nnum_encoder_layers = {}\n\
             num_decoder_layers = {}\nfeedforward_dim = {}\nmax_sequence_length = {}\n\
             dropout_rate = {}\nvocab = {}\ntensors = {}",
            c.vocab_size,
            c.model_dim,
            c.num_heads,
            c.num_encoder_layers,
            c.num_decoder_layers,
            c.feedforward_dim,
            c.max_sequence_length,
            c.dropout_rate,
            vocab.token_list().join(" "),
            self.names.len(),
        );
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(HEADER_END);
        for (name, shape, vals) in self.tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in vals {
                let f = v.to_f32().ok_or_else(|| {
                    Error::Checkpoint(format!("value in {} not representable as f32", name))
                })?;
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vocabulary)> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let split = bytes
            .windows(HEADER_END.len())
            .position(|w| w == HEADER_END)
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let body = &bytes[split + HEADER_END.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint(format!(
                "not a {} file: bad magic line",
                CHECKPOINT_MAGIC
            )));
        }
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for line in lines {
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line {:?}", line)))?;
            fields.insert(key, value);
        }
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("header missing {}", k)))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header field {} is not an integer", k)))
        };
        let config = ModelConfig {
            vocab_size: parse_usize("vocab_size")?,
            model_dim: parse_usize("model_dim")?,
            num_heads: parse_usize("num_heads")?,
            num_encoder_layers: parse_usize("num_encoder_layers")?,
            num_decoder_layers: parse_usize("num_decoder_layers")?,
            feedforward_dim: parse_usize("feedforward_dim")?,
            max_sequence_length: parse_usize("max_sequence_length")?,
            dropout_rate: field("dropout_rate")?
                .parse()
                .map_err(|_| Error::Checkpoint("dropout_rate is not a number".into()))?,
        };
        let vocab = Vocabulary::from_token_list(
            field("vocab")?.split(' ').map(str::to_string).collect(),
        )?;
        if vocab.size() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocab lists {} tokens but vocab_size is {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        let tensor_count: usize = parse_usize("tensors")?;

        let mut model = Model::new(config, 0)?;
        if tensor_count != model.names.len() {
            return Err(Error::Checkpoint(format!(
                "header declares {} tensors, architecture has {}",
                tensor_count,
                model.names.len()
            )));
        }

        struct Cursor<'a> {
            body: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                let end = self.pos.checked_add(n).filter(|&e| e <= self.body.len());
                let end = end.ok_or_else(|| Error::Checkpoint("truncated tensor data".into()))?;
                let out = &self.body[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            fn u32(&mut self) -> Result<usize> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
            }
        }
        let mut cur = Cursor { body, pos: 0 };
        let mut filled = vec![false; model.names.len()];
        for _ in 0..tensor_count {
            let name_len = cur.u32()?;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let idx = *model
                .by_name
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?}", name)))?;
            let ndim = cur.u32()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()?);
            }
            if shape != model.shapes[idx] {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has shape {:?}, architecture expects {:?}",
                    name, shape, model.shapes[idx]
                )));
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(4 * n)?;
            let vals: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| real(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            model.values[idx] = vals;
            if filled[idx] {
                return Err(Error::Checkpoint(format!("tensor {:?} appears twice", name)));
            }
            filled[idx] = true;
        }
        if cur.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after final tensor".into()));
        }
        if let Some(i) = filled.iter().position(|&f| !f) {
            return Err(Error::Checkpoint(format!("tensor {:?} missing", model.names[i])));
        }
        Ok((model, vocab))
    }
}
