//! Tokenizer, toy dual encoder and feature-space image augmentations.
//!
//! The text tower is a token table plus learned positions, one single-head
//! self-attention block with a residual connection, mean pooling and an affine
//! projection. It consumes continuous token vectors so that prompt vectors can
//! be prepended in embedding space. The image tower is a two-layer tanh MLP.
//! Both towers L2-normalize their output.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DpodError, Result};
use crate::params::NamedTensors;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Matrix;

pub const UNK: &str = "<unk>";
/// Words that must always be present so the generic prompts can be initialized from them.
pub const PROMPT_WORDS: [&str; 3] = ["a", "photo", "of"];
/// Most prompt slots any mode prepends; positions are sized for `max_len + PROMPT_SLOTS`.
pub const PROMPT_SLOTS: usize = 4;
pub const NUM_VIEWS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Reserved tokens first (`<unk>`, `a`, `photo`, `of`), then the remaining corpus words sorted.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut corpus: Vec<String> = captions.into_iter().flat_map(split_words).collect();
        corpus.sort();
        corpus.dedup();
        let mut words: Vec<String> = std::iter::once(UNK)
            .chain(PROMPT_WORDS)
            .map(str::to_string)
            .collect();
        words.extend(corpus.into_iter().filter(|w| !PROMPT_WORDS.contains(&w.as_str())));
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// True when the source text held no words (the sequence is the lone OOV token).
    pub fn is_blank(&self) -> bool {
        split_words(&self.source_text).next().is_none()
    }
}

/// Lowercases, splits on anything non-alphanumeric, maps unknown words to
/// `<unk>` and truncates to `max_len`. Empty text yields the single `<unk>` token.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<usize> = split_words(caption)
        .map(|w| vocab.id(&w).unwrap_or(vocab.unk_id()))
        .take(max_len.max(1))
        .collect();
    if ids.is_empty() {
        ids.push(vocab.unk_id());
    }
    TokenSequence {
        token_ids: ids,
        source_text: caption.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub image_hidden: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            embed_dim: 64,
            image_hidden: 64,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub image_dim: usize,
    pub vocab: Vocabulary,
    pub token_embedding: Matrix,
    pub positional: Matrix,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub w_out: Matrix,
    pub text_proj: Matrix,
    pub text_bias: Matrix,
    pub image_w1: Matrix,
    pub image_b1: Matrix,
    pub image_w2: Matrix,
    pub image_b2: Matrix,
    pub frozen: bool,
}

impl NamedTensors for EncoderParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("encoder.token_embedding", &self.token_embedding),
            ("encoder.positional", &self.positional),
            ("encoder.w_query", &self.w_query),
            ("encoder.w_key", &self.w_key),
            ("encoder.w_value", &self.w_value),
            ("encoder.w_out", &self.w_out),
            ("encoder.text_proj", &self.text_proj),
            ("encoder.text_bias", &self.text_bias),
            ("encoder.image_w1", &self.image_w1),
            ("encoder.image_b1", &self.image_b1),
            ("encoder.image_w2", &self.image_w2),
            ("encoder.image_b2", &self.image_b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("encoder.token_embedding", &mut self.token_embedding),
            ("encoder.positional", &mut self.positional),
            ("encoder.w_query", &mut self.w_query),
            ("encoder.w_key", &mut self.w_key),
            ("encoder.w_value", &mut self.w_value),
            ("encoder.w_out", &mut self.w_out),
            ("encoder.text_proj", &mut self.text_proj),
            ("encoder.text_bias", &mut self.text_bias),
            ("encoder.image_w1", &mut self.image_w1),
            ("encoder.image_b1", &mut self.image_b1),
            ("encoder.image_w2", &mut self.image_w2),
            ("encoder.image_b2", &mut self.image_b2),
        ]
    }
}

/// Tape handles for every encoder tensor, in [`NamedTensors`] order.
pub struct EncoderVars {
    vars: Vec<Var>,
    token_dim: usize,
}

impl EncoderVars {
    pub fn token_embedding(&self) -> Var {
        self.vars[0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn gradients(&self, grads: &Gradients, params: &EncoderParams) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, (_, m))| grads.get_or_zeros(v, m))
            .collect()
    }
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, image_dim: usize, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.token_dim == 0 || config.embed_dim == 0 || config.image_hidden == 0 || config.max_len == 0 {
            return Err(DpodError::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if image_dim == 0 || vocab.is_empty() {
            return Err(DpodError::InvalidConfig("image_dim and vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = config.token_dim;
        let attn = 1.0 / (dt as f64).sqrt();
        Ok(Self {
            token_embedding: Matrix::randn(vocab.len(), dt, 0.3, &mut rng),
            positional: Matrix::randn(config.max_len + PROMPT_SLOTS, dt, 0.02, &mut rng),
            w_query: Matrix::randn(dt, dt, attn, &mut rng),
            w_key: Matrix::randn(dt, dt, attn, &mut rng),
            w_value: Matrix::randn(dt, dt, attn, &mut rng),
            w_out: Matrix::randn(dt, dt, attn, &mut rng),
            text_proj: Matrix::randn(dt, config.embed_dim, attn, &mut rng),
            text_bias: Matrix::randn(1, config.embed_dim, 0.01, &mut rng),
            image_w1: Matrix::randn(image_dim, config.image_hidden, 1.0 / (image_dim as f64).sqrt(), &mut rng),
            image_b1: Matrix::randn(1, config.image_hidden, 0.05, &mut rng),
            image_w2: Matrix::randn(config.image_hidden, config.embed_dim, 1.0 / (config.image_hidden as f64).sqrt(), &mut rng),
            image_b2: Matrix::randn(1, config.embed_dim, 0.05, &mut rng),
            config,
            image_dim,
            vocab,
            frozen: false,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    pub fn max_positions(&self) -> usize {
        self.positional.rows
    }

    pub fn tokenize(&self, caption: &str) -> TokenSequence {
        tokenize(caption, &self.vocab, self.config.max_len)
    }

    /// Embedding-table rows for the given tokens.
    pub fn token_vectors(&self, tokens: &TokenSequence) -> Vec<Vec<f64>> {
        tokens
            .token_ids
            .iter()
            .map(|&i| self.token_embedding.row(i).to_vec())
            .collect()
    }

    /// SHA-256 over shapes and parameter bits, in tensor order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.tensors() {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> EncoderVars {
        let vars = self
            .tensors()
            .into_iter()
            .map(|(_, m)| tape.leaf(m.clone(), requires_grad))
            .collect();
        EncoderVars {
            vars,
            token_dim: self.config.token_dim,
        }
    }

    /// Text tower on the tape; `seq` is an `L × token_dim` matrix of continuous token vectors.
    pub fn text_on_tape(&self, tape: &mut Tape, vars: &EncoderVars, seq: Var) -> Var {
        let v = &vars.vars;
        let len = tape.value(seq).rows;
        let pos_rows: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(v[1], &pos_rows);
        let x = tape.add(seq, pos);
        let q = tape.matmul(x, v[2]);
        let k = tape.matmul(x, v[3]);
        let val = tape.matmul(x, v[4]);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, 1.0 / (vars.token_dim as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, val);
        let mixed = tape.matmul(mixed, v[5]);
        let h = tape.add(x, mixed);
        let pooled = tape.mean_rows(h);
        let out = tape.matmul(pooled, v[6]);
        let out = tape.add_row(out, v[7]);
        tape.normalize_rows(out)
    }

    /// Caption tokens looked up from the bound table, then the text tower.
    pub fn text_tokens_on_tape(&self, tape: &mut Tape, vars: &EncoderVars, tokens: &TokenSequence) -> Var {
        let seq = tape.gather_rows(vars.token_embedding(), &tokens.token_ids);
        self.text_on_tape(tape, vars, seq)
    }

    /// Image tower on the tape; `images` is `B × image_dim`.
    pub fn image_on_tape(&self, tape: &mut Tape, vars: &EncoderVars, images: Var) -> Var {
        let v = &vars.vars;
        let h = tape.matmul(images, v[8]);
        let h = tape.add_row(h, v[9]);
        let h = tape.tanh(h);
        let out = tape.matmul(h, v[10]);
        let out = tape.add_row(out, v[11]);
        tape.normalize_rows(out)
    }

    fn check_text_input(&self, seq: &[Vec<f64>]) -> Result<()> {
        if seq.is_empty() {
            return Err(DpodError::Empty("text encoder input sequence".into()));
        }
        if seq.len() > self.max_positions() {
            return Err(DpodError::DimensionMismatch {
                expected: self.max_positions(),
                actual: seq.len(),
                context: "sequence longer than positional table",
            });
        }
        if let Some(bad) = seq.iter().find(|t| t.len() != self.config.token_dim) {
            return Err(DpodError::DimensionMismatch {
                expected: self.config.token_dim,
                actual: bad.len(),
                context: "token vector width",
            });
        }
        Ok(())
    }

    /// Encodes a sequence of continuous token vectors to a unit vector.
    pub fn embed_text(&self, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_text_input(seq)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(Matrix::from_rows(seq));
        let out = self.text_on_tape(&mut tape, &vars, x);
        Ok(tape.value(out).data.clone())
    }

    pub fn embed_caption(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.embed_text(&self.token_vectors(tokens))
    }

    pub fn embed_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_images(&[features])?.remove(0))
    }

    pub fn embed_images(&self, features: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if let Some(bad) = features.iter().find(|f| f.len() != self.image_dim) {
            return Err(DpodError::DimensionMismatch {
                expected: self.image_dim,
                actual: bad.len(),
                context: "image features",
            });
        }
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(Matrix::from_rows(&rows));
        let out = self.image_on_tape(&mut tape, &vars, x);
        let m = tape.value(out);
        Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub jitter_scale: f64,
    pub crop_fraction: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_scale: 0.1,
            crop_fraction: 0.25,
            flip_probability: 0.5,
        }
    }
}

/// The four feature-space views: jitter, crop, flip, normalize (in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSet {
    pub views: [Vec<f64>; NUM_VIEWS],
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x51_7C_C1_B7_27_22_0A_95, |acc, &p| splitmix(acc ^ p))
}

pub fn augment(features: &[f64], seed: u64) -> AugmentationSet {
    augment_with(features, seed, &AugmentConfig::default())
}

pub fn augment_with(features: &[f64], seed: u64, cfg: &AugmentConfig) -> AugmentationSet {
    let content = features.iter().fold(0u64, |acc, v| splitmix(acc ^ v.to_bits()));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, content]));
    let dim = features.len();

    let jitter = features
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x + cfg.jitter_scale * x.abs() * e
        })
        .collect();

    let mut crop = features.to_vec();
    if dim > 1 {
        let width = ((cfg.crop_fraction * dim as f64).round() as usize).clamp(1, dim - 1);
        let start = rng.gen_range(0..=dim - width);
        crop[start..start + width].iter_mut().for_each(|x| *x = 0.0);
        let rescale = dim as f64 / (dim - width) as f64;
        crop.iter_mut().for_each(|x| *x *= rescale);
    }

    let mut flip = features.to_vec();
    if rng.gen_bool(cfg.flip_probability.clamp(0.0, 1.0)) {
        flip.reverse();
    }

    let mean = features.iter().sum::<f64>() / dim.max(1) as f64;
    let var = features.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dim.max(1) as f64;
    let std = var.sqrt();
    let normalize = features
        .iter()
        .map(|x| if std > 0.0 { (x - mean) / std } else { 0.0 })
        .collect();

    AugmentationSet {
        views: [jitter, crop, flip, normalize],
        seed,
    }
}
