//! Domain-conditioned prompt tuning with a residual classifier head.
//!
//! A caption is encoded as `[V1, V2, V3, V_D] ++ caption tokens` by the frozen
//! text tower, where `V_D = F(w_D)` is an affine projection of the domain's
//! semantic vector. The image embedding and the prompted text embedding are
//! multiplied elementwise and classified by
//! `sigmoid(block2(block1(J) + J))`.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, NewsSample};
use crate::domain_vectors::{joint_embedding, sample_joint, DomainMeanTable, DomainVectors, SemanticDomainVector};
use crate::encoder::{mix_seed, EncoderParams, EncoderVars, TokenSequence, PROMPT_WORDS};
use crate::error::{DpodError, Result};
use crate::params::{AdamW, AdamWConfig, NamedTensors};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{cosine, Matrix};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// `[V1, V2, V3, F(w_D)]`
    Dpod,
    /// `[V1, V2, V3]`
    PrefixOnly,
    /// `[V1, V2, V3, V4]` with one shared free vector `V4`.
    GenericV4,
    /// `[V1, V2, V3, F(onehot_D)]`
    OnehotDomain,
}

impl PromptMode {
    pub fn prompt_len(self) -> usize {
        match self {
            PromptMode::PrefixOnly => 3,
            _ => 4,
        }
    }

    pub fn uses_projection(self) -> bool {
        matches!(self, PromptMode::Dpod | PromptMode::OnehotDomain)
    }

    pub fn uses_domain(self) -> bool {
        self.uses_projection()
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dpod" => Ok(PromptMode::Dpod),
            "prefix_only" | "prefix-only" => Ok(PromptMode::PrefixOnly),
            "generic_v4" | "generic-v4" => Ok(PromptMode::GenericV4),
            "onehot" | "onehot_domain" | "onehot-domain" => Ok(PromptMode::OnehotDomain),
            other => Err(DpodError::InvalidConfig(format!("unknown prompt mode {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Dpod => "dpod",
            PromptMode::PrefixOnly => "prefix_only",
            PromptMode::GenericV4 => "generic_v4",
            PromptMode::OnehotDomain => "onehot_domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    pub mode: PromptMode,
    /// Rows are `V1, V2, V3`.
    pub generic: Matrix,
    /// `n × token_dim`
    pub projection: Matrix,
    /// `1 × token_dim`
    pub projection_bias: Matrix,
    /// `1 × token_dim`, only read in [`PromptMode::GenericV4`].
    pub v4: Matrix,
}

impl PromptParams {
    /// `V1..V3` start from the token vectors of "a photo of" (σ = 0.02 noise for any word
    /// missing from the vocabulary); `F` and `V4` start small and random.
    pub fn init(mode: PromptMode, encoder: &EncoderParams, n_domains: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9E]));
        let dt = encoder.token_dim();
        let rows: Vec<Vec<f64>> = PROMPT_WORDS
            .iter()
            .map(|w| match encoder.vocab.id(w) {
                Some(i) => encoder.token_embedding.row(i).to_vec(),
                None => Matrix::randn(1, dt, 0.02, &mut rng).data,
            })
            .collect();
        Self {
            mode,
            generic: Matrix::from_rows(&rows),
            projection: Matrix::randn(n_domains.max(1), dt, 0.02, &mut rng),
            projection_bias: Matrix::randn(1, dt, 0.02, &mut rng),
            v4: Matrix::randn(1, dt, 0.02, &mut rng),
        }
    }

    pub fn domain_input_dim(&self) -> usize {
        self.projection.rows
    }

    /// `F(code) = code · W + b`
    pub fn project(&self, code: &[f64]) -> Result<Vec<f64>> {
        self.check_code(code)?;
        let out = Matrix::row_vector(code.to_vec()).matmul(&self.projection);
        Ok(out.data.iter().zip(&self.projection_bias.data).map(|(a, b)| a + b).collect())
    }

    fn check_code(&self, code: &[f64]) -> Result<()> {
        if code.len() != self.projection.rows {
            return Err(DpodError::DimensionMismatch {
                expected: self.projection.rows,
                actual: code.len(),
                context: "domain vector length vs projection input",
            });
        }
        Ok(())
    }

    /// Tensors updated by training in the current mode.
    pub fn trainable_names(&self, freeze_prefix: bool) -> Vec<&'static str> {
        let mut names = Vec::new();
        if !freeze_prefix {
            names.push("prompt.generic");
        }
        match self.mode {
            PromptMode::Dpod | PromptMode::OnehotDomain => {
                names.push("prompt.projection");
                names.push("prompt.projection_bias");
            }
            PromptMode::GenericV4 => names.push("prompt.v4"),
            PromptMode::PrefixOnly => {}
        }
        names
    }
}

impl NamedTensors for PromptParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("prompt.generic", &self.generic),
            ("prompt.projection", &self.projection),
            ("prompt.projection_bias", &self.projection_bias),
            ("prompt.v4", &self.v4),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("prompt.generic", &mut self.generic),
            ("prompt.projection", &mut self.projection),
            ("prompt.projection_bias", &mut self.projection_bias),
            ("prompt.v4", &mut self.v4),
        ]
    }
}

/// Per-mode domain input fed to `F`: the semantic vector (dpod) or a one-hot (onehot_domain).
pub fn domain_code(mode: PromptMode, vectors: &DomainVectors, domain_idx: usize) -> Vec<f64> {
    match mode {
        PromptMode::OnehotDomain => {
            let mut v = vec![0.0; vectors.n()];
            v[domain_idx] = 1.0;
            v
        }
        _ => vectors.matrix.row(domain_idx).to_vec(),
    }
}

/// Prompt vectors followed by the caption's token-table rows.
///
/// A caption with no words contributes no tokens (warned), leaving only the prompt.
pub fn assemble_prompt(prompts: &PromptParams, code: &[f64], caption: &TokenSequence, encoder: &EncoderParams) -> Result<Vec<Vec<f64>>> {
    let mut seq: Vec<Vec<f64>> = (0..3).map(|r| prompts.generic.row(r).to_vec()).collect();
    match prompts.mode {
        PromptMode::Dpod | PromptMode::OnehotDomain => seq.push(prompts.project(code)?),
        PromptMode::GenericV4 => seq.push(prompts.v4.data.clone()),
        PromptMode::PrefixOnly => {}
    }
    if caption.is_blank() {
        warn!("empty caption; encoding the prompt alone");
    } else {
        seq.extend(encoder.token_vectors(caption));
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub bottleneck: usize,
    pub hidden: usize,
}

impl ClassifierConfig {
    pub fn for_dim(d: usize) -> Self {
        Self {
            bottleneck: (d / 4).max(1),
            hidden: (d / 2).max(1),
        }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::for_dim(64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
    pub w4: Matrix,
    pub b4: Matrix,
}

impl NamedTensors for ClassifierParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("classifier.w1", &self.w1),
            ("classifier.b1", &self.b1),
            ("classifier.w2", &self.w2),
            ("classifier.b2", &self.b2),
            ("classifier.w3", &self.w3),
            ("classifier.b3", &self.b3),
            ("classifier.w4", &self.w4),
            ("classifier.b4", &self.b4),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("classifier.w1", &mut self.w1),
            ("classifier.b1", &mut self.b1),
            ("classifier.w2", &mut self.w2),
            ("classifier.b2", &mut self.b2),
            ("classifier.w3", &mut self.w3),
            ("classifier.b3", &mut self.b3),
            ("classifier.w4", &mut self.w4),
            ("classifier.b4", &mut self.b4),
        ]
    }
}

impl ClassifierParams {
    pub fn init(d: usize, cfg: ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xC1]));
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            w1: Matrix::randn(d, cfg.bottleneck, s(d), &mut rng),
            b1: Matrix::zeros(1, cfg.bottleneck),
            w2: Matrix::randn(cfg.bottleneck, d, 0.1 * s(cfg.bottleneck), &mut rng),
            b2: Matrix::zeros(1, d),
            w3: Matrix::randn(d, cfg.hidden, s(d), &mut rng),
            b3: Matrix::zeros(1, cfg.hidden),
            w4: Matrix::randn(cfg.hidden, 1, s(cfg.hidden), &mut rng),
            b4: Matrix::zeros(1, 1),
        }
    }

    pub fn zeros(d: usize, cfg: ClassifierConfig) -> Self {
        Self {
            w1: Matrix::zeros(d, cfg.bottleneck),
            b1: Matrix::zeros(1, cfg.bottleneck),
            w2: Matrix::zeros(cfg.bottleneck, d),
            b2: Matrix::zeros(1, d),
            w3: Matrix::zeros(d, cfg.hidden),
            b3: Matrix::zeros(1, cfg.hidden),
            w4: Matrix::zeros(cfg.hidden, 1),
            b4: Matrix::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|(_, m)| tape.leaf(m.clone(), requires_grad))
            .collect()
    }

    /// Logits for a `B × d` batch of joint embeddings.
    fn logits_on_tape(tape: &mut Tape, v: &[Var], joint: Var) -> Var {
        let h = tape.matmul(joint, v[0]);
        let h = tape.add_row(h, v[1]);
        let h = tape.tanh(h);
        let x = tape.matmul(h, v[2]);
        let x = tape.add_row(x, v[3]);
        let x = tape.add(x, joint);
        let z = tape.matmul(x, v[4]);
        let z = tape.add_row(z, v[5]);
        let z = tape.tanh(z);
        let o = tape.matmul(z, v[6]);
        tape.add_row(o, v[7])
    }

    pub fn logit(&self, joint: &[f64]) -> Result<f64> {
        if joint.len() != self.input_dim() {
            return Err(DpodError::DimensionMismatch {
                expected: self.input_dim(),
                actual: joint.len(),
                context: "classifier input",
            });
        }
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let j = tape.constant(Matrix::row_vector(joint.to_vec()));
        let o = Self::logits_on_tape(&mut tape, &v, j);
        Ok(tape.value(o).data[0])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ŷ = sigmoid(block2(block1(J) + J))`
pub fn classifier_forward(classifier: &ClassifierParams, joint: &[f64]) -> Result<f64> {
    classifier.logit(joint).map(sigmoid)
}

/// Binary cross-entropy with `ŷ` clamped to `[1e-7, 1 − 1e-7]`.
pub fn stage3_loss(score: f64, label: Label) -> f64 {
    let p = score.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let y = label.as_f64();
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d BCE / d logit, zero where the clamp is active.
fn bce_logit_grad(score: f64, label: Label) -> f64 {
    if score < BCE_CLAMP || score > 1.0 - BCE_CLAMP {
        0.0
    } else {
        score - label.as_f64()
    }
}

/// `Fake` iff `score >= threshold`.
pub fn label_for(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Fake
    } else {
        Label::True
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub threshold: f64,
    pub freeze_prefix: bool,
    pub seed: u64,
}

pub const DEFAULT_STAGE3_LR: f64 = 3e-4;

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_STAGE3_LR,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 30,
            threshold: 0.5,
            freeze_prefix: false,
            seed: 0,
        }
    }
}

impl Stage3Config {
    /// Reference hyper-parameters with the 1e-4 learning rate.
    pub fn reference() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DpodError::InvalidConfig(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(DpodError::InvalidConfig("learning_rate > 0, batch_size >= 1, epochs >= 1 required".into()));
        }
        Ok(())
    }
}

/// One pre-resolved Stage-3 example.
#[derive(Debug, Clone)]
pub struct Stage3Example {
    pub image_embedding: Vec<f64>,
    pub tokens: TokenSequence,
    pub code: Vec<f64>,
    pub label: Label,
}

struct PromptVars {
    generic: Var,
    projection: Var,
    projection_bias: Var,
    v4: Var,
}

fn bind_prompts(tape: &mut Tape, p: &PromptParams, trainable: &[&str]) -> PromptVars {
    let mut leaf = |name: &str, m: &Matrix| tape.leaf(m.clone(), trainable.contains(&name));
    PromptVars {
        generic: leaf("prompt.generic", &p.generic),
        projection: leaf("prompt.projection", &p.projection),
        projection_bias: leaf("prompt.projection_bias", &p.projection_bias),
        v4: leaf("prompt.v4", &p.v4),
    }
}

fn prompted_text_on_tape(tape: &mut Tape, encoder: &EncoderParams, ev: &EncoderVars, prompts: &PromptParams, pv: &PromptVars, ex: &Stage3Example) -> Var {
    let mut parts = vec![pv.generic];
    match prompts.mode {
        PromptMode::Dpod | PromptMode::OnehotDomain => {
            let code = tape.constant(Matrix::row_vector(ex.code.clone()));
            let vd = tape.matmul(code, pv.projection);
            parts.push(tape.add_row(vd, pv.projection_bias));
        }
        PromptMode::GenericV4 => parts.push(pv.v4),
        PromptMode::PrefixOnly => {}
    }
    if !ex.tokens.is_blank() {
        parts.push(tape.gather_rows(ev.token_embedding(), &ex.tokens.token_ids));
    }
    let seq = tape.concat_rows(&parts);
    encoder.text_on_tape(tape, ev, seq)
}

/// Mean BCE over `examples` and gradients for the prompt tensors and classifier
/// tensors (both in [`NamedTensors`] order; frozen prompt tensors get zeros).
pub fn stage3_loss_and_grad(encoder: &EncoderParams, prompts: &PromptParams, classifier: &ClassifierParams, examples: &[&Stage3Example], freeze_prefix: bool) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
    if examples.is_empty() {
        return Err(DpodError::Empty("stage-3 batch".into()));
    }
    if prompts.mode.uses_projection() {
        for ex in examples {
            prompts.check_code(&ex.code)?;
        }
    }
    let trainable = prompts.trainable_names(freeze_prefix);
    let mut tape = Tape::new();
    let ev = encoder.bind(&mut tape, false);
    let pv = bind_prompts(&mut tape, prompts, &trainable);
    let cv = classifier.bind(&mut tape, true);

    let mut joints = Vec::with_capacity(examples.len());
    for ex in examples {
        let text = prompted_text_on_tape(&mut tape, encoder, &ev, prompts, &pv, ex);
        let img = tape.constant(Matrix::row_vector(ex.image_embedding.clone()));
        joints.push(tape.hadamard(img, text));
    }
    let joint = tape.concat_rows(&joints);
    let logits = ClassifierParams::logits_on_tape(&mut tape, &cv, joint);

    let n = examples.len() as f64;
    let mut loss = 0.0;
    let mut seed = Vec::with_capacity(examples.len());
    for (z, ex) in tape.value(logits).data.iter().zip(examples) {
        let p = sigmoid(*z);
        loss += stage3_loss(p, ex.label) / n;
        seed.push(bce_logit_grad(p, ex.label) / n);
    }
    if !loss.is_finite() {
        return Err(DpodError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            diagnostics: format!("stage-3 BCE evaluated to {loss}"),
        });
    }
    let grads = tape.backward(vec![(logits, Matrix::from_vec(examples.len(), 1, seed))]);
    let prompt_grads = prompt_gradients(&grads, &pv, prompts);
    let classifier_grads = cv
        .iter()
        .zip(classifier.tensors())
        .map(|(&v, (_, m))| grads.get_or_zeros(v, m))
        .collect();
    Ok((loss, prompt_grads, classifier_grads))
}

fn prompt_gradients(grads: &Gradients, pv: &PromptVars, p: &PromptParams) -> Vec<Matrix> {
    vec![
        grads.get_or_zeros(pv.generic, &p.generic),
        grads.get_or_zeros(pv.projection, &p.projection),
        grads.get_or_zeros(pv.projection_bias, &p.projection_bias),
        grads.get_or_zeros(pv.v4, &p.v4),
    ]
}

/// Resolves samples into Stage-3 examples using per-label domain vectors.
pub fn build_examples(dataset: &Dataset, encoder: &EncoderParams, vectors: &DomainVectors, mode: PromptMode) -> Result<Vec<Stage3Example>> {
    let feats: Vec<&[f64]> = dataset.samples().iter().map(|s| s.features()).collect::<Result<_>>()?;
    let images = encoder.embed_images(&feats)?;
    dataset
        .samples()
        .iter()
        .zip(images)
        .map(|(s, image_embedding)| {
            let code = if mode.uses_domain() {
                let idx = vectors
                    .index_of(&s.domain)
                    .ok_or_else(|| DpodError::UnknownDomain(s.domain.clone()))?;
                domain_code(mode, vectors, idx)
            } else {
                Vec::new()
            };
            Ok(Stage3Example {
                image_embedding,
                tokens: encoder.tokenize(&s.caption),
                code,
                label: s.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage3Epoch {
    pub epoch: usize,
    pub mean_bce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Stage3Log {
    pub epochs: Vec<Stage3Epoch>,
}

impl Stage3Log {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_bce\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.9}\n", e.epoch, e.mean_bce));
        }
        s
    }
}

/// Stage 3: trains prompts and classifier against a frozen encoder and fixed domain vectors.
pub fn train_stage3(dataset: &Dataset, encoder: &EncoderParams, vectors: &DomainVectors, prompts: &PromptParams, classifier: &ClassifierParams, cfg: &Stage3Config) -> Result<(PromptParams, ClassifierParams, Stage3Log)> {
    cfg.validate()?;
    if !encoder.frozen {
        return Err(DpodError::InvalidConfig("stage 3 requires the aligned encoder to be frozen".into()));
    }
    if dataset.is_empty() {
        return Err(DpodError::Empty("stage-3 training set".into()));
    }
    if prompts.mode.uses_projection() && prompts.domain_input_dim() != vectors.n() {
        return Err(DpodError::DimensionMismatch {
            expected: vectors.n(),
            actual: prompts.domain_input_dim(),
            context: "projection input vs number of domains",
        });
    }
    let examples = build_examples(dataset, encoder, vectors, prompts.mode)?;
    let mut prompts = prompts.clone();
    let mut classifier = classifier.clone();
    let adam = AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let trainable = prompts.trainable_names(cfg.freeze_prefix);
    let mut prompt_opt = AdamW::for_params(adam, &prompts.tensors().into_iter().filter(|(n, _)| trainable.contains(n)).map(|(_, m)| m).collect::<Vec<_>>());
    let mut cls_opt = AdamW::for_params(adam, &classifier.tensors().into_iter().map(|(_, m)| m).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x53]));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Stage3Log::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Stage3Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, pg, cg) = stage3_loss_and_grad(encoder, &prompts, &classifier, &batch, cfg.freeze_prefix)
                .map_err(|e| match e {
                    DpodError::NonFiniteLoss { diagnostics, .. } => DpodError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        diagnostics: format!(
                            "{diagnostics}; prompt norms: {}; classifier norms: {}",
                            prompts.norm_summary(),
                            classifier.norm_summary()
                        ),
                    },
                    other => other,
                })?;
            let (mut pp, mut pgs) = (Vec::new(), Vec::new());
            for ((name, m), g) in prompts.tensors_mut().into_iter().zip(pg) {
                if trainable.contains(&name) {
                    pp.push(m);
                    pgs.push(g);
                }
            }
            prompt_opt.step(&mut pp, &pgs);
            let mut cp: Vec<&mut Matrix> = classifier.tensors_mut().into_iter().map(|(_, m)| m).collect();
            cls_opt.step(&mut cp, &cg);
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let entry = Stage3Epoch {
            epoch: epoch + 1,
            mean_bce: sum / count as f64,
        };
        debug!("stage3 epoch {}: bce {:.5}", entry.epoch, entry.mean_bce);
        log.epochs.push(entry);
    }
    if let (Some(a), Some(b)) = (log.epochs.first(), log.epochs.last()) {
        info!("stage3 finished: bce {:.4} -> {:.4}", a.mean_bce, b.mean_bce);
    }
    Ok((prompts, classifier, log))
}

/// Cosine profile of a sample's own joint embedding against every domain mean.
pub fn estimate_domain_vector(sample: &NewsSample, encoder: &EncoderParams, table: &DomainMeanTable) -> Result<SemanticDomainVector> {
    let joint = sample_joint(sample, encoder)?;
    let w = (0..table.n_domains())
        .map(|j| {
            cosine(&joint, table.means.row(j))
                .ok_or_else(|| DpodError::Degenerate(format!("joint embedding of {:?} has zero norm", sample.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticDomainVector {
        domain: sample.domain.clone(),
        w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub score: f64,
    pub label: Label,
    pub domain_used: String,
    pub w_used: Vec<f64>,
}

/// Everything inference needs after Stage 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Model {
    pub encoder: EncoderParams,
    pub vectors: DomainVectors,
    pub means: DomainMeanTable,
    pub prompts: PromptParams,
    pub classifier: ClassifierParams,
    pub threshold: f64,
    /// Estimate `w` for domains unseen in training instead of failing.
    pub estimate_unknown: bool,
}

impl Stage3Model {
    /// Domain code for a sample: per-label `w` when the domain is known, else estimated.
    fn resolve_domain(&self, sample: &NewsSample) -> Result<(Vec<f64>, Vec<f64>)> {
        let mode = self.prompts.mode;
        if let Some(idx) = self.vectors.index_of(&sample.domain) {
            let w = self.vectors.matrix.row(idx).to_vec();
            return Ok((domain_code(mode, &self.vectors, idx), w));
        }
        if !mode.uses_domain() {
            return Ok((Vec::new(), Vec::new()));
        }
        if !self.estimate_unknown {
            return Err(DpodError::UnknownDomain(sample.domain.clone()));
        }
        warn!("domain {:?} unseen in training; estimating its domain vector", sample.domain);
        let est = estimate_domain_vector(sample, &self.encoder, &self.means)?;
        let code = match mode {
            PromptMode::OnehotDomain => {
                let best = est
                    .w
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                domain_code(mode, &self.vectors, best)
            }
            _ => est.w.clone(),
        };
        Ok((code, est.w))
    }

    pub fn score(&self, sample: &NewsSample) -> Result<f64> {
        self.infer(sample).map(|p| p.score)
    }

    pub fn infer(&self, sample: &NewsSample) -> Result<Prediction> {
        let (code, w) = self.resolve_domain(sample)?;
        let tokens = self.encoder.tokenize(&sample.caption);
        let seq = assemble_prompt(&self.prompts, &code, &tokens, &self.encoder)?;
        let text = self.encoder.embed_text(&seq)?;
        let image = self.encoder.embed_image(sample.features()?)?;
        let joint = joint_embedding(&image, &text)?;
        let score = classifier_forward(&self.classifier, &joint)?;
        Ok(Prediction {
            score,
            label: label_for(score, self.threshold),
            domain_used: sample.domain.clone(),
            w_used: w,
        })
    }
}

/// Inference for one sample; see [`Stage3Model::infer`].
pub fn infer(sample: &NewsSample, model: &Stage3Model) -> Result<Prediction> {
    model.infer(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocabulary};

    fn encoder() -> EncoderParams {
        let cfg = EncoderConfig {
            token_dim: 6,
            embed_dim: 8,
            image_hidden: 5,
            max_len: 16,
        };
        let mut e = EncoderParams::new(cfg, 4, Vocabulary::build(["red cat on mat", "blue dog"]), 1).unwrap();
        e.frozen = true;
        e
    }

    #[test]
    fn prompt_lengths_per_mode() {
        let e = encoder();
        let caption = e.tokenize("red cat on the mat");
        assert_eq!(caption.len(), 5);
        let code = vec![1.0, 0.5, 0.2];
        for (mode, len) in [
            (PromptMode::Dpod, 9),
            (PromptMode::OnehotDomain, 9),
            (PromptMode::GenericV4, 9),
            (PromptMode::PrefixOnly, 8),
        ] {
            let p = PromptParams::init(mode, &e, 3, 0);
            assert_eq!(assemble_prompt(&p, &code, &caption, &e).unwrap().len(), len, "{mode:?}");
        }
        let p = PromptParams::init(PromptMode::Dpod, &e, 3, 0);
        assert_eq!(assemble_prompt(&p, &code, &e.tokenize(""), &e).unwrap().len(), 4);
        assert!(matches!(
            assemble_prompt(&p, &[1.0, 2.0], &caption, &e),
            Err(DpodError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn generic_prompts_start_from_a_photo_of() {
        let e = encoder();
        let p = PromptParams::init(PromptMode::Dpod, &e, 2, 0);
        for (r, w) in PROMPT_WORDS.iter().enumerate() {
            assert_eq!(p.generic.row(r), e.token_embedding.row(e.vocab.id(w).unwrap()));
        }
    }

    #[test]
    fn classifier_closed_forms() {
        let cfg = ClassifierConfig::for_dim(8);
        let mut c = ClassifierParams::zeros(8, cfg);
        assert_eq!(classifier_forward(&c, &[0.3; 8]).unwrap(), 0.5);
        c.b4.data[0] = 3f64.ln();
        assert!((classifier_forward(&c, &[0.3; 8]).unwrap() - 0.75).abs() < 1e-12);
        assert!(classifier_forward(&c, &[0.3; 3]).is_err());

        // block1 weights zero: the residual path still carries J
        let mut r = ClassifierParams::init(8, cfg, 4);
        r.w1 = Matrix::zeros(8, cfg.bottleneck);
        r.w2 = Matrix::zeros(cfg.bottleneck, 8);
        let a = classifier_forward(&r, &[0.1; 8]).unwrap();
        let b = classifier_forward(&r, &[0.9, -0.2, 0.1, 0.4, 0.0, 0.3, -0.5, 0.2]).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn bce_values() {
        assert!((stage3_loss(0.5, Label::Fake) - 2f64.ln()).abs() < 1e-12);
        assert!((stage3_loss(0.9, Label::True) - 10f64.ln()).abs() < 1e-9);
        assert!(stage3_loss(1.0, Label::Fake) < 1e-6);
        assert!(stage3_loss(0.0, Label::True) < 1e-6);
        assert!(stage3_loss(0.0, Label::Fake).is_finite());
    }

    #[test]
    fn threshold_contract() {
        assert_eq!(label_for(0.5, 0.5), Label::Fake);
        assert_eq!(label_for(0.49999, 0.5), Label::True);
        assert_eq!(label_for(0.5 - 1e-5, 0.5), Label::True);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [PromptMode::Dpod, PromptMode::PrefixOnly, PromptMode::GenericV4, PromptMode::OnehotDomain] {
            assert_eq!(PromptMode::parse(m.as_str()).unwrap(), m);
        }
        assert_eq!(PromptMode::parse("onehot").unwrap(), PromptMode::OnehotDomain);
        assert!(PromptMode::parse("nope").is_err());
    }
}
