//! Label-aware contrastive alignment of the dual encoder.
//!
//! For an anchor view `Î_ik` of sample `k` the shared negative mass is
//!
//! ```text
//! D_true(i,k) = Σ_{t≠k} [ Σ_a e(Î_ik·Î_at) + e(Î_ik·T̂_t) + e(T̂_k·T̂_t) ]
//! D_fake(i,k) = D_true(i,k) + e(Î_ik·T̂_k)
//! ```
//!
//! where `e(s) = exp(s/τ)` in [`TemperatureMode::Uniform`] and `exp(s)` in
//! [`TemperatureMode::Literal`]. Numerators always use `exp(s/τ)`. True anchors
//! contribute a view-view term for every ordered pair `i ≠ j` and a view-text
//! term per view; fake anchors only the view-view terms, against `D_fake`.
//! The positive never enters its own denominator, so terms can be negative.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::encoder::{augment_with, mix_seed, AugmentConfig, EncoderParams, TokenSequence, NUM_VIEWS};
use crate::error::{DpodError, Result};
use crate::params::{AdamW, AdamWConfig, NamedTensors};
use crate::tape::Tape;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Every similarity, numerator and denominator, is divided by τ.
    Uniform,
    /// τ scales only the numerator.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub tau: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature_mode: TemperatureMode,
    /// Adds the un-augmented image embedding as an extra view.
    pub include_original_view: bool,
    /// When false every anchor uses the true-pair branch regardless of its label.
    pub label_aware: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

/// Stage-1 learning rate used by default. 1e-4 suits fine-tuning a pretrained
/// encoder but barely moves a randomly initialised one within 40 epochs; see
/// [`AlignmentConfig::reference`].
pub const DEFAULT_ALIGNMENT_LR: f64 = 3e-3;

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            beta: 1.5,
            learning_rate: DEFAULT_ALIGNMENT_LR,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 40,
            temperature_mode: TemperatureMode::Uniform,
            include_original_view: false,
            label_aware: true,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    /// Reference hyper-parameters with the 1e-4 learning rate.
    pub fn reference() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DpodError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.beta >= 0.0) {
            return Err(DpodError::InvalidConfig(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size < 2 || self.epochs == 0 {
            return Err(DpodError::InvalidConfig(
                "learning_rate > 0, batch_size >= 2 and epochs >= 1 are required".into(),
            ));
        }
        Ok(())
    }

    fn denom_scale(&self) -> f64 {
        match self.temperature_mode {
            TemperatureMode::Uniform => 1.0 / self.tau,
            TemperatureMode::Literal => 1.0,
        }
    }
}

/// Unit-norm encoder outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `B × d`, un-augmented image embeddings.
    pub image: Matrix,
    /// `B × d`
    pub text: Matrix,
    /// One `B × d` matrix per augmentation.
    pub views: Vec<Matrix>,
}

impl EmbeddingBatch {
    pub fn batch_size(&self) -> usize {
        self.text.rows
    }

    fn validate(&self, labels: &[Label]) -> Result<()> {
        let b = self.text.rows;
        if labels.len() != b {
            return Err(DpodError::DimensionMismatch {
                expected: b,
                actual: labels.len(),
                context: "labels per batch",
            });
        }
        if b < 2 {
            return Err(DpodError::Empty("alignment needs at least two samples per batch".into()));
        }
        if self.views.len() != NUM_VIEWS {
            return Err(DpodError::DimensionMismatch {
                expected: NUM_VIEWS,
                actual: self.views.len(),
                context: "augmentation views",
            });
        }
        let d = self.text.cols;
        for m in self.views.iter().chain([&self.image]) {
            if m.shape() != (b, d) {
                return Err(DpodError::DimensionMismatch {
                    expected: b * d,
                    actual: m.len(),
                    context: "embedding batch shape",
                });
            }
        }
        for m in self.views.iter().chain([&self.image, &self.text]) {
            for r in 0..m.rows {
                let n = dot(m.row(r), m.row(r)).sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(DpodError::Degenerate(format!("embedding row norm {n} is not 1")));
                }
            }
        }
        Ok(())
    }

    /// All participating views stacked view-major: row `a·B + k` is view `a` of sample `k`.
    fn stacked_views(&self, include_original: bool) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for m in self.views.iter().chain(include_original.then_some(&self.image)) {
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Matrix::from_vec(rows, self.text.cols, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AlignmentLoss {
    /// `β · fake + true_l1 + true_l2`
    pub total: f64,
    pub true_l1: f64,
    pub true_l2: f64,
    pub fake: f64,
    pub n_true: usize,
    pub n_fake: usize,
}

impl AlignmentLoss {
    pub fn true_loss(&self) -> f64 {
        self.true_l1 + self.true_l2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub image: Matrix,
    pub text: Matrix,
    pub views: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    /// View-view term of a true anchor.
    TrueViews { partner: usize },
    /// View-text term of a true anchor.
    TrueText,
    /// View-view term of a fake anchor.
    FakeViews { partner: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTerm {
    pub sample: usize,
    pub view: usize,
    pub kind: TermKind,
    pub value: f64,
}

struct Sims {
    n_views: usize,
    b: usize,
    vv: Matrix,
    vt: Matrix,
    tt: Matrix,
}

impl Sims {
    fn new(batch: &EmbeddingBatch, include_original: bool) -> (Self, Matrix) {
        let stacked = batch.stacked_views(include_original);
        let b = batch.batch_size();
        let sims = Sims {
            n_views: stacked.rows / b,
            b,
            vv: stacked.matmul_t(&stacked),
            vt: stacked.matmul_t(&batch.text),
            tt: batch.text.matmul_t(&batch.text),
        };
        (sims, stacked)
    }

    #[inline]
    fn p(&self, view: usize, sample: usize) -> usize {
        view * self.b + sample
    }
}

fn branch_of(label: Label, cfg: &AlignmentConfig) -> Label {
    if cfg.label_aware {
        label
    } else {
        Label::True
    }
}

/// Negative mass for anchor `(i, k)`; `own_pair` adds the anchor's own view-text term.
fn denominator(s: &Sims, i: usize, k: usize, own_pair: bool, scale: f64) -> f64 {
    let p = s.p(i, k);
    let mut d = 0.0;
    for t in (0..s.b).filter(|&t| t != k) {
        for a in 0..s.n_views {
            d += (s.vv.get(p, s.p(a, t)) * scale).exp();
        }
        d += (s.vt.get(p, t) * scale).exp();
        d += (s.tt.get(k, t) * scale).exp();
    }
    if own_pair {
        d += (s.vt.get(p, k) * scale).exp();
    }
    d
}

/// Every individual loss term, anchors in (sample, view) order.
pub fn anchor_terms(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig) -> Result<Vec<AnchorTerm>> {
    cfg.validate()?;
    batch.validate(labels)?;
    let (s, _) = Sims::new(batch, cfg.include_original_view);
    let scale = cfg.denom_scale();
    let mut out = Vec::new();
    for (k, &label) in labels.iter().enumerate() {
        let fake = branch_of(label, cfg).is_fake();
        for i in 0..s.n_views {
            let log_d = denominator(&s, i, k, fake, scale).ln();
            let p = s.p(i, k);
            for j in (0..s.n_views).filter(|&j| j != i) {
                let value = -s.vv.get(p, s.p(j, k)) / cfg.tau + log_d;
                let kind = if fake {
                    TermKind::FakeViews { partner: j }
                } else {
                    TermKind::TrueViews { partner: j }
                };
                out.push(AnchorTerm { sample: k, view: i, kind, value });
            }
            if !fake {
                let value = -s.vt.get(p, k) / cfg.tau + log_d;
                out.push(AnchorTerm {
                    sample: k,
                    view: i,
                    kind: TermKind::TrueText,
                    value,
                });
            }
        }
    }
    Ok(out)
}

fn evaluate(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig, want_grad: bool) -> Result<(AlignmentLoss, Option<EmbeddingGrads>)> {
    cfg.validate()?;
    batch.validate(labels)?;
    let (s, stacked) = Sims::new(batch, cfg.include_original_view);
    let scale = cfg.denom_scale();
    let nv = s.n_views;
    let pairs = (nv * (nv - 1)) as f64;
    let n_fake = labels.iter().filter(|&&l| branch_of(l, cfg).is_fake()).count();
    let n_true = labels.len() - n_fake;

    let w1 = if n_true > 0 { 1.0 / (n_true as f64 * pairs) } else { 0.0 };
    let w2 = if n_true > 0 { 1.0 / (n_true * nv) as f64 } else { 0.0 };
    let wf = if n_fake > 0 { cfg.beta / (n_fake as f64 * pairs) } else { 0.0 };

    let mut loss = AlignmentLoss {
        n_true,
        n_fake,
        ..Default::default()
    };
    let nvb = nv * s.b;
    let (mut g_vv, mut g_vt, mut g_tt) = if want_grad {
        (Matrix::zeros(nvb, nvb), Matrix::zeros(nvb, s.b), Matrix::zeros(s.b, s.b))
    } else {
        (Matrix::zeros(0, 0), Matrix::zeros(0, 0), Matrix::zeros(0, 0))
    };

    // fixed (sample, view) order keeps the sums bit-reproducible
    for (k, &label) in labels.iter().enumerate() {
        let fake = branch_of(label, cfg).is_fake();
        for i in 0..nv {
            let p = s.p(i, k);
            let d = denominator(&s, i, k, fake, scale);
            let log_d = d.ln();
            let mut view_sum = 0.0;
            for j in (0..nv).filter(|&j| j != i) {
                view_sum += -s.vv.get(p, s.p(j, k)) / cfg.tau + log_d;
            }
            // weight carried by log D for this anchor
            let c = if fake {
                loss.fake += view_sum / (n_fake as f64 * pairs);
                wf * (nv - 1) as f64
            } else {
                loss.true_l1 += view_sum * w1;
                loss.true_l2 += (-s.vt.get(p, k) / cfg.tau + log_d) * w2;
                w1 * (nv - 1) as f64 + w2
            };
            if !want_grad {
                continue;
            }
            let num_w = if fake { wf } else { w1 };
            for j in (0..nv).filter(|&j| j != i) {
                let q = s.p(j, k);
                g_vv.set(p, q, g_vv.get(p, q) - num_w / cfg.tau);
            }
            if !fake {
                g_vt.set(p, k, g_vt.get(p, k) - w2 / cfg.tau);
            }
            let f = c * scale / d;
            for t in (0..s.b).filter(|&t| t != k) {
                for a in 0..nv {
                    let q = s.p(a, t);
                    let e = (s.vv.get(p, q) * scale).exp();
                    g_vv.set(p, q, g_vv.get(p, q) + f * e);
                }
                let e = (s.vt.get(p, t) * scale).exp();
                g_vt.set(p, t, g_vt.get(p, t) + f * e);
                let e = (s.tt.get(k, t) * scale).exp();
                g_tt.set(k, t, g_tt.get(k, t) + f * e);
            }
            if fake {
                let e = (s.vt.get(p, k) * scale).exp();
                g_vt.set(p, k, g_vt.get(p, k) + f * e);
            }
        }
    }
    loss.total = cfg.beta * loss.fake + loss.true_l1 + loss.true_l2;
    if !loss.total.is_finite() {
        return Ok((loss, None));
    }
    if !want_grad {
        return Ok((loss, None));
    }

    // S_vv = V Vᵀ, S_vt = V Tᵀ, S_tt = T Tᵀ
    let mut d_stacked = g_vv.matmul(&stacked);
    d_stacked.add_assign(&g_vv.t_matmul(&stacked));
    d_stacked.add_assign(&g_vt.matmul(&batch.text));
    let mut d_text = g_vt.t_matmul(&stacked);
    d_text.add_assign(&g_tt.matmul(&batch.text));
    d_text.add_assign(&g_tt.t_matmul(&batch.text));

    let d = batch.text.cols;
    let block = |a: usize| Matrix::from_vec(s.b, d, d_stacked.data[a * s.b * d..(a + 1) * s.b * d].to_vec());
    let views = (0..NUM_VIEWS).map(block).collect();
    let image = if cfg.include_original_view {
        block(NUM_VIEWS)
    } else {
        Matrix::zeros(s.b, d)
    };
    Ok((loss, Some(EmbeddingGrads { image, text: d_text, views })))
}

/// `L_LA = β·L_fake + L_true`; an absent branch contributes 0.
pub fn total_alignment_loss(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig) -> Result<AlignmentLoss> {
    evaluate(batch, labels, cfg, false).map(|(l, _)| l)
}

/// True-branch loss `L1 + L2` over the true anchors of the batch (0 if none).
pub fn loss_true(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig) -> Result<f64> {
    total_alignment_loss(batch, labels, cfg).map(|l| l.true_loss())
}

/// Unweighted fake-branch loss over the fake anchors of the batch (0 if none).
pub fn loss_fake(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig) -> Result<f64> {
    total_alignment_loss(batch, labels, cfg).map(|l| l.fake)
}

/// Loss and its gradient w.r.t. every embedding row of the batch.
pub fn alignment_loss_with_grad(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig) -> Result<(AlignmentLoss, EmbeddingGrads)> {
    let (loss, grads) = evaluate(batch, labels, cfg, true)?;
    match grads {
        Some(g) => Ok((loss, g)),
        None => Err(DpodError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            diagnostics: format!("alignment loss evaluated to {}", loss.total),
        }),
    }
}

/// Raw per-sample inputs for one encoder pass.
pub struct AlignmentInputs<'a> {
    pub images: Vec<&'a [f64]>,
    pub views: Vec<[Vec<f64>; NUM_VIEWS]>,
    pub tokens: Vec<&'a TokenSequence>,
    pub labels: Vec<Label>,
}

/// Encodes a batch on a fresh tape, evaluates the loss and backpropagates to
/// every encoder tensor (returned in [`NamedTensors`] order).
pub fn encoder_loss_and_grad(encoder: &EncoderParams, inputs: &AlignmentInputs<'_>, cfg: &AlignmentConfig) -> Result<(AlignmentLoss, Vec<Matrix>)> {
    let b = inputs.labels.len();
    let mut tape = Tape::new();
    let vars = encoder.bind(&mut tape, true);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(b * (NUM_VIEWS + 1));
    for a in 0..NUM_VIEWS {
        rows.extend(inputs.views.iter().map(|v| v[a].clone()));
    }
    rows.extend(inputs.images.iter().map(|f| f.to_vec()));
    let img_in = tape.constant(Matrix::from_rows(&rows));
    let img_out = encoder.image_on_tape(&mut tape, &vars, img_in);

    let texts: Vec<_> = inputs
        .tokens
        .iter()
        .map(|t| encoder.text_tokens_on_tape(&mut tape, &vars, t))
        .collect();
    let text_out = tape.concat_rows(&texts);

    let all = tape.value(img_out);
    let d = all.cols;
    let block = |a: usize| Matrix::from_vec(b, d, all.data[a * b * d..(a + 1) * b * d].to_vec());
    let batch = EmbeddingBatch {
        views: (0..NUM_VIEWS).map(block).collect(),
        image: block(NUM_VIEWS),
        text: tape.value(text_out).clone(),
    };
    let (loss, g) = alignment_loss_with_grad(&batch, &inputs.labels, cfg)?;

    let mut d_img = Vec::with_capacity(b * (NUM_VIEWS + 1) * d);
    for m in g.views.iter().chain([&g.image]) {
        d_img.extend_from_slice(&m.data);
    }
    let grads = tape.backward(vec![
        (img_out, Matrix::from_vec(b * (NUM_VIEWS + 1), d, d_img)),
        (text_out, g.text),
    ]);
    Ok((loss, vars.gradients(&grads, encoder)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentEpoch {
    pub epoch: usize,
    pub mean_true_loss: f64,
    pub mean_fake_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AlignmentLog {
    pub epochs: Vec<AlignmentEpoch>,
}

impl AlignmentLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_true_loss,mean_fake_loss,total\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.9},{:.9},{:.9}\n", e.epoch, e.mean_true_loss, e.mean_fake_loss, e.total));
        }
        s
    }
}

/// Builds the per-epoch inputs for the given sample indices.
fn batch_inputs<'a>(dataset: &'a Dataset, tokens: &'a [TokenSequence], idx: &[usize], epoch: usize, cfg: &AlignmentConfig) -> Result<AlignmentInputs<'a>> {
    let mut inputs = AlignmentInputs {
        images: Vec::with_capacity(idx.len()),
        views: Vec::with_capacity(idx.len()),
        tokens: Vec::with_capacity(idx.len()),
        labels: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let s = &dataset.samples()[i];
        let f = s.features()?;
        let aug_seed = mix_seed(&[cfg.seed, epoch as u64, i as u64]);
        inputs.images.push(f);
        inputs.views.push(augment_with(f, aug_seed, &cfg.augment).views);
        inputs.tokens.push(&tokens[i]);
        inputs.labels.push(s.label);
    }
    Ok(inputs)
}

/// Stage 1: end-to-end label-aware alignment of an unfrozen encoder.
/// Returns the trained encoder marked frozen, plus the per-epoch loss log.
pub fn train_alignment(dataset: &Dataset, encoder: &EncoderParams, cfg: &AlignmentConfig) -> Result<(EncoderParams, AlignmentLog)> {
    cfg.validate()?;
    if encoder.frozen {
        return Err(DpodError::Frozen("train_alignment"));
    }
    if dataset.len() < 2 {
        return Err(DpodError::Empty("alignment training needs at least two samples".into()));
    }
    let tokens: Vec<TokenSequence> = dataset.samples().iter().map(|s| encoder.tokenize(&s.caption)).collect();
    let mut enc = encoder.clone();
    let shapes: Vec<_> = enc.tensors().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &shapes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xA11]));
    let mut log = AlignmentLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_true, mut sum_fake, mut sum_total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let inputs = batch_inputs(dataset, &tokens, chunk, epoch, cfg)?;
            let result = encoder_loss_and_grad(&enc, &inputs, cfg);
            let (loss, grads) = match result {
                Ok(v) => v,
                Err(DpodError::NonFiniteLoss { diagnostics, .. }) => {
                    return Err(DpodError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        diagnostics: format!("{diagnostics}; parameter norms: {}", enc.norm_summary()),
                    })
                }
                Err(e) => return Err(e),
            };
            let mut params: Vec<&mut Matrix> = enc.tensors_mut().into_iter().map(|(_, m)| m).collect();
            opt.step(&mut params, &grads);
            sum_true += loss.true_loss();
            sum_fake += loss.fake;
            sum_total += loss.total;
            batches += 1;
        }
        if !enc.all_finite() {
            return Err(DpodError::NonFiniteLoss {
                epoch,
                batch: batches,
                diagnostics: format!("parameters diverged: {}", enc.norm_summary()),
            });
        }
        let n = batches.max(1) as f64;
        let entry = AlignmentEpoch {
            epoch: epoch + 1,
            mean_true_loss: sum_true / n,
            mean_fake_loss: sum_fake / n,
            total: sum_total / n,
        };
        debug!("stage1 epoch {}: total {:.5}", entry.epoch, entry.total);
        log.epochs.push(entry);
    }
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        info!("stage1 finished: loss {:.4} -> {:.4}", first.total, last.total);
    }
    enc.frozen = true;
    Ok((enc, log))
}

/// Mean image-caption similarity over true and over fake pairs.
pub fn pair_similarity(dataset: &Dataset, encoder: &EncoderParams) -> Result<(f64, f64)> {
    let (mut st, mut nt, mut sf, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for s in dataset.samples() {
        let img = encoder.embed_image(s.features()?)?;
        let txt = encoder.embed_caption(&encoder.tokenize(&s.caption))?;
        let sim = dot(&img, &txt);
        if s.label.is_fake() {
            sf += sim;
            nf += 1;
        } else {
            st += sim;
            nt += 1;
        }
    }
    Ok((st / nt.max(1) as f64, sf / nf.max(1) as f64))
}
