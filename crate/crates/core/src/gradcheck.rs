//! Central-difference gradient verification.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{encoder_loss_and_grad, AlignmentConfig, AlignmentInputs};
use crate::corpus::Label;
use crate::encoder::{augment, EncoderConfig, EncoderParams, Vocabulary};
use crate::error::Result;
use crate::params::NamedTensors;
use crate::prompt_classifier::{stage3_loss_and_grad, ClassifierConfig, ClassifierParams, PromptMode, PromptParams, Stage3Example};
use crate::tensor::Matrix;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const MAX_COORDS_PER_TENSOR: usize = 200;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    pub per_tensor: Vec<(String, f64)>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "max_relative_error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}); {} coordinates",
            self.max_relative_error, self.worst_tensor, self.worst_coord, self.worst_analytic, self.worst_numeric, self.coords_checked
        )?;
        for (name, err) in &self.per_tensor {
            writeln!(f, "  {name}: {err:.3e}")?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `eval` on up to
/// `max_coords` seeded-random coordinates of every tensor.
pub fn grad_check(
    names: &[&str],
    params: &[Matrix],
    analytic: &[Matrix],
    mut eval: impl FnMut(&[Matrix]) -> f64,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    assert_eq!(params.len(), names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        per_tensor: Vec::new(),
    };
    let mut work = params.to_vec();
    for t in 0..params.len() {
        let n = params[t].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut tensor_max: f64 = 0.0;
        for c in coords {
            let orig = work[t].data[c];
            work[t].data[c] = orig + eps;
            let plus = eval(&work);
            work[t].data[c] = orig - eps;
            let minus = eval(&work);
            work[t].data[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data[c];
            let err = relative_error(a, numeric);
            tensor_max = tensor_max.max(err);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = err;
                report.worst_tensor = names[t].to_string();
                report.worst_coord = c;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        report.per_tensor.push((names[t].to_string(), tensor_max));
    }
    report
}

fn small_encoder(seed: u64) -> EncoderParams {
    let vocab = Vocabulary::build(["red cat sits on mat", "blue dog runs in park", "green bird"]);
    let cfg = EncoderConfig {
        token_dim: 6,
        embed_dim: 8,
        image_hidden: 7,
        max_len: 16,
    };
    EncoderParams::new(cfg, 5, vocab, seed).expect("valid encoder config")
}

fn small_images(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| (0..5).map(|i| ((k * 5 + i) as f64 * 0.37).sin() + 0.1 * k as f64).collect())
        .collect()
}

/// Stage-1 loss w.r.t. every encoder tensor on a 4-sample mixed-label batch.
pub fn check_alignment_gradients(cfg: &AlignmentConfig, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let encoder = small_encoder(seed);
    let images = small_images(4);
    let captions = ["red cat on mat", "blue dog in park", "green bird sits", "red dog runs"];
    let tokens: Vec<_> = captions.iter().map(|c| encoder.tokenize(c)).collect();
    let inputs = AlignmentInputs {
        images: images.iter().map(Vec::as_slice).collect(),
        views: images.iter().enumerate().map(|(k, f)| augment(f, seed + k as u64).views).collect(),
        tokens: tokens.iter().collect(),
        labels: vec![Label::True, Label::Fake, Label::True, Label::Fake],
    };
    let (_, analytic) = encoder_loss_and_grad(&encoder, &inputs, cfg)?;
    let names: Vec<&str> = encoder.tensors().iter().map(|(n, _)| *n).collect();
    let params: Vec<Matrix> = encoder.tensors().iter().map(|(_, m)| (*m).clone()).collect();
    let mut probe = encoder.clone();
    let eval = |ps: &[Matrix]| {
        for ((_, dst), src) in probe.tensors_mut().into_iter().zip(ps) {
            dst.data.copy_from_slice(&src.data);
        }
        encoder_loss_and_grad(&probe, &inputs, cfg).map(|(l, _)| l.total).unwrap_or(f64::NAN)
    };
    Ok(grad_check(&names, &params, &analytic, eval, eps, MAX_COORDS_PER_TENSOR, seed))
}

/// Mean BCE w.r.t. the prompt tensors and every classifier tensor, backpropagated
/// through the frozen text tower.
pub fn check_stage3_gradients(mode: PromptMode, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut encoder = small_encoder(seed);
    encoder.frozen = true;
    let n_domains = 3;
    let prompts = PromptParams::init(mode, &encoder, n_domains, seed);
    let d = encoder.embed_dim();
    let classifier = ClassifierParams::init(d, ClassifierConfig::for_dim(d), seed);
    let images = small_images(5);
    let captions = ["red cat on mat", "blue dog", "green bird sits on park", "", "cat runs"];
    let examples: Vec<Stage3Example> = images
        .iter()
        .zip(captions)
        .enumerate()
        .map(|(k, (f, c))| {
            let mut code = vec![0.2, 0.5, 1.0];
            code[k % n_domains] = 1.0;
            Stage3Example {
                image_embedding: encoder.embed_image(f).expect("image dims"),
                tokens: encoder.tokenize(c),
                code,
                label: if k % 2 == 0 { Label::Fake } else { Label::True },
            }
        })
        .collect();
    let refs: Vec<&Stage3Example> = examples.iter().collect();
    let (_, pg, cg) = stage3_loss_and_grad(&encoder, &prompts, &classifier, &refs, false)?;

    let trainable = prompts.trainable_names(false);
    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut analytic = Vec::new();
    for ((name, m), g) in prompts.tensors().into_iter().zip(pg) {
        if trainable.contains(&name) {
            names.push(name);
            params.push(m.clone());
            analytic.push(g);
        }
    }
    let n_prompt = names.len();
    for ((name, m), g) in classifier.tensors().into_iter().zip(cg) {
        names.push(name);
        params.push(m.clone());
        analytic.push(g);
    }
    let mut p_probe = prompts.clone();
    let mut c_probe = classifier.clone();
    let eval = |ps: &[Matrix]| {
        let mut i = 0;
        for (name, dst) in p_probe.tensors_mut() {
            if trainable.contains(&name) {
                dst.data.copy_from_slice(&ps[i].data);
                i += 1;
            }
        }
        debug_assert_eq!(i, n_prompt);
        for ((_, dst), src) in c_probe.tensors_mut().into_iter().zip(&ps[n_prompt..]) {
            dst.data.copy_from_slice(&src.data);
        }
        stage3_loss_and_grad(&encoder, &p_probe, &c_probe, &refs, false)
            .map(|(l, _, _)| l)
            .unwrap_or(f64::NAN)
    };
    Ok(grad_check(&names, &params, &analytic, eval, eps, MAX_COORDS_PER_TENSOR, seed))
}
