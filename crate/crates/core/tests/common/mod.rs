//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dpod::alignment::{AlignmentConfig, EmbeddingBatch, TemperatureMode};
use dpod::corpus::Label;
use dpod::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Random unit-norm batch with at least one label of each kind when `b >= 2`.
pub fn random_batch(seed: u64, b: usize, d: usize) -> (EmbeddingBatch, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = |rng: &mut ChaCha8Rng| Matrix::from_rows(&(0..b).map(|_| unit(rng, d)).collect::<Vec<_>>());
    let image = rows(&mut rng);
    let text = rows(&mut rng);
    let views = (0..4).map(|_| rows(&mut rng)).collect();
    let mut labels: Vec<Label> = (0..b).map(|_| if rng.gen_bool(0.5) { Label::Fake } else { Label::True }).collect();
    labels[0] = Label::True;
    labels[b - 1] = Label::Fake;
    (EmbeddingBatch { image, text, views }, labels)
}

/// Straight transcription of the label-aware objective with explicit loops.
pub fn naive_loss(batch: &EmbeddingBatch, labels: &[Label], cfg: &AlignmentConfig) -> f64 {
    let b = labels.len();
    let mut views: Vec<Vec<Vec<f64>>> = batch.views.iter().map(|m| (0..b).map(|k| m.row(k).to_vec()).collect()).collect();
    if cfg.include_original_view {
        views.push((0..b).map(|k| batch.image.row(k).to_vec()).collect());
    }
    let text: Vec<Vec<f64>> = (0..b).map(|k| batch.text.row(k).to_vec()).collect();
    let nv = views.len();
    let tau = cfg.tau;
    let e = |s: f64| match cfg.temperature_mode {
        TemperatureMode::Uniform => (s / tau).exp(),
        TemperatureMode::Literal => s.exp(),
    };
    let d_true = |i: usize, k: usize| {
        let mut d = 0.0;
        for t in 0..b {
            if t == k {
                continue;
            }
            for a in 0..nv {
                d += e(dot(&views[i][k], &views[a][t]));
            }
            d += e(dot(&views[i][k], &text[t]));
            d += e(dot(&text[k], &text[t]));
        }
        d
    };
    let (mut l1, mut n1, mut l2, mut n2, mut lf, mut nf) = (0.0, 0, 0.0, 0, 0.0, 0);
    for k in 0..b {
        let fake = cfg.label_aware && labels[k] == Label::Fake;
        for i in 0..nv {
            let mut d = d_true(i, k);
            if fake {
                d += e(dot(&views[i][k], &text[k]));
            }
            for j in 0..nv {
                if j == i {
                    continue;
                }
                let term = -((dot(&views[i][k], &views[j][k]) / tau).exp() / d).ln();
                if fake {
                    lf += term;
                    nf += 1;
                } else {
                    l1 += term;
                    n1 += 1;
                }
            }
            if !fake {
                l2 += -((dot(&views[i][k], &text[k]) / tau).exp() / d).ln();
                n2 += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    cfg.beta * mean(lf, nf) + mean(l1, n1) + mean(l2, n2)
}

/// Cosine Gram matrix computed entry by entry.
pub fn gram_oracle(means: &Matrix) -> Matrix {
    let n = means.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (means.row(i), means.row(j));
            out.set(i, j, dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()));
        }
    }
    out
}
