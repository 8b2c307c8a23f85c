use dpod::alignment::{pair_similarity, train_alignment, AlignmentConfig};
use dpod::corpus::{generate_synthetic, train_test_split, ClusterMap, SyntheticConfig};
use dpod::domain_vectors::{domain_mean_table, domain_vectors};
use dpod::encoder::EncoderConfig;
use dpod::experiments::{evaluate, init_encoder, init_stage3, run_experiment, ExperimentConfig, Variant};
use dpod::model_io::{stage3_container, stage3_from_container, ModelContainer};
use dpod::prompt_classifier::{estimate_domain_vector, train_stage3, PromptMode, Stage3Config, Stage3Model};
use dpod::DpodError;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        token_dim: 12,
        embed_dim: 16,
        image_hidden: 16,
        ..EncoderConfig::default()
    }
}

fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        n_domains: 4,
        samples_per_domain: 100,
        cluster_map: ClusterMap(vec![0, 0, 1, 1]),
        ..SyntheticConfig::default()
    }
}

struct Trained {
    model: Stage3Model,
    test: dpod::corpus::Dataset,
    stage1: Vec<f64>,
    stage3: Vec<f64>,
    checksum_after_stage1: String,
    generic_before: Vec<f64>,
}

fn train_small(mode: PromptMode, freeze_prefix: bool) -> Trained {
    let data = generate_synthetic(&small_data()).unwrap();
    let (train, test) = train_test_split(&data, 0.25, 9).unwrap();
    let enc = init_encoder(&train, small_encoder(), 1).unwrap();
    let align = AlignmentConfig {
        epochs: 20,
        batch_size: 32,
        ..AlignmentConfig::default()
    };
    let (enc, log1) = train_alignment(&train, &enc, &align).unwrap();
    let checksum = enc.checksum();
    let means = domain_mean_table(&train, &enc).unwrap();
    let vectors = domain_vectors(&means).unwrap();
    let (prompts, classifier) = init_stage3(mode, &enc, vectors.n(), 1);
    let generic_before = prompts.generic.data.clone();
    let s3 = Stage3Config {
        epochs: 10,
        batch_size: 32,
        freeze_prefix,
        ..Stage3Config::default()
    };
    let (prompts, classifier, log3) = train_stage3(&train, &enc, &vectors, &prompts, &classifier, &s3).unwrap();
    Trained {
        model: Stage3Model {
            encoder: enc,
            vectors,
            means,
            prompts,
            classifier,
            threshold: 0.5,
            estimate_unknown: true,
        },
        test,
        stage1: log1.epochs.iter().map(|e| e.total).collect(),
        stage3: log3.epochs.iter().map(|e| e.mean_bce).collect(),
        checksum_after_stage1: checksum,
        generic_before,
    }
}

#[test]
fn losses_fall_and_encoder_stays_frozen() {
    let t = train_small(PromptMode::Dpod, false);
    assert!(t.stage1.last() < t.stage1.first(), "{:?}", t.stage1);
    assert!(t.stage3.last() < t.stage3.first(), "{:?}", t.stage3);
    assert_eq!(t.model.encoder.checksum(), t.checksum_after_stage1);
    assert_ne!(t.model.prompts.generic.data, t.generic_before);
    let (true_sim, fake_sim) = pair_similarity(&t.test, &t.model.encoder).unwrap();
    assert!(true_sim > fake_sim, "{true_sim} vs {fake_sim}");
}

#[test]
fn frozen_prefix_is_untouched() {
    let t = train_small(PromptMode::Dpod, true);
    assert_eq!(t.model.prompts.generic.data, t.generic_before);
}

#[test]
fn evaluation_contract() {
    let t = train_small(PromptMode::Dpod, false);
    let all = evaluate(&t.test, &t.model, None).unwrap();
    assert!((0.0..=100.0).contains(&all.accuracy));
    assert_eq!(all.total, t.test.len());
    assert!((all.recombined_accuracy() - all.accuracy).abs() < 1e-9);
    let one = evaluate(&t.test, &t.model, Some("D02")).unwrap();
    assert_eq!(one.per_domain.len(), 1);
    assert_eq!(one.per_domain[0].domain, "D02");
    assert!(matches!(evaluate(&t.test, &t.model, Some("nowhere")), Err(DpodError::Empty(_))));
}

#[test]
fn estimated_domain_vectors_point_home() {
    let t = train_small(PromptMode::Dpod, false);
    let mut hits = 0;
    for s in t.test.samples() {
        let w = estimate_domain_vector(s, &t.model.encoder, &t.model.means).unwrap().w;
        let best = w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        hits += usize::from(t.model.means.catalog.domains[best] == s.domain);
    }
    assert!(2 * hits > t.test.len(), "{hits} of {}", t.test.len());
}

#[test]
fn unseen_domain_is_estimated_or_rejected() {
    let mut t = train_small(PromptMode::Dpod, false);
    let mut s = t.test.samples()[0].clone();
    s.domain = "elsewhere".into();
    let p = t.model.infer(&s).unwrap();
    assert_eq!(p.w_used.len(), t.model.vectors.n());
    t.model.estimate_unknown = false;
    assert!(matches!(t.model.infer(&s), Err(DpodError::UnknownDomain(_))));
}

#[test]
fn container_round_trip_preserves_predictions() {
    for mode in [PromptMode::Dpod, PromptMode::PrefixOnly, PromptMode::GenericV4, PromptMode::OnehotDomain] {
        let t = train_small(mode, false);
        let mut bytes = Vec::new();
        stage3_container(&t.model).write(&mut bytes).unwrap();
        let back = stage3_from_container(&ModelContainer::read(&mut bytes.as_slice()).unwrap()).unwrap();
        let mut again = Vec::new();
        stage3_container(&back).write(&mut again).unwrap();
        assert_eq!(bytes, again, "{mode:?}");
        for s in t.test.samples().iter().take(20) {
            let (a, b) = (t.model.infer(s).unwrap(), back.infer(s).unwrap());
            assert!((a.score - b.score).abs() < 1e-4, "{mode:?}: {} vs {}", a.score, b.score);
        }
    }
}

#[test]
fn experiment_report_shape() {
    let cfg = ExperimentConfig {
        variants: vec![Variant::FullDpod, Variant::NoStage1],
        seeds: vec![0, 1, 2, 3, 4],
        fractions: vec![0.5],
        synthetic: small_data(),
        encoder: small_encoder(),
        alignment: AlignmentConfig {
            epochs: 2,
            batch_size: 32,
            ..AlignmentConfig::default()
        },
        stage3: Stage3Config {
            epochs: 2,
            batch_size: 32,
            ..Stage3Config::default()
        },
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.runs.len(), 10);
    let s = report.summary(Variant::FullDpod, 0.5).unwrap();
    assert_eq!(s.runs, 5);
    for r in &report.runs {
        assert!((0.0..=100.0).contains(&r.evaluation.accuracy));
        assert!((r.evaluation.recombined_accuracy() - r.evaluation.accuracy).abs() < 1e-9);
        assert_eq!(r.stage1_loss.len(), 2);
    }
    let full: Vec<_> = report.runs.iter().filter(|r| r.variant == Variant::FullDpod).collect();
    let agn: Vec<_> = report.runs.iter().filter(|r| r.variant == Variant::NoStage1).collect();
    assert_ne!(full[0].encoder_checksum, agn[0].encoder_checksum);
    assert_ne!(full[0].encoder_checksum, full[1].encoder_checksum);
    let half = report.runs[0].train_size;
    assert!(half < 180 && half > 0);
}
