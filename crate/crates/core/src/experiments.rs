//! Evaluation, ablation runs, prompt similarity and report export.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::alignment::{train_alignment, AlignmentConfig, AlignmentLog, TemperatureMode};
use crate::corpus::{generate_synthetic, load_manifest, stratified_subset, train_test_split, ClusterMap, Dataset, Label, SyntheticConfig};
use crate::domain_vectors::{domain_mean_table, domain_vectors};
use crate::encoder::{mix_seed, EncoderConfig, EncoderParams, Vocabulary};
use crate::error::{DpodError, Result};
use crate::gradcheck::{check_alignment_gradients, check_stage3_gradients};
use crate::prompt_classifier::{
    domain_code, train_stage3, ClassifierConfig, ClassifierParams, PromptMode, PromptParams, Stage3Config, Stage3Log, Stage3Model,
};
use crate::tensor::{cosine, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullDpod,
    NoStage1,
    OnehotDomain,
    GenericV4,
    PrefixOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FullDpod,
        Variant::NoStage1,
        Variant::OnehotDomain,
        Variant::GenericV4,
        Variant::PrefixOnly,
    ];

    pub fn prompt_mode(self) -> PromptMode {
        match self {
            Variant::FullDpod | Variant::NoStage1 => PromptMode::Dpod,
            Variant::OnehotDomain => PromptMode::OnehotDomain,
            Variant::GenericV4 => PromptMode::GenericV4,
            Variant::PrefixOnly => PromptMode::PrefixOnly,
        }
    }

    /// Whether Stage 1 uses the label-aware loss (otherwise every anchor takes the true branch).
    pub fn label_aware(self) -> bool {
        self != Variant::NoStage1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FullDpod => "full_dpod",
            Variant::NoStage1 => "no_stage1",
            Variant::OnehotDomain => "onehot_domain",
            Variant::GenericV4 => "generic_v4",
            Variant::PrefixOnly => "prefix_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DpodError::InvalidConfig(format!("unknown variant {s:?}")))
    }

    /// Reference all-domain accuracy (%) of the full-scale counterpart, carried as a report annotation.
    pub fn reference_accuracy(self) -> f64 {
        match self {
            Variant::FullDpod => 70.811,
            Variant::NoStage1 => 68.205,
            Variant::OnehotDomain => 68.923,
            Variant::GenericV4 => 70.351,
            Variant::PrefixOnly => 69.349,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub fractions: Vec<f64>,
    /// Restricts evaluation to one domain; `None` or `"all"` evaluates every domain.
    pub target_domain: Option<String>,
    pub seeds: Vec<u64>,
    /// Domains used for Stage-3 training; `None` trains on all of them.
    pub train_domains: Option<Vec<String>>,
    /// Manifest to load; the synthetic generator is used when absent.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub out_dir: PathBuf,
    pub test_fraction: f64,
    pub encoder: EncoderConfig,
    pub alignment: AlignmentConfig,
    pub stage3: Stage3Config,
    pub gradcheck: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::FullDpod],
            fractions: vec![1.0],
            target_domain: None,
            seeds: vec![0],
            train_domains: None,
            data: None,
            synthetic: SyntheticConfig::default(),
            out_dir: PathBuf::from("results"),
            test_fraction: 0.25,
            encoder: EncoderConfig::default(),
            alignment: AlignmentConfig::default(),
            stage3: Stage3Config::default(),
            gradcheck: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DpodError::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.variants.is_empty() {
            return Err(DpodError::InvalidConfig("variants must be non-empty".into()));
        }
        if self.fractions.is_empty() {
            return Err(DpodError::InvalidConfig("fractions must be non-empty".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DpodError::InvalidConfig("fractions must be sorted ascending without repeats".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(DpodError::InvalidConfig(format!("fraction {f} not in (0, 1]")));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DpodError::InvalidConfig(format!("test fraction {} not in (0, 1)", self.test_fraction)));
        }
        self.alignment.validate()?;
        self.stage3.validate()
    }

    fn target(&self) -> Option<&str> {
        self.target_domain.as_deref().filter(|d| *d != "all")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub per_domain: Vec<DomainAccuracy>,
}

impl Evaluation {
    /// Accuracy rebuilt from the per-domain rows, weighted by sample count.
    pub fn recombined_accuracy(&self) -> f64 {
        let total: usize = self.per_domain.iter().map(|d| d.total).sum();
        let weighted: f64 = self.per_domain.iter().map(|d| d.accuracy * d.total as f64).sum();
        weighted / total as f64
    }
}

/// Accuracy of predicted labels against gold labels, overall and per domain.
pub fn score_predictions<'a>(rows: impl IntoIterator<Item = (&'a str, Label, Label)>) -> Result<Evaluation> {
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (domain, gold, predicted) in rows {
        let e = per.entry(domain).or_default();
        e.0 += usize::from(gold == predicted);
        e.1 += 1;
    }
    let (correct, total) = per.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(DpodError::Empty("evaluation set".into()));
    }
    let per_domain = per
        .into_iter()
        .map(|(domain, (c, t))| DomainAccuracy {
            domain: domain.to_string(),
            correct: c,
            total: t,
            accuracy: 100.0 * c as f64 / t as f64,
        })
        .collect();
    Ok(Evaluation {
        correct,
        total,
        accuracy: 100.0 * correct as f64 / total as f64,
        per_domain,
    })
}

/// Runs the model on `dataset` (optionally restricted to one domain) and scores it.
pub fn evaluate(dataset: &Dataset, model: &Stage3Model, target_domain: Option<&str>) -> Result<Evaluation> {
    let samples: Vec<_> = dataset
        .samples()
        .iter()
        .filter(|s| target_domain.map_or(true, |d| s.domain == d))
        .collect();
    if samples.is_empty() {
        return Err(DpodError::Empty(match target_domain {
            Some(d) => format!("no evaluation samples in domain {d:?}"),
            None => "evaluation set".into(),
        }));
    }
    let predicted = samples.iter().map(|s| model.infer(s).map(|p| p.label)).collect::<Result<Vec<_>>>()?;
    score_predictions(samples.iter().zip(predicted).map(|(s, p)| (s.domain.as_str(), s.label, p)))
}

/// Cosine similarity between the learnt domain prompt tokens `F(w_i)` of every domain.
pub fn prompt_similarity_matrix(model: &Stage3Model) -> Result<Matrix> {
    let mode = model.prompts.mode;
    if !mode.uses_projection() {
        return Err(DpodError::InvalidConfig(format!("mode {} has no domain prompt token", mode.as_str())));
    }
    let n = model.vectors.n();
    let tokens = (0..n)
        .map(|i| model.prompts.project(&domain_code(mode, &model.vectors, i)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = tokens.iter().position(|t| norm(t) == 0.0) {
        return Err(DpodError::Degenerate(format!("domain prompt of {:?} has zero norm", model.vectors.domains[i])));
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
        for j in i + 1..n {
            let c = cosine(&tokens[i], &tokens[j]).expect("norms checked above");
            m.set(i, j, c);
            m.set(j, i, c);
        }
    }
    Ok(m)
}

/// Mean off-diagonal entry within clusters and across clusters.
pub fn cluster_contrast(sim: &Matrix, clusters: &[usize]) -> (f64, f64) {
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..sim.rows {
        for j in 0..sim.cols {
            if i == j {
                continue;
            }
            if clusters[i] == clusters[j] {
                within += sim.get(i, j);
                nw += 1;
            } else {
                across += sim.get(i, j);
                na += 1;
            }
        }
    }
    (within / nw.max(1) as f64, across / na.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContrast {
    pub within_cluster: f64,
    pub cross_cluster: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub evaluation: Evaluation,
    pub encoder_checksum: String,
    pub stage1_loss: Vec<f64>,
    pub stage3_bce: Vec<f64>,
    pub prompt_contrast: Option<PromptContrast>,
    #[serde(skip)]
    pub similarity: Option<(Vec<String>, Matrix)>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: Variant,
    pub fraction: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<Summary>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Mean and sample standard deviation; the deviation is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn summary(&self, variant: Variant, fraction: f64) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.variant == variant && s.fraction == fraction)
    }

    fn summarize(runs: &[RunResult]) -> Vec<Summary> {
        let mut groups: BTreeMap<(Variant, u64), Vec<f64>> = BTreeMap::new();
        for r in runs {
            groups.entry((r.variant, r.fraction.to_bits())).or_default().push(r.evaluation.accuracy);
        }
        groups
            .into_iter()
            .map(|((variant, bits), accs)| {
                let (mean, std) = mean_std(&accs);
                Summary {
                    variant,
                    fraction: f64::from_bits(bits),
                    runs: accs.len(),
                    mean_accuracy: mean,
                    std_accuracy: std,
                    reference_accuracy: variant.reference_accuracy(),
                }
            })
            .collect()
    }

    /// One row per run, then one row per (variant, fraction) summary.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,variant,fraction,seed,runs,accuracy,std,reference_accuracy,within_cluster,cross_cluster\n");
        for r in &self.runs {
            let (w, c) = r
                .prompt_contrast
                .as_ref()
                .map(|p| (format!("{:.6}", p.within_cluster), format!("{:.6}", p.cross_cluster)))
                .unwrap_or_default();
            s.push_str(&format!(
                "run,{},{},{},1,{:.6},,{},{w},{c}\n",
                r.variant.as_str(),
                r.fraction,
                r.seed,
                r.evaluation.accuracy,
                r.variant.reference_accuracy()
            ));
        }
        for m in &self.summaries {
            s.push_str(&format!(
                "summary,{},{},,{},{:.6},{:.6},{},,\n",
                m.variant.as_str(),
                m.fraction,
                m.runs,
                m.mean_accuracy,
                m.std_accuracy,
                m.reference_accuracy
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Long-format similarity matrices of every run that has one.
    pub fn similarity_csv(&self) -> String {
        let mut s = String::from("variant,fraction,seed,domain_i,domain_j,cosine\n");
        for r in &self.runs {
            if let Some((domains, m)) = &r.similarity {
                for i in 0..m.rows {
                    for j in 0..m.cols {
                        s.push_str(&format!(
                            "{},{},{},{},{},{:.9}\n",
                            r.variant.as_str(),
                            r.fraction,
                            r.seed,
                            domains[i],
                            domains[j],
                            m.get(i, j)
                        ));
                    }
                }
            }
        }
        s
    }
}

/// Everything one variant needs from the shared stages of a (fraction, seed) pair.
struct Prepared {
    train: Dataset,
    test: Dataset,
    encoder: EncoderParams,
    stage1_log: AlignmentLog,
}

/// Fresh encoder whose vocabulary covers the captions of `dataset`.
pub fn init_encoder(dataset: &Dataset, cfg: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    let vocab = Vocabulary::build(dataset.samples().iter().map(|s| s.caption.as_str()));
    let image_dim = dataset
        .samples()
        .first()
        .ok_or_else(|| DpodError::Empty("training data".into()))?
        .features()?
        .len();
    EncoderParams::new(cfg, image_dim, vocab, mix_seed(&[seed, 0xE1C]))
}

pub fn seeded_alignment(cfg: &AlignmentConfig, seed: u64) -> AlignmentConfig {
    AlignmentConfig {
        seed: mix_seed(&[seed, 0xA1]),
        ..cfg.clone()
    }
}

pub fn seeded_stage3(cfg: &Stage3Config, seed: u64) -> Stage3Config {
    Stage3Config {
        seed: mix_seed(&[seed, 0x53]),
        ..cfg.clone()
    }
}

/// Initial prompts and classifier for `mode` on top of a frozen encoder.
pub fn init_stage3(mode: PromptMode, encoder: &EncoderParams, n_domains: usize, seed: u64) -> (PromptParams, ClassifierParams) {
    let prompts = PromptParams::init(mode, encoder, n_domains, mix_seed(&[seed, 0x9A]));
    let d = encoder.embed_dim();
    let classifier = ClassifierParams::init(d, ClassifierConfig::for_dim(d), mix_seed(&[seed, 0xC1]));
    (prompts, classifier)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => load_manifest(path),
        None => generate_synthetic(&cfg.synthetic),
    }
}

fn cluster_assignment(cfg: &ExperimentConfig, domains: &[String]) -> Option<Vec<usize>> {
    if cfg.data.is_some() {
        return None;
    }
    let map: &ClusterMap = &cfg.synthetic.cluster_map;
    domains
        .iter()
        .map(|d| {
            (0..cfg.synthetic.n_domains)
                .find(|&i| SyntheticConfig::domain_name(i) == *d)
                .map(|i| map.cluster_of(i))
        })
        .collect()
}

fn prepare(cfg: &ExperimentConfig, data: &Dataset, fraction: f64, seed: u64, label_aware: bool) -> Result<Prepared> {
    let (train_full, test) = train_test_split(data, cfg.test_fraction, mix_seed(&[seed, 0x5EED]))?;
    let train = if fraction < 1.0 {
        stratified_subset(&train_full, fraction, mix_seed(&[seed, fraction.to_bits()]))?
    } else {
        train_full
    };
    let init = init_encoder(&train, cfg.encoder, seed)?;
    let align = AlignmentConfig {
        label_aware,
        ..seeded_alignment(&cfg.alignment, seed)
    };
    let (encoder, stage1_log) = train_alignment(&train, &init, &align)?;
    Ok(Prepared {
        train,
        test,
        encoder,
        stage1_log,
    })
}

fn run_variant(cfg: &ExperimentConfig, prep: &Prepared, variant: Variant, fraction: f64, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let checksum = prep.encoder.checksum();
    let means = domain_mean_table(&prep.train, &prep.encoder)?;
    let vectors = domain_vectors(&means)?;
    let mode = variant.prompt_mode();
    let (prompts, classifier) = init_stage3(mode, &prep.encoder, vectors.n(), seed);
    let stage3_train = match &cfg.train_domains {
        Some(domains) => prep.train.filter_domains(domains),
        None => prep.train.clone(),
    };
    let s3 = seeded_stage3(&cfg.stage3, seed);
    let (prompts, classifier, stage3_log): (_, _, Stage3Log) = train_stage3(&stage3_train, &prep.encoder, &vectors, &prompts, &classifier, &s3)?;
    if prep.encoder.checksum() != checksum {
        return Err(DpodError::Frozen("encoder changed during stages 2-3"));
    }
    let model = Stage3Model {
        encoder: prep.encoder.clone(),
        vectors,
        means,
        prompts,
        classifier,
        threshold: cfg.stage3.threshold,
        estimate_unknown: true,
    };
    let evaluation = evaluate(&prep.test, &model, cfg.target())?;
    let (similarity, prompt_contrast) = if mode.uses_projection() {
        let m = prompt_similarity_matrix(&model)?;
        let contrast = cluster_assignment(cfg, &model.vectors.domains).map(|c| {
            let (w, x) = cluster_contrast(&m, &c);
            PromptContrast {
                within_cluster: w,
                cross_cluster: x,
            }
        });
        (Some((model.vectors.domains.clone(), m)), contrast)
    } else {
        (None, None)
    };
    Ok(RunResult {
        variant,
        fraction,
        seed,
        train_size: stage3_train.len(),
        test_size: evaluation.total,
        evaluation,
        encoder_checksum: checksum,
        stage1_loss: prep.stage1_log.epochs.iter().map(|e| e.total).collect(),
        stage3_bce: stage3_log.epochs.iter().map(|e| e.mean_bce).collect(),
        prompt_contrast,
        similarity,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

fn with_context(e: DpodError, what: &str) -> DpodError {
    DpodError::InvalidConfig(format!("{what}: {e}"))
}

/// Runs every (fraction, seed, variant) combination. Stage 1 is trained once per
/// (fraction, seed, label-awareness) and shared by the variants that need it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_data(cfg)?;
    let mut runs = Vec::new();
    for &fraction in &cfg.fractions {
        for &seed in &cfg.seeds {
            let mut cache: BTreeMap<bool, Prepared> = BTreeMap::new();
            for &variant in &cfg.variants {
                let ctx = format!("variant {} fraction {fraction} seed {seed}", variant.as_str());
                let aware = variant.label_aware();
                if !cache.contains_key(&aware) {
                    let t = Instant::now();
                    let prep = prepare(cfg, &data, fraction, seed, aware).map_err(|e| with_context(e, &ctx))?;
                    info!("stage 1 ({}) for {ctx}: {:.1}s", if aware { "label-aware" } else { "label-agnostic" }, t.elapsed().as_secs_f64());
                    cache.insert(aware, prep);
                }
                let run = run_variant(cfg, &cache[&aware], variant, fraction, seed).map_err(|e| with_context(e, &ctx))?;
                info!("{ctx}: accuracy {:.2}% ({:.1}s)", run.evaluation.accuracy, run.runtime_secs);
                runs.push(run);
            }
        }
    }
    let summaries = MetricsReport::summarize(&runs);
    Ok(MetricsReport {
        runs,
        summaries,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Text report of the Stage-1 (both temperature modes) and Stage-3 (every prompt mode) gradient checks.
pub fn gradcheck_report(eps: f64, seed: u64) -> Result<(String, f64)> {
    let mut out = String::new();
    let mut worst: f64 = 0.0;
    for mode in [TemperatureMode::Uniform, TemperatureMode::Literal] {
        let cfg = AlignmentConfig {
            temperature_mode: mode,
            ..AlignmentConfig::default()
        };
        let r = check_alignment_gradients(&cfg, eps, seed)?;
        worst = worst.max(r.max_relative_error);
        out.push_str(&format!("stage1 {mode:?}: {r}"));
    }
    for mode in [PromptMode::Dpod, PromptMode::PrefixOnly, PromptMode::GenericV4, PromptMode::OnehotDomain] {
        let r = check_stage3_gradients(mode, eps, seed)?;
        worst = worst.max(r.max_relative_error);
        out.push_str(&format!("stage3 {}: {r}", mode.as_str()));
    }
    out.push_str(&format!("overall max_relative_error {worst:.3e}\n"));
    Ok((out, worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_examples() {
        use Label::*;
        let e = score_predictions([("a", True, True), ("a", Fake, Fake), ("b", True, True), ("b", Fake, True)]).unwrap();
        assert_eq!(e.accuracy, 75.0);
        let perfect = score_predictions([("a", True, True), ("a", Fake, Fake)]).unwrap();
        assert_eq!(perfect.accuracy, 100.0);
        let constant = score_predictions([("a", True, Fake), ("a", Fake, Fake), ("b", True, Fake), ("b", Fake, Fake)]).unwrap();
        assert_eq!(constant.accuracy, 50.0);
        assert!((constant.recombined_accuracy() - constant.accuracy).abs() < 1e-9);
        assert!(matches!(score_predictions(std::iter::empty()), Err(DpodError::Empty(_))));
    }

    #[test]
    fn per_domain_recombines() {
        use Label::*;
        let rows = [("a", True, True), ("a", True, Fake), ("a", Fake, Fake), ("b", Fake, True), ("c", True, True)];
        let e = score_predictions(rows).unwrap();
        assert_eq!(e.per_domain.len(), 3);
        assert!((e.recombined_accuracy() - e.accuracy).abs() < 1e-9);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn contrast_of_block_matrix() {
        let m = Matrix::from_rows(&[vec![1.0, 0.9, 0.1], vec![0.9, 1.0, 0.2], vec![0.1, 0.2, 1.0]]);
        let (w, c) = cluster_contrast(&m, &[0, 0, 1]);
        assert!((w - 0.9).abs() < 1e-12);
        assert!((c - 0.15).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.fractions = vec![0.5, 0.25];
        assert!(c.validate().is_err());
        c.fractions = vec![0.25];
        c.seeds.clear();
        assert!(c.validate().is_err());
        assert_eq!(Variant::parse("generic_v4").unwrap(), Variant::GenericV4);
        assert!(Variant::parse("nope").is_err());
        let json = serde_json::to_string(&ExperimentConfig::default()).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ExperimentConfig::default());
    }
}
