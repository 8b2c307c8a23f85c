//! Samples, manifests, synthetic multi-domain data and stratified subsetting.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingProvider;
use crate::error::{DpodError, Result};
use crate::tensor::Matrix;

/// Veracity label. `Fake` is the positive class (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    True = 0,
    Fake = 1,
}

impl Label {
    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            0 => Some(Label::True),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Features(Vec<f64>),
    /// Row id in an imported embedding container.
    Ref(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewsSample {
    pub id: String,
    pub image: ImageSource,
    pub caption: String,
    pub domain: String,
    pub label: Label,
}

impl NewsSample {
    pub fn features(&self) -> Result<&[f64]> {
        match &self.image {
            ImageSource::Features(f) => Ok(f),
            ImageSource::Ref(r) => Err(DpodError::InvalidConfig(format!(
                "sample {:?} references embedding row {r:?}; resolve image refs first",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub fraction: f64,
    samples: Vec<NewsSample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<NewsSample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DpodError::DuplicateId { id: s.id.clone() });
            }
            if s.domain.is_empty() {
                return Err(DpodError::InvalidConfig(format!("sample {:?} has an empty domain", s.id)));
            }
            if let ImageSource::Features(f) = &s.image {
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(DpodError::InvalidConfig(format!(
                        "sample {:?} has non-finite image features",
                        s.id
                    )));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            fraction: 1.0,
            samples,
        })
    }

    pub fn samples(&self) -> &[NewsSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let fake = self.samples.iter().filter(|s| s.label.is_fake()).count();
        (self.samples.len() - fake, fake)
    }

    /// Keeps samples whose domain is in `domains`, preserving order.
    pub fn filter_domains(&self, domains: &[String]) -> Dataset {
        let keep: HashSet<&str> = domains.iter().map(String::as_str).collect();
        Dataset {
            name: self.name.clone(),
            fraction: self.fraction,
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(s.domain.as_str()))
                .cloned()
                .collect(),
        }
    }

    fn with_samples(&self, samples: Vec<NewsSample>, fraction: f64) -> Dataset {
        Dataset {
            name: self.name.clone(),
            fraction,
            samples,
        }
    }

    /// Replaces every `ImageSource::Ref` by the referenced image embedding.
    pub fn resolve_images(&self, provider: &dyn EmbeddingProvider) -> Result<Dataset> {
        let mut samples = self.samples.clone();
        for s in &mut samples {
            if let ImageSource::Ref(r) = &s.image {
                let row = provider.lookup(r)?;
                s.image = ImageSource::Features(row.image.clone());
            }
        }
        Ok(self.with_samples(samples, self.fraction))
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    id: String,
    domain: String,
    label: serde_json::Value,
    caption: String,
    #[serde(default)]
    image_features: Option<Vec<f64>>,
    #[serde(default)]
    image_ref: Option<String>,
}

#[derive(Serialize)]
struct ManifestRecordOut<'a> {
    id: &'a str,
    domain: &'a str,
    label: u8,
    caption: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_features: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
}

/// Reads a JSONL manifest. Blank lines are skipped; line numbers are 1-based.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DpodError::io(path, e))?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DpodError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DpodError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        let label = rec
            .label
            .as_i64()
            .and_then(Label::from_int)
            .ok_or_else(|| DpodError::InvalidLabel {
                line: line_no,
                value: rec.label.to_string(),
            })?;
        let image = match (rec.image_features, rec.image_ref) {
            (Some(f), None) => ImageSource::Features(f),
            (None, Some(r)) => ImageSource::Ref(r),
            _ => {
                return Err(DpodError::MalformedLine {
                    line: line_no,
                    reason: "exactly one of image_features or image_ref is required".into(),
                })
            }
        };
        if rec.domain.is_empty() {
            return Err(DpodError::MalformedLine {
                line: line_no,
                reason: "empty domain".into(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(DpodError::DuplicateId { id: rec.id });
        }
        samples.push(NewsSample {
            id: rec.id,
            image,
            caption: rec.caption,
            domain: rec.domain,
            label,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, samples)
}

pub fn write_manifest(dataset: &Dataset, out: &mut dyn Write) -> Result<()> {
    for s in dataset.samples() {
        let (image_features, image_ref) = match &s.image {
            ImageSource::Features(f) => (Some(f.as_slice()), None),
            ImageSource::Ref(r) => (None, Some(r.as_str())),
        };
        let rec = ManifestRecordOut {
            id: &s.id,
            domain: &s.domain,
            label: s.label as u8,
            caption: &s.caption,
            image_features,
            image_ref,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n").map_err(|e| DpodError::io("<manifest>", e))?;
    }
    Ok(())
}

pub fn save_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), |w| write_manifest(dataset, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCatalog {
    pub domains: Vec<String>,
    pub counts: Vec<usize>,
}

impl DomainCatalog {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn index_of(&self, domain: &str) -> Option<usize> {
        self.domains.binary_search_by(|d| d.as_str().cmp(domain)).ok()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Lexicographically ordered domain names with their sample counts.
pub fn domain_index(dataset: &Dataset) -> DomainCatalog {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in dataset.samples() {
        *counts.entry(s.domain.as_str()).or_default() += 1;
    }
    DomainCatalog {
        domains: counts.keys().map(|d| d.to_string()).collect(),
        counts: counts.values().copied().collect(),
    }
}

/// Indices of samples grouped by (domain, label), in dataset order.
fn strata(dataset: &Dataset) -> BTreeMap<&str, [Vec<usize>; 2]> {
    let mut groups: BTreeMap<&str, [Vec<usize>; 2]> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        groups.entry(s.domain.as_str()).or_default()[s.label as usize].push(i);
    }
    groups
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Domain-stratified subset: `round(fraction · n_D)` samples per domain (at
/// least one), labels split as evenly as availability allows. Selected
/// samples keep their original relative order.
pub fn stratified_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DpodError::InvalidConfig(format!("fraction {fraction} not in (0, 1]")));
    }
    if dataset.is_empty() {
        return Err(DpodError::Empty("cannot subset an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for (_, [trues, fakes]) in strata(dataset) {
        let n = trues.len() + fakes.len();
        let m = round_half_up(fraction * n as f64).clamp(1, n);
        let m_fake = fakes.len().min(m / 2);
        let m_true = trues.len().min(m - m_fake);
        let m_fake = m - m_true;
        for (group, take) in [(trues, m_true), (fakes, m_fake)] {
            let mut g = group;
            g.shuffle(&mut rng);
            for &i in &g[..take] {
                keep[i] = true;
            }
        }
    }
    let samples = dataset
        .samples()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(dataset.with_samples(samples, dataset.fraction * fraction))
}

/// Splits off `round(test_fraction · count)` samples of every (domain, label)
/// stratum as a held-out set. Returns `(train, test)`.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DpodError::InvalidConfig(format!("test fraction {test_fraction} not in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; dataset.len()];
    for (_, groups) in strata(dataset) {
        for mut g in groups {
            let take = round_half_up(test_fraction * g.len() as f64).min(g.len().saturating_sub(1));
            g.shuffle(&mut rng);
            for &i in &g[..take] {
                is_test[i] = true;
            }
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in dataset.samples().iter().zip(&is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    let mut train = dataset.with_samples(train, dataset.fraction);
    let mut test = dataset.with_samples(test, 1.0);
    train.name = format!("{}-train", dataset.name);
    test.name = format!("{}-test", dataset.name);
    Ok((train, test))
}

/// Assignment of synthetic domains to semantic clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap(pub Vec<usize>);

impl ClusterMap {
    /// `n_domains` split into `n_clusters` contiguous, near-equal groups.
    pub fn contiguous(n_domains: usize, n_clusters: usize) -> Self {
        let k = n_clusters.clamp(1, n_domains.max(1));
        Self((0..n_domains).map(|i| i * k / n_domains).collect())
    }

    /// Parses either a cluster count (`"3"`) or an explicit per-domain list (`"0,0,1,2"`).
    pub fn parse(spec: &str, n_domains: usize) -> Result<Self> {
        let spec = spec.trim();
        if spec.contains(',') {
            let ids = spec
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| DpodError::InvalidConfig(format!("cluster spec {spec:?}: {e}")))?;
            if ids.len() != n_domains {
                return Err(DpodError::InvalidConfig(format!(
                    "cluster spec lists {} domains, expected {n_domains}",
                    ids.len()
                )));
            }
            Ok(Self(ids))
        } else {
            let k: usize = spec
                .parse()
                .map_err(|e| DpodError::InvalidConfig(format!("cluster spec {spec:?}: {e}")))?;
            if k == 0 {
                return Err(DpodError::InvalidConfig("cluster count must be positive".into()));
            }
            Ok(Self::contiguous(n_domains, k))
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_of(&self, domain_idx: usize) -> usize {
        self.0[domain_idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_domains: usize,
    pub samples_per_domain: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub cluster_map: ClusterMap,
    pub noise_scale: f64,
    /// Number of filler words; filler tokens carry no signal.
    pub vocab_size: usize,
    /// Fraction of each domain's generating transform shared with its cluster.
    pub cluster_share: f64,
    /// Spread of the cluster means around the origin.
    pub mean_scale: f64,
    /// Draw fake captions from other domains instead of the sample's own.
    pub cross_domain_fakes: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_domains: 8,
            samples_per_domain: 200,
            latent_dim: 8,
            feature_dim: 64,
            cluster_map: ClusterMap::contiguous(8, 3),
            noise_scale: 0.1,
            vocab_size: 24,
            cluster_share: 0.8,
            mean_scale: 3.0,
            cross_domain_fakes: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpodError::InvalidConfig(m));
        if self.n_domains == 0 || self.samples_per_domain == 0 || self.latent_dim == 0 || self.feature_dim == 0 {
            return bad("synthetic sizes must be positive".into());
        }
        if self.samples_per_domain % 2 != 0 {
            return bad(format!("samples_per_domain {} must be even", self.samples_per_domain));
        }
        if self.cluster_map.0.len() != self.n_domains {
            return bad(format!(
                "cluster map covers {} domains, expected {}",
                self.cluster_map.0.len(),
                self.n_domains
            ));
        }
        if !(self.noise_scale >= 0.0 && self.mean_scale >= 0.0) {
            return bad("noise_scale and mean_scale must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.cluster_share) {
            return bad(format!("cluster_share {} not in [0, 1]", self.cluster_share));
        }
        if self.cross_domain_fakes && self.n_domains < 2 {
            return bad("cross-domain fakes need at least two domains".into());
        }
        Ok(())
    }

    pub fn domain_name(i: usize) -> String {
        format!("D{:02}", i + 1)
    }
}

/// Number of latent coordinates a synthetic caption describes.
const CAPTION_WORDS: usize = 6;
const FILLER_WORDS: usize = 2;

struct DomainGenerator {
    transform: Matrix,
    mean: Vec<f64>,
}

impl DomainGenerator {
    fn latent(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise = Matrix::randn(1, self.mean.len(), 1.0, rng);
        self.mean.iter().zip(&noise.data).map(|(m, e)| m + e).collect()
    }
}

fn synthetic_caption(domain_idx: usize, gen: &DomainGenerator, latent: &[f64], cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> String {
    use rand::Rng;
    // Captions describe the sample-specific deviation from the domain mean.
    let dev: Vec<f64> = latent.iter().zip(&gen.mean).map(|(z, m)| z - m).collect();
    let mut order: Vec<usize> = (0..dev.len()).collect();
    order.sort_by(|&a, &b| dev[b].abs().total_cmp(&dev[a].abs()).then(a.cmp(&b)));
    let mut words = vec![format!("topic{}", domain_idx + 1)];
    for &j in order.iter().take(CAPTION_WORDS.min(dev.len())) {
        let dir = if dev[j] >= 0.0 { "up" } else { "down" };
        words.push(format!("{dir}{j}"));
    }
    if cfg.vocab_size > 0 {
        for _ in 0..FILLER_WORDS {
            let pos = rng.gen_range(1..=words.len());
            words.insert(pos, format!("w{}", rng.gen_range(0..cfg.vocab_size)));
        }
    }
    words.join(" ")
}

/// Generates a balanced multi-domain dataset of (image features, caption) pairs.
///
/// Fake samples keep their image but take a caption generated from a fresh
/// latent of the same domain (or another domain with `cross_domain_fakes`).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let n_clusters = cfg.cluster_map.n_clusters();
    let clusters: Vec<(Matrix, Vec<f64>)> = (0..n_clusters)
        .map(|_| {
            let t = Matrix::randn(cfg.latent_dim, cfg.feature_dim, scale, &mut rng);
            let m = Matrix::randn(1, cfg.latent_dim, cfg.mean_scale, &mut rng).data;
            (t, m)
        })
        .collect();
    let (a, b) = (cfg.cluster_share.sqrt(), (1.0 - cfg.cluster_share).sqrt());
    let gens: Vec<DomainGenerator> = (0..cfg.n_domains)
        .map(|i| {
            let (ct, cm) = &clusters[cfg.cluster_map.cluster_of(i)];
            let own = Matrix::randn(cfg.latent_dim, cfg.feature_dim, scale, &mut rng);
            let jitter = Matrix::randn(1, cfg.latent_dim, 0.5, &mut rng);
            let transform = Matrix::from_vec(
                cfg.latent_dim,
                cfg.feature_dim,
                ct.data.iter().zip(&own.data).map(|(c, o)| a * c + b * o).collect(),
            );
            let mean = cm.iter().zip(&jitter.data).map(|(c, j)| c + j).collect();
            DomainGenerator { transform, mean }
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_domains * cfg.samples_per_domain);
    for (d, gen) in gens.iter().enumerate() {
        let domain = SyntheticConfig::domain_name(d);
        let half = cfg.samples_per_domain / 2;
        let mut labels: Vec<Label> = std::iter::repeat(Label::True)
            .take(half)
            .chain(std::iter::repeat(Label::Fake).take(half))
            .collect();
        labels.shuffle(&mut rng);
        for (k, label) in labels.into_iter().enumerate() {
            let z = gen.latent(&mut rng);
            let img_clean = Matrix::row_vector(z.clone()).matmul(&gen.transform);
            let noise = Matrix::randn(1, cfg.feature_dim, cfg.noise_scale.max(0.0), &mut rng);
            let features: Vec<f64> = img_clean.data.iter().zip(&noise.data).map(|(x, e)| x + e).collect();
            let caption = match label {
                Label::True => synthetic_caption(d, gen, &z, cfg, &mut rng),
                Label::Fake => {
                    let src = if cfg.cross_domain_fakes {
                        use rand::Rng;
                        let o = rng.gen_range(0..cfg.n_domains - 1);
                        if o >= d {
                            o + 1
                        } else {
                            o
                        }
                    } else {
                        d
                    };
                    let other = gens[src].latent(&mut rng);
                    synthetic_caption(src, &gens[src], &other, cfg, &mut rng)
                }
            };
            samples.push(NewsSample {
                id: format!("{domain}-{k:05}"),
                image: ImageSource::Features(features),
                caption,
                domain: domain.clone(),
                label,
            });
        }
    }
    Dataset::new(format!("synthetic-s{}", cfg.seed), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, domain: &str, label: Label) -> NewsSample {
        NewsSample {
            id: id.into(),
            image: ImageSource::Features(vec![0.0, 1.0]),
            caption: "x".into(),
            domain: domain.into(),
            label,
        }
    }

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_domains: 4,
            samples_per_domain: 100,
            cluster_map: ClusterMap(vec![0, 0, 1, 1]),
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn synthetic_counts_and_balance() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.label_counts(), (200, 200));
        let cat = domain_index(&ds);
        assert_eq!(cat.counts, vec![100, 100, 100, 100]);
        for d in &cat.domains {
            let fakes = ds.samples().iter().filter(|s| &s.domain == d && s.label.is_fake()).count();
            assert_eq!(fakes, 50);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_manifest(&generate_synthetic(&small_cfg()).unwrap(), &mut a).unwrap();
        write_manifest(&generate_synthetic(&small_cfg()).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn odd_samples_per_domain_rejected() {
        let cfg = SyntheticConfig {
            samples_per_domain: 7,
            ..small_cfg()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(DpodError::InvalidConfig(_))));
    }

    #[test]
    fn same_cluster_domains_are_closer() {
        // naive loop oracle over generated features
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let cat = domain_index(&ds);
        let dim = ds.samples()[0].features().unwrap().len();
        let mut means = vec![vec![0.0; dim]; cat.len()];
        for s in ds.samples() {
            let i = cat.index_of(&s.domain).unwrap();
            for (m, x) in means[i].iter_mut().zip(s.features().unwrap()) {
                *m += x / cat.counts[i] as f64;
            }
        }
        let cos = |a: &[f64], b: &[f64]| {
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for k in 0..a.len() {
                ab += a[k] * b[k];
                aa += a[k] * a[k];
                bb += b[k] * b[k];
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let within = cos(&means[0], &means[1]);
        let across = cos(&means[0], &means[2]);
        assert!(within > across, "within {within} across {across}");
        let within2 = cos(&means[2], &means[3]);
        let across2 = cos(&means[1], &means[3]);
        assert!(within2 > across2, "within {within2} across {across2}");
    }

    #[test]
    fn domain_index_sorts_and_counts() {
        let ds = Dataset::new(
            "t",
            vec![
                sample("a", "sport", Label::True),
                sample("b", "politics", Label::Fake),
                sample("c", "sport", Label::Fake),
            ],
        )
        .unwrap();
        let cat = domain_index(&ds);
        assert_eq!(cat.domains, vec!["politics", "sport"]);
        assert_eq!(cat.counts, vec![1, 2]);
        assert_eq!(cat.index_of("sport"), Some(1));
        assert_eq!(cat.index_of("health"), None);

        let single = Dataset::new("s", vec![sample("a", "x", Label::True)]).unwrap();
        assert_eq!(domain_index(&single).len(), 1);
    }

    #[test]
    fn subset_counts_and_identity() {
        let mut samples = Vec::new();
        for i in 0..8 {
            let label = if i % 2 == 0 { Label::True } else { Label::Fake };
            samples.push(sample(&format!("a{i}"), "alpha", label));
        }
        for i in 0..3 {
            samples.push(sample(&format!("b{i}"), "beta", Label::True));
        }
        let ds = Dataset::new("t", samples).unwrap();
        assert_eq!(stratified_subset(&ds, 1.0, 9).unwrap().samples(), ds.samples());
        let q = stratified_subset(&ds, 0.25, 9).unwrap();
        let alpha: Vec<_> = q.samples().iter().filter(|s| s.domain == "alpha").collect();
        assert_eq!(alpha.len(), 2);
        assert_eq!(alpha.iter().filter(|s| s.label.is_fake()).count(), 1);
        // round(0.75) = 1, and never below one per domain
        assert_eq!(q.samples().iter().filter(|s| s.domain == "beta").count(), 1);
        assert!((q.fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn subset_rejects_bad_input() {
        let ds = Dataset::new("e", vec![]).unwrap();
        assert!(matches!(stratified_subset(&ds, 0.5, 0), Err(DpodError::Empty(_))));
        let ds = Dataset::new("t", vec![sample("a", "x", Label::True)]).unwrap();
        assert!(stratified_subset(&ds, 0.0, 0).is_err());
        assert!(stratified_subset(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let (train, test) = train_test_split(&ds, 0.25, 1).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.label_counts(), (52, 52));
        assert_eq!(domain_index(&test).counts, vec![26, 26, 26, 26]);
        let ids: HashSet<_> = train.samples().iter().map(|s| &s.id).collect();
        assert!(test.samples().iter().all(|s| !ids.contains(&s.id)));
    }

    #[test]
    fn cluster_spec_parsing() {
        assert_eq!(ClusterMap::parse("3", 8).unwrap().0, vec![0, 0, 0, 1, 1, 1, 2, 2]);
        assert_eq!(ClusterMap::parse("0,1,0", 3).unwrap().0, vec![0, 1, 0]);
        assert!(ClusterMap::parse("0,1", 3).is_err());
        assert!(ClusterMap::parse("0", 3).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn subset_is_sub_multiset_with_balanced_labels(seed in 0u64..1000, frac_idx in 0usize..4) {
                let fraction = [0.25, 0.5, 0.75, 1.0][frac_idx];
                let ds = generate_synthetic(&SyntheticConfig {
                    n_domains: 3,
                    samples_per_domain: 10,
                    cluster_map: ClusterMap(vec![0, 1, 1]),
                    seed,
                    ..SyntheticConfig::default()
                }).unwrap();
                let sub = stratified_subset(&ds, fraction, seed).unwrap();
                let ids: HashSet<_> = ds.samples().iter().map(|s| s.id.clone()).collect();
                prop_assert!(sub.samples().iter().all(|s| ids.contains(&s.id)));
                let cat = domain_index(&sub);
                for (d, &c) in cat.domains.iter().zip(&cat.counts) {
                    prop_assert_eq!(c, ((fraction * 10.0) + 0.5).floor() as usize);
                    let fakes = sub.samples().iter().filter(|s| &s.domain == d && s.label.is_fake()).count();
                    prop_assert!((c as i64 - 2 * fakes as i64).abs() <= 1);
                }
            }
        }
    }
}
