//! Versioned model container.
//!
//! A single JSON header line (format tag, version, stage tag, module versions,
//! dimensions, free-form metadata and the tensor directory) followed by every
//! tensor as row-major little-endian `f32`, in directory order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DomainCatalog;
use crate::domain_vectors::{DomainMeanTable, DomainVectors};
use crate::encoder::{EncoderConfig, EncoderParams, Vocabulary};
use crate::error::{DpodError, Result};
use crate::params::NamedTensors;
use crate::prompt_classifier::{ClassifierConfig, ClassifierParams, PromptMode, PromptParams, Stage3Model};
use crate::tensor::Matrix;

pub const FORMAT: &str = "dpod-model";
pub const VERSION: u32 = 1;

pub const STAGE_ALIGNED: &str = "aligned-encoder";
pub const STAGE_DOMAIN_MEANS: &str = "domain-means";
pub const STAGE_PROMPTED: &str = "prompted-classifier";

fn module_versions() -> BTreeMap<String, u32> {
    ["encoder", "domain_vectors", "prompt", "classifier"]
        .into_iter()
        .map(|m| (m.to_string(), 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    stage: String,
    modules: BTreeMap<String, u32>,
    dims: BTreeMap<String, usize>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub stage: String,
    pub dims: BTreeMap<String, usize>,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl ModelContainer {
    pub fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            dims: BTreeMap::new(),
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, m: &Matrix) {
        self.tensors.push((name.to_string(), m.clone()));
    }

    pub fn push_all(&mut self, group: &dyn NamedTensors) {
        for (name, m) in group.tensors() {
            self.push(name, m);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| DpodError::Format(format!("container has no tensor {name:?}")))
    }

    fn fill(&self, group: &mut dyn NamedTensors) -> Result<()> {
        for (name, dst) in group.tensors_mut() {
            let src = self.get(name)?;
            if src.shape() != dst.shape() {
                return Err(DpodError::Format(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    fn expect_stage(&self, stage: &str) -> Result<()> {
        if self.stage != stage {
            return Err(DpodError::Format(format!("expected a {stage} container, found {}", self.stage)));
        }
        Ok(())
    }

    pub fn write(&self, out: &mut dyn Write) -> Result<()> {
        let io = |e| DpodError::io("<model container>", e);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            stage: self.stage.clone(),
            modules: module_versions(),
            dims: self.dims.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, m)| TensorEntry {
                    name: n.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for (_, m) in &self.tensors {
            let mut buf = Vec::with_capacity(m.len() * 4);
            for v in &m.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read(input: &mut dyn BufRead) -> Result<Self> {
        let mut line = String::new();
        input
            .read_line(&mut line)
            .map_err(|e| DpodError::io("<model container>", e))?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| DpodError::Format(format!("bad model header: {e}")))?;
        if header.format != FORMAT {
            return Err(DpodError::Format(format!("not a model container ({:?})", header.format)));
        }
        if header.version != VERSION {
            return Err(DpodError::Format(format!("unsupported container version {}", header.version)));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let mut buf = vec![0u8; t.rows * t.cols * 4];
            input
                .read_exact(&mut buf)
                .map_err(|_| DpodError::Format(format!("truncated tensor {:?}", t.name)))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| DpodError::io("<model container>", e))? != 0 {
            return Err(DpodError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            stage: header.stage,
            dims: header.dims,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), |w| self.write(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| DpodError::io(path, e))?;
        Self::read(&mut BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    image_dim: usize,
    vocab: Vocabulary,
    frozen: bool,
}

fn encoder_meta(e: &EncoderParams) -> serde_json::Value {
    serde_json::to_value(EncoderMeta {
        config: e.config,
        image_dim: e.image_dim,
        vocab: e.vocab.clone(),
        frozen: e.frozen,
    })
    .expect("encoder metadata serializes")
}

fn encoder_dims(e: &EncoderParams, dims: &mut BTreeMap<String, usize>) {
    dims.insert("embed_dim".into(), e.config.embed_dim);
    dims.insert("token_dim".into(), e.config.token_dim);
    dims.insert("image_dim".into(), e.image_dim);
    dims.insert("vocab_size".into(), e.vocab.len());
}

fn encoder_from(c: &ModelContainer, meta: &serde_json::Value) -> Result<EncoderParams> {
    let mut m: EncoderMeta = serde_json::from_value(meta.clone())?;
    m.vocab.reindex();
    let mut enc = EncoderParams::new(m.config, m.image_dim, m.vocab, 0)?;
    c.fill(&mut enc)?;
    enc.frozen = m.frozen;
    Ok(enc)
}

pub fn encoder_container(e: &EncoderParams) -> ModelContainer {
    let mut c = ModelContainer::new(STAGE_ALIGNED);
    encoder_dims(e, &mut c.dims);
    c.meta = serde_json::json!({ "encoder": encoder_meta(e) });
    c.push_all(e);
    c
}

pub fn encoder_from_container(c: &ModelContainer) -> Result<EncoderParams> {
    c.expect_stage(STAGE_ALIGNED)?;
    encoder_from(c, &c.meta["encoder"])
}

pub fn domain_means_container(t: &DomainMeanTable) -> ModelContainer {
    let mut c = ModelContainer::new(STAGE_DOMAIN_MEANS);
    c.dims.insert("n_domains".into(), t.means.rows);
    c.dims.insert("embed_dim".into(), t.means.cols);
    c.meta = serde_json::json!({ "catalog": t.catalog });
    c.push("domain_means", &t.means);
    c
}

pub fn domain_means_from_container(c: &ModelContainer) -> Result<DomainMeanTable> {
    c.expect_stage(STAGE_DOMAIN_MEANS)?;
    let catalog: DomainCatalog = serde_json::from_value(c.meta["catalog"].clone())?;
    Ok(DomainMeanTable {
        means: c.get("domain_means")?.clone(),
        catalog,
    })
}

#[derive(Serialize, Deserialize)]
struct Stage3Meta {
    mode: PromptMode,
    threshold: f64,
    estimate_unknown: bool,
    classifier: ClassifierConfig,
    domains: Vec<String>,
    catalog: DomainCatalog,
}

pub fn stage3_container(m: &Stage3Model) -> ModelContainer {
    let mut c = ModelContainer::new(STAGE_PROMPTED);
    encoder_dims(&m.encoder, &mut c.dims);
    c.dims.insert("n_domains".into(), m.vectors.n());
    let meta = Stage3Meta {
        mode: m.prompts.mode,
        threshold: m.threshold,
        estimate_unknown: m.estimate_unknown,
        classifier: ClassifierConfig {
            bottleneck: m.classifier.w1.cols,
            hidden: m.classifier.w3.cols,
        },
        domains: m.vectors.domains.clone(),
        catalog: m.means.catalog.clone(),
    };
    c.meta = serde_json::json!({ "encoder": encoder_meta(&m.encoder), "stage3": meta });
    c.push_all(&m.encoder);
    c.push("domain_vectors", &m.vectors.matrix);
    c.push("domain_means", &m.means.means);
    c.push_all(&m.prompts);
    c.push_all(&m.classifier);
    c
}

pub fn stage3_from_container(c: &ModelContainer) -> Result<Stage3Model> {
    c.expect_stage(STAGE_PROMPTED)?;
    let encoder = encoder_from(c, &c.meta["encoder"])?;
    let meta: Stage3Meta = serde_json::from_value(c.meta["stage3"].clone())?;
    let vectors = DomainVectors {
        domains: meta.domains,
        matrix: c.get("domain_vectors")?.clone(),
    };
    let means = DomainMeanTable {
        means: c.get("domain_means")?.clone(),
        catalog: meta.catalog,
    };
    let mut prompts = PromptParams::init(meta.mode, &encoder, vectors.n(), 0);
    c.fill(&mut prompts)?;
    let d = encoder.embed_dim();
    let mut classifier = ClassifierParams::zeros(d, meta.classifier);
    c.fill(&mut classifier)?;
    Ok(Stage3Model {
        encoder,
        vectors,
        means,
        prompts,
        classifier,
        threshold: meta.threshold,
        estimate_unknown: meta.estimate_unknown,
    })
}
