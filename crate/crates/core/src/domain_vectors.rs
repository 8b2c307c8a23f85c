//! Joint embeddings, per-domain mean joints and semantic domain vectors.

use serde::{Deserialize, Serialize};

use crate::corpus::{domain_index, Dataset, DomainCatalog, NewsSample};
use crate::embeddings::EmbeddingProvider;
use crate::encoder::EncoderParams;
use crate::error::{DpodError, Result};
use crate::tensor::{cosine, norm, Matrix};

/// Elementwise product of an image and a text embedding.
pub fn joint_embedding(image: &[f64], text: &[f64]) -> Result<Vec<f64>> {
    if image.len() != text.len() {
        return Err(DpodError::DimensionMismatch {
            expected: image.len(),
            actual: text.len(),
            context: "joint embedding operands",
        });
    }
    Ok(image.iter().zip(text).map(|(a, b)| a * b).collect())
}

/// Row `i` is the mean joint embedding of domain `catalog.domains[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMeanTable {
    pub means: Matrix,
    pub catalog: DomainCatalog,
}

impl DomainMeanTable {
    pub fn n_domains(&self) -> usize {
        self.means.rows
    }

    /// Accumulates joints in dataset order; every catalog domain must receive at least one.
    pub fn from_joints<'a>(catalog: DomainCatalog, joints: impl IntoIterator<Item = (&'a str, Vec<f64>)>) -> Result<Self> {
        let mut sums: Option<Matrix> = None;
        let mut counts = vec![0usize; catalog.len()];
        for (domain, j) in joints {
            let i = catalog
                .index_of(domain)
                .ok_or_else(|| DpodError::UnknownDomain(domain.to_string()))?;
            let m = sums.get_or_insert_with(|| Matrix::zeros(catalog.len(), j.len()));
            if j.len() != m.cols {
                return Err(DpodError::DimensionMismatch {
                    expected: m.cols,
                    actual: j.len(),
                    context: "joint embedding width",
                });
            }
            for (s, v) in m.row_mut(i).iter_mut().zip(&j) {
                *s += v;
            }
            counts[i] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(DpodError::Empty(format!("domain {:?} has no samples", catalog.domains[i])));
        }
        let mut means = sums.ok_or_else(|| DpodError::Empty("no samples for domain means".into()))?;
        for (i, &c) in counts.iter().enumerate() {
            let inv = 1.0 / c as f64;
            means.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Self { means, catalog })
    }
}

/// Joint embedding of a sample under the frozen encoder (no prompts).
pub fn sample_joint(sample: &NewsSample, encoder: &EncoderParams) -> Result<Vec<f64>> {
    let img = encoder.embed_image(sample.features()?)?;
    let txt = encoder.embed_caption(&encoder.tokenize(&sample.caption))?;
    joint_embedding(&img, &txt)
}

/// Mean joint embedding per domain over every sample (true and fake).
pub fn domain_mean_table(dataset: &Dataset, encoder: &EncoderParams) -> Result<DomainMeanTable> {
    if !encoder.frozen {
        return Err(DpodError::InvalidConfig("domain means require a frozen encoder".into()));
    }
    if dataset.is_empty() {
        return Err(DpodError::Empty("dataset for domain means".into()));
    }
    let catalog = domain_index(dataset);
    let joints = dataset
        .samples()
        .iter()
        .map(|s| Ok((s.domain.as_str(), sample_joint(s, encoder)?)))
        .collect::<Result<Vec<_>>>()?;
    DomainMeanTable::from_joints(catalog, joints)
}

/// Same as [`domain_mean_table`], reading stored image and text embeddings by sample id.
pub fn domain_mean_table_from_provider(dataset: &Dataset, provider: &dyn EmbeddingProvider) -> Result<DomainMeanTable> {
    if dataset.is_empty() {
        return Err(DpodError::Empty("dataset for domain means".into()));
    }
    let catalog = domain_index(dataset);
    let joints = dataset
        .samples()
        .iter()
        .map(|s| {
            let row = provider.lookup(&s.id)?;
            Ok((s.domain.as_str(), joint_embedding(&row.image, &row.text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    DomainMeanTable::from_joints(catalog, joints)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDomainVector {
    pub domain: String,
    pub w: Vec<f64>,
}

/// Cosine profile of mean row `i` against every mean row.
pub fn semantic_domain_vector(table: &DomainMeanTable, i: usize) -> Result<SemanticDomainVector> {
    if i >= table.n_domains() {
        return Err(DpodError::DimensionMismatch {
            expected: table.n_domains(),
            actual: i,
            context: "domain index",
        });
    }
    let row_i = table.means.row(i);
    let w = (0..table.n_domains())
        .map(|j| {
            cosine(row_i, table.means.row(j)).ok_or_else(|| {
                let bad = if norm(row_i) == 0.0 { i } else { j };
                DpodError::Degenerate(format!("mean joint of domain {:?} has zero norm", table.catalog.domains[bad]))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticDomainVector {
        domain: table.catalog.domains[i].clone(),
        w,
    })
}

/// All semantic domain vectors, rows in catalog order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainVectors {
    pub domains: Vec<String>,
    pub matrix: Matrix,
}

impl DomainVectors {
    pub fn n(&self) -> usize {
        self.domains.len()
    }

    pub fn index_of(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    pub fn vector(&self, domain: &str) -> Option<SemanticDomainVector> {
        self.index_of(domain).map(|i| SemanticDomainVector {
            domain: domain.to_string(),
            w: self.matrix.row(i).to_vec(),
        })
    }

    /// Header row of domain names, then one row per domain.
    pub fn to_csv(&self) -> String {
        let mut s = self.domains.join(",");
        s.push('\n');
        for r in 0..self.matrix.rows {
            let row: Vec<String> = self.matrix.row(r).iter().map(|v| format!("{v:.12}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| DpodError::Format("empty domain-vector csv".into()))?;
        let domains: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| DpodError::Format(format!("domain-vector row {}: {e}", i + 1)))?;
            if row.len() != domains.len() {
                return Err(DpodError::Format(format!("domain-vector row {} has {} entries", i + 1, row.len())));
            }
            rows.push(row);
        }
        if rows.len() != domains.len() {
            return Err(DpodError::Format("domain-vector csv is not square".into()));
        }
        Ok(Self {
            domains,
            matrix: Matrix::from_rows(&rows),
        })
    }
}

/// The full matrix `W`; row `i` is `w_{D_i}`.
pub fn domain_vectors(table: &DomainMeanTable) -> Result<DomainVectors> {
    let rows = (0..table.n_domains())
        .map(|i| semantic_domain_vector(table, i).map(|v| v.w))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainVectors {
        domains: table.catalog.domains.clone(),
        matrix: Matrix::from_rows(&rows),
    })
}
