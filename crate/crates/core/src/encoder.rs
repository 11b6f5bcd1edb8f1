//! Row to token-sequence encoding.
//!
//! A categorical cell becomes the statement `refined_description + " " +
//! display`; a numerical cell becomes the embedding of its description scaled
//! by `1 + (v - mean) / range`. Every distinct text is embedded once per
//! schema, so encoding a row is a table lookup.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gelu, Tensor};
use crate::embedding::{embed_batch, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::par;
use crate::schema::{Cell, ColumnKind, ColumnSpec, DatasetMatrix, Row, SchemaDescriptor};

/// Which text each cell is rendered to before embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Refined statements and descriptions.
    #[default]
    Semantic,
    /// Raw `name=code` (categorical) or `name` (numerical) strings, meant to
    /// be paired with a structure-free hashing provider.
    RandomEmbed,
    /// The raw column name only; categorical values are dropped, numerical
    /// values still scale the token.
    NameOnly,
}

pub fn build_statement(spec: &ColumnSpec, display: &str) -> Result<String> {
    if spec.kind != ColumnKind::Categorical {
        return Err(Error::Precondition(format!(
            "column `{}` is not categorical",
            spec.name
        )));
    }
    if display.is_empty() {
        return Err(Error::Precondition(format!(
            "empty value display for column `{}`",
            spec.name
        )));
    }
    if !spec.vocabulary.values().any(|d| d == display) {
        return Err(Error::Validation(format!(
            "value `{display}` is not in the vocabulary of column `{}`",
            spec.name
        )));
    }
    Ok(format!("{} {}", spec.refined_description, display))
}

pub fn normalize_value(v: f64, mean: f64, range: f64) -> Result<f64> {
    if !v.is_finite() || !mean.is_finite() || !range.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite input to normalization (v={v}, mean={mean}, range={range})"
        )));
    }
    if range < 0.0 {
        return Err(Error::Precondition(format!("negative range {range}")));
    }
    if range == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 + (v - mean) / range)
}

/// One embedded column-value pair before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticToken {
    pub column: String,
    pub kind: ColumnKind,
    /// Statement (categorical) or description (numerical) text.
    pub statement: String,
    pub raw_embedding: Vec<f64>,
}

pub fn encode_categorical(
    spec: &ColumnSpec,
    display: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<SemanticToken> {
    let statement = build_statement(spec, display)?;
    let e = embed_batch(provider, std::slice::from_ref(&statement))?;
    Ok(SemanticToken {
        column: spec.name.clone(),
        kind: ColumnKind::Categorical,
        statement,
        raw_embedding: e[0].as_slice().to_vec(),
    })
}

pub fn encode_numerical(
    spec: &ColumnSpec,
    v: f64,
    provider: &dyn EmbeddingProvider,
) -> Result<SemanticToken> {
    if spec.kind != ColumnKind::Numerical {
        return Err(Error::Precondition(format!("column `{}` is not numerical", spec.name)));
    }
    let (mean, range) = spec.stats().ok_or_else(|| {
        Error::Precondition(format!("column `{}` has no numeric statistics", spec.name))
    })?;
    let scale = normalize_value(v, mean, range)?;
    let e = embed_batch(provider, std::slice::from_ref(&spec.refined_description))?;
    Ok(SemanticToken {
        column: spec.name.clone(),
        kind: ColumnKind::Numerical,
        statement: spec.refined_description.clone(),
        raw_embedding: e[0].as_slice().iter().map(|x| scale * x).collect(),
    })
}

#[derive(Clone, Debug)]
enum ColumnTable {
    Categorical(HashMap<String, usize>),
    Numerical { entry: usize, mean: f64, range: f64 },
}

/// Embeddings of every text a schema can produce under one variant.
#[derive(Clone, Debug)]
pub struct SchemaEmbeddings {
    variant: EncoderVariant,
    texts: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    columns: Vec<ColumnTable>,
    names: Vec<String>,
    dimension: usize,
}

fn column_texts(spec: &ColumnSpec, variant: EncoderVariant) -> Result<Vec<(Option<String>, String)>> {
    Ok(match (spec.kind, variant) {
        (ColumnKind::Categorical, EncoderVariant::Semantic) => spec
            .vocabulary
            .iter()
            .map(|(code, display)| Ok((Some(code.clone()), build_statement(spec, display)?)))
            .collect::<Result<_>>()?,
        (ColumnKind::Categorical, EncoderVariant::RandomEmbed) => spec
            .vocabulary
            .keys()
            .map(|code| (Some(code.clone()), format!("{}={}", spec.name, code)))
            .collect(),
        (ColumnKind::Categorical, EncoderVariant::NameOnly) => spec
            .vocabulary
            .keys()
            .map(|code| (Some(code.clone()), spec.name.clone()))
            .collect(),
        (ColumnKind::Numerical, EncoderVariant::Semantic) => vec![(None, spec.refined_description.clone())],
        (ColumnKind::Numerical, _) => vec![(None, spec.name.clone())],
    })
}

impl SchemaEmbeddings {
    pub fn build(
        schema: &SchemaDescriptor,
        variant: EncoderVariant,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self> {
        let mut texts: Vec<String> = Vec::new();
        let mut slot: HashMap<String, usize> = HashMap::new();
        let mut intern = |t: String| -> usize {
            if let Some(&i) = slot.get(&t) {
                return i;
            }
            texts.push(t.clone());
            slot.insert(t, texts.len() - 1);
            texts.len() - 1
        };
        let mut columns = Vec::with_capacity(schema.columns.len());
        for spec in &schema.columns {
            let entries = column_texts(spec, variant)?;
            columns.push(match spec.kind {
                ColumnKind::Categorical => ColumnTable::Categorical(
                    entries
                        .into_iter()
                        .map(|(code, text)| (code.expect("categorical entries carry codes"), intern(text)))
                        .collect(),
                ),
                ColumnKind::Numerical => {
                    let (mean, range) = spec.stats().ok_or_else(|| {
                        Error::Precondition(format!("column `{}` has no numeric statistics", spec.name))
                    })?;
                    let (_, text) = entries.into_iter().next().expect("one description");
                    ColumnTable::Numerical {
                        entry: intern(text),
                        mean,
                        range,
                    }
                }
            });
        }
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embed_batch(provider, &texts)?
        };
        Ok(SchemaEmbeddings {
            variant,
            texts,
            vectors,
            columns,
            names: schema.columns.iter().map(|c| c.name.clone()).collect(),
            dimension: provider.dimension(),
        })
    }

    pub fn variant(&self) -> EncoderVariant {
        self.variant
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// All distinct embeddings as a `entries x dimension` matrix.
    pub fn table(&self) -> Tensor {
        let data = self.vectors.iter().flat_map(|v| v.as_slice().iter().copied()).collect();
        Tensor::matrix(self.vectors.len(), self.dimension, data).expect("consistent dimensions")
    }

    /// Token references for one row: `(table entry, scale)` per present
    /// feature, in schema order. `index` only labels errors.
    pub fn row_tokens(&self, index: usize, row: &Row) -> Result<Vec<TokenRef>> {
        if row.cells.len() != self.columns.len() {
            return Err(Error::structure(
                "encode_row",
                format!("row has {} cells, schema has {} columns", row.cells.len(), self.columns.len()),
            ));
        }
        let mut out = Vec::with_capacity(row.cells.len());
        for (c, (cell, table)) in row.cells.iter().zip(&self.columns).enumerate() {
            match (cell, table) {
                (Cell::Missing, _) => {}
                (Cell::Categorical { code, .. }, ColumnTable::Categorical(map)) => {
                    let entry = *map.get(code).ok_or_else(|| Error::UnknownCategory {
                        row: index,
                        column: self.names[c].clone(),
                        value: code.clone(),
                    })?;
                    out.push(TokenRef {
                        column: c as u32,
                        entry: entry as u32,
                        scale: 1.0,
                    });
                }
                (Cell::Numerical(v), ColumnTable::Numerical { entry, mean, range }) => {
                    out.push(TokenRef {
                        column: c as u32,
                        entry: *entry as u32,
                        scale: normalize_value(*v, *mean, *range)?,
                    });
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "cell kind does not match column `{}`",
                        self.names[c]
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Unprojected semantic tokens with their source texts.
    pub fn semantic_tokens(&self, row: &Row) -> Result<Vec<SemanticToken>> {
        Ok(self
            .row_tokens(0, row)?
            .into_iter()
            .map(|t| {
                let e = t.entry as usize;
                let kind = match self.columns[t.column as usize] {
                    ColumnTable::Categorical(_) => ColumnKind::Categorical,
                    ColumnTable::Numerical { .. } => ColumnKind::Numerical,
                };
                SemanticToken {
                    column: self.names[t.column as usize].clone(),
                    kind,
                    statement: self.texts[e].clone(),
                    raw_embedding: self.vectors[e].as_slice().iter().map(|x| t.scale * x).collect(),
                }
            })
            .collect())
    }
}

/// Reference to a table entry, scaled by the normalized value (1 for
/// categorical tokens).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenRef {
    pub column: u32,
    pub entry: u32,
    pub scale: f64,
}

/// Bias-free projection from embedding space to model width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    #[default]
    Linear,
    /// Two bias-free layers with a GELU in between.
    Mlp,
}

/// Snapshot of projection weights, usable outside a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub first: Tensor,
    pub second: Option<Tensor>,
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        self.first.dims2().0
    }

    pub fn output_dim(&self) -> usize {
        match &self.second {
            Some(w) => w.dims2().1,
            None => self.first.dims2().1,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = mat_vec(&self.first, x);
        if let Some(w2) = &self.second {
            h.iter_mut().for_each(|v| *v = gelu(*v));
            h = mat_vec(w2, &h);
        }
        h
    }
}

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = w.dims2();
    let mut out = vec![0.0; c];
    for (i, &xi) in x.iter().enumerate().take(r) {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

/// Projected tokens of one row plus the semantic tokens they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Vec<f64>>,
    pub provenance: Vec<SemanticToken>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn encode_row(
    row: &Row,
    embeddings: &SchemaEmbeddings,
    projection: &Projection,
) -> Result<TokenSequence> {
    if projection.input_dim() != embeddings.dimension() {
        return Err(Error::structure(
            "encode_row",
            format!(
                "projection expects dimension {}, provider gives {}",
                projection.input_dim(),
                embeddings.dimension()
            ),
        ));
    }
    let provenance = embeddings.semantic_tokens(row)?;
    let tokens = provenance.iter().map(|t| projection.apply(&t.raw_embedding)).collect();
    Ok(TokenSequence { tokens, provenance })
}

/// A dataset reduced to what the model consumes.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    /// Distinct embeddings, `entries x dimension`.
    pub table: Tensor,
    pub rows: Vec<Vec<TokenRef>>,
    pub labels: Vec<Vec<Option<bool>>>,
    pub subjects: Vec<String>,
    pub num_labels: usize,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> EncodedDataset {
        EncodedDataset {
            table: self.table.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            num_labels: self.num_labels,
        }
    }

    /// Drop every tabular token, leaving rows with no features.
    pub fn without_features(&self) -> EncodedDataset {
        EncodedDataset {
            rows: vec![Vec::new(); self.rows.len()],
            ..self.clone()
        }
    }
}

pub fn encode_dataset(data: &DatasetMatrix, embeddings: &SchemaEmbeddings) -> Result<EncodedDataset> {
    let rows = par::map_indexed(data.rows.len(), |i| embeddings.row_tokens(i, &data.rows[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedDataset {
        table: embeddings.table(),
        rows,
        labels: data.rows.iter().map(|r| r.labels.clone()).collect(),
        subjects: data.rows.iter().map(|r| r.subject_id.clone()).collect(),
        num_labels: data.schema.num_labels(),
    })
}
