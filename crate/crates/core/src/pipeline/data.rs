use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Paths, ToyConfig};
use crate::corpus::{load_corpus, CaptionRecord};
use crate::embedding::{load_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::toy_encoder::{toy_image_encode, toy_text_encode};

/// Row-aligned training captions, text features and pseudo image features.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub records: Vec<CaptionRecord>,
    pub text: EmbeddingMatrix,
    pub pseudo: EmbeddingMatrix,
}

impl TrainingData {
    pub fn new(
        records: Vec<CaptionRecord>,
        text: EmbeddingMatrix,
        pseudo: EmbeddingMatrix,
    ) -> Result<Self> {
        if records.len() != text.rows() || records.len() != pseudo.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} captions, {} text rows, {} pseudo image rows",
                records.len(),
                text.rows(),
                pseudo.rows()
            )));
        }
        if text.dim() != pseudo.dim() {
            return Err(Error::ShapeMismatch(format!(
                "text dim {} differs from pseudo image dim {}",
                text.dim(),
                pseudo.dim()
            )));
        }
        if records.is_empty() {
            return Err(Error::Empty("training corpus is empty".into()));
        }
        Ok(Self {
            records,
            text,
            pseudo,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    /// Drops items that cannot be trained on and returns their original
    /// indices: captions without tokens, and rows whose text or pseudo
    /// feature is all zeros (the exporter's marker for a failed item).
    pub fn drop_unusable_rows(&mut self) -> Result<Vec<usize>> {
        let is_zero = |m: &EmbeddingMatrix, i: usize| m.row(i).iter().all(|&x| x == 0.0);
        let dropped: Vec<usize> = (0..self.len())
            .filter(|&i| {
                self.records[i].tokens.is_empty()
                    || is_zero(&self.text, i)
                    || is_zero(&self.pseudo, i)
            })
            .collect();
        if dropped.is_empty() {
            return Ok(dropped);
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|i| dropped.binary_search(i).is_err())
            .collect();
        let pick =
            |m: &EmbeddingMatrix| EmbeddingMatrix::from_matrix(&m.to_matrix().select_rows(&keep));
        let text = pick(&self.text)?;
        let pseudo = pick(&self.pseudo)?;
        let records = keep.iter().map(|&i| self.records[i].clone()).collect();
        *self = Self::new(records, text, pseudo)?;
        Ok(dropped)
    }
}

/// Image features to caption, with optional references for scoring.
#[derive(Debug, Clone)]
pub struct InferenceData {
    pub ids: Vec<String>,
    pub objects: Vec<Vec<String>>,
    pub features: EmbeddingMatrix,
    /// Reference captions per image; empty when none are known.
    pub references: Vec<Vec<String>>,
}

impl InferenceData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_references(&self) -> bool {
        !self.references.is_empty() && self.references.iter().all(|r| !r.is_empty())
    }
}

fn toy_records(toy: &ToyConfig) -> Result<Vec<CaptionRecord>> {
    toy.grammar.generate(toy.n_train + toy.n_test)
}

fn encode_rows(rows: Vec<Vec<f64>>, dim: usize) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_f64_rows(&rows, dim)
}

/// The first `n_train` grammar combinations with toy text and image features.
pub fn toy_training_data(toy: &ToyConfig) -> Result<TrainingData> {
    let mut records = toy_records(toy)?;
    records.truncate(toy.n_train);
    let spec = &toy.encoder;
    let text = records
        .iter()
        .map(|r| toy_text_encode(&r.tokens, spec))
        .collect::<Result<Vec<_>>>()?;
    let pseudo = records
        .iter()
        .enumerate()
        .map(|(i, r)| toy_image_encode(&r.tokens, i as u64, spec))
        .collect::<Result<Vec<_>>>()?;
    TrainingData::new(
        records,
        encode_rows(text, spec.dim)?,
        encode_rows(pseudo, spec.dim)?,
    )
}

/// The `n_test` combinations after the training ones, encoded as images with
/// item indices that continue past the training range.
pub fn toy_inference_data(toy: &ToyConfig) -> Result<InferenceData> {
    let records = toy_records(toy)?.split_off(toy.n_train);
    let spec = &toy.encoder;
    let features = records
        .iter()
        .enumerate()
        .map(|(j, r)| toy_image_encode(&r.tokens, (toy.n_train + j) as u64, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceData {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        objects: records.iter().map(|r| r.objects.clone()).collect(),
        features: encode_rows(features, spec.dim)?,
        references: records.iter().map(|r| vec![r.text.clone()]).collect(),
    })
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing path: {what}")))
}

pub fn load_training_data(paths: &Paths) -> Result<TrainingData> {
    let records = load_corpus(require(&paths.corpus, "corpus")?)?;
    let text = load_embeddings(require(&paths.text_embeddings, "text_embeddings")?)?;
    let pseudo = load_embeddings(require(&paths.pseudo_embeddings, "pseudo_embeddings")?)?;
    TrainingData::new(records, text, pseudo)
}

/// One line of the inference image list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_inference_data(paths: &Paths) -> Result<InferenceData> {
    let features = load_embeddings(require(&paths.image_embeddings, "image_embeddings")?)?;
    let Some(list) = &paths.image_corpus else {
        return Ok(InferenceData {
            ids: (0..features.rows()).map(|i| i.to_string()).collect(),
            objects: vec![Vec::new(); features.rows()],
            features,
            references: Vec::new(),
        });
    };
    let records: Vec<ImageRecord> = read_jsonl(list)?;
    if records.len() != features.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} image records for {} feature rows",
            records.len(),
            features.rows()
        )));
    }
    let mut seen = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if seen.insert(r.id.as_str(), i).is_some() {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }
    let references = records
        .iter()
        .map(|r| r.refs.iter().cloned().chain(r.text.clone()).collect())
        .collect();
    Ok(InferenceData {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        objects: records
            .iter()
            .map(|r| {
                let mut seen = HashSet::new();
                r.objects
                    .iter()
                    .filter(|o| seen.insert(o.as_str()))
                    .cloned()
                    .collect()
            })
            .collect(),
        features,
        references,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub id: String,
    pub caption: String,
}

pub fn write_captions(captions: &[CaptionOutput], path: impl AsRef<Path>) -> Result<()> {
    let mut sink = BufWriter::new(File::create(path)?);
    for c in captions {
        serde_json::to_writer(&mut sink, c).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionOutput>> {
    let captions: Vec<CaptionOutput> = read_jsonl(path.as_ref())?;
    let mut seen = HashMap::new();
    for c in &captions {
        if seen.insert(c.id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(c.id.clone()));
        }
    }
    Ok(captions)
}

#[derive(Deserialize)]
struct ReferenceLine {
    id: String,
    #[serde(default)]
    refs: Vec<String>,
    #[serde(default)]
    text: Option<String>,
}

/// Reference captions keyed by id. Lines may carry `refs` (a list) or
/// `text` (one caption); repeated ids accumulate.
pub fn read_references(path: impl AsRef<Path>) -> Result<HashMap<String, Vec<String>>> {
    let mut out: HashMap<String, Vec<String>> = HashMap::new();
    for line in read_jsonl::<ReferenceLine>(path.as_ref())? {
        out.entry(line.id)
            .or_default()
            .extend(line.refs.into_iter().chain(line.text));
    }
    Ok(out)
}
