//! Caption records, tokenization, vocabulary, the JSONL interchange format
//! and the toy caption grammar.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, map everything outside `[a-z0-9']` to a space, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub objects: Vec<String>,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, objects: Vec<String>) -> Self {
        let text = text.into();
        let mut seen = HashSet::new();
        let objects = objects
            .into_iter()
            .filter(|o| seen.insert(o.clone()))
            .collect();
        Self {
            id: id.into(),
            tokens: tokenize(&text),
            text,
            objects,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    text: String,
    #[serde(default)]
    objects: Vec<String>,
}

pub fn read_corpus<R: BufRead>(source: R) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(CaptionRecord::new(rec.id, rec.text, rec.objects));
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(records: &[CaptionRecord], mut sink: W) -> Result<()> {
    for r in records {
        let line = RecordLine {
            id: r.id.clone(),
            text: r.text.clone(),
            objects: r.objects.clone(),
        };
        serde_json::to_writer(&mut sink, &line).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn save_corpus(records: &[CaptionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_corpus(records, BufWriter::new(File::create(path)?))
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ordered by descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[CaptionRecord], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for r in corpus {
            for t in &r.tokens {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_owned()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuild from an id-ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// `BOS w_1 .. w_n EOS`
    pub fn encode_caption(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| SPECIALS[UNK].to_owned())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGrammar {
    pub articles: Vec<String>,
    pub colors: Vec<String>,
    pub objects: Vec<String>,
    pub verb_phrases: Vec<String>,
    pub places: Vec<String>,
    pub seed: u64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for ToyGrammar {
    fn default() -> Self {
        Self {
            articles: words(&["a", "the"]),
            colors: words(&[
                "red", "blue", "green", "yellow", "black", "white", "brown", "orange",
            ]),
            objects: words(&[
                "dog", "cat", "horse", "bird", "cow", "sheep", "car", "bus", "boat", "bicycle",
            ]),
            verb_phrases: words(&[
                "is standing",
                "is resting",
                "is waiting",
                "is moving slowly",
                "is parked alone",
            ]),
            places: words(&[
                "on the beach",
                "in the park",
                "near the river",
                "on the street",
                "in the snow",
                "under a tree",
            ]),
            seed: 1,
        }
    }
}

impl ToyGrammar {
    pub fn combinations(&self) -> usize {
        self.colors.len() * self.objects.len() * self.verb_phrases.len() * self.places.len()
    }

    fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("articles", &self.articles),
            ("colors", &self.colors),
            ("objects", &self.objects),
            ("verb_phrases", &self.verb_phrases),
            ("places", &self.places),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("toy grammar has no {name}")));
            }
        }
        Ok(())
    }

    /// `n` distinct captions "{article} {color} {object} {verb phrase} {place}".
    ///
    /// Distinctness is over (color, object, verb phrase, place); the article
    /// is drawn independently. Every record's object list is its object word.
    pub fn generate(&self, n: usize) -> Result<Vec<CaptionRecord>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Empty("toy corpus size must be >= 1".into()));
        }
        let available = self.combinations();
        if n > available {
            return Err(Error::TooManyRecords {
                requested: n,
                available,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut combos: Vec<usize> = (0..available).collect();
        combos.shuffle(&mut rng);
        let (nc, no, nv, np) = (
            self.colors.len(),
            self.objects.len(),
            self.verb_phrases.len(),
            self.places.len(),
        );
        let records = combos[..n]
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let color = &self.colors[c % nc];
                let object = &self.objects[(c / nc) % no];
                let verb = &self.verb_phrases[(c / (nc * no)) % nv];
                let place = &self.places[c / (nc * no * nv) % np];
                let article = &self.articles[rng.random_range(0..self.articles.len())];
                CaptionRecord::new(
                    format!("toy-{k:06}"),
                    format!("{article} {color} {object} {verb} {place}"),
                    vec![object.clone()],
                )
            })
            .collect();
        Ok(records)
    }
}

pub fn generate_toy_corpus(grammar: &ToyGrammar, n: usize) -> Result<Vec<CaptionRecord>> {
    grammar.generate(n)
}
