//! SNLI-format ingestion: line-delimited JSON records, label filtering and
//! tokenization.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::Value;

use crate::error::{Error, Result};

/// Relationship label. The discriminant is the class index used by the
/// classifier and every serialized artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Entailment = 0,
    Contradiction = 1,
    Neutral = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Index(format!("class index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }

    /// Single-letter code used in confusion-matrix headers.
    pub fn code(self) -> char {
        match self {
            Label::Entailment => 'E',
            Label::Contradiction => 'C',
            Label::Neutral => 'N',
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "entailment" => Ok(Label::Entailment),
            "contradiction" => Ok(Label::Contradiction),
            "neutral" => Ok(Label::Neutral),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Gold label values marking a pair without annotator consensus.
const NO_CONSENSUS: [&str; 2] = ["-", "\u{2212}"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPair {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: Label,
}

impl LabeledPair {
    pub fn new(premise: Vec<String>, hypothesis: Vec<String>, label: Label) -> Result<Self> {
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::InvalidInput("premise and hypothesis must be nonempty".into()));
        }
        Ok(Self {
            premise,
            hypothesis,
            label,
        })
    }

    /// Builds a pair from whitespace-separated sentences.
    pub fn from_text(premise: &str, hypothesis: &str, label: Label) -> Result<Self> {
        Self::new(split_plain(premise), split_plain(hypothesis), label)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub pairs: Vec<LabeledPair>,
    pub split: String,
    pub source: PathBuf,
    pub kept: usize,
    pub dropped: usize,
}

impl Corpus {
    pub fn from_pairs(pairs: Vec<LabeledPair>, split: impl Into<String>) -> Self {
        let kept = pairs.len();
        Self {
            pairs,
            split: split.into(),
            source: PathBuf::new(),
            kept,
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One raw record before tokenization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SnliRecord {
    pub gold_label: String,
    pub sentence1: String,
    pub sentence2: String,
    pub sentence1_binary_parse: Option<String>,
    pub sentence2_binary_parse: Option<String>,
}

fn split_plain(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn split_parse(s: &str) -> Vec<String> {
    s.split_whitespace()
        .filter(|t| *t != "(" && *t != ")")
        .map(str::to_string)
        .collect()
}

/// Token sequences for both sentences. Binary-parse leaves are preferred;
/// otherwise the plain sentence is split on whitespace. Casing is kept.
pub fn tokenize(record: &SnliRecord) -> std::result::Result<(Vec<String>, Vec<String>), String> {
    let side = |parse: &Option<String>, plain: &str, field: &str| {
        let tokens = match parse {
            Some(p) => split_parse(p),
            None => split_plain(plain),
        };
        if tokens.is_empty() {
            Err(format!("{field} has no tokens"))
        } else {
            Ok(tokens)
        }
    };
    Ok((
        side(&record.sentence1_binary_parse, &record.sentence1, "sentence1")?,
        side(&record.sentence2_binary_parse, &record.sentence2, "sentence2")?,
    ))
}

fn parse_record(line: &str) -> std::result::Result<SnliRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid record: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let required = |name: &str| -> std::result::Result<String, String> {
        obj.get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| format!("missing required field {name:?}"))
    };
    let optional = |name: &str| obj.get(name).and_then(Value::as_str).map(str::to_string);
    Ok(SnliRecord {
        gold_label: required("gold_label")?,
        sentence1: required("sentence1")?,
        sentence2: required("sentence2")?,
        sentence1_binary_parse: optional("sentence1_binary_parse"),
        sentence2_binary_parse: optional("sentence2_binary_parse"),
    })
}

/// Parses SNLI line-delimited records from a string. Pairs without
/// annotator consensus are dropped and counted; anything malformed is an
/// error carrying its 1-based line number.
pub fn parse_snli_str(text: &str, path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus {
        source: path.to_path_buf(),
        split: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        ..Default::default()
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(line).map_err(|m| Error::parse(path, lineno, m))?;
        if NO_CONSENSUS.contains(&record.gold_label.trim()) {
            corpus.dropped += 1;
            continue;
        }
        let label = record
            .gold_label
            .trim()
            .parse::<Label>()
            .map_err(|m| Error::parse(path, lineno, m))?;
        let (premise, hypothesis) = tokenize(&record).map_err(|m| Error::parse(path, lineno, m))?;
        corpus.pairs.push(LabeledPair {
            premise,
            hypothesis,
            label,
        });
        corpus.kept += 1;
    }
    Ok(corpus)
}

pub fn parse_snli(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_snli_str(&text, path)
}

/// Reads the tab-separated `label\tpremise\thypothesis` format.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let label = fields[0].parse::<Label>().map_err(|m| Error::parse(path, i + 1, m))?;
        let pair = LabeledPair::from_text(fields[1], fields[2], label)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        pairs.push(pair);
    }
    let mut corpus = Corpus::from_pairs(
        pairs,
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    corpus.source = path.to_path_buf();
    Ok(corpus)
}

pub fn write_tsv(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in &corpus.pairs {
        writeln!(out, "{}\t{}\t{}", p.label, p.premise.join(" "), p.hypothesis.join(" "))?;
    }
    out.flush()?;
    Ok(())
}
