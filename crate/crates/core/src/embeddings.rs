//! Vocabulary, pretrained vector loading and out-of-vocabulary imputation.
//!
//! Ids 0 and 1 are reserved for padding and the NULL premise slot; both
//! rows are zero. Corpus tokens keep their casing in the vocabulary and
//! are lowercased only when matched against the pretrained table. The
//! table is frozen: nothing in training writes to it.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::snli::LabeledPair;

pub const PAD_ID: usize = 0;
pub const NULL_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const NULL_TOKEN: &str = "<null>";

/// Default imputation window: 4 tokens left, 4 right.
pub const DEFAULT_WINDOW: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    oov: BTreeSet<usize>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        Self {
            tokens: vec![PAD_TOKEN.to_string(), NULL_TOKEN.to_string()],
            index: HashMap::new(),
            oov: BTreeSet::new(),
        }
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of a corpus token. Reserved names are never matched.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps tokens to ids; tokens outside the vocabulary map to the NULL id,
    /// whose embedding is zero.
    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(NULL_ID))
            .collect()
    }

    pub fn oov(&self) -> &BTreeSet<usize> {
        &self.oov
    }

    pub fn is_oov(&self, id: usize) -> bool {
        self.oov.contains(&id)
    }

    pub fn oov_tokens(&self) -> impl Iterator<Item = &str> {
        self.oov.iter().map(|&id| self.tokens[id].as_str())
    }

    pub fn mark_oov(&mut self, id: usize) {
        if id > NULL_ID && id < self.tokens.len() {
            self.oov.insert(id);
        }
    }

    /// Line-delimited `<id>\t<token>`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{id}\t{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut vocab = Self::with_reserved();
        for (i, line) in text.lines().enumerate() {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected <id>\\t<token>"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad id {id:?}")))?;
            if id != i {
                return Err(Error::parse(path, i + 1, format!("id {id} out of sequence")));
            }
            if id > NULL_ID {
                if vocab.index.contains_key(tok) {
                    return Err(Error::parse(path, i + 1, format!("duplicate token {tok:?}")));
                }
                vocab.push(tok);
            }
        }
        if vocab.len() < 2 {
            return Err(Error::parse(path, 0, "missing reserved entries"));
        }
        Ok(vocab)
    }

    /// Line-delimited OOV tokens.
    pub fn save_oov(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for tok in self.oov_tokens() {
            writeln!(out, "{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_oov(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            let id = self
                .id(line)
                .ok_or_else(|| Error::parse(path, i + 1, format!("unknown token {line:?}")))?;
            self.oov.insert(id);
        }
        Ok(())
    }
}

/// Every distinct token of both sentences of every pair, ids in
/// first-occurrence order after the reserved ids.
pub fn build_vocab(corpus: &[LabeledPair]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut vocab = Vocabulary::with_reserved();
    for pair in corpus {
        for tok in pair.premise.iter().chain(&pair.hypothesis) {
            vocab.push(tok);
        }
    }
    Ok(vocab)
}

/// Frozen `|V| × l` embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if !matrix.is_matrix() {
            return Err(Error::Dimension("embedding table must be a matrix".into()));
        }
        if matrix.row(PAD_ID)?.data().iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidInput("padding row must be zero".into()));
        }
        Ok(Self { matrix })
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self {
            matrix: Tensor::zeros(&[vocab_size, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, id: usize) -> &[f64] {
        let l = self.dim();
        &self.matrix.data()[id * l..(id + 1) * l]
    }

    fn set_row(&mut self, id: usize, values: &[f64]) {
        let l = self.dim();
        self.matrix.data_mut()[id * l..(id + 1) * l].copy_from_slice(values);
    }

    /// SHA-256 of the little-endian bytes of every value, hex-encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.matrix.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes rows in id order as `<token> <v1> … <vl>`.
    pub fn save(&self, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for id in 0..self.vocab_size() {
            write!(out, "{}", vocab.token(id).unwrap_or("?"))?;
            for v in self.row(id) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a table written by [`EmbeddingTable::save`]; line `i` must hold
    /// the token with id `i`.
    pub fn load(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut data = Vec::new();
        let mut dim = None;
        let mut rows = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split(' ');
            let tok = fields.next().unwrap_or_default();
            if vocab.token(i) != Some(tok) {
                return Err(Error::parse(path, i + 1, format!("expected token for id {i}, got {tok:?}")));
            }
            let values = parse_values(fields, path, i + 1)?;
            match dim {
                None => dim = Some(values.len()),
                Some(l) if l != values.len() => {
                    return Err(Error::parse(path, i + 1, format!("expected {l} values, got {}", values.len())))
                }
                _ => {}
            }
            data.extend(values);
            rows += 1;
        }
        if rows != vocab.len() {
            return Err(Error::Dimension(format!(
                "table has {rows} rows, vocabulary has {} tokens",
                vocab.len()
            )));
        }
        let dim = dim.unwrap_or(0);
        Self::new(Tensor::matrix(rows, dim, data)?)
    }
}

fn parse_values<'a>(fields: impl Iterator<Item = &'a str>, path: &Path, line: usize) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("bad number {f:?}")))
        })
        .collect()
}

/// Fills table rows from a pretrained text file (`<token> <v1> … <vl>` per
/// line, no header). Vocabulary tokens are matched after lowercasing;
/// unmatched tokens get zero rows and are recorded in the vocabulary's OOV
/// set.
pub fn load_pretrained(path: impl AsRef<Path>, vocab: &mut Vocabulary, dim: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    if dim == 0 {
        return Err(Error::Dimension("embedding dimension must be positive".into()));
    }
    let mut wanted: HashMap<String, Vec<usize>> = HashMap::new();
    for id in (NULL_ID + 1)..vocab.len() {
        wanted
            .entry(vocab.tokens[id].to_lowercase())
            .or_default()
            .push(id);
    }

    let mut table = EmbeddingTable::zeros(vocab.len(), dim);
    let mut found = vec![false; vocab.len()];
    let reader = BufReader::new(fs::File::open(path)?);
    let mut seen_first = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(' ').collect();
        let width = fields.len() - 1;
        if width != dim {
            if !seen_first {
                return Err(Error::Dimension(format!(
                    "{} holds {width}-dimensional vectors, expected {dim}",
                    path.display()
                )));
            }
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        seen_first = true;
        let Some(ids) = wanted.get(fields[0]) else { continue };
        if ids.iter().all(|&id| found[id]) {
            continue;
        }
        let values = parse_values(fields[1..].iter().copied(), path, lineno)?;
        for &id in ids {
            if !found[id] {
                table.set_row(id, &values);
                found[id] = true;
            }
        }
    }
    vocab.oov.clear();
    for (id, hit) in found.iter().enumerate().skip(NULL_ID + 1) {
        if !hit {
            vocab.oov.insert(id);
        }
    }
    Ok(table)
}

/// Replaces every OOV row with the mean of the original rows of its
/// in-vocabulary neighbours within `window / 2` positions on each side,
/// pooled over every occurrence in `corpus`. OOV tokens with no such
/// neighbour keep a zero row.
pub fn impute_oov(
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    corpus: &[LabeledPair],
    window: usize,
) -> Result<EmbeddingTable> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("window must be odd and >= 3, got {window}")));
    }
    let half = window / 2;
    let l = table.dim();
    let mut sums: HashMap<usize, (Vec<f64>, usize)> = HashMap::new();
    let usable = |id: usize| id > NULL_ID && !vocab.is_oov(id);

    for pair in corpus {
        for sentence in [&pair.premise, &pair.hypothesis] {
            let ids: Vec<Option<usize>> = sentence.iter().map(|t| vocab.id(t)).collect();
            for (pos, id) in ids.iter().enumerate() {
                let Some(id) = *id else { continue };
                if !vocab.is_oov(id) {
                    continue;
                }
                let lo = pos.saturating_sub(half);
                let hi = (pos + half).min(ids.len() - 1);
                let entry = sums.entry(id).or_insert_with(|| (vec![0.0; l], 0));
                for (n, nid) in ids.iter().enumerate().take(hi + 1).skip(lo) {
                    match nid {
                        Some(nid) if n != pos && usable(*nid) => {
                            for (acc, v) in entry.0.iter_mut().zip(table.row(*nid)) {
                                *acc += v;
                            }
                            entry.1 += 1;
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    let mut out = table.clone();
    for &id in vocab.oov() {
        match sums.get(&id) {
            Some((sum, count)) if *count > 0 => {
                let mean: Vec<f64> = sum.iter().map(|v| v / *count as f64).collect();
                out.set_row(id, &mean);
            }
            _ => out.set_row(id, &vec![0.0; l]),
        }
    }
    Ok(out)
}

/// Stacks the rows for `ids` into a `len × l` tensor.
pub fn lookup(ids: &[usize], table: &EmbeddingTable) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("lookup of an empty id sequence".into()));
    }
    let mut data = Vec::with_capacity(ids.len() * table.dim());
    for &id in ids {
        if id >= table.vocab_size() {
            return Err(Error::Index(format!(
                "token id {id} out of range for vocabulary of {}",
                table.vocab_size()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(ids.len(), table.dim(), data)
}
