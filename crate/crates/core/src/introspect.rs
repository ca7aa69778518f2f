//! Alignment/gate heatmap export and corpus-level gate statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::matcher::{MatchTrace, Model};
use crate::snli::{Label, LabeledPair};

pub const STOPWORDS_FILE: &str = "stopwords_en_v1.txt";
pub const STOPWORDS_VERSION: &str = "stopwords_en_v1";
/// Directory searched for resource files before the built-in copies.
pub const RESOURCES_ENV: &str = "MLSTM_RESOURCES";
const BUILTIN_STOPWORDS: &str = include_str!("../resources/stopwords_en_v1.txt");

pub const NULL_LABEL: &str = "<NULL>";
const HEATMAP_MAGIC: &str = "# mlstm-heatmap v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StopwordList {
    pub version: String,
    words: BTreeSet<String>,
}

impl StopwordList {
    /// One token per line; `#` starts a comment line. Tokens are lowercased.
    pub fn parse(text: &str, version: impl Into<String>) -> Result<Self> {
        let words: BTreeSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::EmptyInput("stop-word list is empty".into()));
        }
        Ok(Self {
            version: version.into(),
            words,
        })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_STOPWORDS, STOPWORDS_VERSION).expect("built-in list is non-empty")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| STOPWORDS_VERSION.into());
        Self::parse(&fs::read_to_string(path)?, version)
    }

    /// `$MLSTM_RESOURCES/stopwords_en_v1.txt` when that variable is set,
    /// otherwise the built-in copy.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(RESOURCES_ENV) {
            Some(dir) => Self::load(PathBuf::from(dir).join(STOPWORDS_FILE)),
            None => Ok(Self::builtin()),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Figure-style plot data for one pair: the `N × (M+1)` alignment matrix
/// and the `N × d_out` gate matrices, labelled by tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub variant: String,
    pub d_out: usize,
    /// Column labels of `alpha`: [`NULL_LABEL`] then the premise tokens.
    pub columns: Vec<String>,
    /// Row labels: hypothesis tokens.
    pub rows: Vec<String>,
    pub alpha: Vec<Vec<f64>>,
    pub input_gate: Option<Vec<Vec<f64>>>,
    pub forget_gate: Option<Vec<Vec<f64>>>,
    pub output_gate: Option<Vec<Vec<f64>>>,
}

impl Heatmap {
    pub fn from_trace(model: &Model, pair: &LabeledPair, trace: &MatchTrace) -> Result<Self> {
        let mut columns = vec![NULL_LABEL.to_string()];
        columns.extend(pair.premise.iter().cloned());
        if trace.len() != pair.hypothesis.len() {
            return Err(Error::Dimension(format!(
                "trace has {} rows for {} hypothesis tokens",
                trace.len(),
                pair.hypothesis.len()
            )));
        }
        let alpha: Vec<Vec<f64>> = trace.rows.iter().map(|r| r.alpha[..columns.len()].to_vec()).collect();
        let gate = |f: fn(&crate::matcher::GateRow) -> &Vec<f64>| -> Option<Vec<Vec<f64>>> {
            trace.rows.iter().map(|r| r.gates.as_ref().map(|g| f(g).clone())).collect()
        };
        Ok(Self {
            variant: model.config.variant.to_string(),
            d_out: model.config.state_dim(),
            columns,
            rows: pair.hypothesis.clone(),
            alpha,
            input_gate: gate(|g| &g.input),
            forget_gate: gate(|g| &g.forget),
            output_gate: gate(|g| &g.output),
        })
    }

    fn blocks(&self) -> Vec<(&'static str, &Vec<Vec<f64>>)> {
        let mut out = vec![("alpha", &self.alpha)];
        for (name, m) in [
            ("input_gate", &self.input_gate),
            ("forget_gate", &self.forget_gate),
            ("output_gate", &self.output_gate),
        ] {
            if let Some(m) = m {
                out.push((name, m));
            }
        }
        out
    }

    /// Tab-separated text. Values use shortest round-trip formatting, so
    /// [`Heatmap::parse`] recovers them bitwise.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEATMAP_MAGIC}");
        let _ = writeln!(s, "variant\t{}", self.variant);
        let _ = writeln!(s, "d_out\t{}", self.d_out);
        let _ = writeln!(s, "columns\t{}", self.columns.join("\t"));
        let _ = writeln!(s, "rows\t{}", self.rows.join("\t"));
        for (name, m) in self.blocks() {
            let cols = m.first().map_or(0, Vec::len);
            let _ = writeln!(s, "[{name} {}x{cols}]", m.len());
            for (label, row) in self.rows.iter().zip(m) {
                s.push_str(label);
                for v in row {
                    let _ = write!(s, "\t{v}");
                }
                s.push('\n');
            }
        }
        s.push_str("[end]\n");
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {what}")));
        let (n, magic) = next("header")?;
        if magic != HEATMAP_MAGIC {
            return Err(Error::parse(path, n, "not a heatmap file"));
        }
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (n, line) = next(key)?;
            let mut parts = line.split('\t');
            if parts.next() != Some(key) {
                return Err(Error::parse(path, n, format!("expected {key:?} line")));
            }
            Ok((n, parts.map(str::to_string).collect()))
        };
        let (_, variant) = field("variant")?;
        let (n, d_out) = field("d_out")?;
        let d_out: usize = d_out
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, n, "bad d_out"))?;
        let (_, columns) = field("columns")?;
        let (_, rows) = field("rows")?;

        let mut heat = Heatmap {
            variant: variant.join("\t"),
            d_out,
            columns,
            rows,
            alpha: Vec::new(),
            input_gate: None,
            forget_gate: None,
            output_gate: None,
        };
        loop {
            let (n, header) = next("block header")?;
            if header == "[end]" {
                break;
            }
            let inner = header
                .strip_prefix('[')
                .and_then(|h| h.strip_suffix(']'))
                .ok_or_else(|| Error::parse(path, n, "expected a block header"))?;
            let (name, dims) = inner.split_once(' ').ok_or_else(|| Error::parse(path, n, "bad block header"))?;
            let (r, c) = dims
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::parse(path, n, "bad block dimensions"))?;
            if r != heat.rows.len() {
                return Err(Error::parse(path, n, format!("block has {r} rows, header lists {}", heat.rows.len())));
            }
            let mut matrix = Vec::with_capacity(r);
            for k in 0..r {
                let (n, line) = next("matrix row")?;
                let mut parts = line.split('\t');
                if parts.next() != Some(heat.rows[k].as_str()) {
                    return Err(Error::parse(path, n, "row label mismatch"));
                }
                let row: Vec<f64> = parts
                    .map(|v| v.parse::<f64>().map_err(|e| Error::parse(path, n, format!("bad value {v:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if row.len() != c {
                    return Err(Error::parse(path, n, format!("expected {c} values, found {}", row.len())));
                }
                matrix.push(row);
            }
            match name {
                "alpha" => heat.alpha = matrix,
                "input_gate" => heat.input_gate = Some(matrix),
                "forget_gate" => heat.forget_gate = Some(matrix),
                "output_gate" => heat.output_gate = Some(matrix),
                other => return Err(Error::parse(path, n, format!("unknown block {other:?}"))),
            }
        }
        Ok(heat)
    }
}

/// Runs `pair` through `model` and writes its heatmap file.
pub fn export_trace(
    model: &Model,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    pair: &LabeledPair,
    out: impl AsRef<Path>,
) -> Result<Heatmap> {
    let (_, trace) = model.forward_pair(vocab, table, pair)?;
    let heat = Heatmap::from_trace(model, pair, &trace)?;
    heat.write(out)?;
    Ok(heat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Input,
    Forget,
    Output,
}

/// Population mean and standard deviation of scalar gate values in a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub group: String,
    pub gate: Gate,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl GateStats {
    /// `None` for an empty sample. Samples are summed in sorted order, so
    /// the result does not depend on their order.
    pub fn from_samples(group: impl Into<String>, gate: Gate, samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = sorted.iter().map(|x| (x - mean) * (x - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let std = (sq.iter().sum::<f64>() / n).sqrt();
        Some(Self {
            group: group.into(),
            gate,
            mean,
            std,
            n: sorted.len(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateReport {
    pub stats: Vec<GateStats>,
    /// Groups that received no samples.
    pub warnings: Vec<String>,
}

impl GateReport {
    pub fn get(&self, group: &str, gate: Gate) -> Option<&GateStats> {
        self.stats.iter().find(|s| s.group == group && s.gate == gate)
    }

    /// Line-delimited records: a metadata line, one line per group, then
    /// one line per warning.
    pub fn to_json_lines(&self, stopwords: &StopwordList) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            record: &'static str,
            std: &'static str,
            scalar: &'static str,
            stopwords: &'a str,
        }
        #[derive(Serialize)]
        struct Warning<'a> {
            record: &'static str,
            warning: &'a str,
        }
        let mut out = serde_json::to_string(&Meta {
            record: "meta",
            std: "population",
            scalar: "mean over gate dimensions",
            stopwords: &stopwords.version,
        })
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.push('\n');
        for s in &self.stats {
            out.push_str(&serde_json::to_string(s).map_err(|e| Error::InvalidInput(e.to_string()))?);
            out.push('\n');
        }
        for w in &self.warnings {
            out.push_str(
                &serde_json::to_string(&Warning {
                    record: "warning",
                    warning: w,
                })
                .map_err(|e| Error::InvalidInput(e.to_string()))?,
            );
            out.push('\n');
        }
        Ok(out)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Input gates grouped into `stopword` / `content`, forget gates grouped by
/// gold label (`label=entailment`, …), and input gates of each token in
/// `tokens` (`token=<t>`, matched case-insensitively). Each hypothesis
/// position contributes one scalar: its gate vector's mean.
pub fn gate_statistics(
    model: &Model,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    corpus: &[LabeledPair],
    stopwords: &StopwordList,
    tokens: &[String],
) -> Result<GateReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("gate statistics need a non-empty corpus".into()));
    }
    if model.config.variant.is_baseline() {
        return Err(Error::InvalidInput("the baseline head has no gates".into()));
    }
    let traces: Vec<Result<MatchTrace>> = corpus
        .par_iter()
        .map(|p| model.forward_pair(vocab, table, p).map(|(_, t)| t))
        .collect();

    let mut groups: BTreeMap<(Gate, String), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(Gate, String)> = vec![(Gate::Input, "stopword".into()), (Gate::Input, "content".into())];
    order.extend(Label::ALL.iter().map(|l| (Gate::Forget, format!("label={}", l.as_str()))));
    let wanted: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    order.extend(wanted.iter().map(|t| (Gate::Input, format!("token={t}"))));
    for key in &order {
        groups.insert(key.clone(), Vec::new());
    }

    for (pair, trace) in corpus.iter().zip(traces) {
        let trace = trace?;
        for (tok, row) in pair.hypothesis.iter().zip(&trace.rows) {
            let g = row.gates.as_ref().ok_or_else(|| Error::InvalidInput("trace has no gates".into()))?;
            let input = mean(&g.input);
            let forget = mean(&g.forget);
            let kind = if stopwords.contains(tok) { "stopword" } else { "content" };
            groups.get_mut(&(Gate::Input, kind.into())).expect("registered").push(input);
            groups
                .get_mut(&(Gate::Forget, format!("label={}", pair.label.as_str())))
                .expect("registered")
                .push(forget);
            let lower = tok.to_lowercase();
            if wanted.contains(&lower) {
                groups.get_mut(&(Gate::Input, format!("token={lower}"))).expect("registered").push(input);
            }
        }
    }

    let mut report = GateReport::default();
    let mut seen = BTreeSet::new();
    for key in order {
        if !seen.insert(key.clone()) {
            continue;
        }
        match GateStats::from_samples(key.1.clone(), key.0, &groups[&key]) {
            Some(s) => report.stats.push(s),
            None => report.warnings.push(format!("group {} ({:?} gate) has no samples", key.1, key.0)),
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullAlignment {
    pub pair: usize,
    pub position: usize,
    pub token: String,
    pub mass: f64,
}

/// Hypothesis tokens whose alignment weight on the NULL slot exceeds
/// `threshold`, which must lie in (0, 1].
pub fn null_alignment_report(
    model: &Model,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    corpus: &[LabeledPair],
    threshold: f64,
) -> Result<Vec<NullAlignment>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("threshold must be in (0, 1], got {threshold}")));
    }
    let traces: Vec<Result<MatchTrace>> = corpus
        .par_iter()
        .map(|p| model.forward_pair(vocab, table, p).map(|(_, t)| t))
        .collect();
    let mut out = Vec::new();
    for (i, (pair, trace)) in corpus.iter().zip(traces).enumerate() {
        for (k, (tok, row)) in pair.hypothesis.iter().zip(&trace?.rows).enumerate() {
            if row.alpha[0] > threshold {
                out.push(NullAlignment {
                    pair: i,
                    position: k,
                    token: tok.clone(),
                    mass: row.alpha[0],
                });
            }
        }
    }
    Ok(out)
}
