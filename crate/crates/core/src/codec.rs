//! Symbolic encoding of flow records.
//!
//! Every selected feature is discretized into at most `K` value symbols. A
//! record becomes a "sentence": the start symbol (id `K`) followed by one
//! symbol per feature, in codebook order. All features share the id space
//! `0..=K`; the position in the sequence identifies the feature.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::ingest::{ColumnKind, ColumnSpec, FlowTable, HintKind, SchemaHint};
use crate::linalg::Matrix;

/// Default alphabet size.
pub const DEFAULT_K: usize = 49;

/// Category string emitted for overflow and unassigned symbols.
pub const OVERFLOW_CATEGORY: &str = "OTHER";

const CODEBOOK_VERSION: &str = "v1";
const SYMDATA_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinningMode {
    EqualWidth,
    EqualFrequency,
}

impl BinningMode {
    pub fn word(self) -> &'static str {
        match self {
            BinningMode::EqualWidth => "equalwidth",
            BinningMode::EqualFrequency => "equalfreq",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        match word {
            "equalwidth" => Some(BinningMode::EqualWidth),
            "equalfreq" => Some(BinningMode::EqualFrequency),
            _ => None,
        }
    }
}

/// How one feature maps to symbols.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSpec {
    /// Strictly ascending edges; bin `i` is `[edges[i], edges[i+1])`.
    NumericBins { edges: Vec<f64> },
    /// `categories[i]` owns symbol `i`; anything else maps to `K − 1`.
    CategoryMap { categories: Vec<String> },
}

impl FeatureSpec {
    /// Number of bins actually in use (≤ K).
    pub fn n_bins(&self, k: usize) -> usize {
        match self {
            FeatureSpec::NumericBins { edges } => edges.len() - 1,
            FeatureSpec::CategoryMap { .. } => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    features: Vec<String>,
    kinds: Vec<ColumnKind>,
    specs: Vec<FeatureSpec>,
    k: usize,
    mode: BinningMode,
}

impl Codebook {
    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> BinningMode {
        self.mode
    }

    pub fn start_symbol(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.k + 1
    }

    /// Start symbol plus one symbol per feature.
    pub fn sequence_length(&self) -> usize {
        self.features.len() + 1
    }

    pub fn spec(&self, name: &str) -> Option<&FeatureSpec> {
        self.position(name).map(|i| &self.specs[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    /// Names of the numeric (and timestamp) features, in codebook order.
    pub fn numeric_features(&self) -> Vec<&str> {
        self.features
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| k.is_numeric())
            .map(|(f, _)| f.as_str())
            .collect()
    }

    /// Schema hint that makes [`crate::ingest::load_csv`] read decoded files
    /// with the codebook's column kinds.
    pub fn schema_hint(&self) -> SchemaHint {
        let mut hint = SchemaHint::new();
        for (f, k) in self.features.iter().zip(&self.kinds) {
            hint.set(
                f,
                match k {
                    ColumnKind::Numeric => HintKind::Numeric,
                    ColumnKind::Categorical => HintKind::Categorical,
                    ColumnKind::Timestamp => HintKind::Timestamp,
                },
            );
        }
        hint
    }

    /// Symbol for a numeric value of feature `i`, clamped into range.
    pub fn numeric_symbol(&self, i: usize, v: f64) -> usize {
        match &self.specs[i] {
            FeatureSpec::NumericBins { edges } => bin_index(edges, v),
            FeatureSpec::CategoryMap { .. } => panic!("feature {i} is categorical"),
        }
    }

    /// Symbol for a category of feature `i`; unseen categories overflow.
    pub fn category_symbol(&self, i: usize, category: &str) -> usize {
        match &self.specs[i] {
            FeatureSpec::CategoryMap { categories } => categories
                .iter()
                .position(|c| c == category)
                .unwrap_or(self.k - 1),
            FeatureSpec::NumericBins { .. } => panic!("feature {i} is numeric"),
        }
    }
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    let interior = &edges[1..edges.len() - 1];
    interior.partition_point(|&e| e <= v)
}

/// Fits a codebook for `features` of `table`.
pub fn fit_codebook(table: &FlowTable, features: &[&str], k: usize, mode: BinningMode) -> Result<Codebook> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("alphabet size K must be at least 2, got {k}")));
    }
    if features.is_empty() {
        return Err(Error::InvalidArgument("no features selected".into()));
    }
    let mut specs = Vec::with_capacity(features.len());
    let mut kinds = Vec::with_capacity(features.len());
    for (i, &name) in features.iter().enumerate() {
        if features[..i].contains(&name) {
            return Err(Error::InvalidArgument(format!("feature '{name}' selected twice")));
        }
        let spec = table
            .column(name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))?;
        kinds.push(spec.kind);
        if spec.kind.is_numeric() {
            if table.is_flagged(name) {
                return Err(Error::ConstantFeature(name.to_string()));
            }
            let col = table.numeric_column(name).expect("numeric column present");
            specs.push(FeatureSpec::NumericBins {
                edges: numeric_edges(name, &col, k, mode)?,
            });
        } else {
            let col = table.categorical_column(name).expect("categorical column present");
            specs.push(FeatureSpec::CategoryMap {
                categories: top_categories(col, k - 1),
            });
        }
    }
    Ok(Codebook {
        features: features.iter().map(|s| s.to_string()).collect(),
        kinds,
        specs,
        k,
        mode,
    })
}

fn numeric_edges(name: &str, col: &[f64], k: usize, mode: BinningMode) -> Result<Vec<f64>> {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min >= max {
        return Err(Error::ConstantFeature(name.to_string()));
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = (0..=k)
        .map(|i| match (i, mode) {
            (0, _) => min,
            (i, _) if i == k => max,
            (i, BinningMode::EqualWidth) => min + i as f64 * (max - min) / k as f64,
            (i, BinningMode::EqualFrequency) => sorted[i * n / k],
        })
        .collect();
    edges.dedup();
    // Rounding in the equal-width formula could in principle step backwards.
    edges.dedup_by(|b, a| *b <= *a);
    Ok(edges)
}

fn top_categories(col: &[String], slots: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in col {
        *counts.entry(c.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap order is lexicographic, and the sort is stable.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(slots);
    ranked.into_iter().map(|(c, _)| c.to_string()).collect()
}

/// One encoded record: the start symbol followed by one symbol per feature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolSequence {
    pub ids: Vec<usize>,
}

/// Fixed-length encoded corpus, stored flat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolDataset {
    ids: Vec<usize>,
    seq_len: usize,
    vocab_size: usize,
}

impl SymbolDataset {
    /// Validates closure: every id `< vocab_size`, the start symbol
    /// (`vocab_size − 1`) exactly at position 0 of every sequence.
    pub fn new(ids: Vec<usize>, seq_len: usize, vocab_size: usize) -> Result<Self> {
        if seq_len == 0 || vocab_size < 3 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs seq_len ≥ 1 and vocab ≥ 3, got {seq_len} and {vocab_size}"
            )));
        }
        if !ids.len().is_multiple_of(seq_len) {
            return Err(Error::shape(
                "symbol dataset",
                format!("{} ids do not split into rows of {seq_len}", ids.len()),
            ));
        }
        let start = vocab_size - 1;
        for (n, seq) in ids.chunks(seq_len).enumerate() {
            if let Some(reason) = sequence_problem(seq, seq_len, start) {
                return Err(Error::malformed("symbol dataset", format!("sequence {n}: {reason}")));
            }
        }
        Ok(Self {
            ids,
            seq_len,
            vocab_size,
        })
    }

    pub fn from_sequences(seqs: &[SymbolSequence], seq_len: usize, vocab_size: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for (n, s) in seqs.iter().enumerate() {
            if s.ids.len() != seq_len {
                return Err(Error::malformed(
                    "symbol dataset",
                    format!("sequence {n} has length {}, expected {seq_len}", s.ids.len()),
                ));
            }
            ids.extend_from_slice(&s.ids);
        }
        Self::new(ids, seq_len, vocab_size)
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn start_symbol(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.ids.chunks(self.seq_len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Sequences at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SymbolDataset {
        let mut ids = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            ids.extend_from_slice(self.sequence(i));
        }
        SymbolDataset {
            ids,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
        }
    }
}

fn sequence_problem(seq: &[usize], seq_len: usize, start: usize) -> Option<String> {
    if seq.len() != seq_len {
        return Some(format!("length {} instead of {seq_len}", seq.len()));
    }
    if seq[0] != start {
        return Some(format!("position 0 holds {} instead of the start symbol", seq[0]));
    }
    seq.iter()
        .enumerate()
        .skip(1)
        .find(|&(_, &id)| id >= start)
        .map(|(p, &id)| {
            if id == start {
                format!("start symbol at position {p}")
            } else {
                format!("id {id} at position {p} is outside the alphabet")
            }
        })
}

/// Encodes every row of `table`. Values outside the fitted range clamp to the
/// edge bins and unseen categories use the overflow symbol.
pub fn encode(table: &FlowTable, cb: &Codebook) -> Result<SymbolDataset> {
    enum Source<'a> {
        Num(Vec<f64>),
        Cat(&'a [String]),
    }
    let mut sources = Vec::with_capacity(cb.features.len());
    for (i, name) in cb.features.iter().enumerate() {
        let col = table
            .column(name)
            .ok_or_else(|| Error::UnknownFeature(name.clone()))?;
        let want_numeric = matches!(cb.specs[i], FeatureSpec::NumericBins { .. });
        if col.kind.is_numeric() != want_numeric {
            return Err(Error::InvalidArgument(format!(
                "feature '{name}' is {} in the table but {} in the codebook",
                col.kind, cb.kinds[i]
            )));
        }
        sources.push(if want_numeric {
            Source::Num(table.numeric_column(name).expect("numeric"))
        } else {
            Source::Cat(table.categorical_column(name).expect("categorical"))
        });
    }
    let n = table.n_rows();
    let len = cb.sequence_length();
    let mut ids = Vec::with_capacity(n * len);
    for r in 0..n {
        ids.push(cb.start_symbol());
        for (i, src) in sources.iter().enumerate() {
            ids.push(match src {
                Source::Num(col) => cb.numeric_symbol(i, col[r]),
                Source::Cat(col) => cb.category_symbol(i, &col[r]),
            });
        }
    }
    SymbolDataset::new(ids, len, cb.vocab_size())
}

/// Result of [`decode`].
#[derive(Clone, Debug)]
pub struct Decoded {
    pub table: FlowTable,
    /// Malformed sequences that were skipped, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Maps sequences back to flow rows: numeric symbols become bin midpoints,
/// categorical symbols their category (or [`OVERFLOW_CATEGORY`]).
pub fn decode<'a, I>(sequences: I, cb: &Codebook) -> Result<Decoded>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let len = cb.sequence_length();
    let n_num = cb.kinds.iter().filter(|k| k.is_numeric()).count();
    let mut numeric = Vec::new();
    let mut categorical: Vec<Vec<String>> = vec![Vec::new(); cb.features.len() - n_num];
    let mut skipped = Vec::new();
    let mut rows = 0;
    for (n, seq) in sequences.into_iter().enumerate() {
        if let Some(reason) = sequence_problem(seq, len, cb.start_symbol()) {
            skipped.push((n, reason));
            continue;
        }
        rows += 1;
        let mut ci = 0;
        for (spec, &sym) in cb.specs.iter().zip(&seq[1..]) {
            match spec {
                FeatureSpec::NumericBins { edges } => {
                    let b = sym.min(edges.len() - 2);
                    numeric.push(0.5 * (edges[b] + edges[b + 1]));
                }
                FeatureSpec::CategoryMap { categories } => {
                    let c = categories.get(sym).map_or(OVERFLOW_CATEGORY, String::as_str);
                    categorical[ci].push(c.to_string());
                    ci += 1;
                }
            }
        }
    }
    let schema = cb
        .features
        .iter()
        .zip(&cb.kinds)
        .enumerate()
        .map(|(index, (name, &kind))| ColumnSpec {
            name: name.clone(),
            kind,
            index,
        })
        .collect();
    let table = FlowTable::new(schema, Matrix::new(rows, n_num, numeric)?, categorical)?;
    Ok(Decoded { table, skipped })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        out.push(match chars.next() {
            Some('\\') => '\\',
            Some('t') => '\t',
            Some('n') => '\n',
            Some('r') => '\r',
            other => {
                return Err(Error::malformed("codebook", format!("bad escape \\{other:?} in '{s}'")))
            }
        });
    }
    Ok(out)
}

fn kind_word(kind: ColumnKind) -> &'static str {
    match kind {
        ColumnKind::Numeric => "numeric",
        ColumnKind::Categorical => "categorical",
        ColumnKind::Timestamp => "timestamp",
    }
}

/// Text form of a codebook: a `codebook v1 K=<k> mode=<word>` header, then
/// per feature a `feature<TAB>kind<TAB>count<TAB>name` line followed by
/// `count` hexadecimal edges or `category<TAB>symbol` lines.
pub fn codebook_to_string(cb: &Codebook) -> String {
    let mut s = format!("codebook {CODEBOOK_VERSION} K={} mode={}\n", cb.k, cb.mode.word());
    for ((name, kind), spec) in cb.features.iter().zip(&cb.kinds).zip(&cb.specs) {
        match spec {
            FeatureSpec::NumericBins { edges } => {
                let _ = writeln!(s, "feature\t{}\t{}\t{}", kind_word(*kind), edges.len(), escape(name));
                for e in edges {
                    let _ = writeln!(s, "{}", hexfloat::format(*e));
                }
            }
            FeatureSpec::CategoryMap { categories } => {
                let _ = writeln!(s, "feature\tcategorical\t{}\t{}", categories.len(), escape(name));
                for (i, c) in categories.iter().enumerate() {
                    let _ = writeln!(s, "{}\t{i}", escape(c));
                }
            }
        }
    }
    s
}

pub fn codebook_from_str(text: &str) -> Result<Codebook> {
    let bad = |detail: String| Error::malformed("codebook", detail);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut words = header.split(' ');
    if words.next() != Some("codebook") {
        return Err(bad(format!("header '{header}' does not start with 'codebook'")));
    }
    let version = words.next().unwrap_or("");
    if version != CODEBOOK_VERSION {
        return Err(Error::Version {
            what: "codebook",
            found: version.to_string(),
            expected: CODEBOOK_VERSION.to_string(),
        });
    }
    let k: usize = words
        .next()
        .and_then(|w| w.strip_prefix("K="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing K=<int>".into()))?;
    let mode = words
        .next()
        .and_then(|w| w.strip_prefix("mode="))
        .and_then(BinningMode::from_word)
        .ok_or_else(|| bad("missing mode=equalwidth|equalfreq".into()))?;
    if k < 2 {
        return Err(bad(format!("K={k} is below 2")));
    }
    let (mut features, mut kinds, mut specs) = (Vec::new(), Vec::new(), Vec::new());
    while let Some(line) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, '\t').collect();
        if parts.len() != 4 || parts[0] != "feature" {
            return Err(bad(format!("expected a feature line, got '{line}'")));
        }
        let count: usize = parts[2].parse().map_err(|_| bad(format!("bad count in '{line}'")))?;
        let name = unescape(parts[3])?;
        let kind = match parts[1] {
            "numeric" => ColumnKind::Numeric,
            "timestamp" => ColumnKind::Timestamp,
            "categorical" => ColumnKind::Categorical,
            other => return Err(bad(format!("unknown feature kind '{other}'"))),
        };
        let mut body = Vec::with_capacity(count);
        for _ in 0..count {
            body.push(lines.next().ok_or_else(|| bad(format!("feature '{name}' is truncated")))?);
        }
        let spec = if kind.is_numeric() {
            let edges = body
                .iter()
                .map(|l| hexfloat::parse(l).ok_or_else(|| bad(format!("bad edge '{l}'"))))
                .collect::<Result<Vec<f64>>>()?;
            if edges.len() < 2 || edges.len() > k + 1 || edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad(format!("edges of '{name}' are not 2..=K+1 ascending values")));
            }
            FeatureSpec::NumericBins { edges }
        } else {
            if count > k - 1 {
                return Err(bad(format!("'{name}' maps {count} categories but K−1 = {}", k - 1)));
            }
            let mut categories = Vec::with_capacity(count);
            for (i, l) in body.iter().enumerate() {
                let (c, id) = l
                    .rsplit_once('\t')
                    .ok_or_else(|| bad(format!("bad category line '{l}'")))?;
                if id.parse::<usize>().ok() != Some(i) {
                    return Err(bad(format!("category '{c}' has id {id}, expected {i}")));
                }
                categories.push(unescape(c)?);
            }
            FeatureSpec::CategoryMap { categories }
        };
        features.push(name);
        kinds.push(kind);
        specs.push(spec);
    }
    if features.is_empty() {
        return Err(bad("no features".into()));
    }
    Ok(Codebook {
        features,
        kinds,
        specs,
        k,
        mode,
    })
}

pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    std::fs::write(path, codebook_to_string(cb)).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    codebook_from_str(&text)
}

/// Symbol-matrix text: `symdata v1 n=<n> len=<len> K=<k>` then one
/// space-separated row of ids per sequence.
pub fn symdata_to_string(ds: &SymbolDataset) -> String {
    let mut s = format!(
        "symdata {SYMDATA_VERSION} n={} len={} K={}\n",
        ds.len(),
        ds.seq_len(),
        ds.vocab_size() - 1
    );
    for seq in ds.iter() {
        for (i, id) in seq.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{id}");
        }
        s.push('\n');
    }
    s
}

pub fn symdata_from_str(text: &str) -> Result<SymbolDataset> {
    let bad = |detail: String| Error::malformed("symdata", detail);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let words: Vec<&str> = header.split(' ').collect();
    if words.first() != Some(&"symdata") {
        return Err(bad(format!("header '{header}' does not start with 'symdata'")));
    }
    let version = words.get(1).copied().unwrap_or("");
    if version != SYMDATA_VERSION {
        return Err(Error::Version {
            what: "symdata",
            found: version.to_string(),
            expected: SYMDATA_VERSION.to_string(),
        });
    }
    let field = |key: &str| -> Result<usize> {
        words
            .iter()
            .find_map(|w| w.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing {key}<int> in header")))
    };
    let (n, len, k) = (field("n=")?, field("len=")?, field("K=")?);
    let mut ids = Vec::with_capacity(n * len);
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let before = ids.len();
        for tok in line.split_ascii_whitespace() {
            ids.push(tok.parse::<usize>().map_err(|_| bad(format!("bad id '{tok}'")))?);
        }
        if ids.len() - before != len {
            return Err(bad(format!("row {} has {} ids, expected {len}", rows + 1, ids.len() - before)));
        }
        rows += 1;
    }
    if rows != n {
        return Err(bad(format!("header says n={n} but {rows} rows follow")));
    }
    SymbolDataset::new(ids, len, k + 1)
}

pub fn save_symdata(ds: &SymbolDataset, path: &Path) -> Result<()> {
    std::fs::write(path, symdata_to_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_symdata(path: &Path) -> Result<SymbolDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    symdata_from_str(&text)
}
