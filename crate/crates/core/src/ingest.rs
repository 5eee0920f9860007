//! Flow-record CSV ingestion.
//!
//! Parses CICFlowMeter/NetFlow-style CSV exports into a typed [`FlowTable`].
//! Column kinds are inferred from the cells unless a [`SchemaHint`]
//! overrides them:
//!
//! * `Timestamp` when at least 99% of non-empty cells look like
//!   `YYYY-MM-DD HH:MM:SS[.fff]` (stored as seconds since midnight),
//! * `Numeric` when at least 99% of non-empty cells parse as finite floats,
//! * `Categorical` otherwise.
//!
//! Rows whose numeric or timestamp cells fail to parse are dropped and
//! counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Share of non-empty cells that must parse for a numeric/timestamp column.
pub const INFERENCE_THRESHOLD: f64 = 0.99;

/// Placeholder for empty categorical cells after [`clean`].
pub const EMPTY_CATEGORY: &str = "∅";

/// TCP flag letters in the order used by exploded flag columns.
pub const TCP_FLAGS: [char; 6] = ['U', 'A', 'P', 'R', 'S', 'F'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Timestamp,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnKind::Numeric | ColumnKind::Timestamp)
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Numeric => "Numeric",
            ColumnKind::Categorical => "Categorical",
            ColumnKind::Timestamp => "Timestamp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Ordinal position of the source column in the CSV header.
    pub index: usize,
}

/// Per-column override read from a hint file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HintKind {
    Numeric,
    Categorical,
    Timestamp,
    /// Split a TCP-flags string into six 0/1 numeric columns.
    ExplodeFlags,
}

/// Column-kind overrides, one `column_name=Kind` per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemaHint {
    overrides: BTreeMap<String, HintKind>,
}

const DEFAULT_FLOW_HINTS: &str = "\
# Ports are identifiers, not magnitudes.
Src Pt=Categorical
Dst Pt=Categorical
Src Port=Categorical
Dst Port=Categorical
Source Port=Categorical
Destination Port=Categorical
src_port=Categorical
dst_port=Categorical
sport=Categorical
dport=Categorical
";

impl SchemaHint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hints applied by the CLI unless overridden: port columns are categorical.
    pub fn flow_defaults() -> Self {
        Self::parse(DEFAULT_FLOW_HINTS).expect("built-in hints parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut overrides = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line.rsplit_once('=').ok_or_else(|| {
                Error::malformed("schema hint", format!("line {}: missing '='", lineno + 1))
            })?;
            let kind = match kind.trim() {
                "Numeric" => HintKind::Numeric,
                "Categorical" => HintKind::Categorical,
                "Timestamp" => HintKind::Timestamp,
                "ExplodeFlags" => HintKind::ExplodeFlags,
                other => {
                    return Err(Error::malformed(
                        "schema hint",
                        format!("line {}: unknown kind '{other}'", lineno + 1),
                    ))
                }
            };
            overrides.insert(name.trim().to_string(), kind);
        }
        Ok(Self { overrides })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Hints that reproduce the kinds of an existing schema on reload.
    pub fn from_schema(schema: &[ColumnSpec]) -> Self {
        let mut hint = Self::new();
        for c in schema {
            hint.set(&c.name, kind_hint(c.kind));
        }
        hint
    }

    pub fn set(&mut self, name: &str, kind: HintKind) {
        self.overrides.insert(name.to_string(), kind);
    }

    pub fn get(&self, name: &str) -> Option<HintKind> {
        self.overrides.get(name).copied()
    }

    /// `other` wins on conflicts.
    pub fn merged(mut self, other: &SchemaHint) -> Self {
        for (k, v) in &other.overrides {
            self.overrides.insert(k.clone(), *v);
        }
        self
    }
}

fn kind_hint(kind: ColumnKind) -> HintKind {
    match kind {
        ColumnKind::Numeric => HintKind::Numeric,
        ColumnKind::Categorical => HintKind::Categorical,
        ColumnKind::Timestamp => HintKind::Timestamp,
    }
}

/// Typed flow records.
///
/// Numeric and timestamp columns share one row-major `f64` matrix, in schema
/// order; categorical columns are stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTable {
    schema: Vec<ColumnSpec>,
    numeric: Matrix,
    categorical: Vec<Vec<String>>,
    /// Numeric columns excluded from modelling (zero variance).
    flagged: BTreeSet<String>,
}

impl FlowTable {
    /// Assembles a table. `numeric` holds one column per numeric/timestamp
    /// entry of `schema`, `categorical` one vector per categorical entry,
    /// both in schema order.
    pub fn new(schema: Vec<ColumnSpec>, numeric: Matrix, categorical: Vec<Vec<String>>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for c in &schema {
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate column '{}'", c.name)));
            }
        }
        let n_num = schema.iter().filter(|c| c.kind.is_numeric()).count();
        let n_cat = schema.len() - n_num;
        if numeric.cols() != n_num || categorical.len() != n_cat {
            return Err(Error::InvalidArgument(format!(
                "schema has {n_num} numeric / {n_cat} categorical columns, data has {} / {}",
                numeric.cols(),
                categorical.len()
            )));
        }
        let rows = numeric.rows();
        if n_num == 0 {
            if let Some(first) = categorical.first() {
                if categorical.iter().any(|c| c.len() != first.len()) {
                    return Err(Error::InvalidArgument("ragged categorical columns".into()));
                }
            }
        } else if categorical.iter().any(|c| c.len() != rows) {
            return Err(Error::InvalidArgument("categorical column length differs from row count".into()));
        }
        Ok(Self {
            schema,
            numeric,
            categorical,
            flagged: BTreeSet::new(),
        })
    }

    pub fn schema(&self) -> &[ColumnSpec] {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        if self.numeric.cols() > 0 {
            self.numeric.rows()
        } else {
            self.categorical.first().map_or(0, Vec::len)
        }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.schema.iter().find(|c| c.name == name)
    }

    pub fn numeric_data(&self) -> &Matrix {
        &self.numeric
    }

    /// Schema entries backing the columns of [`FlowTable::numeric_data`].
    pub fn numeric_specs(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.schema.iter().filter(|c| c.kind.is_numeric())
    }

    fn numeric_position(&self, name: &str) -> Option<usize> {
        self.numeric_specs().position(|c| c.name == name)
    }

    fn categorical_position(&self, name: &str) -> Option<usize> {
        self.schema
            .iter()
            .filter(|c| !c.kind.is_numeric())
            .position(|c| c.name == name)
    }

    pub fn numeric_column(&self, name: &str) -> Option<Vec<f64>> {
        self.numeric_position(name).map(|j| self.numeric.column(j))
    }

    pub fn categorical_column(&self, name: &str) -> Option<&[String]> {
        self.categorical_position(name)
            .map(|j| self.categorical[j].as_slice())
    }

    pub fn is_flagged(&self, name: &str) -> bool {
        self.flagged.contains(name)
    }

    pub fn flagged(&self) -> &BTreeSet<String> {
        &self.flagged
    }

    /// Numeric columns usable for modelling (not flagged constant).
    pub fn usable_numeric(&self) -> Vec<&ColumnSpec> {
        self.numeric_specs()
            .filter(|c| !self.flagged.contains(&c.name))
            .collect()
    }

    /// Row-major matrix of the named numeric columns.
    pub fn select_numeric(&self, names: &[&str]) -> Result<Matrix> {
        let cols: Vec<usize> = names
            .iter()
            .map(|n| {
                self.numeric_position(n)
                    .ok_or_else(|| Error::UnknownFeature((*n).to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(self.numeric.select_columns(&cols))
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> FlowTable {
        FlowTable {
            schema: self.schema.clone(),
            numeric: self.numeric.select_rows(indices),
            categorical: self
                .categorical
                .iter()
                .map(|col| indices.iter().map(|&i| col[i].clone()).collect())
                .collect(),
            flagged: self.flagged.clone(),
        }
    }

    /// Cell `row` of column `name` rendered as text.
    pub fn cell_text(&self, row: usize, name: &str) -> Option<String> {
        let spec = self.column(name)?;
        match spec.kind {
            ColumnKind::Categorical => self.categorical_column(name).map(|c| c[row].clone()),
            ColumnKind::Numeric => self
                .numeric_position(name)
                .map(|j| format!("{}", self.numeric.get(row, j))),
            ColumnKind::Timestamp => self
                .numeric_position(name)
                .map(|j| format_timestamp(self.numeric.get(row, j))),
        }
    }
}

/// What [`load_csv`] discarded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

/// Reads a header-first RFC 4180 CSV file into a [`FlowTable`].
pub fn load_csv(path: &Path, hint: &SchemaHint) -> Result<(FlowTable, LoadReport)> {
    let mut raw = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.trim().is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    parse_csv(raw.as_bytes(), hint)
}

/// [`load_csv`] over in-memory bytes.
pub fn parse_csv(bytes: &[u8], hint: &SchemaHint) -> Result<(FlowTable, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::malformed("csv", "empty header"));
    }
    let mut records: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Arity {
                row: i + 2,
                found: rec.len(),
                expected: header.len(),
            });
        }
        records.push(rec.iter().map(str::to_string).collect());
    }

    // Resolve one (name, kind, source index, flag letter) per output column.
    let mut out_cols: Vec<(String, ColumnKind, usize, Option<char>)> = Vec::new();
    for (idx, name) in header.iter().enumerate() {
        match hint.get(name) {
            Some(HintKind::ExplodeFlags) => {
                for flag in TCP_FLAGS {
                    out_cols.push((format!("{name}_{flag}"), ColumnKind::Numeric, idx, Some(flag)));
                }
            }
            Some(h) => {
                let kind = match h {
                    HintKind::Numeric => ColumnKind::Numeric,
                    HintKind::Categorical => ColumnKind::Categorical,
                    _ => ColumnKind::Timestamp,
                };
                out_cols.push((name.clone(), kind, idx, None));
            }
            None => {
                let kind = infer_kind(records.iter().map(|r| r[idx].as_str()));
                out_cols.push((name.clone(), kind, idx, None));
            }
        }
    }

    let n_num = out_cols.iter().filter(|c| c.1.is_numeric()).count();
    let n_cat = out_cols.len() - n_num;
    let mut numeric = Vec::with_capacity(records.len() * n_num);
    let mut categorical: Vec<Vec<String>> = vec![Vec::with_capacity(records.len()); n_cat];
    let mut dropped = 0;
    let mut row_num = Vec::with_capacity(n_num);
    for rec in &records {
        row_num.clear();
        let mut ok = true;
        for (_, kind, idx, flag) in &out_cols {
            let cell = rec[*idx].as_str();
            let value = match (kind, flag) {
                (_, Some(letter)) => Some(flag_set(cell, *letter)),
                (ColumnKind::Numeric, None) => parse_finite(cell),
                (ColumnKind::Timestamp, None) => parse_timestamp(cell),
                (ColumnKind::Categorical, None) => continue,
            };
            match value {
                Some(v) => row_num.push(v),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            dropped += 1;
            continue;
        }
        numeric.extend_from_slice(&row_num);
        let mut ci = 0;
        for (_, kind, idx, _) in &out_cols {
            if *kind == ColumnKind::Categorical {
                categorical[ci].push(rec[*idx].clone());
                ci += 1;
            }
        }
    }
    let kept = records.len() - dropped;
    if kept == 0 {
        return Err(Error::AllRowsDropped { dropped });
    }
    let schema = out_cols
        .into_iter()
        .map(|(name, kind, index, _)| ColumnSpec { name, kind, index })
        .collect();
    let table = FlowTable::new(schema, Matrix::new(kept, n_num, numeric)?, categorical)?;
    Ok((
        table,
        LoadReport {
            rows_read: records.len(),
            rows_dropped: dropped,
        },
    ))
}

fn infer_kind<'a>(cells: impl Iterator<Item = &'a str>) -> ColumnKind {
    let (mut total, mut numeric, mut stamps) = (0usize, 0usize, 0usize);
    for cell in cells.filter(|c| !c.is_empty()) {
        total += 1;
        if parse_timestamp(cell).is_some() {
            stamps += 1;
        } else if parse_finite(cell).is_some() {
            numeric += 1;
        }
    }
    if total == 0 {
        return ColumnKind::Categorical;
    }
    let share = |n: usize| n as f64 / total as f64;
    if share(stamps) >= INFERENCE_THRESHOLD {
        ColumnKind::Timestamp
    } else if share(numeric) >= INFERENCE_THRESHOLD {
        ColumnKind::Numeric
    } else {
        ColumnKind::Categorical
    }
}

fn parse_finite(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn flag_set(cell: &str, letter: char) -> f64 {
    if cell.chars().any(|c| c.eq_ignore_ascii_case(&letter)) {
        1.0
    } else {
        0.0
    }
}

/// Seconds since midnight of a `YYYY-MM-DD HH:MM:SS[.fff]` stamp.
pub fn parse_timestamp(cell: &str) -> Option<f64> {
    let (date, time) = cell.split_once(' ')?;
    let d: Vec<&str> = date.split('-').collect();
    if d.len() != 3
        || d[0].len() != 4
        || d[1].len() != 2
        || d[2].len() != 2
        || !d.iter().all(|p| p.bytes().all(|b| b.is_ascii_digit()))
    {
        return None;
    }
    let (month, day): (u32, u32) = (d[1].parse().ok()?, d[2].parse().ok()?);
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    let (hms, frac) = match time.split_once('.') {
        Some((h, f)) if !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()) => (h, Some(f)),
        Some(_) => return None,
        None => (time, None),
    };
    let t: Vec<&str> = hms.split(':').collect();
    if t.len() != 3 || t.iter().any(|p| p.len() != 2 || !p.bytes().all(|b| b.is_ascii_digit())) {
        return None;
    }
    let (h, m, s): (u32, u32, u32) = (t[0].parse().ok()?, t[1].parse().ok()?, t[2].parse().ok()?);
    if h > 23 || m > 59 || s > 60 {
        return None;
    }
    let fraction = match frac {
        Some(f) => format!("0.{f}").parse::<f64>().ok()?,
        None => 0.0,
    };
    Some(f64::from(h * 3600 + m * 60 + s) + fraction)
}

/// Inverse of [`parse_timestamp`] on a fixed placeholder date.
pub fn format_timestamp(seconds: f64) -> String {
    let whole = seconds.floor().clamp(0.0, 86_400.0 - 1.0) as u32;
    let frac = (seconds - f64::from(whole)).clamp(0.0, 0.999_999_999);
    let digits = format!("{frac:.9}");
    format!(
        "1970-01-01 {:02}:{:02}:{:02}{}",
        whole / 3600,
        (whole / 60) % 60,
        whole % 60,
        &digits[1..]
    )
}

/// Writes `table` as CSV in schema order. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv(table: &FlowTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(table, file)
}

pub fn write_csv_to<W: std::io::Write>(table: &FlowTable, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(table.schema.iter().map(|c| c.name.as_str()))?;
    let names: Vec<&str> = table.schema.iter().map(|c| c.name.as_str()).collect();
    for row in 0..table.n_rows() {
        let cells: Vec<String> = names
            .iter()
            .map(|n| table.cell_text(row, n).expect("column exists"))
            .collect();
        w.write_record(&cells)?;
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}

/// What [`clean`] changed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanStats {
    /// Numeric columns with zero variance, excluded from modelling.
    pub constant_columns: Vec<String>,
    /// Categorical columns and how many empty cells became [`EMPTY_CATEGORY`].
    pub filled_cells: Vec<(String, usize)>,
}

impl CleanStats {
    pub fn is_empty(&self) -> bool {
        self.constant_columns.is_empty() && self.filled_cells.is_empty()
    }
}

impl fmt::Display for CleanStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return writeln!(f, "clean: no degenerate columns");
        }
        for c in &self.constant_columns {
            writeln!(f, "clean: column '{c}' is constant, flagged and excluded from encoding")?;
        }
        for (c, n) in &self.filled_cells {
            writeln!(f, "clean: column '{c}' had {n} empty cells, set to '{EMPTY_CATEGORY}'")?;
        }
        Ok(())
    }
}

/// Flags constant numeric columns and fills empty categorical cells.
pub fn clean(table: &FlowTable) -> (FlowTable, CleanStats) {
    let mut out = table.clone();
    let mut stats = CleanStats::default();
    let specs: Vec<ColumnSpec> = table.numeric_specs().cloned().collect();
    for (j, spec) in specs.iter().enumerate() {
        let col = table.numeric.column(j);
        let first = col.first().copied().unwrap_or(0.0);
        if col.iter().all(|&v| v == first) && out.flagged.insert(spec.name.clone()) {
            stats.constant_columns.push(spec.name.clone());
        }
    }
    let cat_names: Vec<String> = table
        .schema
        .iter()
        .filter(|c| !c.kind.is_numeric())
        .map(|c| c.name.clone())
        .collect();
    for (name, col) in cat_names.into_iter().zip(out.categorical.iter_mut()) {
        let mut filled = 0;
        for cell in col.iter_mut().filter(|c| c.is_empty()) {
            *cell = EMPTY_CATEGORY.to_string();
            filled += 1;
        }
        if filled > 0 {
            stats.filled_cells.push((name, filled));
        }
    }
    (out, stats)
}
