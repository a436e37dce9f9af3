//! All-to-all RTT matrices.
//!
//! Two on-disk formats are accepted, optionally gzip-compressed:
//!
//! * matrix: first line `N`, then `N` rows of `N` whitespace-separated RTTs in
//!   milliseconds;
//! * triples: lines `i j rtt_us` with 0-based indices and RTT in
//!   microseconds (King style).
//!
//! Negative, NaN or missing entries are first mirrored from the opposite
//! direction when that one is valid, otherwise replaced by the row median.
//! The result is symmetrized by averaging both directions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::time::Duration;

use flate2::read::GzDecoder;
use rand::seq::index::sample;
use rand::Rng;

use crate::overlay::NodeId;
use crate::time::millis_f64;

#[derive(Debug, thiserror::Error)]
pub enum LatencyError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no valid latency entries")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Symmetric RTT matrix plus the mapping of simulated nodes onto its rows.
#[derive(Clone, Debug)]
pub struct LatencyModel {
    n: usize,
    rtt_ms: Vec<f64>,
    assignment: BTreeMap<NodeId, usize>,
}

impl LatencyModel {
    /// Build from raw rows, applying the same repair rules as file loading.
    /// Entries that are `None`, negative or NaN count as missing.
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self, LatencyError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(LatencyError::Dimension(format!("expected {n} columns in every row")));
        }
        let mut raw = vec![None; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                raw[i * n + j] = v;
            }
        }
        Self::repair(n, raw)
    }

    pub fn from_matrix(rows: Vec<Vec<f64>>) -> Result<Self, LatencyError> {
        Self::from_rows(rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
    }

    fn repair(n: usize, mut raw: Vec<Option<f64>>) -> Result<Self, LatencyError> {
        let valid = |v: Option<f64>| v.filter(|x| x.is_finite() && *x >= 0.0);
        for v in raw.iter_mut() {
            *v = valid(*v);
        }
        for i in 0..n {
            raw[i * n + i] = Some(0.0);
        }
        // Mirror one-sided entries.
        for i in 0..n {
            for j in 0..n {
                if raw[i * n + j].is_none() {
                    raw[i * n + j] = raw[j * n + i];
                }
            }
        }
        let all: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .filter_map(|(i, j)| raw[i * n + j])
            .collect();
        if n > 1 && all.is_empty() {
            return Err(LatencyError::Empty);
        }
        let global = median(all);
        let mut filled = vec![0.0; n * n];
        for i in 0..n {
            let row: Vec<f64> =
                (0..n).filter(|&j| j != i).filter_map(|j| raw[i * n + j]).collect();
            let row_median = if row.is_empty() { global } else { median(row) };
            for j in 0..n {
                filled[i * n + j] = raw[i * n + j].unwrap_or(row_median);
            }
        }
        let mut rtt_ms = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    rtt_ms[i * n + j] = (filled[i * n + j] + filled[j * n + i]) / 2.0;
                }
            }
        }
        Ok(LatencyModel { n, rtt_ms, assignment: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn rtt(&self, i: usize, j: usize) -> f64 {
        self.rtt_ms[i * self.n + j]
    }

    /// Restrict to the given rows, in order.
    pub fn submatrix(&self, rows: &[usize]) -> LatencyModel {
        let k = rows.len();
        let mut rtt_ms = Vec::with_capacity(k * k);
        for &i in rows {
            for &j in rows {
                rtt_ms.push(self.rtt(i, j));
            }
        }
        LatencyModel { n: k, rtt_ms, assignment: BTreeMap::new() }
    }

    /// Rows drawn uniformly without replacement.
    pub fn sample_rows<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        sample(rng, self.n, k.min(self.n)).into_vec()
    }

    pub fn assign(&mut self, node: NodeId, row: usize) {
        assert!(row < self.n, "row {row} out of range");
        self.assignment.insert(node, row);
    }

    pub fn row_of(&self, node: NodeId) -> Option<usize> {
        self.assignment.get(&node).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<NodeId, usize> {
        &self.assignment
    }

    /// RTT between two assigned nodes; 0 for unassigned nodes.
    pub fn rtt_between(&self, a: NodeId, b: NodeId) -> f64 {
        match (self.row_of(a), self.row_of(b)) {
            (Some(i), Some(j)) => self.rtt(i, j),
            _ => 0.0,
        }
    }

    /// One-way delay, half the RTT.
    pub fn one_way_ms(&self, a: NodeId, b: NodeId) -> f64 {
        self.rtt_between(a, b) / 2.0
    }

    pub fn one_way(&self, a: NodeId, b: NodeId) -> Duration {
        millis_f64(self.one_way_ms(a, b))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Load a matrix or triples file, transparently gunzipping.
pub fn load_latency_matrix(path: impl AsRef<Path>) -> Result<LatencyModel, LatencyError> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let text = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = String::new();
        GzDecoder::new(&bytes[..]).read_to_string(&mut out)?;
        out
    } else {
        String::from_utf8(bytes).map_err(|e| LatencyError::Parse { line: 1, reason: e.to_string() })?
    };
    parse_latency(BufReader::new(text.as_bytes()))
}

pub fn parse_latency<R: BufRead>(reader: R) -> Result<LatencyModel, LatencyError> {
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<Result<_, _>>()?;
    let content: Vec<(usize, Vec<&str>)> = lines
        .iter()
        .map(|(n, l)| (*n, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, t)| !t.is_empty() && !t[0].starts_with('#'))
        .collect();
    let Some((_, first)) = content.first() else {
        return Err(LatencyError::Empty);
    };
    match first.len() {
        1 => parse_matrix(&content),
        3 => parse_triples(&content),
        k => Err(LatencyError::Parse {
            line: content[0].0,
            reason: format!("expected 1 (matrix) or 3 (triples) fields, found {k}"),
        }),
    }
}

fn parse_f64(line: usize, tok: &str) -> Result<f64, LatencyError> {
    tok.parse::<f64>().map_err(|_| LatencyError::Parse { line, reason: format!("bad number {tok:?}") })
}

fn parse_matrix(content: &[(usize, Vec<&str>)]) -> Result<LatencyModel, LatencyError> {
    let (line, head) = &content[0];
    let n: usize = head[0]
        .parse()
        .map_err(|_| LatencyError::Parse { line: *line, reason: "bad row count".into() })?;
    let rows = &content[1..];
    if rows.len() != n {
        return Err(LatencyError::Dimension(format!("header says {n} rows, found {}", rows.len())));
    }
    let mut out = Vec::with_capacity(n);
    for (line, toks) in rows {
        if toks.len() != n {
            return Err(LatencyError::Dimension(format!(
                "line {line}: expected {n} columns, found {}",
                toks.len()
            )));
        }
        let row = toks.iter().map(|t| parse_f64(*line, t).map(Some)).collect::<Result<Vec<_>, _>>()?;
        out.push(row);
    }
    LatencyModel::from_rows(out)
}

fn parse_triples(content: &[(usize, Vec<&str>)]) -> Result<LatencyModel, LatencyError> {
    let mut entries = Vec::with_capacity(content.len());
    let mut n = 0usize;
    for (line, toks) in content {
        if toks.len() != 3 {
            return Err(LatencyError::Parse { line: *line, reason: "expected `i j rtt_us`".into() });
        }
        let idx = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| LatencyError::Parse { line: *line, reason: format!("bad index {t:?}") })
        };
        let (i, j) = (idx(toks[0])?, idx(toks[1])?);
        let us = parse_f64(*line, toks[2])?;
        n = n.max(i + 1).max(j + 1);
        entries.push((i, j, us));
    }
    let mut rows = vec![vec![None; n]; n];
    for (i, j, us) in entries {
        rows[i][j] = Some(us / 1000.0);
    }
    LatencyModel::from_rows(rows)
}
