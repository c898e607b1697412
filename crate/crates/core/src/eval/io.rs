use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub labels: BTreeSet<usize>,
    pub vector: Vec<f64>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Renders rows as `id<TAB>label<TAB>dim_0..dim_{d-1}`. Labels are
/// comma-joined; floats use the shortest representation that round-trips,
/// switching to exponent form at extreme magnitudes.
pub fn embeddings_tsv(rows: &[EmbeddingRow]) -> Result<String> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("id\tlabel");
    for d in 0..dim {
        write!(out, "\tdim_{d}").unwrap();
    }
    out.push('\n');
    for r in rows {
        if r.vector.len() != dim {
            return Err(Error::InvalidArgument(format!("row {:?} has dim {}, expected {dim}", r.id, r.vector.len())));
        }
        if r.id.is_empty() || r.id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!("id {:?} cannot be written to TSV", r.id)));
        }
        if let Some(x) = r.vector.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {:?} contains {x}", r.id)));
        }
        out.push_str(&r.id);
        out.push('\t');
        let labels: Vec<String> = r.labels.iter().map(usize::to_string).collect();
        out.push_str(&labels.join(","));
        for x in &r.vector {
            write!(out, "\t{x:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    fs::write(path, embeddings_tsv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
        return Err(parse_err(path, 1, "header must start with id<TAB>label"));
    }
    for (d, c) in cols[2..].iter().enumerate() {
        if *c != format!("dim_{d}") {
            return Err(parse_err(path, 1, format!("column {} should be dim_{d}, found {c:?}", d + 2)));
        }
    }
    let dim = cols.len() - 2;
    lines
        .enumerate()
        .map(|(i, line)| {
            let lineno = i + 2;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != dim + 2 {
                return Err(parse_err(path, lineno, format!("expected {} fields, found {}", dim + 2, fields.len())));
            }
            let labels = if fields[1].is_empty() {
                BTreeSet::new()
            } else {
                fields[1]
                    .split(',')
                    .map(|l| l.parse().map_err(|_| parse_err(path, lineno, format!("bad label {l:?}"))))
                    .collect::<Result<_>>()?
            };
            let vector = fields[2..]
                .iter()
                .map(|x| x.parse().map_err(|_| parse_err(path, lineno, format!("bad float {x:?}"))))
                .collect::<Result<_>>()?;
            Ok(EmbeddingRow {
                id: fields[0].to_string(),
                labels,
                vector,
            })
        })
        .collect()
}

/// `metric<TAB>value` lines, in the order given.
pub fn metrics_text(metrics: &[(String, f64)]) -> String {
    let mut out = String::from("metric\tvalue\n");
    for (name, value) in metrics {
        writeln!(out, "{name}\t{value}").unwrap();
    }
    out
}

pub fn write_metrics(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    fs::write(path, metrics_text(metrics)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, i + 1, "expected metric<TAB>value"))?;
            let value = value.parse().map_err(|_| parse_err(path, i + 1, format!("bad value {value:?}")))?;
            Ok((name.to_string(), value))
        })
        .collect()
}
