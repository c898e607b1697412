use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Document, RawDocument, TaskKind, Vocab};
use crate::error::{Error, Result};

/// Where the vocabulary for [`load_jsonl`] comes from.
#[derive(Clone, Copy, Debug)]
pub enum VocabSource<'a> {
    Existing(&'a Vocab),
    Build { min_freq: usize },
}

/// Parses a JSONL corpus; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads and tokenizes a JSONL corpus, preserving line order.
///
/// With `num_labels` set, any label id `>= num_labels` is an error naming
/// its line.
pub fn load_jsonl(
    path: &Path,
    vocab: VocabSource<'_>,
    task: TaskKind,
    num_labels: Option<usize>,
) -> Result<(Vocab, Vec<Document>)> {
    let raw = read_jsonl(path)?;
    let vocab = match vocab {
        VocabSource::Existing(v) => v.clone(),
        VocabSource::Build { .. } if raw.is_empty() => Vocab::reserved_only(),
        VocabSource::Build { min_freq } => {
            let texts: Vec<&str> = raw.iter().map(|d| d.text.as_str()).collect();
            Vocab::build(&texts, min_freq)?
        }
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line_numbers: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    let docs = raw
        .iter()
        .zip(line_numbers)
        .map(|(r, line)| {
            let parse_err = |message: String| Error::Parse {
                path: path.to_owned(),
                line,
                message,
            };
            if let Some(n) = num_labels {
                if let Some(bad) = r.labels.iter().find(|&&l| l >= n) {
                    return Err(parse_err(format!("unknown label {bad} (label count {n})")));
                }
            }
            Document::from_raw(r, &vocab, task).map_err(|e| parse_err(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, docs))
}

/// Reads `id<TAB>name` lines.
pub fn read_label_names(path: &Path) -> Result<BTreeMap<usize, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |message: &str| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: message.to_owned(),
        };
        let (id, name) = line.split_once('\t').ok_or_else(|| parse_err("expected id<TAB>name"))?;
        let id = id.trim().parse().map_err(|_| parse_err("label id is not an integer"))?;
        names.insert(id, name.to_owned());
    }
    Ok(names)
}

pub fn write_label_names(path: &Path, names: &BTreeMap<usize, String>) -> Result<()> {
    let mut out = String::new();
    for (id, name) in names {
        let _ = writeln!(out, "{id}\t{name}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("c.jsonl");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "{\"id\":\"1\",\"text\":\"a b\",\"labels\":[0]}\n");
        let (vocab, docs) = load_jsonl(&path, VocabSource::Build { min_freq: 1 }, TaskKind::MultiLabel, None).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "1");
        assert_eq!(docs[0].tokens, vec![vocab.id("a"), vocab.id("b")]);
        assert_eq!(docs[0].labels, [0].into());
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "{\"id\":\"1\",\"text\":\"a\",\"labels\":[]}\n{\"id\":\"2\",\"text\":\"b\",\"labels\":[]}\n{oops\n",
        );
        let err = read_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_collection() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "");
        let (_, docs) = load_jsonl(&path, VocabSource::Build { min_freq: 1 }, TaskKind::Unlabeled, None).unwrap();
        assert!(docs.is_empty());
    }

    #[test]
    fn unknown_label_in_eval_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "{\"id\":\"1\",\"text\":\"a\",\"labels\":[0]}\n{\"id\":\"2\",\"text\":\"b\",\"labels\":[5]}\n");
        let vocab = Vocab::build(&["a b"], 1).unwrap();
        let err = load_jsonl(&path, VocabSource::Existing(&vocab), TaskKind::MultiLabel, Some(3))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("unknown label 5"), "{err}");
    }

    #[test]
    fn order_is_preserved_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let docs: Vec<RawDocument> = (0..5)
            .map(|i| RawDocument {
                id: format!("d{i}"),
                text: format!("word{i} shared"),
                labels: vec![i % 2],
            })
            .collect();
        write_jsonl(&path, &docs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), docs);
    }

    #[test]
    fn label_names_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let names: BTreeMap<usize, String> = [(0, "art. 3".to_owned()), (4, "other".to_owned())].into();
        write_label_names(&path, &names).unwrap();
        assert_eq!(read_label_names(&path).unwrap(), names);
    }
}
