//! JSON Lines corpora and hypothesis files, `clues.json`, and CSV tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;
use trrg_core::corpus::{SyntheticStudy, DISEASES};
use trrg_core::metrics::LabelVector;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Record { path: String, line: usize, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn record_err(path: &Path, line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Record {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// serde_json messages end with a position inside the line; the line
/// number is reported separately, so that suffix is dropped.
fn json_message(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rsplit_once(" at line ") {
        Some((head, _)) => head.to_string(),
        None => s,
    }
}

struct OrderedLabels<'a>(&'a LabelVector);

impl Serialize for OrderedLabels<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(DISEASES.len()))?;
        for (i, d) in DISEASES.iter().enumerate() {
            m.serialize_entry(d, &u8::from(self.0.get(i)))?;
        }
        m.end()
    }
}

#[derive(Serialize)]
struct StudyOut<'a> {
    id: &'a str,
    h: usize,
    w: usize,
    pixels: &'a [f32],
    report: &'a str,
    labels: OrderedLabels<'a>,
}

#[derive(Deserialize)]
struct StudyIn {
    id: String,
    h: usize,
    w: usize,
    pixels: Vec<f32>,
    report: String,
    labels: BTreeMap<String, u8>,
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

pub fn study_line(s: &SyntheticStudy) -> String {
    serde_json::to_string(&StudyOut {
        id: &s.id,
        h: s.height,
        w: s.width,
        pixels: &s.pixels,
        report: &s.report,
        labels: OrderedLabels(&s.labels),
    })
    .expect("study records always serialise")
}

pub fn write_corpus(path: &Path, studies: &[SyntheticStudy]) -> Result<(), FormatError> {
    let mut w = create(path)?;
    for s in studies {
        writeln!(w, "{}", study_line(s)).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn parse_study(path: &Path, line: usize, text: &str) -> Result<SyntheticStudy, FormatError> {
    let rec: StudyIn = serde_json::from_str(text).map_err(|e| record_err(path, line, json_message(&e)))?;
    if rec.pixels.len() != rec.h * rec.w {
        return Err(record_err(
            path,
            line,
            format!("pixels has {} values, expected h*w = {}", rec.pixels.len(), rec.h * rec.w),
        ));
    }
    let mut labels = LabelVector::default();
    for (i, d) in DISEASES.iter().enumerate() {
        match rec.labels.get(*d) {
            Some(0) => {}
            Some(1) => labels.set(i, true),
            Some(v) => return Err(record_err(path, line, format!("label `{d}` must be 0 or 1, got {v}"))),
            None => return Err(record_err(path, line, format!("missing label `{d}`"))),
        }
    }
    if let Some(k) = rec.labels.keys().find(|k| !DISEASES.contains(&k.as_str())) {
        return Err(record_err(path, line, format!("unknown label `{k}`")));
    }
    Ok(SyntheticStudy {
        id: rec.id,
        height: rec.h,
        width: rec.w,
        pixels: rec.pixels,
        report: rec.report,
        labels,
    })
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>, FormatError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, l) in BufReader::new(f).lines().enumerate() {
        let l = l.map_err(|e| io_err(path, e))?;
        if !l.trim().is_empty() {
            out.push((i + 1, l));
        }
    }
    Ok(out)
}

/// Reads a corpus; lines are parsed in parallel on the current rayon pool.
pub fn read_corpus(path: &Path) -> Result<Vec<SyntheticStudy>, FormatError> {
    use rayon::prelude::*;
    lines(path)?
        .par_iter()
        .map(|(n, l)| parse_study(path, *n, l))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub hypothesis: String,
}

pub fn write_hypotheses(path: &Path, hyps: &[Hypothesis]) -> Result<(), FormatError> {
    let mut w = create(path)?;
    for h in hyps {
        let line = serde_json::to_string(h).expect("hypotheses always serialise");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<Hypothesis>, FormatError> {
    lines(path)?
        .into_iter()
        .map(|(n, l)| serde_json::from_str(&l).map_err(|e| record_err(path, n, json_message(&e))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClueRecord {
    pub id: String,
    pub clues: Vec<String>,
    pub weights: Vec<f32>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e.into()))?;
    writeln!(w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// A CSV file with a fixed header, written row by row.
pub struct CsvLog {
    path: std::path::PathBuf,
    w: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, FormatError> {
        let mut w = create(path)?;
        writeln!(w, "{}", header.join(",")).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), FormatError> {
        writeln!(self.w, "{}", fields.join(",")).map_err(|e| io_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), FormatError> {
        self.w.flush().map_err(|e| io_err(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use trrg_core::corpus::{generate_corpus, GeneratorConfig};

    #[test]
    fn corpus_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let studies = generate_corpus(5, 9, &GeneratorConfig::default());
        write_corpus(&p, &studies).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), studies);
    }

    #[test]
    fn errors_name_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let studies = generate_corpus(2, 9, &GeneratorConfig::default());
        let good = study_line(&studies[0]);
        let bad = good.replace("\"report\"", "\"rapport\"");
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        let msg = read_corpus(&p).unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("report"), "{msg}");

        let short = good.replacen("\"pixels\":[", "\"pixels\":[0.5,", 1);
        std::fs::write(&p, format!("{short}\n")).unwrap();
        let msg = read_corpus(&p).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("4097"), "{msg}");
    }

    #[test]
    fn labels_keep_catalog_order() {
        let s = &generate_corpus(1, 3, &GeneratorConfig::default())[0];
        let line = study_line(s);
        let a = line.find("enlarged cardiomediastinum").unwrap();
        let b = line.find("\"hernia\"").unwrap();
        assert!(a < b);
    }
}
