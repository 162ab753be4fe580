//! Per-volume score files: `subject_id,session_id,path,score`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_HEADER: [&str; 4] = ["subject_id", "session_id", "path", "score"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject_id: String,
    pub session_id: String,
    pub path: String,
    pub score: f64,
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(SCORE_HEADER)?;
    for r in rows {
        w.write_record([&r.subject_id, &r.session_id, &r.path, &r.score.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != SCORE_HEADER {
        return Err(Error::InvalidArgument(format!(
            "score file header must be {}, got {}",
            SCORE_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let score: f64 = rec[3]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("score file line {}: bad score {:?}", i + 2, &rec[3])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score file line {}: score {score} outside [0,1]", i + 2)));
        }
        rows.push(ScoreRow { subject_id: rec[0].into(), session_id: rec[1].into(), path: rec[2].into(), score });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("score file has no rows".into()));
    }
    Ok(rows)
}

pub fn write_scores(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scores_to_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    parse_scores(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
