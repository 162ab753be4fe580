//! Cohort manifests: one CSV row per scan.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mvol::Modality;
use crate::error::{Error, ManifestErrorKind, Result};

pub const MANIFEST_HEADER: [&str; 7] =
    ["subject_id", "session_id", "modality", "path", "ce_label", "aht_label", "fss_score"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub subject_id: String,
    pub session_id: String,
    pub modality: Modality,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub ce_label: Option<u8>,
    pub aht_label: Option<u8>,
    pub fss_score: Option<u32>,
}

/// A DWI scan and its ADC partner from one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPair<'a> {
    pub dwi: &'a ScanRecord,
    pub adc: Option<&'a ScanRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    pub records: Vec<ScanRecord>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

fn err(line: usize, kind: ManifestErrorKind) -> Error {
    Error::Manifest { line, kind }
}

fn parse_label(cell: &str, line: usize) -> Result<Option<u8>> {
    match cell {
        "" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(err(line, ManifestErrorKind::BadLabel(other.into()))),
    }
}

fn parse_modality(cell: &str, line: usize) -> Result<Modality> {
    match cell {
        "DWI" => Ok(Modality::Dwi),
        "ADC" => Ok(Modality::Adc),
        other => Err(err(line, ManifestErrorKind::UnknownModality(other.into()))),
    }
}

impl CohortManifest {
    /// Parses manifest text. Any malformed row fails the whole parse.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut rows = reader.records();
        let header = match rows.next() {
            None => return Err(err(1, ManifestErrorKind::Empty)),
            Some(h) => h?,
        };
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(err(1, ManifestErrorKind::BadHeader(header.iter().collect::<Vec<_>>().join(","))));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in rows {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.len() != MANIFEST_HEADER.len() {
                let name = MANIFEST_HEADER.get(row.len()).copied().unwrap_or("(extra cell)");
                return Err(err(line, ManifestErrorKind::MissingField(name.into())));
            }
            for (i, name) in MANIFEST_HEADER[..4].iter().enumerate() {
                if row[i].is_empty() {
                    return Err(err(line, ManifestErrorKind::MissingField((*name).into())));
                }
            }
            let fss_score = match &row[6] {
                "" => None,
                s => Some(s.parse::<u32>().map_err(|_| err(line, ManifestErrorKind::NonIntegerFss(s.into())))?),
            };
            let rec = ScanRecord {
                subject_id: row[0].to_string(),
                session_id: row[1].to_string(),
                modality: parse_modality(&row[2], line)?,
                path: row[3].to_string(),
                ce_label: parse_label(&row[4], line)?,
                aht_label: parse_label(&row[5], line)?,
                fss_score,
            };
            let key = (rec.subject_id.clone(), rec.session_id.clone(), rec.modality, rec.path.clone());
            if !seen.insert(key) {
                return Err(err(
                    line,
                    ManifestErrorKind::DuplicateKey(format!(
                        "({}, {}, {}, {})",
                        rec.subject_id, rec.session_id, rec.modality, rec.path
                    )),
                ));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(err(1, ManifestErrorKind::Empty));
        }
        Ok(CohortManifest { records, base_dir: base_dir.into() })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.subject_id.clone(),
                r.session_id.clone(),
                r.modality.to_string(),
                r.path.clone(),
                opt(r.ce_label.map(u32::from)),
                opt(r.aht_label.map(u32::from)),
                opt(r.fss_score),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn resolve(&self, record: &ScanRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Subject ids in sorted order, each once.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// DWI scans with their same-session ADC partner, in manifest order.
    pub fn session_pairs(&self) -> Vec<SessionPair<'_>> {
        let mut adc: BTreeMap<(&str, &str), &ScanRecord> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.modality == Modality::Adc) {
            adc.entry((&r.subject_id, &r.session_id)).or_insert(r);
        }
        self.records
            .iter()
            .filter(|r| r.modality == Modality::Dwi)
            .map(|dwi| SessionPair { dwi, adc: adc.get(&(dwi.subject_id.as_str(), dwi.session_id.as_str())).copied() })
            .collect()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    CohortManifest::parse(&text, base)
}

pub fn write_manifest(manifest: &CohortManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_csv()?).map_err(|e| Error::io(path, e))
}
