//! Output formatting and all-or-nothing file writing.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Canonical JSON of the resolved config and its SHA-256.
pub fn config_fingerprint<T: Serialize>(cfg: &T) -> (String, String) {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let hash = hex::encode(Sha256::digest(json.as_bytes()));
    (json, hash)
}

/// `# config_sha256: …` and `# config: …` lines for tabular files.
pub fn config_header<T: Serialize>(cfg: &T) -> String {
    let (json, hash) = config_fingerprint(cfg);
    format!("# config_sha256: {hash}\n# config: {json}\n")
}

/// Rounds to `digits` significant digits.
pub fn sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return format!("{:.*}", digits.saturating_sub(1), 0.0);
    }
    let mag = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Left-aligned columns separated by two spaces.
pub fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Delimited text; fields containing the delimiter or quotes are quoted.
pub fn delimited(rows: &[Vec<String>], delimiter: char) -> String {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .flexible(true)
        .from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 input")
}

/// Files staged in memory and written together; if any write fails the
/// ones already written are removed.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, content: impl Into<Vec<u8>>) {
        self.files.push((path, content.into()));
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, String> {
        let mut written: Vec<PathBuf> = Vec::new();
        for (path, bytes) in self.files {
            if let Err(e) = fs::write(&path, bytes) {
                let _ = fs::remove_file(&path);
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(format!("cannot write {}: {e}", path.display()));
            }
            written.push(path);
        }
        Ok(written)
    }
}

pub fn with_suffix(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
