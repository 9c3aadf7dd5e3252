use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GateResult, ResultRow};
use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

/// A file to be written under the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub contents: Vec<u8>,
}

impl Artifact {
    pub fn text(path: impl Into<String>, contents: impl Into<String>) -> Self {
        Artifact {
            path: path.into(),
            contents: contents.into().into_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
    pub gates: Vec<GateResult>,
    pub passed: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `#schema_version=1`, then
/// `method,seed,sweep,avg_acc,norm_acc,flatness,acc_task0,…[,wall_time_s]`.
pub fn results_csv(rows: &[ResultRow], include_wall_time: bool) -> String {
    let tasks = rows.iter().map(|r| r.task_acc.len()).max().unwrap_or(0);
    let mut out =
        format!("#schema_version={SCHEMA_VERSION}\nmethod,seed,sweep,avg_acc,norm_acc,flatness");
    for t in 0..tasks {
        out.push_str(&format!(",acc_task{t}"));
    }
    if include_wall_time {
        out.push_str(",wall_time_s");
    }
    out.push('\n');
    for r in rows {
        let sweep = r.sweep.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.method, r.seed, sweep, r.avg_acc, r.norm_acc, r.flatness
        ));
        for a in &r.task_acc {
            out.push_str(&format!(",{a}"));
        }
        if include_wall_time {
            out.push_str(&format!(",{:.3}", r.wall_time_s));
        }
        out.push('\n');
    }
    out
}

/// Writes every artefact under `out` plus `manifest.json` listing each
/// file's digest. Artefacts are listed in path order.
pub fn write_artifacts(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    mut artifacts: Vec<Artifact>,
    gates: Vec<GateResult>,
) -> Result<Manifest> {
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    fs::create_dir_all(out)?;
    let mut files = Vec::with_capacity(artifacts.len());
    for a in &artifacts {
        let path = out.join(&a.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &a.contents)?;
        files.push(FileEntry {
            path: a.path.clone(),
            sha256: sha256_hex(&a.contents),
            bytes: a.contents.len(),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        config,
        files,
        passed: gates.iter().all(|g| g.passed),
        gates,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let rows = vec![ResultRow {
            method: "average".into(),
            seed: 2,
            sweep: None,
            task_acc: vec![0.5, 0.75],
            avg_acc: 0.625,
            norm_acc: 0.7,
            flatness: 0.1,
            wall_time_s: 1.25,
        }];
        let csv = results_csv(&rows, false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "#schema_version=1");
        assert_eq!(
            lines[1],
            "method,seed,sweep,avg_acc,norm_acc,flatness,acc_task0,acc_task1"
        );
        assert_eq!(lines[2], "average,2,,0.625,0.7,0.1,0.5,0.75");
        assert!(results_csv(&rows, true)
            .lines()
            .nth(2)
            .unwrap()
            .ends_with(",1.250"));
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
