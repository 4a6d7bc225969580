//! Artifact writing and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use looprobe::stats::fmt_float;
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: String,
    pub config: Option<String>,
    pub seed: u64,
    pub out_dir: String,
    pub format: Format,
    pub artifacts: Vec<Artifact>,
}

/// Writes files into one directory and records their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        self.artifacts.push(Artifact { file: name.to_string(), sha256: hex::encode(Sha256::digest(contents.as_bytes())) });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Writes `manifest.json`, which lists every other artifact.
    pub fn finish(self, subcommand: &str, config: Option<&Path>, seed: u64, format: Format) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config: config.map(|p| p.display().to_string()),
            seed,
            out_dir: self.dir.display().to_string(),
            format,
            artifacts: self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }
}

/// Header row of labels, then one labelled row per matrix row.
pub fn matrix_csv(labels: &[String], m: &DMatrix<f64>) -> String {
    let mut out = String::from("node");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for j in 0..m.ncols() {
            out.push(',');
            out.push_str(&fmt_float(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
pub struct MatrixDoc<'a> {
    pub labels: &'a [String],
    pub rows: Vec<Vec<f64>>,
}

pub fn matrix_doc<'a>(labels: &'a [String], m: &DMatrix<f64>) -> MatrixDoc<'a> {
    MatrixDoc { labels, rows: m.row_iter().map(|r| r.iter().copied().collect()).collect() }
}

pub fn vector_csv(labels: &[String], name: &str, v: &[f64]) -> String {
    let mut out = format!("node,{name}\n");
    for (l, x) in labels.iter().zip(v) {
        out.push_str(&format!("{l},{}\n", fmt_float(*x)));
    }
    out
}
