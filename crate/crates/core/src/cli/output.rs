//! Output directory with a `manifest.json` index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{write_field, FieldMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            _ => Err(Error::Config(format!("unknown format {s}; expected csv, json or svg"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: String,
    pub description: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    format: Format,
    config_hash: &'a str,
    files: &'a [ManifestEntry],
}

/// Collects the files written by one command. The summary JSON is always written;
/// other artefacts only when they match the requested format.
pub struct Output {
    dir: PathBuf,
    format: Format,
    entries: Vec<ManifestEntry>,
}

impl Output {
    pub fn new(dir: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output { dir: dir.to_path_buf(), format, entries: Vec::new() })
    }

    pub fn format(&self) -> Format {
        self.format
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, file: String, kind: &str, description: &str) {
        self.entries.push(ManifestEntry { file, kind: kind.into(), description: description.into() });
    }

    pub fn summary(&mut self, name: &str, description: &str, json: &str) -> Result<()> {
        fs::write(self.dir.join(name), json)?;
        self.record(name.into(), "summary", description);
        Ok(())
    }

    /// Writes `content` to `name` when `format` is the requested one.
    pub fn text(&mut self, name: &str, format: Format, description: &str, content: &str) -> Result<()> {
        if format != self.format {
            return Ok(());
        }
        fs::write(self.dir.join(name), content)?;
        let kind = match format {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Svg => "svg",
        };
        self.record(name.into(), kind, description);
        Ok(())
    }

    /// Binary field plus sidecar, written with the JSON format.
    pub fn field(&mut self, name: &str, description: &str, values: &[f64], meta: &FieldMeta) -> Result<()> {
        if self.format != Format::Json {
            return Ok(());
        }
        for file in write_field(&self.dir, name, values, meta)? {
            let kind = if file.ends_with(".bin") { "field" } else { "sidecar" };
            self.record(file, kind, description);
        }
        Ok(())
    }

    pub fn finish(self, command: &str, config_hash: &str) -> Result<PathBuf> {
        let manifest = Manifest { command, format: self.format, config_hash, files: &self.entries };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_by_format_and_indexes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::new(dir.path(), Format::Csv).unwrap();
        out.summary("summary.json", "run summary", "{}").unwrap();
        out.text("a.csv", Format::Csv, "table", "x\n1\n").unwrap();
        out.text("a.svg", Format::Svg, "plot", "<svg/>").unwrap();
        out.field("rho", "density", &[1.0], &FieldMeta {
            kind: "cap".into(),
            shape: vec![1],
            dx: vec![1.0],
            dt: 1.0,
            origin: vec![0.0],
            topology: crate::grid::Topology::Box,
        })
        .unwrap();
        let path = out.finish("test", "abc").unwrap();
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|e| e["file"].as_str().unwrap()).collect();
        assert_eq!(files, ["summary.json", "a.csv"]);
        assert!(!dir.path().join("a.svg").exists());
        assert_eq!(Format::parse("svg").unwrap(), Format::Svg);
        assert!(Format::parse("png").is_err());
    }
}
