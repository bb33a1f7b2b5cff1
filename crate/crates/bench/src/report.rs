//! Output plumbing shared by the commands: CSV files, summaries and the
//! per-run manifest.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, Config};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Everything a command needs besides the config.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub seed: u64,
    /// `None` lets each command use its own default precision.
    pub precision: Option<Precision>,
    pub threads: usize,
}

/// In-memory CSV with a frozen header.
#[derive(Debug, Clone)]
pub struct Csv {
    name: String,
    columns: usize,
    text: String,
}

impl Csv {
    pub fn new(name: &str, header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Csv {
            name: name.to_string(),
            columns: header.len(),
            text,
        }
    }

    pub fn row(&mut self, fields: &[&dyn Display]) {
        assert_eq!(fields.len(), self.columns, "row width for {}", self.name);
        let cells: Vec<String> = fields.iter().map(|f| f.to_string()).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Shortest round-trip scientific form, so files are stable across runs.
pub struct Sci(pub f64);

impl Display for Sci {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:e}", self.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    /// Absent for files that carry wall-clock measurements.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    pub deterministic: bool,
}

/// Result of one command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: &'static str,
    pub precision: Precision,
    pub pass: bool,
    /// Human-readable reasons for a failure, one per offending item.
    pub breaches: Vec<String>,
    pub summary: serde_json::Value,
    pub files: Vec<OutputFile>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    precision: Precision,
    threads: usize,
    versions: Versions,
    outputs: &'a [OutputFile],
}

#[derive(Serialize)]
struct Versions {
    pgf_bench: &'static str,
    pgf_core: &'static str,
}

/// Collects the files a command writes, then the manifest.
pub struct Writer<'a> {
    ctx: &'a RunContext,
    files: Vec<OutputFile>,
}

impl<'a> Writer<'a> {
    pub fn new(ctx: &'a RunContext) -> anyhow::Result<Self> {
        fs::create_dir_all(&ctx.out)
            .with_context(|| format!("creating {}", ctx.out.display()))?;
        Ok(Writer {
            ctx,
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.ctx.out.join(name)
    }

    fn put(&mut self, name: &str, bytes: &[u8], deterministic: bool) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256: deterministic.then(|| hex(&Sha256::digest(bytes))),
            deterministic,
        });
        Ok(())
    }

    pub fn csv(&mut self, csv: &Csv) -> anyhow::Result<()> {
        let name = csv.name().to_string();
        self.put(&name, csv.text().as_bytes(), true)
    }

    /// A CSV holding timings; excluded from byte-level reproducibility.
    pub fn timing_csv(&mut self, csv: &Csv) -> anyhow::Result<()> {
        let name = csv.name().to_string();
        self.put(&name, csv.text().as_bytes(), false)
    }

    /// Pre-rendered text, e.g. the meter event log.
    pub fn text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        self.put(name, text.as_bytes(), true)
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S, deterministic: bool) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(name, text.as_bytes(), deterministic)
    }

    /// Registers a file some other writer produced (tensor dumps).
    pub fn adopt(&mut self, name: &str) -> anyhow::Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256: Some(hex(&Sha256::digest(&bytes))),
            deterministic: true,
        });
        Ok(())
    }

    /// Writes `<command>.summary.json` and `<command>.manifest.json`.
    pub fn finish(
        mut self,
        command: &'static str,
        config: &Config,
        precision: Precision,
        pass: bool,
        breaches: Vec<String>,
        summary: serde_json::Value,
        summary_deterministic: bool,
    ) -> anyhow::Result<Outcome> {
        let body = serde_json::json!({
            "command": command,
            "pass": pass,
            "breaches": breaches,
            "results": summary,
        });
        self.json(&format!("{command}.summary.json"), &body, summary_deterministic)?;
        let manifest = Manifest {
            command,
            config_sha256: config.hash(),
            seed: self.ctx.seed,
            precision,
            threads: self.ctx.threads,
            versions: Versions {
                pgf_bench: env!("CARGO_PKG_VERSION"),
                pgf_core: pgf_core::VERSION,
            },
            outputs: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path(&format!("{command}.manifest.json")), text)?;
        Ok(Outcome {
            command,
            precision,
            pass,
            breaches,
            summary,
            files: self.files,
        })
    }
}

pub fn read_to_string(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_and_number_format() {
        let mut c = Csv::new("x.csv", &["a", "b"]);
        c.row(&[&1usize, &Sci(1.5e-13)]);
        c.row(&[&"s", &Sci(0.0)]);
        assert_eq!(c.text(), "a,b\n1,1.5e-13\ns,0e0\n");
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext {
            out: dir.path().to_path_buf(),
            seed: 3,
            precision: None,
            threads: 1,
        };
        let mut w = Writer::new(&ctx).unwrap();
        let mut c = Csv::new("t.csv", &["x"]);
        c.row(&[&1]);
        w.csv(&c).unwrap();
        w.timing_csv(&c).unwrap();
        let out = w
            .finish("demo", &Config::default(), Precision::F64, true, vec![], serde_json::json!({}), true)
            .unwrap();
        assert!(out.pass);
        let m: serde_json::Value =
            serde_json::from_str(&read_to_string(&dir.path().join("demo.manifest.json")).unwrap())
                .unwrap();
        assert_eq!(m["seed"], 3);
        assert_eq!(m["precision"], "f64");
        assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
        assert!(m["outputs"][1].get("sha256").is_none());
        assert!(!m.to_string().contains("time"));
    }
}
