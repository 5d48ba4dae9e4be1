use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;

/// Identifies how an output was produced. Deliberately excludes paths and clocks
/// so that reruns are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(cfg: &RunConfig, command: String) -> Self {
        Self {
            tool: "iontrap",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: cfg.hash(),
            seed: cfg.seed,
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# {} {} | command: {} | config_sha256: {} | seed: {}\n",
            self.tool, self.version, self.command, self.config_sha256, self.seed
        )
    }
}

pub struct Sink {
    dir: PathBuf,
    pub provenance: Provenance,
    csv: bool,
    json: bool,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(cfg: &RunConfig, provenance: Provenance) -> Self {
        Self { dir: cfg.out_dir.clone(), provenance, csv: cfg.csv, json: cfg.json, written: Vec::new() }
    }

    fn write(&mut self, name: &str, body: &str) -> std::io::Result<()> {
        let path = self.dir.join(name);
        let ctx = |e: std::io::Error| std::io::Error::new(e.kind(), format!("{}: {e}", path.display()));
        fs::create_dir_all(&self.dir).map_err(ctx)?;
        fs::write(&path, body).map_err(ctx)?;
        self.written.push(path);
        Ok(())
    }

    /// Text output with the provenance header as leading `#` comment lines.
    pub fn text(&mut self, name: &str, body: &str) -> std::io::Result<()> {
        let full = format!("{}{}", self.provenance.header(), body);
        self.write(name, &full)
    }

    pub fn csv(&mut self, name: &str, body: &str) -> std::io::Result<()> {
        if !self.csv {
            return Ok(());
        }
        self.text(name, body)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, payload: &T) -> std::io::Result<()> {
        if !self.json {
            return Ok(());
        }
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            provenance: &'a Provenance,
            #[serde(flatten)]
            payload: &'a T,
        }
        let wrapped = Wrapped { provenance: &self.provenance, payload };
        let mut s = serde_json::to_string_pretty(&wrapped).map_err(std::io::Error::other)?;
        s.push('\n');
        self.write(name, &s)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
