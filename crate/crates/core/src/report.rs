//! CSV/JSON artifact helpers. Every CSV starts with a `#` comment line
//! carrying provenance; readers skip lines starting with `#`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUILD_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            version: BUILD_VERSION.to_string(),
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# config_hash={} seed={} version={}",
            self.config_hash, self.seed, self.version
        )
    }

    pub fn parse_comment(line: &str) -> Option<Self> {
        let body = line.strip_prefix('#')?.trim();
        let mut hash = None;
        let mut seed = None;
        let mut version = None;
        for field in body.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "config_hash" => hash = Some(v.to_string()),
                "seed" => seed = v.parse().ok(),
                "version" => version = Some(v.to_string()),
                _ => {}
            }
        }
        Some(Self {
            config_hash: hash?,
            seed: seed?,
            version: version?,
        })
    }
}

/// A CSV table of numbers with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub provenance: Option<Provenance>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(provenance: Option<Provenance>, header: Vec<String>) -> Self {
        Self {
            provenance,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values are written in shortest round-trip form, so reading a table
    /// back reproduces every value exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.provenance {
            out.push_str(&p.comment_line());
            out.push('\n');
        }
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut provenance = None;
        let mut lines = text.lines().filter(|l| {
            if l.starts_with('#') {
                provenance = provenance.clone().or_else(|| Provenance::parse_comment(l));
                false
            } else {
                !l.trim().is_empty()
            }
        });
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("CSV row {}: {e}", n + 1)))?;
            if row.len() != header.len() {
                return Err(Error::Format(format!(
                    "CSV row {} has {} fields, header has {}",
                    n + 1,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self {
            provenance,
            header,
            rows,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}
