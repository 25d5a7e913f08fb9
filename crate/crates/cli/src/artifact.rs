//! File access with user-facing errors, input digests, seeds and provenance-stamped text
//! artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use callmask::provenance::{config_hash, Provenance};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// An error caused by the invocation or its inputs; exits with status 1.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UserError(pub String);

pub fn user(message: impl Into<String>) -> anyhow::Error {
    UserError(message.into()).into()
}

/// Wraps any displayable error as a user error prefixed by `context`.
pub fn user_at<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> anyhow::Error {
    move |e| user(format!("{context}: {e}"))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(user_at(path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(user_at(path.display()))
}

/// Creates a file, and its parent directories, for writing.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(user_at(dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(user_at(path.display()))?))
}

/// A file, or standard output when no path is given.
pub fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content digests of the files an invocation read, keyed by role. Paths are left out so
/// that identical inputs in different directories give identical artifacts.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Inputs(BTreeMap<String, String>);

impl Inputs {
    pub fn add(&mut self, role: &str, bytes: &[u8]) {
        self.0.insert(role.to_string(), sha256_hex(bytes));
    }
}

/// The seed of one stage, derived from the invocation's root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let hash = config_hash(&serde_json::json!({ "seed": root, "stage": stage }));
    u64::from_str_radix(&hash[..16], 16).expect("hex digest")
}

/// Provenance over the resolved settings, the root seed and the input digests.
pub fn provenance<S: Serialize>(stage: &str, seed: u64, settings: &S, inputs: &Inputs) -> Provenance {
    Provenance::new(stage, &serde_json::json!({ "seed": seed, "settings": settings, "inputs": inputs }))
}

#[derive(Serialize, serde::Deserialize)]
struct Header {
    provenance: Provenance,
}

/// Starts a JSONL artifact with its `{"provenance": ...}` line.
pub fn write_jsonl_header<W: Write>(mut w: W, prov: &Provenance) -> Result<()> {
    serde_json::to_writer(&mut w, &Header { provenance: prov.clone() })?;
    writeln!(w)?;
    Ok(())
}

/// Reads JSONL items, skipping blank lines and a leading provenance line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Provenance>, Vec<T>)> {
    let text = read_text(path)?;
    let mut prov = None;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(line) {
                prov = Some(h.provenance);
                continue;
            }
        }
        items.push(serde_json::from_str(line).map_err(user_at(format!("{} line {}", path.display(), i + 1)))?);
    }
    Ok((prov, items))
}

/// Prefixes a CSV body with a `# provenance:` comment line.
pub fn stamp_csv(prov: &Provenance, body: &str) -> String {
    format!("# provenance: {}\n{body}", prov.to_json())
}

/// Prefixes an SVG document with an XML comment carrying the provenance.
pub fn stamp_svg(prov: &Provenance, svg: &str) -> String {
    format!("<!-- provenance: {} -->\n{svg}", prov.to_json().replace("--", "- -"))
}
