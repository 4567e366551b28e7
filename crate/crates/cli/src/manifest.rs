//! Run manifests. Each command writes `<out>.manifest.json` recording its
//! arguments, the digests of every file it read and wrote, and an invocation
//! fingerprint over the arguments with file paths replaced by content digests.
//! `replay` re-executes a manifest and compares output digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::ArgMatches;
use hrank::fingerprint::digest;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    /// Arguments after the program name, as typed.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub invocation_fingerprint: String,
    /// Every argument value in effect, defaults included.
    pub params: BTreeMap<String, Vec<String>>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Command-specific facts such as the dataset description.
    pub details: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Arguments that do not influence outputs.
const IGNORED: &[&str] = &["out", "workers"];

pub fn file_digest(role: &str, path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(FileDigest {
        role: role.to_string(),
        path: std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf()),
        sha256: digest(&bytes),
    })
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Raw values of every argument the subcommand received, keyed by argument id.
/// Group ids are skipped; `args` lists the real argument ids.
pub fn params(matches: &ArgMatches, args: &[String]) -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    for id in matches.ids().filter(|id| args.iter().any(|a| a == id.as_str())) {
        if let Ok(Some(values)) = matches.try_get_raw(id.as_str()) {
            out.insert(
                id.as_str().to_string(),
                values.map(|v| v.to_string_lossy().into_owned()).collect(),
            );
        }
    }
    out
}

/// Digest of the command, its non-path parameters and the contents of its input files.
pub fn invocation_fingerprint(command: &str, params: &BTreeMap<String, Vec<String>>, inputs: &[FileDigest]) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        command: &'a str,
        params: BTreeMap<&'a str, &'a [String]>,
        inputs: Vec<(&'a str, &'a str)>,
    }
    let input_roles: Vec<&str> = inputs.iter().map(|i| i.role.as_str()).collect();
    let canonical = Canonical {
        command,
        params: params
            .iter()
            .filter(|(k, _)| !IGNORED.contains(&k.as_str()) && !input_roles.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect(),
        inputs: inputs.iter().map(|i| (i.role.as_str(), i.sha256.as_str())).collect(),
    };
    digest(&serde_json::to_vec(&canonical).expect("canonical form serializes"))
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl Manifest {
    pub fn write(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = manifest_path(primary_output);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::inputs::write_bytes(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::inputs::read_text(path)?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
    }
}

/// `argv` with the value of `--out` replaced.
pub fn override_out(argv: &[String], out: &Path) -> Vec<String> {
    let out = out.to_string_lossy().into_owned();
    let mut result = Vec::with_capacity(argv.len());
    let mut iter = argv.iter();
    let mut replaced = false;
    while let Some(arg) = iter.next() {
        if arg == "--out" {
            result.push(arg.clone());
            iter.next();
            result.push(out.clone());
            replaced = true;
        } else if arg.starts_with("--out=") {
            result.push(format!("--out={out}"));
            replaced = true;
        } else {
            result.push(arg.clone());
        }
    }
    if !replaced {
        result.push("--out".into());
        result.push(out);
    }
    result
}
