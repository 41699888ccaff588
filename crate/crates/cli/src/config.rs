//! Config-file merging, run manifests and exit-code classification.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, bad config file, missing required setting.
    Usage(String),
    /// Unreadable or inconsistent inputs, or a failed pipeline precondition.
    Data(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "{m}"),
        }
    }
}

impl From<landslide::Error> for Failure {
    fn from(e: landslide::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

pub fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| {
        Failure::Usage(format!(
            "--{flag} is required (flag or config key {:?})",
            flag.replace('-', "_")
        ))
    })
}

/// Settings after overlaying command-line flags on the config file.
pub struct Resolved<T> {
    pub args: T,
    pub seed: u64,
    /// Canonical JSON of every effective setting, including the seed.
    pub effective: Value,
}

/// Reads `config` (TOML), takes the table named after the subcommand when
/// present (else the whole file), and overlays every flag that was given.
pub fn resolve<T>(
    command: &str,
    flags: &T,
    config: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<Resolved<T>>
where
    T: Serialize + DeserializeOwned,
{
    let mut base = match config {
        Some(path) => load_table(path, command)?,
        None => Map::new(),
    };
    let file_seed = match base.remove("seed") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            Failure::Usage("config key seed must be a non-negative integer".into())
        })?),
    };
    let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flag structs serialize to objects")
    };
    for (k, v) in given {
        if !v.is_null() {
            base.insert(k, v);
        }
    }
    let args: T = serde_json::from_value(Value::Object(base))
        .map_err(|e| Failure::Usage(format!("invalid settings for {command}: {e}")))?;
    let seed = seed.or(file_seed).unwrap_or(0);
    let Value::Object(mut effective) = serde_json::to_value(&args).expect("settings serialize")
    else {
        unreachable!()
    };
    effective.insert("seed".into(), seed.into());
    Ok(Resolved {
        args,
        seed,
        effective: Value::Object(effective),
    })
}

fn load_table(path: &Path, command: &str) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {} is not valid TOML: {e}", path.display())))?;
    let Value::Object(mut table) = value else {
        return usage(format!("config {} must be a table", path.display()));
    };
    match table.remove(command) {
        Some(Value::Object(section)) => {
            let mut merged = section;
            if let Some(seed) = table.remove("seed") {
                merged.entry("seed").or_insert(seed);
            }
            Ok(merged)
        }
        Some(_) => usage(format!("config key {command:?} must be a table")),
        None => Ok(table),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct InputRecord {
    path: String,
    sha256: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    threads: usize,
    config: &'a Value,
    config_sha256: String,
    inputs: Vec<InputRecord>,
    versions: Versions,
}

#[derive(Serialize)]
struct Versions {
    landslide: &'static str,
    cli: &'static str,
}

/// Hash of a file, or of every file below a directory in sorted order.
fn hash_input(path: &Path) -> Option<String> {
    if path.is_file() {
        return fs::read(path).ok().map(|b| sha256_hex(&b));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.retain(|p| p.is_file());
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name()?.to_string_lossy().as_bytes());
        h.update(fs::read(&f).ok()?);
    }
    Some(hex::encode(h.finalize()))
}

/// Writes `manifest.json` into `out`. No timestamps: reruns are byte-identical.
pub fn write_manifest<T>(
    out: &Path,
    command: &str,
    resolved: &Resolved<T>,
    threads: usize,
    inputs: &[PathBuf],
) -> CliResult<()> {
    let canonical = serde_json::to_string(&resolved.effective).expect("config serializes");
    let manifest = Manifest {
        command,
        seed: resolved.seed,
        threads,
        config: &resolved.effective,
        config_sha256: sha256_hex(canonical.as_bytes()),
        inputs: inputs
            .iter()
            .map(|p| InputRecord {
                path: p.display().to_string(),
                sha256: hash_input(p),
            })
            .collect(),
        versions: Versions {
            landslide: landslide::VERSION,
            cli: env!("CARGO_PKG_VERSION"),
        },
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}
