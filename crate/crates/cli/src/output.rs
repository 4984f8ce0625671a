use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pdmp_core::{Experiment, ExperimentConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub config_sha256: String,
    pub seed: u64,
    pub version: &'static str,
}

impl Meta {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        let digest = Sha256::digest(config_bytes);
        let mut hex = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(hex, "{b:02x}");
        }
        Meta {
            config_sha256: hex,
            seed,
            version: VERSION,
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("config_sha256", self.config_sha256.clone()),
            ("seed", self.seed.to_string()),
            ("version", self.version.to_string()),
        ]
    }

    pub fn csv_comments(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    metadata: &'a Meta,
}

/// Reads, hashes and validates a config. The seed falls back to the
/// environment when the config has none.
pub fn load_config(path: &Path) -> Result<(Experiment, Meta), CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    let seed_env = std::env::var(pdmp_core::config::SEED_ENV).ok();
    let exp = ExperimentConfig::from_json(text)?.validate(seed_env.as_deref())?;
    let meta = Meta::new(&bytes, exp.seed);
    Ok((exp, meta))
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), CliError> {
    let fail = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fail)?;
    }
    fs::write(path, contents).map_err(fail)
}

/// Pretty JSON of `value` with a `metadata` key added at the top level.
pub fn stamped_json<T: Serialize>(value: &T, meta: &Meta) -> Result<String, CliError> {
    serde_json::to_string_pretty(&Stamped {
        body: value,
        metadata: meta,
    })
    .map(|s| s + "\n")
    .map_err(|e| CliError::Runtime(format!("serialization failed: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, meta: &Meta) -> Result<(), CliError> {
    write_text(path, &stamped_json(value, meta)?)
}

pub fn lambda_dir(root: &Path, lambda: f64) -> PathBuf {
    root.join(format!("lambda_{lambda}"))
}
