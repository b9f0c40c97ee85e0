//! Run manifests: resolved settings, seeds, tool version, input digests and
//! timestamps, stored as `key = value` text.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::settings::{self, Settings};
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Manifest name inside directory outputs.
pub const DIR_MANIFEST: &str = "run.manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Settings,
    pub seeds: Settings,
    /// Input name to SHA-256 digest.
    pub inputs: Settings,
    pub outputs: Settings,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: Settings) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config,
            seeds: Settings::new(),
            inputs: Settings::new(),
            outputs: Settings::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# robust-mtl run manifest\n");
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("version = {}\n", self.version));
        s.push_str(&format!("started_unix = {}\n", self.started_unix));
        s.push_str(&format!("finished_unix = {}\n", self.finished_unix));
        for (prefix, map) in [
            ("config", &self.config),
            ("seed", &self.seeds),
            ("input", &self.inputs),
            ("output", &self.outputs),
        ] {
            for (k, v) in map {
                s.push_str(&format!("{prefix}.{k} = {v}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let flat = settings::parse(text, origin)?;
        let field = |k: &str| -> Result<String> {
            flat.get(k)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{origin}: manifest lacks {k:?}")).into())
        };
        let number = |k: &str| -> Result<u64> {
            field(k)?
                .parse()
                .map_err(|_| CliError::Usage(format!("{origin}: {k} is not a number")).into())
        };
        let section = |prefix: &str| -> Settings {
            flat.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), v.clone())))
                .collect()
        };
        Ok(Self {
            command: field("command")?,
            version: field("version")?,
            config: section("config."),
            seeds: section("seed."),
            inputs: section("input."),
            outputs: section("output."),
            started_unix: number("started_unix")?,
            finished_unix: number("finished_unix")?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        std::fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Where the manifest of an output lives: inside directory outputs, next to
/// file outputs.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(DIR_MANIFEST)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest");
        out.with_file_name(name)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One digest over several files: each file's relative name and digest, in
/// the given order.
pub fn sha256_files(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(sha256_file(f)?.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut config = Settings::new();
        config.insert("family".into(), "fgsm".into());
        config.insert("eps_grid".into(), "1,2".into());
        let mut m = RunManifest::new("attack-sweep", config);
        m.seeds.insert("sweep".into(), "7".into());
        m.inputs.insert("data".into(), "ab".into());
        m.finished_unix = 5;
        let back = RunManifest::parse(&m.to_text(), "m").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sidecar_and_directory_locations() {
        assert_eq!(manifest_path(Path::new("r/out.csv"), false), Path::new("r/out.csv.manifest"));
        assert_eq!(manifest_path(Path::new("d"), true), Path::new("d/run.manifest"));
    }
}
