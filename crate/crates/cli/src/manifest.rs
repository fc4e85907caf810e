//! Run manifests: one JSON record per invocation listing every artifact it
//! wrote, with content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use backchain::digest::{sha256_file, sha256_hex};
use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved configuration (defaults, then file, then flags).
    pub config: serde_json::Value,
    pub config_digest: String,
    pub dataset_digest: Option<String>,
    pub checkpoint_digest: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<Artifact>,
}

/// Collects artifacts written under one output directory and emits the
/// manifest for them.
#[derive(Debug)]
pub struct RunRecorder {
    dir: PathBuf,
    manifest_name: String,
    manifest: RunManifest,
}

/// SHA-256 of the compact JSON form. serde_json keeps struct field order and
/// sorts map keys, so equal configs hash equally.
pub fn json_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

impl RunRecorder {
    pub fn new<C: Serialize>(dir: &Path, command: &str, config: &C, threads: usize) -> Result<Self> {
        Self::with_manifest_name(dir, MANIFEST_FILE, command, config, threads)
    }

    pub fn with_manifest_name<C: Serialize>(
        dir: &Path,
        manifest_name: &str,
        command: &str,
        config: &C,
        threads: usize,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let config = serde_json::to_value(config)?;
        Ok(RunRecorder {
            dir: dir.to_path_buf(),
            manifest_name: manifest_name.to_string(),
            manifest: RunManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                command: command.to_string(),
                argv: std::env::args().collect(),
                config_digest: json_digest(&config)?,
                config,
                dataset_digest: None,
                checkpoint_digest: None,
                seeds: BTreeMap::new(),
                threads,
                started_at: now(),
                finished_at: String::new(),
                artifacts: Vec::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    pub fn dataset_digest(&mut self, digest: String) {
        self.manifest.dataset_digest = Some(digest);
    }

    pub fn checkpoint_digest(&mut self, digest: String) {
        self.manifest.checkpoint_digest = Some(digest);
    }

    /// Registers a file already written under the output directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let sha256 = sha256_file(&path).with_context(|| format!("hashing {}", path.display()))?;
        let bytes = std::fs::metadata(&path)?.len();
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(Artifact { path: name.to_string(), sha256, bytes });
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Writes the manifest and returns it.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_at = now();
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        std::fs::write(self.dir.join(&self.manifest_name), bytes)?;
        Ok(self.manifest)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    /// Structural checks plus a re-hash of every listed artifact in `dir`.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            bail!("unsupported manifest schema {}", self.schema_version);
        }
        let is_hash = |s: &str| s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit());
        let digests = [Some(&self.config_digest), self.dataset_digest.as_ref(), self.checkpoint_digest.as_ref()];
        if let Some(bad) = digests.into_iter().flatten().find(|d| !is_hash(d)) {
            bail!("malformed digest {bad:?}");
        }
        if json_digest(&self.config)? != self.config_digest {
            bail!("config digest does not match the recorded config");
        }
        for window in self.artifacts.windows(2) {
            if window[0].path >= window[1].path {
                bail!("artifact list is not sorted and unique at {:?}", window[1].path);
            }
        }
        for a in &self.artifacts {
            if Path::new(&a.path).is_absolute() || a.path.contains("..") {
                bail!("artifact {:?} escapes the output directory", a.path);
            }
            let actual = sha256_file(&dir.join(&a.path)).with_context(|| format!("hashing {}", a.path))?;
            if actual != a.sha256 {
                bail!("artifact {} changed since the run (digest mismatch)", a.path);
            }
        }
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == name)
    }
}
