//! Atomic artifact writes, the run manifest and number formatting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.toml";

/// Shortest decimal that round-trips through 9 significant digits.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Failure {
    pub config_id: String,
    pub error: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Every cell finished without a divergence flag.
    Ok,
    /// Some cells diverged or failed.
    Partial,
    /// No cell produced results.
    Failed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Partial => 2,
            Status::Failed => 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub plan_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub status: Status,
    pub diverged: Vec<String>,
    #[serde(default)]
    pub failures: Vec<Failure>,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Output directory that records what it writes.
pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
    started: u64,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
            started: now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn finish(mut self, command: &str, seed: u64, plan_source: &str, diverged: Vec<String>, failures: Vec<Failure>, status: Status) -> Result<Manifest> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: command.into(),
            seed,
            plan_sha256: sha256_hex(plan_source.as_bytes()),
            started_unix: self.started,
            finished_unix: now(),
            status,
            diverged,
            failures,
            artifacts: self.artifacts,
        };
        write_atomic(&self.root.join(MANIFEST), toml::to_string(&manifest)?.as_bytes())?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_nine_digits() {
        assert_eq!(fmt_num(0.762), "0.762");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_num(0.1f32 as f64), "0.100000001");
        assert_eq!(fmt_num(f64::NAN), "NaN");
        assert_eq!(fmt_num(-0.0), "-0");
        for v in [1.2345678e-7f32, 3.4e38, 0.017, -5.5] {
            assert_eq!(fmt_num(v as f64).parse::<f32>().unwrap(), v);
        }
    }

    #[test]
    fn manifest_lists_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(dir.path()).unwrap();
        out.write("a/b.csv", b"x\n").unwrap();
        let m = out.finish("sweep", 1, "seed = 1", vec![], vec![], Status::Ok).unwrap();
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"x\n"));
        let back: Manifest = toml::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(std::fs::read(dir.path().join("a/b.csv")).unwrap(), b"x\n");
    }
}
