//! Run manifests: config snapshot, seed and SHA-256 digests of every file a
//! command read or wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scone::io::write_atomic;
use scone::SconeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> scone::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| SconeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn digests(paths: &[PathBuf]) -> scone::Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            tool: "scone".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.into(), value.to_string());
        self
    }

    /// Digests `inputs` and `outputs` as they are now and writes the manifest.
    pub fn write(mut self, path: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> scone::Result<()> {
        self.inputs = digests(inputs)?;
        self.outputs = digests(outputs)?;
        let text = serde_json::to_string_pretty(&self).map_err(|e| SconeError::Format(e.to_string()))?;
        write_atomic(path, format!("{text}\n").as_bytes())
    }
}

/// Manifest written next to a primary output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// When `input` was produced by an earlier command, checks it against the
/// digest that command recorded.
pub fn verify_input(input: &Path) -> scone::Result<()> {
    let dir = input.parent().unwrap_or(Path::new("."));
    let name = input.file_name().unwrap_or_default().to_string_lossy().to_string();
    for candidate in [manifest_path(input), dir.join("manifest.json")] {
        let Ok(text) = std::fs::read_to_string(&candidate) else {
            continue;
        };
        let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) else {
            continue;
        };
        let recorded = manifest
            .outputs
            .iter()
            .find(|d| Path::new(&d.path).file_name().is_some_and(|f| f.to_string_lossy() == name));
        if let Some(d) = recorded {
            let actual = sha256_file(input)?;
            if actual != d.sha256 {
                return Err(SconeError::Contract(format!(
                    "{} does not match the digest recorded in {}",
                    input.display(),
                    candidate.display()
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("embedding.tsv");
        std::fs::write(&out, "id\tz0\na\t1.0\n").unwrap();
        RunManifest::new("embed", Some(3))
            .write(&manifest_path(&out), &[], &[out.clone()])
            .unwrap();
        verify_input(&out).unwrap();
        std::fs::write(&out, "id\tz0\na\t2.0\n").unwrap();
        assert!(matches!(verify_input(&out), Err(SconeError::Contract(_))));
    }
}
