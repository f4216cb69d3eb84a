//! Run manifests: enough provenance (config hash, input hashes, seed,
//! versions, artifact checksums) to re-run a command and verify that it
//! reproduces its outputs bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name -> content hash.
    pub artifacts: BTreeMap<String, String>,
}

/// Write every artifact into `out_dir` and a `manifest.json` beside them.
pub fn emit(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config_bytes: &[u8],
    inputs: &[(&Path, &[u8])],
    artifacts: &[(String, Vec<u8>)],
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {out_dir:?}"))?;
    let mut manifest = Manifest {
        command: command.to_string(),
        seed,
        config_sha256: sha256_hex(config_bytes),
        versions: BTreeMap::from([
            ("polyomic".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            (
                "checkpoint-format".to_string(),
                "polyomic-checkpoint v1".to_string(),
            ),
        ]),
        inputs: BTreeMap::new(),
        artifacts: BTreeMap::new(),
    };
    for (path, bytes) in inputs {
        manifest
            .inputs
            .insert(path.display().to_string(), sha256_hex(bytes));
    }
    for (name, bytes) in artifacts {
        let target = out_dir.join(name);
        std::fs::write(&target, bytes).with_context(|| format!("cannot write {target:?}"))?;
        manifest.artifacts.insert(name.clone(), sha256_hex(bytes));
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json)
        .with_context(|| format!("cannot write manifest in {out_dir:?}"))?;
    Ok(())
}
