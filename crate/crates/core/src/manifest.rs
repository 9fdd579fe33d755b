//! Per-command manifests: input and output files with their SHA-256, plus
//! the configuration in effect.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn shown(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

impl Manifest {
    pub fn new(command: &str, config: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Record a file; paths under `base` are stored relative to it.
    pub fn input(&mut self, path: &Path, base: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: shown(path, base),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path, base: &Path) -> Result<()> {
        self.outputs.push(FileHash {
            path: shown(path, base),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "abc").unwrap();
        // FIPS 180-2 test vector
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut m = Manifest::new("ingest", "seed = 0\n");
        m.input(&p, dir.path()).unwrap();
        assert_eq!(m.inputs[0].path, "a.txt");
        let out = dir.path().join("m.json");
        m.write(&out).unwrap();
        let back: Manifest = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(m.input(&dir.path().join("missing"), dir.path()).is_err());
    }
}
