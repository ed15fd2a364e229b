//! Run manifest: what was run, on which config, and a hash of every file
//! written. Contains nothing time- or host-dependent so reruns compare equal.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::Failure;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Manifest {
    lines: Vec<String>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config_name: &str, config_toml: &str, seed: u64) -> Self {
        Manifest {
            lines: vec![
                format!("tool: apdsim {}", env!("CARGO_PKG_VERSION")),
                format!("command: {command}"),
                format!("config: {config_name}"),
                format!("config_sha256: {}", sha256_hex(config_toml.as_bytes())),
                format!("seed: {seed}"),
            ],
            outputs: Vec::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("param.{key}: {value}"));
    }

    /// Writes `contents` to `path` and records it.
    pub fn write(&mut self, path: &Path, contents: &str) -> Result<(), Failure> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Manifest path for a primary output: `<out>.manifest`.
    pub fn path_for(primary: &Path) -> PathBuf {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }

    pub fn finish(self, primary: &Path) -> Result<(), Failure> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        for p in &self.outputs {
            let bytes =
                fs::read(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            let name = p.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
            text.push_str(&format!("output: {} sha256:{}\n", name, sha256_hex(&bytes)));
        }
        let path = Self::path_for(primary);
        fs::write(&path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }
}
