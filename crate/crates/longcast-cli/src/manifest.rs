//! Run manifests: the resolved configuration, seed, dataset fingerprint
//! and command, written once per run for reproducibility.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use longcast::model::ModelConfig;
use longcast::{Error, Result};

/// SHA-256 of the dataset file contents, hex-encoded.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Manifest<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub config: Option<&'a ModelConfig>,
    pub extra: Vec<(String, String)>,
}

impl Manifest<'_> {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("command={}\n", self.command));
        out.push_str(&format!(
            "timestamp={}\n",
            chrono::Utc::now().format("%Y-%m-%d %H:%M:%S")
        ));
        out.push_str(&format!("seed={}\n", self.seed));
        if let Some(fp) = &self.dataset_fingerprint {
            out.push_str(&format!("dataset_sha256={fp}\n"));
        }
        for (k, v) in &self.extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        if let Some(config) = self.config {
            for (k, v) in config.to_key_values() {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("manifest.txt"), self.render())?;
        Ok(())
    }
}
