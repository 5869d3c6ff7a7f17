//! Artifact writers. CSV files start with a `# config_hash=<hex>` line, JSON
//! reports carry a `config_hash` field.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn config_hash(text: &[u8]) -> String {
    let digest = Sha256::digest(text);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    written: Vec<String>,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_hash: &'a str,
    command: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

impl RunDir {
    pub fn create(dir: PathBuf, hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { dir, hash, written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
        log::info!("wrote {}", self.dir.join(name).display());
    }

    /// Registers a file produced elsewhere (the binary checkpoint).
    pub fn note(&mut self, name: &str) {
        self.record(name);
    }

    pub fn csv<R, I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let path = self.path(name);
        let mut buf = format!("# config_hash={}\n", self.hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for row in rows {
                w.write_record(row)?;
            }
            w.flush().map_err(|e| CliError::io(&path, e))?;
        }
        fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, command: &str, body: &T) -> Result<(), CliError> {
        let path = self.path(name);
        let tagged = Tagged { config_hash: &self.hash, command, body };
        let mut text = serde_json::to_string_pretty(&tagged)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    /// Lists every artifact of the run next to the config hash; the binary
    /// checkpoint has no text header of its own.
    pub fn finish(self, command: &str) -> Result<(), CliError> {
        let path = self.path("manifest.json");
        let body = serde_json::json!({
            "config_hash": self.hash,
            "command": command,
            "artifacts": self.written,
        });
        let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&body)?).map_err(|e| CliError::io(&path, e))?;
        Ok(())
    }
}

/// Round-trip float formatting for CSV cells.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn read_config(path: &Path) -> Result<(adjflow::config::RunConfig, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Core(adjflow::Error::Config(format!("{}: not UTF-8", path.display()))))?;
    Ok((adjflow::config::RunConfig::from_toml_str(&text)?, bytes))
}
