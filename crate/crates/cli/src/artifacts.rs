//! Output files. JSON documents carry the config digest inline; line files
//! and models get a `<file>.meta.json` sidecar; text tables start with a
//! digest comment. Nothing written here contains a timestamp.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub struct Artifacts {
    root: PathBuf,
    digest: String,
    command: &'static str,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config_digest: &'a str,
    command: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Provenance for a file whose format has no room for it.
#[derive(Debug, Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct Meta {
    pub config_digest: String,
    pub command: String,
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(format!("writing {}", path.display()), e)
}

impl Artifacts {
    pub fn new(root: PathBuf, digest: &str, command: &'static str) -> Self {
        Artifacts { root, digest: digest.to_string(), command }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates the parent directory of `rel` and returns the full path.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf, CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(path)
    }

    /// Pretty JSON object with `config_digest` and `command` fields added.
    pub fn write_json<T: Serialize>(&self, rel: &str, body: &T) -> Result<PathBuf, CliError> {
        let path = self.prepare(rel)?;
        let env = Envelope { config_digest: &self.digest, command: self.command, body };
        let mut bytes = serde_json::to_vec_pretty(&env).map_err(|e| CliError::io(rel.to_string(), e.into()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.prepare(rel)?;
        let body = format!("# config digest {}\n{text}", self.digest);
        write_atomic(&path, body.as_bytes())?;
        Ok(path)
    }

    /// Runs `write` against a temporary path, moves the result into place
    /// and records a sidecar.
    pub fn write_with<F, E>(&self, rel: &str, write: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&Path) -> Result<(), E>,
        E: Into<CliError>,
    {
        let path = self.prepare(rel)?;
        let tmp = tmp_path(&path);
        write(&tmp).map_err(Into::into)?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.write_meta(&path)?;
        Ok(path)
    }

    fn write_meta(&self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let meta = Meta {
            config_digest: self.digest.clone(),
            command: self.command.to_string(),
            file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        };
        let mut out = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        out.push(b'\n');
        write_atomic(&meta_path(path), &out)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
