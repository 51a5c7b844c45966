//! Write-once run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fasw_core::{Error, Result};

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// How a run's checkpoints produce spoof scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Depth map and live logit of the SCE layers.
    Sce,
    /// SCE layers with the spoof region estimator inserted.
    SceSre,
    /// Binary head on the backbone.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub schema_version: u32,
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub scorer: ScorerKind,
    /// Input files hashed into the run id.
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub info: RunInfo,
}

/// `sha256(command, config snapshot, input contents)`, shortened to 16 hex
/// digits. Directories contribute the sorted list of their file contents.
pub fn run_id(command: &str, config_text: &str, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(config_text.as_bytes());
    for input in inputs {
        h.update([0]);
        hash_path(&mut h, input)?;
    }
    let digest = h.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn hash_path(h: &mut Sha256, path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            if e.is_file() {
                h.update(e.file_name().unwrap_or_default().as_encoded_bytes());
                hash_path(h, &e)?;
            }
        }
        Ok(())
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update(&bytes);
        Ok(())
    }
}

/// An existing directory is only accepted when empty.
pub fn ensure_fresh(path: &Path) -> Result<()> {
    if path.exists() {
        let empty = path.is_dir()
            && std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .next()
                .is_none();
        if !empty {
            return Err(Error::Config(format!(
                "`{}` already exists; run directories are write-once",
                path.display()
            )));
        }
    }
    Ok(())
}

impl RunDir {
    pub fn create(
        path: &Path,
        command: &str,
        config_text: &str,
        seed: u64,
        scorer: ScorerKind,
        inputs: &[PathBuf],
    ) -> Result<Self> {
        ensure_fresh(path)?;
        let info = RunInfo {
            schema_version: RUN_SCHEMA_VERSION,
            run_id: run_id(command, config_text, inputs)?,
            command: command.to_string(),
            seed,
            scorer,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let ckpt = path.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let dir = Self {
            path: path.to_path_buf(),
            info,
        };
        dir.write(CONFIG_FILE, config_text.as_bytes())?;
        dir.write(RUN_FILE, serde_json::to_string_pretty(&dir.info)?.as_bytes())?;
        Ok(dir)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = path.join(RUN_FILE);
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let info: RunInfo = serde_json::from_str(&text)?;
        if info.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "`{}` has schema version {}, expected {RUN_SCHEMA_VERSION}",
                file.display(),
                info.schema_version
            )));
        }
        Ok(Self {
            path: path.to_path_buf(),
            info,
        })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join(CHECKPOINT_DIR).join(format!("{name}.safetensors"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Refuses to overwrite anything already in the run.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.file(name);
        if path.exists() && name != RUN_FILE {
            return Err(Error::Config(format!("`{}` was already written", path.display())));
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn config_text(&self) -> Result<String> {
        let path = self.file(CONFIG_FILE);
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_every_input() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.csv");
        std::fs::write(&f, "a").unwrap();
        let a = run_id("train", "seed = 0", &[f.clone()]).unwrap();
        assert_eq!(a, run_id("train", "seed = 0", &[f.clone()]).unwrap());
        assert_eq!(a.len(), 16);
        assert_ne!(a, run_id("train", "seed = 1", &[f.clone()]).unwrap());
        assert_ne!(a, run_id("eval", "seed = 0", &[f.clone()]).unwrap());
        std::fs::write(&f, "b").unwrap();
        assert_ne!(a, run_id("train", "seed = 0", &[f]).unwrap());
    }

    #[test]
    fn run_dirs_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run");
        let run = RunDir::create(&path, "x", "seed = 3", 3, ScorerKind::Sce, &[]).unwrap();
        assert!(run.path.join(CHECKPOINT_DIR).is_dir());
        assert_eq!(RunDir::open(&path).unwrap().info, run.info);
        run.write("a.txt", b"1").unwrap();
        assert!(run.write("a.txt", b"2").is_err());
        assert!(RunDir::create(&path, "x", "seed = 3", 3, ScorerKind::Sce, &[]).is_err());
        let empty = dir.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        assert!(RunDir::create(&empty, "x", "", 0, ScorerKind::Head, &[]).is_ok());
    }
}
