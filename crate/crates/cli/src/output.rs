//! Run directories and the files written into them.

use std::fs;
use std::path::{Path, PathBuf};

use priorprobe_core::ChainRecord;

use crate::error::CliError;

/// A freshly created run directory. All files of a run are written through
/// one `RunDir`.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<hash12>-<UTC timestamp>`, adding a numeric suffix
    /// instead of reusing a directory that already exists.
    pub fn create(root: &Path, config_hash: &str) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{}-{stamp}", &config_hash[..12]);
        for attempt in 0u32.. {
            let name = if attempt == 0 { base.clone() } else { format!("{base}-{attempt}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!("u32 suffixes exhausted")
    }

    /// Wraps an existing run directory for adding files.
    pub fn existing(path: &Path) -> Result<Self, CliError> {
        if !path.is_dir() {
            return Err(CliError::io(path, "not a run directory"));
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("output values serialize");
        text.push('\n');
        self.write(name, text)
    }

    /// One file per chain under `chains/`, named by init and chain index.
    pub fn write_records(&self, records: &[ChainRecord], chains_per_init: u64) -> Result<(), CliError> {
        for (i, rec) in records.iter().enumerate() {
            let name = format!(
                "chains/init-{:04}-chain-{:05}.csv",
                rec.initial_observation,
                i as u64 % chains_per_init.max(1)
            );
            self.write(&name, rec.to_bytes())?;
        }
        Ok(())
    }
}

/// Reads every chain record of a run directory in file-name order.
pub fn read_records(run: &Path) -> Result<Vec<ChainRecord>, CliError> {
    let dir = run.join("chains");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let file = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
            ChainRecord::read_from(std::io::BufReader::new(file))
                .map_err(|e| CliError::new(crate::error::ErrorKind::Parse, format!("{}: {e}", p.display())))
        })
        .collect()
}
