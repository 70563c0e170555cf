//! Append-only JSON-lines log of prompt exchanges, indexed by cache key.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One request/reply round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExchange {
    pub key: String,
    pub nonce: String,
    pub model: String,
    pub temperature: f64,
    pub system: String,
    pub user: String,
    pub raw_reply: String,
    /// Present iff the reply parsed.
    pub parsed: Option<i64>,
    #[serde(default)]
    pub loose_parse: bool,
    #[serde(default)]
    pub attempt: u32,
    pub timestamp: String,
}

/// Cache key: SHA-256 over the JSON array `[model, temperature, system, user, nonce]`.
pub fn cache_key(model: &str, temperature: f64, system: &str, user: &str, nonce: &str) -> String {
    let material = serde_json::to_string(&(model, temperature, system, user, nonce))
        .expect("tuple of strings and a float serializes");
    hex::encode(Sha256::digest(material.as_bytes()))
}

#[derive(Debug)]
pub struct ExchangeCache {
    path: PathBuf,
    index: Mutex<HashMap<String, PromptExchange>>,
    log: Option<Mutex<File>>,
}

impl ExchangeCache {
    /// Opens (creating if needed) a writable cache log.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let index = if path.exists() { load(path)? } else { HashMap::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), index: Mutex::new(index), log: Some(Mutex::new(file)) })
    }

    /// Opens an existing log without write access.
    pub fn open_read_only(path: &Path) -> std::io::Result<Self> {
        let index = load(path)?;
        Ok(Self { path: path.to_path_buf(), index: Mutex::new(index), log: None })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Last successfully parsed exchange stored under `key`.
    pub fn lookup(&self, key: &str) -> Option<PromptExchange> {
        self.index.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends to the log; parsed exchanges also enter the index.
    pub fn append(&self, exchange: &PromptExchange) -> std::io::Result<()> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(exchange).map_err(std::io::Error::other)?;
            line.push('\n');
            let mut file = log.lock().expect("cache log lock");
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        if exchange.parsed.is_some() {
            self.index
                .lock()
                .expect("cache lock")
                .insert(exchange.key.clone(), exchange.clone());
        }
        Ok(())
    }
}

fn load(path: &Path) -> std::io::Result<HashMap<String, PromptExchange>> {
    let mut index = HashMap::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: PromptExchange = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        if ex.parsed.is_some() {
            index.insert(ex.key.clone(), ex);
        }
    }
    Ok(index)
}
