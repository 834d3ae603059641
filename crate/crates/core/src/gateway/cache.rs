use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache log {path} line {line} is corrupt: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("cached value for {key} has the wrong shape: {source}")]
    Shape {
        key: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    value: serde_json::Value,
}

/// Request-hash keyed response cache, optionally persisted as an
/// append-only JSONL log. Later entries for a key win on reload.
pub struct ResponseCache {
    entries: RwLock<HashMap<String, serde_json::Value>>,
    log: Option<(PathBuf, Mutex<File>)>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self { entries: RwLock::new(HashMap::new()), log: None }
    }

    /// Opens (creating if needed) the log at `path` and replays it. A torn
    /// final line from an interrupted append is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| CacheError::Io { path: path.clone(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path).map_err(io_err)?)
                .lines()
                .collect::<Result<_, _>>()
                .map_err(io_err)?;
            let last = lines.len();
            for (idx, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(line) {
                    Ok(entry) => {
                        entries.insert(entry.key, entry.value);
                    }
                    Err(_) if idx + 1 == last => {
                        log::warn!("ignoring torn final line in cache log {}", path.display());
                    }
                    Err(source) => return Err(CacheError::Corrupt { path, line: idx + 1, source }),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err)?;
        Ok(Self { entries: RwLock::new(entries), log: Some((path, Mutex::new(file))) })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CacheError> {
        let entries = self.entries.read().expect("cache lock");
        entries
            .get(key)
            .map(|v| T::deserialize(v).map_err(|source| CacheError::Shape { key: key.to_owned(), source }))
            .transpose()
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<(), CacheError> {
        let value = serde_json::to_value(value).expect("cacheable values serialize");
        if let Some((path, file)) = &self.log {
            let mut line = serde_json::to_string(&Entry { key: key.to_owned(), value: value.clone() })
                .expect("cache entries serialize");
            line.push('\n');
            let mut file = file.lock().expect("cache log lock");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| CacheError::Io { path: path.clone(), source })?;
        }
        self.entries.write().expect("cache lock").insert(key.to_owned(), value);
        Ok(())
    }
}
