use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, BackendResponse, UsageSource};

/// One line of a transcript file. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub key: String,
    pub model: String,
    pub prompt: String,
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub usage_source: UsageSource,
    pub temperature: f64,
    pub sample_index: usize,
}

impl TranscriptEntry {
    pub fn new(request: &BackendRequest, response: &BackendResponse) -> Self {
        Self {
            key: request.key(),
            model: request.model.clone(),
            prompt: request.prompt.clone(),
            text: response.text.clone(),
            input_tokens: response.input_tokens,
            output_tokens: response.output_tokens,
            usage_source: response.usage_source,
            temperature: request.temperature,
            sample_index: request.sample_index,
        }
    }

    pub fn response(&self) -> BackendResponse {
        BackendResponse {
            text: self.text.clone(),
            input_tokens: self.input_tokens,
            output_tokens: self.output_tokens,
            usage_source: self.usage_source,
            latency_ms: 0,
        }
    }

    fn same_payload(&self, other: &Self) -> bool {
        self == other
    }
}

struct Inner {
    entries: HashMap<String, TranscriptEntry>,
    file: Option<File>,
}

/// Append-only line-delimited transcript cache keyed by request digest.
///
/// Writes are serialized behind a mutex. Reopening a file reloads every
/// entry; [`TranscriptStore::compact`] rewrites it sorted by key.
pub struct TranscriptStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Storage(format!("{}: {e}", path.display()))
}

impl TranscriptStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Opens (creating if needed) a transcript file for appending.
    ///
    /// A final line cut short by an interrupted write is dropped and
    /// truncated away so later appends start on a fresh line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let entries = if path.exists() {
            let (entries, valid_len) = Self::read_entries(path)?;
            let file_len = fs::metadata(path).map_err(|e| io_err(path, e))?.len();
            if valid_len < file_len {
                log::warn!(
                    "{}: dropping {} bytes of incomplete trailing entry",
                    path.display(),
                    file_len - valid_len
                );
                OpenOptions::new()
                    .write(true)
                    .open(path)
                    .and_then(|f| f.set_len(valid_len))
                    .map_err(|e| io_err(path, e))?;
            }
            entries
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: Some(path.to_owned()),
            inner: Mutex::new(Inner {
                entries,
                file: Some(file),
            }),
        })
    }

    /// Loads a transcript file without opening it for writing. Puts are kept
    /// in memory only.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        Ok(Self {
            path: None,
            inner: Mutex::new(Inner {
                entries: Self::read_entries(path)?.0,
                file: None,
            }),
        })
    }

    /// Parses every complete line. Returns the entries and the byte length
    /// of the file up to the end of the last complete line.
    fn read_entries(path: &Path) -> Result<(HashMap<String, TranscriptEntry>, u64), BackendError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut entries: HashMap<String, TranscriptEntry> = HashMap::new();
        let mut valid_len = 0u64;
        let mut rest = text.as_str();
        let mut idx = 0;
        while !rest.is_empty() {
            idx += 1;
            let (line, complete) = match rest.find('\n') {
                Some(i) => (&rest[..i], true),
                None => (rest, false),
            };
            rest = if complete {
                &rest[line.len() + 1..]
            } else {
                ""
            };
            if !complete {
                // no newline yet: the write never finished
                if serde_json::from_str::<TranscriptEntry>(line).is_err() {
                    break;
                }
            }
            if !line.trim().is_empty() {
                let entry: TranscriptEntry = serde_json::from_str(line)
                    .map_err(|e| io_err(path, format!("line {idx}: {e}")))?;
                match entries.get(&entry.key) {
                    Some(prev) if !prev.same_payload(&entry) => {
                        return Err(BackendError::Collision { key: entry.key })
                    }
                    Some(_) => {}
                    None => {
                        entries.insert(entry.key.clone(), entry);
                    }
                }
            }
            valid_len += line.len() as u64 + u64::from(complete);
        }
        Ok((entries, valid_len))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<BackendResponse> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .get(key)
            .map(TranscriptEntry::response)
    }

    /// Records a response. Re-putting an identical payload is a no-op; a
    /// different payload under an existing key is a collision.
    pub fn put(
        &self,
        request: &BackendRequest,
        response: &BackendResponse,
    ) -> Result<(), BackendError> {
        self.put_entry(TranscriptEntry::new(request, response))
    }

    pub fn put_entry(&self, entry: TranscriptEntry) -> Result<(), BackendError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(prev) = inner.entries.get(&entry.key) {
            return if prev.same_payload(&entry) {
                Ok(())
            } else {
                Err(BackendError::Collision { key: entry.key })
            };
        }
        if let Some(file) = inner.file.as_mut() {
            let line = serde_json::to_string(&entry).expect("transcript entry serializes");
            let path = self.path.as_deref().unwrap_or(Path::new("<transcripts>"));
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| io_err(path, e))?;
        }
        inner.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    /// All entries sorted by key.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        let inner = self.inner.lock().unwrap();
        let sorted: BTreeMap<&String, &TranscriptEntry> = inner.entries.iter().collect();
        sorted.into_values().cloned().collect()
    }

    /// Rewrites the backing file in key order so its bytes depend only on its
    /// contents, not on the order requests completed in.
    pub fn compact(&self) -> Result<(), BackendError> {
        let Some(path) = self.path.as_deref() else {
            return Ok(());
        };
        let mut inner = self.inner.lock().unwrap();
        let sorted: BTreeMap<&String, &TranscriptEntry> = inner.entries.iter().collect();
        let mut buf = String::new();
        for e in sorted.values() {
            buf.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            buf.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, buf).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
        inner.file = Some(
            OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| io_err(path, e))?,
        );
        Ok(())
    }

    /// Writes all entries, sorted by key, to `path`.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<(), BackendError> {
        let path = path.as_ref();
        let mut buf = String::new();
        for e in self.entries() {
            buf.push_str(&serde_json::to_string(&e).expect("transcript entry serializes"));
            buf.push('\n');
        }
        fs::write(path, buf).map_err(|e| io_err(path, e))
    }
}
