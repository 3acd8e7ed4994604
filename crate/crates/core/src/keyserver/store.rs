//! Append-only JSON-lines persistence for the key server.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiagnosisBundle, KeyServerError, Tan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub(crate) enum Event {
    Tan(Tan),
    TanUsed { token: String },
    Bundle(DiagnosisBundle),
}

impl Event {
    pub(crate) fn sort_key(&self) -> (i64, String) {
        match self {
            Event::Tan(t) => (t.issued_at, t.token.clone()),
            Event::TanUsed { token } => (i64::MAX, token.clone()),
            Event::Bundle(b) => (b.submitted_at, b.id.to_string()),
        }
    }
}

#[derive(Debug)]
pub struct StoreFile {
    path: PathBuf,
    file: File,
}

impl StoreFile {
    pub(crate) fn open(path: &Path) -> Result<(Self, Vec<Event>), KeyServerError> {
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event = serde_json::from_str(&line)
                    .map_err(|e| KeyServerError::Store(format!("{}:{}: {e}", path.display(), i + 1)))?;
                events.push(event);
            }
        } else if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub(crate) fn append(&mut self, event: &Event) -> Result<(), KeyServerError> {
        let mut line = serde_json::to_vec(event).map_err(|e| KeyServerError::Store(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }

    /// Rewrites the file with exactly `events`, atomically via rename.
    pub(crate) fn compact(&mut self, events: &[Event]) -> Result<(), KeyServerError> {
        let tmp = self.path.with_extension("compact");
        {
            let mut out = File::create(&tmp)?;
            for e in events {
                serde_json::to_writer(&mut out, e).map_err(|e| KeyServerError::Store(e.to_string()))?;
                out.write_all(b"\n")?;
            }
            out.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::KeyServer;
    use crate::crypto::{IntervalNumber, KeyMaterial, TemporaryExposureKey};
    use ed25519_dalek::SigningKey;

    #[test]
    fn state_survives_restart_and_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let now = 1_594_080_000 + 3600;
        let day = 1_594_080_000 / 600;
        let key = || SigningKey::from_bytes(&[3; 32]);
        let old = TemporaryExposureKey::new(KeyMaterial([1; 16]), IntervalNumber(day - 14 * 144), 2).unwrap();
        let fresh = TemporaryExposureKey::new(KeyMaterial([2; 16]), IntervalNumber(day - 144), 2).unwrap();
        let spare;
        {
            let mut s = KeyServer::open(key(), "admin", &path).unwrap();
            let tan = s.issue_tan("admin", now).unwrap().token;
            spare = s.issue_tan("admin", now).unwrap().token;
            s.upload(vec![old, fresh], &tan, now).unwrap();
        }
        let mut s = KeyServer::open(key(), "admin", &path).unwrap();
        assert_eq!(s.bundle_count(), 1);
        assert_eq!(s.purge(now + 86400).unwrap(), 1);
        drop(s);
        let mut s = KeyServer::open(key(), "admin", &path).unwrap();
        let body = s.download(0, now).verify(&s.verifying_key()).unwrap();
        assert_eq!(body.teks(), vec![fresh]);
        // the used TAN stays used, the spare one still works after compaction
        s.upload(vec![fresh], &spare, now + 86400).unwrap();
        assert_eq!(s.bundle_count(), 2);
    }
}
