use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::backend::{Request, Response};
use crate::canonical;
use crate::error::{Error, Result};

/// On-disk memo of backend responses, one file per (stage, backend,
/// request) key. Writes go through a temporary file and a rename, so a
/// killed run never leaves a torn entry.
pub struct StageCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl StageCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(StageCache {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn key(stage: &str, backend_id: &str, request: &Request) -> String {
        canonical::sha256_hex(
            format!("{stage}\n{backend_id}\n{}", request.content_hash()).as_bytes(),
        )
    }

    fn entry_path(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(format!("{key}.json"))
    }

    /// Raw cached body, if present.
    pub fn get_bytes(&self, stage: &str, key: &str) -> Result<Option<Vec<u8>>> {
        let path = self.entry_path(stage, key);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Cached response for `request`, parsed and validated. Unreadable
    /// entries are treated as misses.
    pub fn get(&self, stage: &str, key: &str, request: &Request) -> Result<Option<Response>> {
        let Some(bytes) = self.get_bytes(stage, key)? else {
            return Ok(None);
        };
        let parsed = std::str::from_utf8(&bytes)
            .ok()
            .and_then(|text| Response::parse(request.role(), text).ok())
            .filter(|r| r.check_answers(request).is_ok());
        if parsed.is_none() {
            tracing::warn!(stage, key, "discarding unreadable cache entry");
        }
        Ok(parsed)
    }

    pub fn put(&self, stage: &str, key: &str, response: &Response) -> Result<()> {
        write_atomic(&self.entry_path(stage, key), response.body().as_bytes())
    }

    pub(crate) fn record_hit(&self) {
        self.hits.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_miss(&self) {
        self.misses.fetch_add(1, Ordering::Relaxed);
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!(
        "tmp{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
