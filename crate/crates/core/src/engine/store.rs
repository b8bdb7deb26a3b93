//! Versioned on-disk checkpoint store.
//!
//! ```text
//! <root>/v000003/rank0000/ew.L0.E1.bin
//! <root>/v000003/manifest.tsv
//! <root>/v000003/COMPLETE
//! ```
//!
//! Data files are written first, then `manifest.tsv`, then the empty
//! `COMPLETE` marker; manifest and marker are published by renaming a
//! temporary file. A version without a marker does not exist to readers.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::topology::Rank;

pub const MANIFEST: &str = "manifest.tsv";
pub const MARKER: &str = "COMPLETE";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("version {0} has no COMPLETE marker")]
    IncompleteVersion(u64),
    #[error("checksum mismatch for key {key}")]
    ChecksumMismatch { key: String },
    #[error("size mismatch for key {key}: manifest says {expected}, file has {actual}")]
    SizeMismatch {
        key: String,
        expected: u64,
        actual: u64,
    },
    #[error("malformed manifest for version {version}: {reason}")]
    BadManifest { version: u64, reason: String },
    #[error("version {version} is not newer than the latest complete version {latest}")]
    StaleVersion { version: u64, latest: u64 },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("invalid key {0:?}")]
    BadKey(String),
    #[error("simulated crash after {0} bytes")]
    Crashed(u64),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the version directory.
    pub path: String,
    pub size: u64,
    pub crc32c: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u64,
    pub iteration: u64,
    pub entries: BTreeMap<String, ManifestEntry>,
    pub complete_marker: bool,
}

impl StoreManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# version={} iteration={}\n", self.version, self.iteration);
        for (key, e) in &self.entries {
            out.push_str(&format!("{key}\t{}\t{}\t{:08x}\n", e.path, e.size, e.crc32c));
        }
        out
    }

    pub fn parse(version: u64, text: &str) -> Result<StoreManifest, StoreError> {
        let bad = |reason: String| StoreError::BadManifest { version, reason };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let mut iteration = None;
        let mut header_version = None;
        for field in header
            .strip_prefix("# ")
            .ok_or_else(|| bad("missing header".into()))?
            .split_whitespace()
        {
            match field.split_once('=') {
                Some(("version", v)) => header_version = v.parse::<u64>().ok(),
                Some(("iteration", v)) => iteration = v.parse::<u64>().ok(),
                _ => return Err(bad(format!("unknown header field {field:?}"))),
            }
        }
        if header_version != Some(version) {
            return Err(bad("header version does not match directory".into()));
        }
        let iteration = iteration.ok_or_else(|| bad("missing iteration".into()))?;
        let mut entries = BTreeMap::new();
        for line in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            let [key, path, size, crc] = cols[..] else {
                return Err(bad(format!("expected 4 columns: {line:?}")));
            };
            let size = size.parse().map_err(|_| bad(format!("bad size in {line:?}")))?;
            let crc32c =
                u32::from_str_radix(crc, 16).map_err(|_| bad(format!("bad checksum in {line:?}")))?;
            entries.insert(
                key.to_string(),
                ManifestEntry {
                    path: path.to_string(),
                    size,
                    crc32c,
                },
            );
        }
        Ok(StoreManifest {
            version,
            iteration,
            entries,
            complete_marker: false,
        })
    }
}

/// One file of a checkpoint version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreFile {
    pub rank: Rank,
    pub key: String,
    pub data: Vec<u8>,
}

pub fn version_dir_name(version: u64) -> String {
    format!("v{version:06}")
}

pub fn rank_dir_name(rank: Rank) -> String {
    format!("rank{rank:04}")
}

/// Byte budget shared by every write of one version; once spent, the write
/// in progress is cut short and the version is abandoned.
struct Budget(Option<u64>);

impl Budget {
    fn write(&mut self, path: &Path, data: &[u8], fsync: bool) -> Result<(), StoreError> {
        let allowed = match self.0 {
            Some(left) => (left.min(data.len() as u64)) as usize,
            None => data.len(),
        };
        let mut f = File::create(path).map_err(io_err(path))?;
        f.write_all(&data[..allowed]).map_err(io_err(path))?;
        if fsync {
            f.sync_all().map_err(io_err(path))?;
        }
        self.spend(allowed as u64)?;
        if allowed < data.len() {
            return Err(StoreError::Crashed(allowed as u64));
        }
        Ok(())
    }

    /// Renames cost one unit so a crash can land between write and publish.
    fn rename(&mut self, from: &Path, to: &Path) -> Result<(), StoreError> {
        if self.0 == Some(0) {
            return Err(StoreError::Crashed(0));
        }
        self.spend(1)?;
        fs::rename(from, to).map_err(io_err(to))
    }

    fn spend(&mut self, n: u64) -> Result<(), StoreError> {
        if let Some(left) = &mut self.0 {
            *left -= n.min(*left);
        }
        Ok(())
    }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && !key.starts_with('.')
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsStore {
    root: PathBuf,
    fsync: bool,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsStore {
            root: root.into(),
            fsync: false,
        }
    }

    /// Flush data and directory entries to the device on every publish step.
    pub fn with_fsync(mut self, fsync: bool) -> Self {
        self.fsync = fsync;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn version_dir(&self, version: u64) -> PathBuf {
        self.root.join(version_dir_name(version))
    }

    /// Version numbers present on disk, complete or not, ascending.
    pub fn versions(&self) -> Result<Vec<u64>, StoreError> {
        let rd = match fs::read_dir(&self.root) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        let mut out = Vec::new();
        for entry in rd {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(num) = name.strip_prefix('v') {
                if num.len() == 6 && num.bytes().all(|b| b.is_ascii_digit()) {
                    out.push(num.parse().expect("six digits"));
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn is_complete(&self, version: u64) -> bool {
        self.version_dir(version).join(MARKER).is_file()
    }

    /// Newest version carrying a COMPLETE marker.
    pub fn latest_complete(&self) -> Result<Option<u64>, StoreError> {
        Ok(self
            .versions()?
            .into_iter()
            .rev()
            .find(|&v| self.is_complete(v)))
    }

    /// Writes and publishes a version.
    pub fn write_version(
        &self,
        version: u64,
        iteration: u64,
        files: &[StoreFile],
    ) -> Result<StoreManifest, StoreError> {
        self.write_version_with_budget(version, iteration, files, None)
    }

    /// Like [`write_version`](Self::write_version) but stops after `budget`
    /// bytes, leaving whatever a crash at that point would leave behind.
    pub fn write_version_with_budget(
        &self,
        version: u64,
        iteration: u64,
        files: &[StoreFile],
        budget: Option<u64>,
    ) -> Result<StoreManifest, StoreError> {
        if let Some(latest) = self.latest_complete()? {
            if version <= latest {
                return Err(StoreError::StaleVersion { version, latest });
            }
        }
        let dir = self.version_dir(version);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let mut manifest = StoreManifest {
            version,
            iteration,
            entries: BTreeMap::new(),
            complete_marker: false,
        };
        for f in files {
            if !valid_key(&f.key) {
                return Err(StoreError::BadKey(f.key.clone()));
            }
            let rel = format!("{}/{}.bin", rank_dir_name(f.rank), f.key);
            let entry = ManifestEntry {
                path: rel,
                size: f.data.len() as u64,
                crc32c: crc32c::crc32c(&f.data),
            };
            if manifest.entries.insert(f.key.clone(), entry).is_some() {
                return Err(StoreError::DuplicateKey(f.key.clone()));
            }
        }

        let mut budget = Budget(budget);
        for f in files {
            let rank_dir = dir.join(rank_dir_name(f.rank));
            fs::create_dir_all(&rank_dir).map_err(io_err(&rank_dir))?;
            budget.write(&rank_dir.join(format!("{}.bin", f.key)), &f.data, self.fsync)?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        budget.write(&tmp, manifest.to_tsv().as_bytes(), self.fsync)?;
        budget.rename(&tmp, &dir.join(MANIFEST))?;
        let tmp = dir.join(format!("{MARKER}.tmp"));
        budget.write(&tmp, &[], self.fsync)?;
        budget.rename(&tmp, &dir.join(MARKER))?;
        if self.fsync {
            File::open(&dir)
                .and_then(|d| d.sync_all())
                .map_err(io_err(&dir))?;
        }
        manifest.complete_marker = true;
        Ok(manifest)
    }

    pub fn read_manifest(&self, version: u64) -> Result<StoreManifest, StoreError> {
        let dir = self.version_dir(version);
        let path = dir.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::IncompleteVersion(version))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut m = StoreManifest::parse(version, &text)?;
        m.complete_marker = self.is_complete(version);
        Ok(m)
    }

    /// Reads every entry of a complete version, verifying size and checksum.
    pub fn load_checkpoint(&self, version: u64) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
        if !self.is_complete(version) {
            return Err(StoreError::IncompleteVersion(version));
        }
        let dir = self.version_dir(version);
        let manifest = self.read_manifest(version)?;
        let mut out = BTreeMap::new();
        for (key, entry) in manifest.entries {
            let path = dir.join(&entry.path);
            let data = fs::read(&path).map_err(io_err(&path))?;
            if data.len() as u64 != entry.size {
                return Err(StoreError::SizeMismatch {
                    key,
                    expected: entry.size,
                    actual: data.len() as u64,
                });
            }
            if crc32c::crc32c(&data) != entry.crc32c {
                return Err(StoreError::ChecksumMismatch { key });
            }
            out.insert(key, data);
        }
        Ok(out)
    }
}

/// Newest complete version under `root`.
pub fn latest_complete(root: &Path) -> Result<Option<u64>, StoreError> {
    FsStore::new(root).latest_complete()
}

pub fn load_checkpoint(root: &Path, version: u64) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
    FsStore::new(root).load_checkpoint(version)
}

/// Total bytes [`FsStore::write_version_with_budget`] spends on a version
/// that completes, so crash points can be drawn from `0..=total`.
pub fn write_cost(version: u64, iteration: u64, files: &[StoreFile]) -> u64 {
    let mut manifest = StoreManifest {
        version,
        iteration,
        entries: BTreeMap::new(),
        complete_marker: false,
    };
    for f in files {
        manifest.entries.insert(
            f.key.clone(),
            ManifestEntry {
                path: format!("{}/{}.bin", rank_dir_name(f.rank), f.key),
                size: f.data.len() as u64,
                crc32c: crc32c::crc32c(&f.data),
            },
        );
    }
    let data: u64 = files.iter().map(|f| f.data.len() as u64).sum();
    data + manifest.to_tsv().len() as u64 + 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files(tag: u8) -> Vec<StoreFile> {
        vec![
            StoreFile {
                rank: 0,
                key: "new.attn".into(),
                data: vec![tag; 100],
            },
            StoreFile {
                rank: 1,
                key: "ew.L0.E1.part1".into(),
                data: (0..50).map(|i| i ^ tag).collect(),
            },
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        let m = store.write_version(1, 10, &files(7)).unwrap();
        assert!(m.complete_marker);
        assert!(dir.path().join("v000001/rank0001/ew.L0.E1.part1.bin").is_file());
        let loaded = store.load_checkpoint(1).unwrap();
        assert_eq!(loaded["new.attn"], vec![7; 100]);
        assert_eq!(store.read_manifest(1).unwrap().entries, m.entries);
        assert_eq!(store.read_manifest(1).unwrap().iteration, 10);
    }

    #[test]
    fn manifest_format() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        store.write_version(3, 30, &files(1)).unwrap();
        let text = fs::read_to_string(dir.path().join("v000003/manifest.tsv")).unwrap();
        let row = text.lines().find(|l| l.starts_with("new.attn")).unwrap();
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[1], "rank0000/new.attn.bin");
        assert_eq!(cols[2], "100");
        assert_eq!(cols[3], format!("{:08x}", crc32c::crc32c(&[1; 100])));
        assert_eq!(
            fs::metadata(dir.path().join("v000003/COMPLETE")).unwrap().len(),
            0
        );
    }

    #[test]
    fn flipped_byte_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        store.write_version(1, 1, &files(3)).unwrap();
        let p = dir.path().join("v000001/rank0000/new.attn.bin");
        let mut data = fs::read(&p).unwrap();
        data[17] ^= 0x40;
        fs::write(&p, data).unwrap();
        match store.load_checkpoint(1) {
            Err(StoreError::ChecksumMismatch { key }) => assert_eq!(key, "new.attn"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crash_leaves_previous_version() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        store.write_version(1, 1, &files(1)).unwrap();
        let cost = write_cost(2, 2, &files(2));
        for budget in [0, 60, 149, 150, cost - 2, cost - 1] {
            assert!(matches!(
                store.write_version_with_budget(2, 2, &files(2), Some(budget)),
                Err(StoreError::Crashed(_))
            ));
            assert_eq!(store.latest_complete().unwrap(), Some(1));
            assert!(matches!(
                store.load_checkpoint(2),
                Err(StoreError::IncompleteVersion(2))
            ));
        }
        store
            .write_version_with_budget(2, 2, &files(2), Some(cost))
            .unwrap();
        assert_eq!(store.latest_complete().unwrap(), Some(2));
        assert_eq!(store.load_checkpoint(2).unwrap()["new.attn"], vec![2; 100]);
    }

    #[test]
    fn versions_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        store.write_version(4, 1, &files(1)).unwrap();
        assert!(matches!(
            store.write_version(4, 2, &files(1)),
            Err(StoreError::StaleVersion { .. })
        ));
    }

    #[test]
    fn rejects_path_like_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        let bad = vec![StoreFile {
            rank: 0,
            key: "../x".into(),
            data: vec![],
        }];
        assert!(matches!(store.write_version(1, 1, &bad), Err(StoreError::BadKey(_))));
    }
}
