//! Crash-injection trials for the checkpoint store.
//!
//! A trial writes a few complete versions, then cuts the next one short at a
//! random byte offset and checks that readers still see the newest complete
//! version, bit for bit. It finally rewrites the crashed version in full and
//! checks that it becomes the newest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::store::{write_cost, FsStore, StoreError, StoreFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashOutcome {
    pub trial: u64,
    /// Complete versions written before the crash.
    pub prior_versions: u64,
    pub crash_offset: u64,
    pub write_cost: u64,
    /// Version readers should see after the crash.
    pub expected: Option<u64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashSummary {
    pub trials: u64,
    pub failures: Vec<CrashOutcome>,
}

impl CrashSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn random_files(rng: &mut ChaCha8Rng) -> Vec<StoreFile> {
    let count = rng.gen_range(1..=6);
    (0..count)
        .map(|i| {
            let len = rng.gen_range(0..=512);
            StoreFile {
                rank: rng.gen_range(0..4),
                key: format!("ew.L{}.E{}", rng.gen_range(0..3), i),
                data: (0..len).map(|_| rng.gen()).collect(),
            }
        })
        .collect()
}

fn as_map(files: &[StoreFile]) -> BTreeMap<String, Vec<u8>> {
    files.iter().map(|f| (f.key.clone(), f.data.clone())).collect()
}

fn check(store: &FsStore, expected: Option<(u64, &[StoreFile])>) -> Result<(), String> {
    let latest = store.latest_complete().map_err(|e| e.to_string())?;
    match expected {
        None if latest.is_none() => Ok(()),
        None => Err(format!("expected no complete version, found {latest:?}")),
        Some((v, files)) => {
            if latest != Some(v) {
                return Err(format!("expected version {v}, found {latest:?}"));
            }
            let loaded = store.load_checkpoint(v).map_err(|e| e.to_string())?;
            if loaded != as_map(files) {
                return Err(format!("version {v} does not match what was written"));
            }
            Ok(())
        }
    }
}

/// One trial in a fresh directory under `root`; `crash_offset` is drawn
/// from `0..=write_cost` unless given.
pub fn crash_trial(
    root: &Path,
    seed: u64,
    trial: u64,
    crash_offset: Option<u64>,
) -> Result<CrashOutcome, StoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let dir = root.join(format!("trial{trial:06}"));
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let store = FsStore::new(&dir);
    let prior = rng.gen_range(0..=2u64);
    let mut last: Option<(u64, Vec<StoreFile>)> = None;
    for v in 1..=prior {
        let files = random_files(&mut rng);
        store.write_version(v, v * 10, &files)?;
        last = Some((v, files));
    }
    let version = prior + 1;
    let files = random_files(&mut rng);
    let cost = write_cost(version, version * 10, &files);
    let offset = crash_offset.unwrap_or_else(|| rng.gen_range(0..=cost)).min(cost);
    let result = store.write_version_with_budget(version, version * 10, &files, Some(offset));
    let completed = match result {
        Ok(_) => true,
        Err(StoreError::Crashed(_)) => false,
        Err(e) => return Err(e),
    };

    let expected = if completed {
        Some((version, files.as_slice()))
    } else {
        last.as_ref().map(|(v, f)| (*v, f.as_slice()))
    };
    let mut outcome = CrashOutcome {
        trial,
        prior_versions: prior,
        crash_offset: offset,
        write_cost: cost,
        expected: expected.map(|e| e.0),
        failure: None,
    };
    if completed != (offset == cost) {
        outcome.failure = Some(format!("write completed={completed} at offset {offset} of {cost}"));
        return Ok(outcome);
    }
    if let Err(msg) = check(&store, expected) {
        outcome.failure = Some(format!("after crash: {msg}"));
        return Ok(outcome);
    }
    if !completed {
        store.write_version(version, version * 10, &files)?;
        if let Err(msg) = check(&store, Some((version, &files))) {
            outcome.failure = Some(format!("after rewrite: {msg}"));
        }
    }
    Ok(outcome)
}

/// Runs `trials` trials under `root`, removing each trial's directory once
/// it passes.
pub fn crash_trials(root: &Path, trials: u64, seed: u64) -> Result<CrashSummary, StoreError> {
    let mut failures = Vec::new();
    for trial in 0..trials {
        let outcome = crash_trial(root, seed, trial, None)?;
        if outcome.failure.is_some() {
            failures.push(outcome);
        } else {
            let _ = fs::remove_dir_all(root.join(format!("trial{trial:06}")));
        }
    }
    Ok(CrashSummary { trials, failures })
}
