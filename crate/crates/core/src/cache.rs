//! Content-addressed cache of static-pathway results.
//!
//! Entries are keyed by block index and validated against a fingerprint of
//! everything the static pathway reads: the embedded mask and text
//! conditions, the block variant and the weights. A changed condition
//! produces a new fingerprint and the stale entry is recomputed in place.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use crate::attention::StaticKv;
use crate::block::Variant;
use crate::error::{Error, Result};
use crate::linalg::{load_tsw, save_tsw, Matrix, Real};
use crate::tokens::TokenSequence;

/// 128-bit digest of a static-pathway input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionFingerprint(pub u128);

impl ConditionFingerprint {
    pub fn new<T: Real>(
        mask: &TokenSequence<T>,
        text: &TokenSequence<T>,
        variant: Variant,
        weight_version: u128,
    ) -> Self {
        let mut h = FingerprintBuilder::default();
        h.sequence(mask);
        h.sequence(text);
        h.bytes(variant.code().as_bytes());
        h.bytes(&weight_version.to_le_bytes());
        h.finish()
    }

    pub fn hex(&self) -> String {
        format!("{:032x}", self.0)
    }
}

/// Incremental SHA-256 truncated to 128 bits.
#[derive(Default)]
pub struct FingerprintBuilder {
    hasher: Sha256,
}

impl FingerprintBuilder {
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.hasher.update((b.len() as u64).to_le_bytes());
        self.hasher.update(b);
        self
    }

    pub fn matrix<T: Real>(&mut self, m: &Matrix<T>) -> &mut Self {
        self.hasher.update((m.rows() as u64).to_le_bytes());
        self.hasher.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            self.hasher.update(v.bits().to_le_bytes());
        }
        self
    }

    pub fn sequence<T: Real>(&mut self, s: &TokenSequence<T>) -> &mut Self {
        self.bytes(format!("{:?}", s.modality()).as_bytes());
        for &(r, c) in s.positions() {
            self.hasher.update(r.to_le_bytes());
            self.hasher.update(c.to_le_bytes());
        }
        self.matrix(s.embeddings())
    }

    pub fn finish(self) -> ConditionFingerprint {
        let digest = self.hasher.finalize();
        ConditionFingerprint(u128::from_le_bytes(digest[..16].try_into().unwrap()))
    }
}

/// Static-pathway output for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticCacheEntry<T> {
    pub block_id: usize,
    /// Rotated mask keys and mask values for the dynamic pathway.
    pub kv: StaticKv<T>,
    /// Mask-row attention output.
    pub mask_out: Matrix<T>,
    /// Mask stream after the block's attention and feed-forward updates.
    pub mask_next: Matrix<T>,
    pub fingerprint: ConditionFingerprint,
}

impl<T: Real> StaticCacheEntry<T> {
    pub fn mask_rows(&self) -> usize {
        self.mask_next.rows()
    }
}

type Slot<T> = Arc<Mutex<Option<Arc<StaticCacheEntry<T>>>>>;

/// Session cache of static-pathway entries, one per block.
///
/// Lookups on different blocks never contend; a fill holds only its own
/// block's slot. `compute` callbacks must not re-enter the cache.
pub struct StaticCache<T> {
    slots: RwLock<HashMap<usize, Slot<T>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<T> Default for StaticCache<T> {
    fn default() -> Self {
        Self {
            slots: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }
}

/// Hit/miss counters, exported in reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct CacheStats {
    pub hits: u64,
    /// Number of `compute` invocations.
    pub misses: u64,
    pub entries: usize,
}

impl<T: Real> StaticCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&self, block_id: usize) -> Slot<T> {
        if let Some(s) = self.slots.read().unwrap().get(&block_id) {
            return s.clone();
        }
        self.slots
            .write()
            .unwrap()
            .entry(block_id)
            .or_default()
            .clone()
    }

    /// Returns the stored entry for `block_id` if its fingerprint matches;
    /// otherwise runs `compute` once, stores and returns its result.
    pub fn get_or_compute(
        &self,
        block_id: usize,
        fingerprint: ConditionFingerprint,
        compute: impl FnOnce() -> Result<StaticCacheEntry<T>>,
    ) -> Result<Arc<StaticCacheEntry<T>>> {
        let slot = self.slot(block_id);
        let mut guard = slot.lock().unwrap();
        if let Some(e) = guard.as_ref() {
            if e.fingerprint == fingerprint {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(e.clone());
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let entry = compute()?;
        if entry.block_id != block_id || entry.fingerprint != fingerprint {
            return Err(Error::CacheMismatch(format!(
                "computed entry is keyed ({}, {}) but was requested as ({block_id}, {})",
                entry.block_id,
                entry.fingerprint.hex(),
                fingerprint.hex()
            )));
        }
        let entry = Arc::new(entry);
        *guard = Some(entry.clone());
        Ok(entry)
    }

    pub fn get(&self, block_id: usize) -> Option<Arc<StaticCacheEntry<T>>> {
        let slots = self.slots.read().unwrap();
        let slot = slots.get(&block_id)?;
        let entry = slot.lock().unwrap().clone();
        entry
    }

    /// Drops every entry carrying `fingerprint`.
    pub fn invalidate(&self, fingerprint: ConditionFingerprint) {
        let slots = self.slots.read().unwrap();
        for slot in slots.values() {
            let mut g = slot.lock().unwrap();
            if g.as_ref().is_some_and(|e| e.fingerprint == fingerprint) {
                *g = None;
            }
        }
    }

    pub fn invalidate_all(&self) {
        self.slots.write().unwrap().clear();
    }

    pub fn len(&self) -> usize {
        let slots = self.slots.read().unwrap();
        slots.values().filter(|s| s.lock().unwrap().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.len(),
        }
    }

    /// Perturbs one stored value of a block's entry. Exists so verification
    /// tooling can prove it detects a bad cache.
    pub fn corrupt(&self, block_id: usize) -> bool {
        let slots = self.slots.read().unwrap();
        let Some(slot) = slots.get(&block_id) else {
            return false;
        };
        let mut g = slot.lock().unwrap();
        let Some(e) = g.as_ref() else { return false };
        let mut e = (**e).clone();
        if let Some(v) = e.kv.v.as_mut_slice().first_mut() {
            *v = *v + T::one();
        } else if let Some(v) = e.mask_next.as_mut_slice().first_mut() {
            *v = *v + T::one();
        } else {
            return false;
        }
        *g = Some(Arc::new(e));
        true
    }

    /// Writes every entry to `dir` as `TSW1` matrices plus an `index.txt`
    /// listing `block_id fingerprint`.
    pub fn spill(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let slots = self.slots.read().unwrap();
        let mut ids: Vec<_> = slots.keys().copied().collect();
        ids.sort_unstable();
        let mut index = String::new();
        for id in ids {
            let Some(e) = slots[&id].lock().unwrap().clone() else {
                continue;
            };
            for (name, m) in [
                ("k", &e.kv.k),
                ("v", &e.kv.v),
                ("mask_out", &e.mask_out),
                ("mask_next", &e.mask_next),
            ] {
                save_tsw(&dir.join(format!("block{id}.{name}.tsw")), m)?;
            }
            index.push_str(&format!("{id} {}\n", e.fingerprint.hex()));
        }
        std::fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    /// Loads entries written by [`StaticCache::spill`]. Values round-trip
    /// through 32-bit floats.
    pub fn restore(&self, dir: &Path) -> Result<usize> {
        let index_path = dir.join("index.txt");
        let index = std::fs::read_to_string(&index_path)?;
        let bad = |reason: String| Error::Format {
            path: index_path.clone(),
            reason,
        };
        let mut n = 0;
        for line in index.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let id: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad block id in {line:?}")))?;
            let fp = parts
                .next()
                .and_then(|s| u128::from_str_radix(s, 16).ok())
                .ok_or_else(|| bad(format!("bad fingerprint in {line:?}")))?;
            let load = |name: &str| load_tsw::<T>(&dir.join(format!("block{id}.{name}.tsw")));
            let entry = StaticCacheEntry {
                block_id: id,
                kv: StaticKv {
                    k: load("k")?,
                    v: load("v")?,
                },
                mask_out: load("mask_out")?,
                mask_next: load("mask_next")?,
                fingerprint: ConditionFingerprint(fp),
            };
            *self.slot(id).lock().unwrap() = Some(Arc::new(entry));
            n += 1;
        }
        Ok(n)
    }
}
