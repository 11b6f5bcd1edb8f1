//! Persistent embedding cache.
//!
//! Layout: `<cache_dir>/<provider>/<shard>.bin`, sixteen shards keyed by the
//! first nibble of the statement hash. Each record is
//!
//! ```text
//! u32 payload_len | payload | u32 checksum
//! payload = [u8; 32] sha256(statement) | u32 dimension | dimension x f32
//! ```
//!
//! all little-endian; the checksum is the first four bytes of sha256(payload).
//! Records are only ever appended, one `write_all` per record, under a mutex.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};

pub type StatementHash = [u8; 32];

pub fn statement_hash(statement: &str) -> StatementHash {
    Sha256::digest(statement.as_bytes()).into()
}

fn checksum(payload: &[u8]) -> u32 {
    let d = Sha256::digest(payload);
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

fn shard_of(hash: &StatementHash) -> u8 {
    hash[0] >> 4
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Default)]
struct CacheState {
    shards: HashMap<u8, HashMap<StatementHash, Vec<f32>>>,
}

pub struct EmbeddingCache {
    dir: PathBuf,
    state: Mutex<CacheState>,
}

impl EmbeddingCache {
    /// Open (creating if needed) the cache for `provider` under `cache_dir`.
    pub fn open(cache_dir: impl AsRef<Path>, provider: &str) -> Result<Self> {
        let dir = cache_dir.as_ref().join(sanitize(provider));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(EmbeddingCache {
            dir,
            state: Mutex::new(CacheState::default()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn shard_path(&self, shard: u8) -> PathBuf {
        self.dir.join(format!("{shard:x}.bin"))
    }

    fn load_shard(&self, shard: u8) -> Result<HashMap<StatementHash, Vec<f32>>> {
        let path = self.shard_path(shard);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut out = HashMap::new();
        let mut pos = 0usize;
        while pos < bytes.len() {
            let Some(len_bytes) = bytes.get(pos..pos + 4) else {
                warn!("{}: truncated record header at byte {pos}, ignoring tail", path.display());
                break;
            };
            let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            let Some(payload) = bytes.get(pos + 4..pos + 4 + len) else {
                warn!("{}: truncated record at byte {pos}, ignoring tail", path.display());
                break;
            };
            let Some(sum_bytes) = bytes.get(pos + 4 + len..pos + 8 + len) else {
                warn!("{}: record at byte {pos} lacks a checksum, ignoring tail", path.display());
                break;
            };
            pos += 8 + len;
            let stored = u32::from_le_bytes(sum_bytes.try_into().unwrap());
            if stored != checksum(payload) || payload.len() < 36 {
                warn!("{}: corrupted record skipped", path.display());
                continue;
            }
            let key: StatementHash = payload[..32].try_into().unwrap();
            let dim = u32::from_le_bytes(payload[32..36].try_into().unwrap()) as usize;
            if payload.len() != 36 + 4 * dim {
                warn!("{}: record dimension disagrees with its length, skipped", path.display());
                continue;
            }
            let values = payload[36..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(key, values);
        }
        Ok(out)
    }

    fn with_shard<T>(
        &self,
        shard: u8,
        f: impl FnOnce(&mut HashMap<StatementHash, Vec<f32>>) -> Result<T>,
    ) -> Result<T> {
        let mut state = self.state.lock().expect("cache mutex poisoned");
        if !state.shards.contains_key(&shard) {
            let loaded = self.load_shard(shard)?;
            state.shards.insert(shard, loaded);
        }
        f(state.shards.get_mut(&shard).unwrap())
    }

    pub fn lookup(&self, statement: &str) -> Result<Option<Vec<f32>>> {
        let key = statement_hash(statement);
        self.with_shard(shard_of(&key), |m| Ok(m.get(&key).cloned()))
    }

    pub fn store(&self, statement: &str, values: &[f32]) -> Result<()> {
        let key = statement_hash(statement);
        let shard = shard_of(&key);
        let mut payload = Vec::with_capacity(36 + 4 * values.len());
        payload.extend_from_slice(&key);
        payload.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut record = Vec::with_capacity(payload.len() + 8);
        record.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        record.extend_from_slice(&payload);
        record.extend_from_slice(&checksum(&payload).to_le_bytes());

        let path = self.shard_path(shard);
        self.with_shard(shard, |m| {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.write_all(&record).map_err(|e| Error::io(&path, e))?;
            m.insert(key, values.to_vec());
            Ok(())
        })
    }
}

/// A provider fronted by a persistent cache. Returned vectors are always the
/// normalized `f32` record as stored, so a cold call and a warm call agree
/// bit for bit.
pub struct CachedProvider<P> {
    inner: P,
    cache: EmbeddingCache,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P, cache_dir: impl AsRef<Path>) -> Result<Self> {
        let cache = EmbeddingCache::open(cache_dir, inner.name())?;
        Ok(CachedProvider { inner, cache })
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut records: Vec<Option<Vec<f32>>> = Vec::with_capacity(statements.len());
        let mut misses = Vec::new();
        for (i, s) in statements.iter().enumerate() {
            let hit = self.cache.lookup(s)?;
            if let Some(v) = &hit {
                if v.len() != self.inner.dimension() {
                    return Err(Error::Integrity(format!(
                        "cached vector for provider `{}` has dimension {}, provider declares {}",
                        self.inner.name(),
                        v.len(),
                        self.inner.dimension()
                    )));
                }
            } else {
                misses.push(i);
            }
            records.push(hit);
        }
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| statements[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            for (&i, v) in misses.iter().zip(fresh) {
                let rec = v.to_f32();
                self.cache.store(&statements[i], &rec)?;
                records[i] = Some(rec);
            }
        }
        records
            .into_iter()
            .map(|r| EmbeddingVector::from_f32(&r.expect("filled above")))
            .collect()
    }
}
