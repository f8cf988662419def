//! Key-value store with key-list semantics.
//!
//! Every key holds either a scalar value or an append-ordered list of items.
//! [`MemoryStore`] is the embedded default; [`resp::RespStore`] talks to an
//! external server over the RESP wire protocol.

pub mod resp;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::Serialize;

use crate::error::StoreError;

pub use resp::RespStore;

/// Largest accepted value or list item (the common server default).
pub const DEFAULT_MAX_ITEM_BYTES: usize = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Scalar(Vec<u8>),
    List(Vec<Vec<u8>>),
}

impl Value {
    fn byte_len(&self) -> usize {
        match self {
            Value::Scalar(v) => v.len(),
            Value::List(items) => items.iter().map(Vec::len).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteOp {
    Put { key: String, value: Vec<u8> },
    Append { key: String, item: Vec<u8> },
}

impl WriteOp {
    pub fn put(key: impl Into<String>, value: impl Into<Vec<u8>>) -> Self {
        WriteOp::Put {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn append(key: impl Into<String>, item: impl Into<Vec<u8>>) -> Self {
        WriteOp::Append {
            key: key.into(),
            item: item.into(),
        }
    }

    pub fn key(&self) -> &str {
        match self {
            WriteOp::Put { key, .. } | WriteOp::Append { key, .. } => key,
        }
    }

    pub fn payload_len(&self) -> usize {
        match self {
            WriteOp::Put { value, .. } => value.len(),
            WriteOp::Append { item, .. } => item.len(),
        }
    }
}

/// Per-operation status of a batch. A batch commits all of its operations
/// or none of them.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAck {
    pub committed: bool,
    pub statuses: Vec<Result<(), StoreError>>,
}

impl BatchAck {
    pub fn first_error(&self) -> Option<&StoreError> {
        self.statuses.iter().find_map(|s| s.as_ref().err())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreMetrics {
    pub key_count: u64,
    pub bytes_stored: u64,
    pub puts: u64,
    pub gets: u64,
    pub updates: u64,
    pub appends: u64,
    pub list_reads: u64,
    pub scans: u64,
    pub batches: u64,
}

pub trait KvBackend: Send + Sync {
    fn put(&self, key: &str, value: &[u8]) -> Result<(), StoreError>;

    /// `None` when the key is absent.
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError>;

    /// Atomic read-modify-write of a scalar; returns the stored value.
    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Vec<u8>,
    ) -> Result<Vec<u8>, StoreError>;

    /// Push `item` to the tail of the key's list; returns the new length.
    fn append(&self, key: &str, item: &[u8]) -> Result<usize, StoreError>;

    /// Items `start..end` of a list (`end = None` reads to the tail). A
    /// missing key reads as an empty list.
    fn list_range(
        &self,
        key: &str,
        start: usize,
        end: Option<usize>,
    ) -> Result<Vec<Vec<u8>>, StoreError>;

    fn list(&self, key: &str) -> Result<Vec<Vec<u8>>, StoreError> {
        self.list_range(key, 0, None)
    }

    /// Every key starting with `prefix`, each exactly once, in unspecified order.
    fn scan_prefix(&self, prefix: &str) -> Result<Vec<(String, Value)>, StoreError>;

    fn write_batch(&self, ops: &[WriteOp]) -> Result<BatchAck, StoreError>;

    fn key_count(&self) -> Result<u64, StoreError>;

    fn metrics(&self) -> StoreMetrics;
}

pub type SharedStore = Arc<dyn KvBackend>;

#[derive(Default)]
struct Counters {
    puts: AtomicU64,
    gets: AtomicU64,
    updates: AtomicU64,
    appends: AtomicU64,
    list_reads: AtomicU64,
    scans: AtomicU64,
    batches: AtomicU64,
}

impl Counters {
    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

type Shard = RwLock<BTreeMap<String, Value>>;

/// Embedded, memory-resident store sharded by key hash.
pub struct MemoryStore {
    shards: Vec<Shard>,
    max_item: usize,
    keys: AtomicI64,
    bytes: AtomicI64,
    counters: Counters,
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::with_shards(16)
    }

    pub fn with_shards(n: usize) -> Self {
        Self {
            shards: (0..n.max(1)).map(|_| RwLock::new(BTreeMap::new())).collect(),
            max_item: DEFAULT_MAX_ITEM_BYTES,
            keys: AtomicI64::new(0),
            bytes: AtomicI64::new(0),
            counters: Counters::default(),
        }
    }

    pub fn with_max_item(mut self, bytes: usize) -> Self {
        self.max_item = bytes;
        self
    }

    pub fn shared(self) -> SharedStore {
        Arc::new(self)
    }

    fn shard_index(&self, key: &str) -> usize {
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        (h.finish() as usize) % self.shards.len()
    }

    fn shard(&self, key: &str) -> &Shard {
        &self.shards[self.shard_index(key)]
    }

    fn check(&self, key: &str, len: usize) -> Result<(), StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        if len > self.max_item {
            return Err(StoreError::Oversized {
                size: len,
                limit: self.max_item,
            });
        }
        Ok(())
    }

    fn account(&self, new_key: bool, delta_bytes: i64) {
        if new_key {
            self.keys.fetch_add(1, Ordering::Relaxed);
        }
        self.bytes.fetch_add(delta_bytes, Ordering::Relaxed);
    }

    fn put_locked(&self, map: &mut BTreeMap<String, Value>, key: &str, value: &[u8]) {
        let new_len = (key.len() + value.len()) as i64;
        match map.insert(key.to_string(), Value::Scalar(value.to_vec())) {
            Some(old) => self.account(false, new_len - (key.len() + old.byte_len()) as i64),
            None => self.account(true, new_len),
        }
    }

    fn append_locked(
        &self,
        map: &mut BTreeMap<String, Value>,
        key: &str,
        item: &[u8],
    ) -> Result<usize, StoreError> {
        match map.get_mut(key) {
            Some(Value::List(items)) => {
                items.push(item.to_vec());
                self.account(false, item.len() as i64);
                Ok(items.len())
            }
            Some(Value::Scalar(_)) => Err(StoreError::WrongType(key.to_string())),
            None => {
                map.insert(key.to_string(), Value::List(vec![item.to_vec()]));
                self.account(true, (key.len() + item.len()) as i64);
                Ok(1)
            }
        }
    }
}

impl KvBackend for MemoryStore {
    fn put(&self, key: &str, value: &[u8]) -> Result<(), StoreError> {
        self.check(key, value.len())?;
        Counters::bump(&self.counters.puts);
        let mut map = self.shard(key).write();
        self.put_locked(&mut map, key, value);
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        Counters::bump(&self.counters.gets);
        match self.shard(key).read().get(key) {
            None => Ok(None),
            Some(Value::Scalar(v)) => Ok(Some(v.clone())),
            Some(Value::List(_)) => Err(StoreError::WrongType(key.to_string())),
        }
    }

    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Vec<u8>,
    ) -> Result<Vec<u8>, StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        Counters::bump(&self.counters.updates);
        let mut map = self.shard(key).write();
        let next = match map.get(key) {
            None => f(None),
            Some(Value::Scalar(v)) => f(Some(v)),
            Some(Value::List(_)) => return Err(StoreError::WrongType(key.to_string())),
        };
        self.check(key, next.len())?;
        self.put_locked(&mut map, key, &next);
        Ok(next)
    }

    fn append(&self, key: &str, item: &[u8]) -> Result<usize, StoreError> {
        self.check(key, item.len())?;
        Counters::bump(&self.counters.appends);
        let mut map = self.shard(key).write();
        self.append_locked(&mut map, key, item)
    }

    fn list_range(
        &self,
        key: &str,
        start: usize,
        end: Option<usize>,
    ) -> Result<Vec<Vec<u8>>, StoreError> {
        Counters::bump(&self.counters.list_reads);
        match self.shard(key).read().get(key) {
            None => Ok(Vec::new()),
            Some(Value::List(items)) => {
                let end = end.unwrap_or(items.len()).min(items.len());
                Ok(items.get(start.min(end)..end).unwrap_or_default().to_vec())
            }
            Some(Value::Scalar(_)) => Err(StoreError::WrongType(key.to_string())),
        }
    }

    fn scan_prefix(&self, prefix: &str) -> Result<Vec<(String, Value)>, StoreError> {
        Counters::bump(&self.counters.scans);
        let mut out = Vec::new();
        for shard in &self.shards {
            let map = shard.read();
            out.extend(
                map.range(prefix.to_string()..)
                    .take_while(|(k, _)| k.starts_with(prefix))
                    .map(|(k, v)| (k.clone(), v.clone())),
            );
        }
        Ok(out)
    }

    fn write_batch(&self, ops: &[WriteOp]) -> Result<BatchAck, StoreError> {
        Counters::bump(&self.counters.batches);
        // validate first so a rejected batch leaves no trace
        let mut statuses: Vec<Result<(), StoreError>> =
            ops.iter().map(|op| self.check(op.key(), op.payload_len())).collect();
        let mut by_shard: Vec<Vec<usize>> = vec![Vec::new(); self.shards.len()];
        for (i, op) in ops.iter().enumerate() {
            by_shard[self.shard_index(op.key())].push(i);
        }
        let mut guards: Vec<_> = self.shards.iter().map(|s| s.write()).collect();
        for (shard, idxs) in by_shard.iter().enumerate() {
            for &i in idxs {
                if statuses[i].is_ok() {
                    if let WriteOp::Append { key, .. } = &ops[i] {
                        if let Some(Value::Scalar(_)) = guards[shard].get(key) {
                            statuses[i] = Err(StoreError::WrongType(key.clone()));
                        }
                    }
                }
            }
        }
        if statuses.iter().any(Result::is_err) {
            return Ok(BatchAck {
                committed: false,
                statuses,
            });
        }
        for (shard, idxs) in by_shard.iter().enumerate() {
            let map = &mut guards[shard];
            for &i in idxs {
                match &ops[i] {
                    WriteOp::Put { key, value } => {
                        Counters::bump(&self.counters.puts);
                        self.put_locked(map, key, value);
                    }
                    WriteOp::Append { key, item } => {
                        Counters::bump(&self.counters.appends);
                        self.append_locked(map, key, item)?;
                    }
                }
            }
        }
        Ok(BatchAck {
            committed: true,
            statuses,
        })
    }

    fn key_count(&self) -> Result<u64, StoreError> {
        Ok(self.keys.load(Ordering::Relaxed).max(0) as u64)
    }

    fn metrics(&self) -> StoreMetrics {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StoreMetrics {
            key_count: self.keys.load(Ordering::Relaxed).max(0) as u64,
            bytes_stored: self.bytes.load(Ordering::Relaxed).max(0) as u64,
            puts: load(&c.puts),
            gets: load(&c.gets),
            updates: load(&c.updates),
            appends: load(&c.appends),
            list_reads: load(&c.list_reads),
            scans: load(&c.scans),
            batches: load(&c.batches),
        }
    }
}

/// Wraps a backend and fails the next `n` write calls with
/// [`StoreError::Unavailable`], for exercising retry and stall handling.
pub struct FlakyStore<B> {
    inner: B,
    failures: AtomicU64,
}

impl<B: KvBackend> FlakyStore<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            failures: AtomicU64::new(0),
        }
    }

    pub fn fail_next(&self, n: u64) {
        self.failures.store(n, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn trip(&self) -> Result<(), StoreError> {
        let hit = self
            .failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if hit {
            Err(StoreError::Unavailable("injected failure".into()))
        } else {
            Ok(())
        }
    }
}

impl<B: KvBackend> KvBackend for FlakyStore<B> {
    fn put(&self, key: &str, value: &[u8]) -> Result<(), StoreError> {
        self.trip()?;
        self.inner.put(key, value)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        self.inner.get(key)
    }

    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Vec<u8>,
    ) -> Result<Vec<u8>, StoreError> {
        self.trip()?;
        self.inner.update(key, f)
    }

    fn append(&self, key: &str, item: &[u8]) -> Result<usize, StoreError> {
        self.trip()?;
        self.inner.append(key, item)
    }

    fn list_range(
        &self,
        key: &str,
        start: usize,
        end: Option<usize>,
    ) -> Result<Vec<Vec<u8>>, StoreError> {
        self.inner.list_range(key, start, end)
    }

    fn scan_prefix(&self, prefix: &str) -> Result<Vec<(String, Value)>, StoreError> {
        self.inner.scan_prefix(prefix)
    }

    fn write_batch(&self, ops: &[WriteOp]) -> Result<BatchAck, StoreError> {
        self.trip()?;
        self.inner.write_batch(ops)
    }

    fn key_count(&self) -> Result<u64, StoreError> {
        self.inner.key_count()
    }

    fn metrics(&self) -> StoreMetrics {
        self.inner.metrics()
    }
}

impl<T: KvBackend + ?Sized> KvBackend for Arc<T> {
    fn put(&self, key: &str, value: &[u8]) -> Result<(), StoreError> {
        (**self).put(key, value)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        (**self).get(key)
    }

    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Vec<u8>,
    ) -> Result<Vec<u8>, StoreError> {
        (**self).update(key, f)
    }

    fn append(&self, key: &str, item: &[u8]) -> Result<usize, StoreError> {
        (**self).append(key, item)
    }

    fn list_range(
        &self,
        key: &str,
        start: usize,
        end: Option<usize>,
    ) -> Result<Vec<Vec<u8>>, StoreError> {
        (**self).list_range(key, start, end)
    }

    fn scan_prefix(&self, prefix: &str) -> Result<Vec<(String, Value)>, StoreError> {
        (**self).scan_prefix(prefix)
    }

    fn write_batch(&self, ops: &[WriteOp]) -> Result<BatchAck, StoreError> {
        (**self).write_batch(ops)
    }

    fn key_count(&self) -> Result<u64, StoreError> {
        (**self).key_count()
    }

    fn metrics(&self) -> StoreMetrics {
        (**self).metrics()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn append_and_read() {
        let s = MemoryStore::new();
        assert_eq!(s.append("icr:u0:5", b"2|1|3").unwrap(), 1);
        assert_eq!(s.list("icr:u0:5").unwrap(), vec![b"2|1|3".to_vec()]);
        assert_eq!(s.append("icr:u0:5", b"3|1|4").unwrap(), 2);
        assert_eq!(s.list_range("icr:u0:5", 1, None).unwrap(), vec![b"3|1|4".to_vec()]);
        assert_eq!(s.list("nope").unwrap(), Vec::<Vec<u8>>::new());
        assert_eq!(s.list_range("icr:u0:5", 5, Some(9)).unwrap().len(), 0);
    }

    #[test]
    fn scan_by_prefix() {
        let s = MemoryStore::new();
        assert!(s.scan_prefix("sepi:").unwrap().is_empty());
        s.put("sepi:a|1", b"4").unwrap();
        s.put("sepi:b|2", b"5").unwrap();
        s.put("meta:x", b"0,0,1,1").unwrap();
        let mut got = s.scan_prefix("sepi:").unwrap();
        got.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], ("sepi:a|1".into(), Value::Scalar(b"4".to_vec())));
        assert!(s.scan_prefix("zzz").unwrap().is_empty());
        assert_eq!(s.metrics().scans, 3);
    }

    #[test]
    fn put_get_update() {
        let s = MemoryStore::new();
        s.put("k", b"1").unwrap();
        let v = s.update("k", &mut |old| {
            assert_eq!(old, Some(&b"1"[..]));
            b"2".to_vec()
        });
        assert_eq!(v.unwrap(), b"2");
        assert_eq!(s.get("k").unwrap(), Some(b"2".to_vec()));
        assert_eq!(s.get("missing").unwrap(), None);
        let raw = [0u8, 255, 10, 13, 124];
        s.put("bin", &raw).unwrap();
        assert_eq!(s.get("bin").unwrap().unwrap(), raw);
    }

    #[test]
    fn error_paths() {
        let s = MemoryStore::new().with_max_item(4);
        assert_eq!(s.append("", b"x"), Err(StoreError::EmptyKey));
        assert!(matches!(s.append("k", b"12345"), Err(StoreError::Oversized { .. })));
        s.put("scalar", b"1").unwrap();
        assert!(matches!(s.append("scalar", b"1"), Err(StoreError::WrongType(_))));
        s.append("list", b"1").unwrap();
        assert!(matches!(s.get("list"), Err(StoreError::WrongType(_))));
    }

    #[test]
    fn batch_is_all_or_nothing() {
        let s = MemoryStore::new().with_max_item(8);
        s.put("scalar", b"1").unwrap();
        let ops = vec![
            WriteOp::append("a", "x"),
            WriteOp::append("scalar", "y"),
            WriteOp::put("b", "0123456789"),
        ];
        let ack = s.write_batch(&ops).unwrap();
        assert!(!ack.committed);
        assert!(ack.statuses[0].is_ok());
        assert!(matches!(ack.statuses[1], Err(StoreError::WrongType(_))));
        assert!(matches!(ack.statuses[2], Err(StoreError::Oversized { .. })));
        assert_eq!(s.key_count().unwrap(), 1);

        let ok = s
            .write_batch(&[WriteOp::append("a", "x"), WriteOp::put("b", "1")])
            .unwrap();
        assert!(ok.committed && ok.first_error().is_none());
        assert_eq!(s.key_count().unwrap(), 3);
    }

    #[test]
    fn metrics_track_bytes_and_keys() {
        let s = MemoryStore::new();
        s.put("k", b"abc").unwrap();
        s.put("k", b"a").unwrap();
        s.append("l", b"xy").unwrap();
        s.append("l", b"z").unwrap();
        let m = s.metrics();
        assert_eq!(m.key_count, 2);
        assert_eq!(m.bytes_stored, (1 + 1) + (1 + 2 + 1));
        assert_eq!(m.appends, 2);
    }

    #[test]
    fn flaky_store_fails_then_recovers() {
        let s = FlakyStore::new(MemoryStore::new());
        s.fail_next(2);
        assert!(matches!(s.put("k", b"1"), Err(StoreError::Unavailable(_))));
        assert!(s.write_batch(&[WriteOp::put("k", "1")]).is_err());
        s.put("k", b"1").unwrap();
        assert_eq!(s.get("k").unwrap(), Some(b"1".to_vec()));
    }

    #[test]
    fn concurrent_appends_keep_per_key_order() {
        let s = Arc::new(MemoryStore::new());
        std::thread::scope(|scope| {
            for w in 0..4 {
                let s = s.clone();
                scope.spawn(move || {
                    for i in 0..500u32 {
                        s.append(&format!("w{w}"), &i.to_be_bytes()).unwrap();
                        s.append("shared", &[w as u8]).unwrap();
                    }
                });
            }
        });
        for w in 0..4 {
            let items = s.list(&format!("w{w}")).unwrap();
            let seq: Vec<u32> = items
                .iter()
                .map(|b| u32::from_be_bytes(b[..4].try_into().unwrap()))
                .collect();
            assert_eq!(seq, (0..500).collect::<Vec<_>>());
        }
        assert_eq!(s.list("shared").unwrap().len(), 2000);
    }

    proptest! {
        #[test]
        fn scan_yields_each_key_once(keys in proptest::collection::btree_set("[a-c]{1,4}", 0..40), prefix in "[a-c]{0,2}") {
            let s = MemoryStore::with_shards(5);
            for k in &keys {
                s.put(k, k.as_bytes()).unwrap();
            }
            let mut got: Vec<String> = s.scan_prefix(&prefix).unwrap().into_iter().map(|(k, _)| k).collect();
            got.sort();
            let want: Vec<String> = keys.iter().filter(|k| k.starts_with(&prefix)).cloned().collect();
            prop_assert_eq!(got, want);
        }
    }
}
