//! RESP (REdis Serialization Protocol) codec and a blocking client backend.
//!
//! Batches are pipelined inside `MULTI`/`EXEC` so a cycle's writes commit
//! atomically on the server.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;

use super::{BatchAck, KvBackend, StoreMetrics, Value, WriteOp};
use crate::error::StoreError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RespValue {
    Simple(String),
    Error(String),
    Integer(i64),
    Bulk(Vec<u8>),
    NullBulk,
    Array(Vec<RespValue>),
    NullArray,
}

impl RespValue {
    pub fn command<I, A>(args: I) -> Self
    where
        I: IntoIterator<Item = A>,
        A: AsRef<[u8]>,
    {
        RespValue::Array(
            args.into_iter()
                .map(|a| RespValue::Bulk(a.as_ref().to_vec()))
                .collect(),
        )
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            RespValue::Simple(s) => {
                out.push(b'+');
                out.extend_from_slice(s.as_bytes());
                out.extend_from_slice(b"\r\n");
            }
            RespValue::Error(s) => {
                out.push(b'-');
                out.extend_from_slice(s.as_bytes());
                out.extend_from_slice(b"\r\n");
            }
            RespValue::Integer(i) => {
                out.push(b':');
                out.extend_from_slice(i.to_string().as_bytes());
                out.extend_from_slice(b"\r\n");
            }
            RespValue::Bulk(b) => {
                out.push(b'$');
                out.extend_from_slice(b.len().to_string().as_bytes());
                out.extend_from_slice(b"\r\n");
                out.extend_from_slice(b);
                out.extend_from_slice(b"\r\n");
            }
            RespValue::NullBulk => out.extend_from_slice(b"$-1\r\n"),
            RespValue::Array(items) => {
                out.push(b'*');
                out.extend_from_slice(items.len().to_string().as_bytes());
                out.extend_from_slice(b"\r\n");
                for item in items {
                    item.encode_into(out);
                }
            }
            RespValue::NullArray => out.extend_from_slice(b"*-1\r\n"),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Read one value. `Ok(None)` on clean end of stream.
    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Option<Self>, StoreError> {
        let mut line = Vec::new();
        let n = r.read_until(b'\n', &mut line).map_err(io_err)?;
        if n == 0 {
            return Ok(None);
        }
        if line.len() < 3 || !line.ends_with(b"\r\n") {
            return Err(StoreError::Protocol(format!(
                "unterminated line {:?}",
                String::from_utf8_lossy(&line)
            )));
        }
        let body = &line[1..line.len() - 2];
        let text = || String::from_utf8_lossy(body).into_owned();
        let int = || -> Result<i64, StoreError> {
            std::str::from_utf8(body)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| StoreError::Protocol(format!("bad integer {:?}", text())))
        };
        let value = match line[0] {
            b'+' => RespValue::Simple(text()),
            b'-' => RespValue::Error(text()),
            b':' => RespValue::Integer(int()?),
            b'$' => {
                let len = int()?;
                if len < 0 {
                    RespValue::NullBulk
                } else {
                    let mut buf = vec![0u8; len as usize + 2];
                    r.read_exact(&mut buf).map_err(io_err)?;
                    if !buf.ends_with(b"\r\n") {
                        return Err(StoreError::Protocol("bulk string not terminated".into()));
                    }
                    buf.truncate(len as usize);
                    RespValue::Bulk(buf)
                }
            }
            b'*' => {
                let len = int()?;
                if len < 0 {
                    RespValue::NullArray
                } else {
                    let mut items = Vec::with_capacity(len as usize);
                    for _ in 0..len {
                        items.push(Self::read_from(r)?.ok_or_else(|| {
                            StoreError::Protocol("stream ended inside array".into())
                        })?);
                    }
                    RespValue::Array(items)
                }
            }
            other => {
                return Err(StoreError::Protocol(format!(
                    "unknown type byte {:?}",
                    other as char
                )))
            }
        };
        Ok(Some(value))
    }
}

fn io_err(e: std::io::Error) -> StoreError {
    StoreError::Unavailable(e.to_string())
}

fn server_err(msg: String, key: &str) -> StoreError {
    if msg.starts_with("WRONGTYPE") {
        StoreError::WrongType(key.to_string())
    } else {
        StoreError::Protocol(msg)
    }
}

/// Escape glob metacharacters so `prefix*` matches literally.
pub fn glob_prefix(prefix: &str) -> String {
    let mut out = String::with_capacity(prefix.len() + 1);
    for ch in prefix.chars() {
        if matches!(ch, '*' | '?' | '[' | ']' | '\\') {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('*');
    out
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn send(&mut self, cmds: &[RespValue]) -> Result<Vec<RespValue>, StoreError> {
        let mut buf = Vec::new();
        for c in cmds {
            c.encode_into(&mut buf);
        }
        self.writer.write_all(&buf).map_err(io_err)?;
        self.writer.flush().map_err(io_err)?;
        let mut replies = Vec::with_capacity(cmds.len());
        for _ in cmds {
            replies.push(
                RespValue::read_from(&mut self.reader)?
                    .ok_or_else(|| StoreError::Unavailable("connection closed".into()))?,
            );
        }
        Ok(replies)
    }

    fn call(&mut self, cmd: RespValue) -> Result<RespValue, StoreError> {
        Ok(self.send(&[cmd])?.pop().expect("one reply per command"))
    }
}

#[derive(Default)]
struct ClientCounters {
    puts: AtomicU64,
    gets: AtomicU64,
    updates: AtomicU64,
    appends: AtomicU64,
    list_reads: AtomicU64,
    scans: AtomicU64,
    batches: AtomicU64,
}

/// Backend over an external RESP server, one connection guarded by a mutex.
pub struct RespStore {
    conn: Mutex<Conn>,
    counters: ClientCounters,
}

impl RespStore {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, StoreError> {
        let stream = TcpStream::connect(addr).map_err(io_err)?;
        stream.set_nodelay(true).ok();
        stream
            .set_read_timeout(Some(Duration::from_secs(30)))
            .map_err(io_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(io_err)?);
        Ok(Self {
            conn: Mutex::new(Conn {
                reader,
                writer: BufWriter::new(stream),
            }),
            counters: ClientCounters::default(),
        })
    }

    pub fn ping(&self) -> Result<(), StoreError> {
        match self.conn.lock().call(RespValue::command(["PING"]))? {
            RespValue::Simple(s) if s == "PONG" => Ok(()),
            other => Err(StoreError::Protocol(format!("unexpected PING reply {other:?}"))),
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    fn op_command(op: &WriteOp) -> RespValue {
        match op {
            WriteOp::Put { key, value } => {
                RespValue::command([b"SET".as_slice(), key.as_bytes(), value])
            }
            WriteOp::Append { key, item } => {
                RespValue::command([b"RPUSH".as_slice(), key.as_bytes(), item])
            }
        }
    }

    fn read_value(conn: &mut Conn, key: &str) -> Result<Option<Value>, StoreError> {
        let kind = match conn.call(RespValue::command([b"TYPE".as_slice(), key.as_bytes()]))? {
            RespValue::Simple(s) => s,
            other => return Err(StoreError::Protocol(format!("unexpected TYPE reply {other:?}"))),
        };
        match kind.as_str() {
            "none" => Ok(None),
            "string" => match conn.call(RespValue::command([b"GET".as_slice(), key.as_bytes()]))? {
                RespValue::Bulk(b) => Ok(Some(Value::Scalar(b))),
                RespValue::NullBulk => Ok(None),
                other => Err(StoreError::Protocol(format!("unexpected GET reply {other:?}"))),
            },
            "list" => {
                let reply = conn.call(RespValue::command([
                    b"LRANGE".as_slice(),
                    key.as_bytes(),
                    b"0",
                    b"-1",
                ]))?;
                Ok(Some(Value::List(bulk_array(reply)?)))
            }
            _ => Err(StoreError::WrongType(key.to_string())),
        }
    }
}

fn bulk_array(reply: RespValue) -> Result<Vec<Vec<u8>>, StoreError> {
    match reply {
        RespValue::Array(items) => items
            .into_iter()
            .map(|v| match v {
                RespValue::Bulk(b) => Ok(b),
                other => Err(StoreError::Protocol(format!("expected bulk item, got {other:?}"))),
            })
            .collect(),
        RespValue::NullArray => Ok(Vec::new()),
        RespValue::Error(e) => Err(StoreError::Protocol(e)),
        other => Err(StoreError::Protocol(format!("expected array, got {other:?}"))),
    }
}

fn expect_ok(reply: RespValue, key: &str) -> Result<(), StoreError> {
    match reply {
        RespValue::Simple(_) | RespValue::Integer(_) => Ok(()),
        RespValue::Error(e) => Err(server_err(e, key)),
        other => Err(StoreError::Protocol(format!("unexpected reply {other:?}"))),
    }
}

impl KvBackend for RespStore {
    fn put(&self, key: &str, value: &[u8]) -> Result<(), StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        Self::bump(&self.counters.puts);
        let reply = self
            .conn
            .lock()
            .call(RespValue::command([b"SET".as_slice(), key.as_bytes(), value]))?;
        expect_ok(reply, key)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        Self::bump(&self.counters.gets);
        match self
            .conn
            .lock()
            .call(RespValue::command([b"GET".as_slice(), key.as_bytes()]))?
        {
            RespValue::Bulk(b) => Ok(Some(b)),
            RespValue::NullBulk => Ok(None),
            RespValue::Error(e) => Err(server_err(e, key)),
            other => Err(StoreError::Protocol(format!("unexpected GET reply {other:?}"))),
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
        Self::bump(&self.counters.updates);
        let mut conn = self.conn.lock();
        // optimistic WATCH/MULTI/EXEC loop; a null EXEC means a concurrent writer won
        loop {
            expect_ok(conn.call(RespValue::command([b"WATCH".as_slice(), key.as_bytes()]))?, key)?;
            let current = match conn.call(RespValue::command([b"GET".as_slice(), key.as_bytes()]))? {
                RespValue::Bulk(b) => Some(b),
                RespValue::NullBulk => None,
                RespValue::Error(e) => {
                    conn.call(RespValue::command(["UNWATCH"]))?;
                    return Err(server_err(e, key));
                }
                other => return Err(StoreError::Protocol(format!("unexpected GET reply {other:?}"))),
            };
            let next = f(current.as_deref());
            let replies = conn.send(&[
                RespValue::command(["MULTI"]),
                RespValue::command([b"SET".as_slice(), key.as_bytes(), &next]),
                RespValue::command(["EXEC"]),
            ])?;
            match &replies[2] {
                RespValue::NullArray => continue,
                RespValue::Array(items) => {
                    if let Some(RespValue::Error(e)) = items.first() {
                        return Err(server_err(e.clone(), key));
                    }
                    return Ok(next);
                }
                RespValue::Error(e) => return Err(server_err(e.clone(), key)),
                other => return Err(StoreError::Protocol(format!("unexpected EXEC reply {other:?}"))),
            }
        }
    }

    fn append(&self, key: &str, item: &[u8]) -> Result<usize, StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        Self::bump(&self.counters.appends);
        match self
            .conn
            .lock()
            .call(RespValue::command([b"RPUSH".as_slice(), key.as_bytes(), item]))?
        {
            RespValue::Integer(n) => Ok(n.max(0) as usize),
            RespValue::Error(e) => Err(server_err(e, key)),
            other => Err(StoreError::Protocol(format!("unexpected RPUSH reply {other:?}"))),
        }
    }

    fn list_range(
        &self,
        key: &str,
        start: usize,
        end: Option<usize>,
    ) -> Result<Vec<Vec<u8>>, StoreError> {
        Self::bump(&self.counters.list_reads);
        if end.is_some_and(|e| e <= start) {
            return Ok(Vec::new());
        }
        let stop = end.map(|e| (e - 1).to_string()).unwrap_or_else(|| "-1".into());
        let reply = self.conn.lock().call(RespValue::command([
            b"LRANGE".as_slice(),
            key.as_bytes(),
            start.to_string().as_bytes(),
            stop.as_bytes(),
        ]))?;
        if let RespValue::Error(e) = reply {
            return Err(server_err(e, key));
        }
        bulk_array(reply)
    }

    fn scan_prefix(&self, prefix: &str) -> Result<Vec<(String, Value)>, StoreError> {
        Self::bump(&self.counters.scans);
        let pattern = glob_prefix(prefix);
        let mut conn = self.conn.lock();
        let mut cursor = b"0".to_vec();
        let mut seen = HashSet::new();
        let mut keys = Vec::new();
        loop {
            let reply = conn.call(RespValue::command([
                b"SCAN".as_slice(),
                &cursor,
                b"MATCH",
                pattern.as_bytes(),
                b"COUNT",
                b"1000",
            ]))?;
            let RespValue::Array(mut parts) = reply else {
                return Err(StoreError::Protocol(format!("unexpected SCAN reply {reply:?}")));
            };
            if parts.len() != 2 {
                return Err(StoreError::Protocol("SCAN reply needs 2 parts".into()));
            }
            let batch = bulk_array(parts.pop().expect("len checked"))?;
            cursor = match parts.pop() {
                Some(RespValue::Bulk(c)) => c,
                other => return Err(StoreError::Protocol(format!("bad SCAN cursor {other:?}"))),
            };
            for k in batch {
                let k = String::from_utf8(k)
                    .map_err(|_| StoreError::Protocol("non-utf8 key".into()))?;
                // SCAN may repeat keys across iterations
                if k.starts_with(prefix) && seen.insert(k.clone()) {
                    keys.push(k);
                }
            }
            if cursor == b"0" {
                break;
            }
        }
        let mut out = Vec::with_capacity(keys.len());
        for k in keys {
            if let Some(v) = Self::read_value(&mut conn, &k)? {
                out.push((k, v));
            }
        }
        Ok(out)
    }

    fn write_batch(&self, ops: &[WriteOp]) -> Result<BatchAck, StoreError> {
        Self::bump(&self.counters.batches);
        if ops.iter().any(|op| op.key().is_empty()) {
            return Ok(BatchAck {
                committed: false,
                statuses: ops
                    .iter()
                    .map(|op| {
                        if op.key().is_empty() {
                            Err(StoreError::EmptyKey)
                        } else {
                            Ok(())
                        }
                    })
                    .collect(),
            });
        }
        let mut cmds = Vec::with_capacity(ops.len() + 2);
        cmds.push(RespValue::command(["MULTI"]));
        cmds.extend(ops.iter().map(Self::op_command));
        cmds.push(RespValue::command(["EXEC"]));
        let mut replies = self.conn.lock().send(&cmds)?;
        let exec = replies.pop().expect("EXEC reply");
        let queued = &replies[1..];
        let mut statuses: Vec<Result<(), StoreError>> = queued
            .iter()
            .zip(ops)
            .map(|(r, op)| match r {
                RespValue::Error(e) => Err(server_err(e.clone(), op.key())),
                _ => Ok(()),
            })
            .collect();
        // queue-time errors abort the whole transaction; a type error at run
        // time does not roll back the other commands, so it is reported as
        // uncommitted and never retried
        let committed = match exec {
            RespValue::Array(results) => {
                for ((status, r), op) in statuses.iter_mut().zip(results).zip(ops) {
                    if let RespValue::Error(e) = r {
                        *status = Err(server_err(e, op.key()));
                    }
                }
                statuses.iter().all(Result::is_ok)
            }
            _ => false,
        };
        for op in ops {
            match op {
                WriteOp::Put { .. } => Self::bump(&self.counters.puts),
                WriteOp::Append { .. } => Self::bump(&self.counters.appends),
            }
        }
        Ok(BatchAck {
            committed,
            statuses,
        })
    }

    fn key_count(&self) -> Result<u64, StoreError> {
        match self.conn.lock().call(RespValue::command(["DBSIZE"]))? {
            RespValue::Integer(n) => Ok(n.max(0) as u64),
            other => Err(StoreError::Protocol(format!("unexpected DBSIZE reply {other:?}"))),
        }
    }

    fn metrics(&self) -> StoreMetrics {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StoreMetrics {
            key_count: self.key_count().unwrap_or(0),
            bytes_stored: 0,
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
