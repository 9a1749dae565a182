use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};

/// Ordered key-value backend with batched reads and writes.
pub trait KvBackend: Send + Sync {
    /// Writes all pairs durably; a later pair wins over an earlier one with the same key.
    fn put_batch(&self, items: &[(String, Vec<u8>)]) -> io::Result<()>;

    /// One lookup per key, in input order.
    fn get_batch(&self, keys: &[String]) -> io::Result<Vec<Option<Vec<u8>>>>;

    fn keys(&self) -> Vec<String>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct MemoryKv {
    map: RwLock<BTreeMap<String, Vec<u8>>>,
}

impl MemoryKv {
    pub fn new() -> Self {
        Self::default()
    }
}

impl KvBackend for MemoryKv {
    fn put_batch(&self, items: &[(String, Vec<u8>)]) -> io::Result<()> {
        let mut map = self.map.write();
        for (k, v) in items {
            map.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    fn get_batch(&self, keys: &[String]) -> io::Result<Vec<Option<Vec<u8>>>> {
        let map = self.map.read();
        Ok(keys.iter().map(|k| map.get(k).cloned()).collect())
    }

    fn keys(&self) -> Vec<String> {
        self.map.read().keys().cloned().collect()
    }

    fn len(&self) -> usize {
        self.map.read().len()
    }
}

/// Append-only log with an in-memory ordered index of value locations.
///
/// Record layout, little-endian: `key_len u32, key, value_len u32, value,
/// crc32 u32` where the checksum covers everything before it in the record.
/// Opening replays the log; a torn or corrupt tail left by a crash is cut off.
#[derive(Debug)]
pub struct LogKv {
    path: PathBuf,
    file: File,
    writer: Mutex<u64>,
    index: RwLock<BTreeMap<String, (u64, u32)>>,
}

impl LogKv {
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let (index, good_len) = replay(&mut file)?;
        if good_len < file.metadata()?.len() {
            tracing::warn!(path = %path.display(), good_len, "truncating torn tail of note log");
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        Ok(Self { path: path.to_path_buf(), file, writer: Mutex::new(good_len), index: RwLock::new(index) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn replay(file: &mut File) -> io::Result<(BTreeMap<String, (u64, u32)>, u64)> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::with_capacity(1 << 20, &*file);
    let mut index = BTreeMap::new();
    let mut offset = 0u64;
    loop {
        let Some(record) = read_record(&mut reader)? else { break };
        let (key, value_len) = record;
        let value_at = offset + 4 + key.len() as u64 + 4;
        offset = value_at + value_len as u64 + 4;
        index.insert(key, (value_at, value_len));
    }
    Ok((index, offset))
}

/// Reads one record, or `None` at end of log or at a torn/corrupt record.
fn read_record(r: &mut impl Read) -> io::Result<Option<(String, u32)>> {
    let mut hasher = crc32fast::Hasher::new();
    let mut len = [0u8; 4];
    let Some(()) = fill(r, &mut len)? else { return Ok(None) };
    hasher.update(&len);
    let mut key = vec![0u8; u32::from_le_bytes(len) as usize];
    let Some(()) = fill(r, &mut key)? else { return Ok(None) };
    hasher.update(&key);
    let Some(()) = fill(r, &mut len)? else { return Ok(None) };
    hasher.update(&len);
    let value_len = u32::from_le_bytes(len);
    let mut value = vec![0u8; value_len as usize];
    let Some(()) = fill(r, &mut value)? else { return Ok(None) };
    hasher.update(&value);
    let mut crc = [0u8; 4];
    let Some(()) = fill(r, &mut crc)? else { return Ok(None) };
    if hasher.finalize() != u32::from_le_bytes(crc) {
        return Ok(None);
    }
    Ok(String::from_utf8(key).ok().map(|k| (k, value_len)))
}

fn fill(r: &mut impl Read, buf: &mut [u8]) -> io::Result<Option<()>> {
    match r.read_exact(buf) {
        Ok(()) => Ok(Some(())),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e),
    }
}

impl KvBackend for LogKv {
    fn put_batch(&self, items: &[(String, Vec<u8>)]) -> io::Result<()> {
        if items.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        let mut locations = Vec::with_capacity(items.len());
        for (k, v) in items {
            let start = buf.len();
            buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
            buf.extend_from_slice(k.as_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            locations.push((k.clone(), buf.len() as u64, v.len() as u32));
            buf.extend_from_slice(v);
            let crc = crc32fast::hash(&buf[start..]);
            buf.extend_from_slice(&crc.to_le_bytes());
        }
        let mut end = self.writer.lock();
        (&self.file).write_all(&buf)?;
        self.file.sync_data()?;
        let base = *end;
        *end += buf.len() as u64;
        let mut index = self.index.write();
        for (k, rel, len) in locations {
            index.insert(k, (base + rel, len));
        }
        Ok(())
    }

    fn get_batch(&self, keys: &[String]) -> io::Result<Vec<Option<Vec<u8>>>> {
        let locations: Vec<_> = {
            let index = self.index.read();
            keys.iter().map(|k| index.get(k).copied()).collect()
        };
        let mut out = Vec::with_capacity(keys.len());
        for loc in locations {
            out.push(match loc {
                Some((offset, len)) => {
                    let mut v = vec![0u8; len as usize];
                    self.file.read_exact_at(&mut v, offset)?;
                    Some(v)
                }
                None => None,
            });
        }
        Ok(out)
    }

    fn keys(&self) -> Vec<String> {
        self.index.read().keys().cloned().collect()
    }

    fn len(&self) -> usize {
        self.index.read().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, Vec<u8>)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.as_bytes().to_vec())).collect()
    }

    #[test]
    fn log_survives_reopen_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.log");
        {
            let log = LogKv::open(&path).unwrap();
            log.put_batch(&kv(&[("a", "1"), ("b", "2")])).unwrap();
            log.put_batch(&kv(&[("a", "3")])).unwrap();
            assert_eq!(log.get_batch(&["a".into()]).unwrap(), vec![Some(b"3".to_vec())]);
        }
        let log = LogKv::open(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(
            log.get_batch(&["b".into(), "zz".into(), "a".into()]).unwrap(),
            vec![Some(b"2".to_vec()), None, Some(b"3".to_vec())]
        );
        assert_eq!(log.keys(), ["a", "b"]);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.log");
        {
            let log = LogKv::open(&path).unwrap();
            log.put_batch(&kv(&[("a", "1")])).unwrap();
            log.put_batch(&kv(&[("b", "22")])).unwrap();
        }
        let full = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(full - 3).unwrap();
        drop(f);
        let log = LogKv::open(&path).unwrap();
        assert_eq!(log.keys(), ["a"]);
        log.put_batch(&kv(&[("c", "x")])).unwrap();
        drop(log);
        let log = LogKv::open(&path).unwrap();
        assert_eq!(log.keys(), ["a", "c"]);
    }

    #[test]
    fn memory_backend() {
        let m = MemoryKv::new();
        assert!(m.is_empty());
        m.put_batch(&kv(&[("k", "v")])).unwrap();
        assert_eq!(m.get_batch(&["k".into(), "q".into()]).unwrap(), vec![Some(b"v".to_vec()), None]);
    }
}
