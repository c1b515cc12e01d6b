//! Disk-resident master relation.
//!
//! File layout (all integers big-endian):
//!
//! ```text
//! header  32 bytes   magic "CJMASTER" | version u32 | record width u32 | key width u32
//!                    | index stride u32 | record count u64
//! body    count * 120 bytes, records sorted by strictly increasing key
//!                    each record: key u32 | payload [u8; 116]
//! index   ceil(count / stride) * 12 bytes, one (key u32, ordinal u64) per stride
//! ```
//!
//! The sparse index is read fully into memory on open. Partition reads are
//! cyclic: a run that reaches end-of-file continues at ordinal 0.

use std::alloc::{self, Layout};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::{FileExt, OpenOptionsExt};
use std::path::{Path, PathBuf};
use std::ptr::NonNull;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CJMASTER";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
pub const KEY_WIDTH: usize = 4;
pub const MASTER_PAYLOAD_WIDTH: usize = 116;
/// Serialized size of one master record (v_R).
pub const MASTER_RECORD_WIDTH: usize = KEY_WIDTH + MASTER_PAYLOAD_WIDTH;
pub const INDEX_STRIDE: u64 = 64;
pub const INDEX_ENTRY_WIDTH: u64 = 12;
pub const DEFAULT_MAX_FILE_BYTES: u64 = 64 << 30;

const DIRECT_ALIGN: usize = 4096;
const PAYLOAD_WORDS: u128 = (MASTER_PAYLOAD_WIDTH / 4) as u128;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MasterRecord {
    pub key: u32,
    pub payload: [u8; MASTER_PAYLOAD_WIDTH],
}

impl MasterRecord {
    pub fn to_bytes(&self) -> [u8; MASTER_RECORD_WIDTH] {
        let mut out = [0u8; MASTER_RECORD_WIDTH];
        out[..KEY_WIDTH].copy_from_slice(&self.key.to_be_bytes());
        out[KEY_WIDTH..].copy_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let key = u32::from_be_bytes(bytes[..KEY_WIDTH].try_into().unwrap());
        let mut payload = [0u8; MASTER_PAYLOAD_WIDTH];
        payload.copy_from_slice(&bytes[KEY_WIDTH..MASTER_RECORD_WIDTH]);
        Self { key, payload }
    }
}

impl std::fmt::Debug for MasterRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MasterRecord")
            .field("key", &self.key)
            .field("payload[..8]", &&self.payload[..8])
            .finish()
    }
}

/// Deterministic payload for `key` under `seed`.
pub fn master_payload(seed: u64, key: u32) -> [u8; MASTER_PAYLOAD_WIDTH] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    payload_at(&mut rng, key)
}

fn payload_at(rng: &mut ChaCha8Rng, key: u32) -> [u8; MASTER_PAYLOAD_WIDTH] {
    let mut payload = [0u8; MASTER_PAYLOAD_WIDTH];
    rng.set_word_pos(key as u128 * PAYLOAD_WORDS);
    rng.fill_bytes(&mut payload);
    payload
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterFileSummary {
    pub path: PathBuf,
    pub record_count: u64,
    pub body_bytes: u64,
    pub file_bytes: u64,
    /// CRC-32 of the body.
    pub checksum: u32,
}

pub fn file_bytes_for(count: u64) -> u64 {
    HEADER_LEN + count * MASTER_RECORD_WIDTH as u64 + count.div_ceil(INDEX_STRIDE) * INDEX_ENTRY_WIDTH
}

fn encode_header(count: u64) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[0..8].copy_from_slice(&MAGIC);
    h[8..12].copy_from_slice(&FORMAT_VERSION.to_be_bytes());
    h[12..16].copy_from_slice(&(MASTER_RECORD_WIDTH as u32).to_be_bytes());
    h[16..20].copy_from_slice(&(KEY_WIDTH as u32).to_be_bytes());
    h[20..24].copy_from_slice(&(INDEX_STRIDE as u32).to_be_bytes());
    h[24..32].copy_from_slice(&count.to_be_bytes());
    h
}

/// Streams sorted records into a master file.
pub struct MasterWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: u64,
    last_key: Option<u32>,
    index: Vec<(u32, u64)>,
    crc: crc32fast::Hasher,
}

impl MasterWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::with_capacity(1 << 20, File::create(&path)?);
        out.write_all(&encode_header(0))?;
        Ok(Self {
            path,
            out,
            count: 0,
            last_key: None,
            index: Vec::new(),
            crc: crc32fast::Hasher::new(),
        })
    }

    pub fn push(&mut self, record: &MasterRecord) -> Result<()> {
        if let Some(last) = self.last_key {
            if record.key <= last {
                return Err(Error::Domain(format!(
                    "master keys must be strictly increasing: {} after {}",
                    record.key, last
                )));
            }
        }
        if self.count % INDEX_STRIDE == 0 {
            self.index.push((record.key, self.count));
        }
        let bytes = record.to_bytes();
        self.crc.update(&bytes);
        self.out.write_all(&bytes)?;
        self.last_key = Some(record.key);
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<MasterFileSummary> {
        for (key, ordinal) in &self.index {
            self.out.write_all(&key.to_be_bytes())?;
            self.out.write_all(&ordinal.to_be_bytes())?;
        }
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        file.write_all(&encode_header(self.count))?;
        file.sync_all()?;
        Ok(MasterFileSummary {
            path: self.path,
            record_count: self.count,
            body_bytes: self.count * MASTER_RECORD_WIDTH as u64,
            file_bytes: file_bytes_for(self.count),
            checksum: self.crc.finalize(),
        })
    }
}

/// Writes `count` records with keys `1..=count` and seeded payloads.
pub fn generate_master(count: u64, seed: u64, path: impl AsRef<Path>) -> Result<MasterFileSummary> {
    generate_master_with_limit(count, seed, path, DEFAULT_MAX_FILE_BYTES)
}

pub fn generate_master_with_limit(
    count: u64,
    seed: u64,
    path: impl AsRef<Path>,
    max_file_bytes: u64,
) -> Result<MasterFileSummary> {
    if count > u32::MAX as u64 {
        return Err(Error::Capacity {
            requested: file_bytes_for(count),
            max: max_file_bytes,
        });
    }
    let requested = file_bytes_for(count);
    if requested > max_file_bytes {
        return Err(Error::Capacity {
            requested,
            max: max_file_bytes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut writer = MasterWriter::create(path)?;
    for key in 1..=count as u32 {
        let payload = payload_at(&mut rng, key);
        writer.push(&MasterRecord { key, payload })?;
    }
    writer.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoMode {
    /// Reads go through the OS page cache.
    Buffered,
    /// Reads bypass the page cache (O_DIRECT), so every partition load hits the device.
    Direct,
}

/// The set of join keys present in a master file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySpace {
    /// Keys are exactly `1..=count`.
    Dense { count: u32 },
    Explicit(Vec<u32>),
}

impl KeySpace {
    pub fn len(&self) -> usize {
        match self {
            KeySpace::Dense { count } => *count as usize,
            KeySpace::Explicit(keys) => keys.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key at position `i` in ascending order.
    pub fn key_at(&self, i: usize) -> u32 {
        match self {
            KeySpace::Dense { .. } => i as u32 + 1,
            KeySpace::Explicit(keys) => keys[i],
        }
    }

    pub fn contains(&self, key: u32) -> bool {
        match self {
            KeySpace::Dense { count } => key >= 1 && key <= *count,
            KeySpace::Explicit(keys) => keys.binary_search(&key).is_ok(),
        }
    }

    pub fn max_key(&self) -> Option<u32> {
        match self {
            KeySpace::Dense { count: 0 } => None,
            KeySpace::Dense { count } => Some(*count),
            KeySpace::Explicit(keys) => keys.last().copied(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    key: u32,
    ordinal: u64,
}

/// Open handle on a master file. Immutable; safe to share between threads.
#[derive(Debug)]
pub struct MasterStore {
    path: PathBuf,
    file: File,
    io_mode: IoMode,
    record_count: u64,
    index: Vec<IndexEntry>,
    max_key: Option<u32>,
}

pub fn open_master(path: impl AsRef<Path>) -> Result<MasterStore> {
    MasterStore::open(path, IoMode::Buffered)
}

impl MasterStore {
    /// Opens a master file. `IoMode::Direct` falls back to buffered reads when the
    /// filesystem rejects O_DIRECT; check [`MasterStore::io_mode`].
    pub fn open(path: impl AsRef<Path>, io_mode: IoMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        let format_err = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };
        let corrupt = |reason: String| Error::Corruption {
            path: path.clone(),
            reason,
        };

        if file_len < HEADER_LEN {
            return Err(format_err(format!("{file_len} bytes is shorter than the header")));
        }
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)?;
        if header[0..8] != MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let field = |at: usize| u32::from_be_bytes(header[at..at + 4].try_into().unwrap());
        let version = field(8);
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        if field(12) as usize != MASTER_RECORD_WIDTH || field(16) as usize != KEY_WIDTH {
            return Err(format_err(format!(
                "record/key width {}/{} (expected {MASTER_RECORD_WIDTH}/{KEY_WIDTH})",
                field(12),
                field(16)
            )));
        }
        if field(20) as u64 != INDEX_STRIDE {
            return Err(format_err(format!("index stride {} (expected {INDEX_STRIDE})", field(20))));
        }
        let record_count = u64::from_be_bytes(header[24..32].try_into().unwrap());
        let expected = file_bytes_for(record_count);
        if file_len != expected {
            return Err(corrupt(format!(
                "header declares {record_count} records ({expected} bytes) but file has {file_len} bytes"
            )));
        }

        let n_index = record_count.div_ceil(INDEX_STRIDE) as usize;
        let mut raw = vec![0u8; n_index * INDEX_ENTRY_WIDTH as usize];
        file.read_exact_at(&mut raw, HEADER_LEN + record_count * MASTER_RECORD_WIDTH as u64)?;
        let mut index = Vec::with_capacity(n_index);
        for (i, chunk) in raw.chunks_exact(INDEX_ENTRY_WIDTH as usize).enumerate() {
            let key = u32::from_be_bytes(chunk[0..4].try_into().unwrap());
            let ordinal = u64::from_be_bytes(chunk[4..12].try_into().unwrap());
            if ordinal != i as u64 * INDEX_STRIDE {
                return Err(corrupt(format!("index entry {i} references ordinal {ordinal}")));
            }
            if let Some(prev) = index.last() {
                let prev: &IndexEntry = prev;
                if key <= prev.key {
                    return Err(corrupt(format!("index keys not increasing at entry {i}")));
                }
            }
            index.push(IndexEntry { key, ordinal });
        }

        let file = match io_mode {
            IoMode::Buffered => file,
            IoMode::Direct => OpenOptions::new()
                .read(true)
                .custom_flags(libc::O_DIRECT)
                .open(&path)
                .unwrap_or(file),
        };
        let mut store = Self {
            path,
            file,
            io_mode,
            record_count,
            index,
            max_key: None,
        };
        if io_mode == IoMode::Direct && store.probe_direct().is_err() {
            store.file = File::open(&store.path)?;
            store.io_mode = IoMode::Buffered;
        }
        if record_count > 0 {
            store.max_key = Some(store.key_at_ordinal(record_count - 1)?);
        }
        Ok(store)
    }

    fn probe_direct(&self) -> Result<()> {
        let mut buf = AlignedBuf::new(DIRECT_ALIGN);
        self.file.read_at(buf.as_mut_slice(), 0)?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn io_mode(&self) -> IoMode {
        self.io_mode
    }

    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    pub fn min_key(&self) -> Option<u32> {
        self.index.first().map(|e| e.key)
    }

    pub fn max_key(&self) -> Option<u32> {
        self.max_key
    }

    pub fn key_space(&self) -> Result<KeySpace> {
        if self.record_count == 0 {
            return Ok(KeySpace::Dense { count: 0 });
        }
        if self.min_key() == Some(1) && self.max_key.map(u64::from) == Some(self.record_count) {
            return Ok(KeySpace::Dense {
                count: self.record_count as u32,
            });
        }
        Ok(KeySpace::Explicit(self.scan_records()?.iter().map(|r| r.key).collect()))
    }

    /// Appends the raw bytes of records `[ordinal, ordinal + n)` to `out`.
    fn read_range(&self, ordinal: u64, n: u64, out: &mut Vec<u8>) -> Result<()> {
        debug_assert!(ordinal + n <= self.record_count);
        let len = (n as usize) * MASTER_RECORD_WIDTH;
        let offset = HEADER_LEN + ordinal * MASTER_RECORD_WIDTH as u64;
        let tail = out.len();
        match self.io_mode {
            IoMode::Buffered => {
                out.resize(tail + len, 0);
                self.file.read_exact_at(&mut out[tail..], offset)?;
            }
            IoMode::Direct => {
                let align = DIRECT_ALIGN as u64;
                let start = offset & !(align - 1);
                let end = (offset + len as u64).div_ceil(align) * align;
                let mut buf = AlignedBuf::new((end - start) as usize);
                let need = (offset + len as u64 - start) as usize;
                let mut got = 0usize;
                while got < need {
                    // Chunks stay aligned: the device returns whole blocks until EOF.
                    let n = self.file.read_at(&mut buf.as_mut_slice()[got..], start + got as u64)?;
                    if n == 0 {
                        return Err(Error::Io(std::io::ErrorKind::UnexpectedEof.into()));
                    }
                    got += n;
                }
                let skip = (offset - start) as usize;
                out.extend_from_slice(&buf.as_slice()[skip..skip + len]);
            }
        }
        Ok(())
    }

    /// Appends `n` records in cyclic order starting at `ordinal`.
    fn read_cyclic(&self, mut ordinal: u64, n: u64, out: &mut Vec<u8>) -> Result<()> {
        let mut remaining = n;
        while remaining > 0 {
            let run = remaining.min(self.record_count - ordinal);
            self.read_range(ordinal, run, out)?;
            remaining -= run;
            ordinal = (ordinal + run) % self.record_count;
        }
        Ok(())
    }

    fn key_at_ordinal(&self, ordinal: u64) -> Result<u32> {
        let mut buf = Vec::with_capacity(MASTER_RECORD_WIDTH);
        self.read_range(ordinal, 1, &mut buf)?;
        Ok(u32::from_be_bytes(buf[..4].try_into().unwrap()))
    }

    pub fn record_at(&self, ordinal: u64) -> Result<MasterRecord> {
        if ordinal >= self.record_count {
            return Err(Error::Domain(format!(
                "ordinal {ordinal} out of range for {} records",
                self.record_count
            )));
        }
        let mut buf = Vec::with_capacity(MASTER_RECORD_WIDTH);
        self.read_range(ordinal, 1, &mut buf)?;
        Ok(MasterRecord::from_bytes(&buf))
    }

    /// Index block that may hold the first key >= `key`: returns `(base, len)` where
    /// the candidate lies at ordinals `base + 1 ..= base + len`, or `None` when
    /// ordinal 0 already qualifies.
    fn locate_block(&self, key: u32) -> Option<(u64, u64)> {
        let p = self.index.partition_point(|e| e.key < key);
        if p == 0 {
            return None;
        }
        let base = self.index[p - 1].ordinal;
        let next = self.index.get(p).map_or(self.record_count, |e| e.ordinal);
        Some((base, next - base))
    }

    pub fn contains_key(&self, key: u32) -> Result<bool> {
        if self.record_count == 0 {
            return Ok(false);
        }
        let Some((base, len)) = self.locate_block(key) else {
            return Ok(self.index[0].key == key);
        };
        let mut buf = Vec::with_capacity(len as usize * MASTER_RECORD_WIDTH);
        self.read_range(base, len, &mut buf)?;
        Ok(buf
            .chunks_exact(MASTER_RECORD_WIDTH)
            .any(|r| u32::from_be_bytes(r[..4].try_into().unwrap()) == key))
    }

    pub fn read_partition(&self, start_key: u32, d_b: usize) -> Result<Partition> {
        let mut partition = Partition::default();
        self.read_partition_into(start_key, d_b, &mut partition)?;
        Ok(partition)
    }

    /// Loads `min(d_b, count)` records in cyclic file order starting at the first
    /// record whose key is `>= start_key`, reusing `partition`'s allocation.
    pub fn read_partition_into(&self, start_key: u32, d_b: usize, partition: &mut Partition) -> Result<()> {
        if self.record_count == 0 {
            return Err(Error::EmptyRelation);
        }
        if d_b == 0 {
            return Err(Error::Domain("partition size must be at least 1".into()));
        }
        let n = (d_b as u64).min(self.record_count);
        let data = &mut partition.data;
        data.clear();
        let (base, lead) = self.locate_block(start_key).unwrap_or((0, 0));
        // One read covers the candidate block and the partition after it.
        self.read_cyclic(base, lead + n, data)?;
        let offset = (1..lead)
            .find(|&i| {
                let at = i as usize * MASTER_RECORD_WIDTH;
                u32::from_be_bytes(data[at..at + 4].try_into().unwrap()) >= start_key
            })
            .unwrap_or(lead);
        let skip = offset as usize * MASTER_RECORD_WIDTH;
        let keep = n as usize * MASTER_RECORD_WIDTH;
        data.copy_within(skip..skip + keep, 0);
        data.truncate(keep);
        let start = base + offset;
        partition.start_key = start_key;
        partition.start_ordinal = start % self.record_count;
        partition.wrapped = start >= self.record_count || partition.start_ordinal + n > self.record_count;
        Ok(())
    }

    /// Reads every record in file order.
    pub fn scan_records(&self) -> Result<Vec<MasterRecord>> {
        let mut file = BufReader::with_capacity(1 << 20, File::open(&self.path)?);
        file.seek(SeekFrom::Start(HEADER_LEN))?;
        let mut out = Vec::with_capacity(self.record_count as usize);
        let mut buf = [0u8; MASTER_RECORD_WIDTH];
        for _ in 0..self.record_count {
            file.read_exact(&mut buf)?;
            out.push(MasterRecord::from_bytes(&buf));
        }
        Ok(out)
    }
}

/// A contiguous (cyclic) run of master records held as raw bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    start_key: u32,
    start_ordinal: u64,
    wrapped: bool,
    data: Vec<u8>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.data.len() / MASTER_RECORD_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The key this partition was requested with.
    pub fn start_key(&self) -> u32 {
        self.start_key
    }

    pub fn start_ordinal(&self) -> u64 {
        self.start_ordinal
    }

    pub fn wrapped(&self) -> bool {
        self.wrapped
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn key(&self, i: usize) -> u32 {
        let at = i * MASTER_RECORD_WIDTH;
        u32::from_be_bytes(self.data[at..at + KEY_WIDTH].try_into().unwrap())
    }

    #[inline]
    pub fn payload(&self, i: usize) -> &[u8; MASTER_PAYLOAD_WIDTH] {
        let at = i * MASTER_RECORD_WIDTH + KEY_WIDTH;
        self.data[at..at + MASTER_PAYLOAD_WIDTH].try_into().unwrap()
    }

    pub fn record(&self, i: usize) -> MasterRecord {
        MasterRecord {
            key: self.key(i),
            payload: *self.payload(i),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len()).map(|i| self.key(i))
    }

    /// True when the requested start key itself is the first record.
    pub fn starts_at_requested_key(&self) -> bool {
        !self.is_empty() && self.key(0) == self.start_key
    }
}

/// Heap buffer aligned for O_DIRECT transfers.
struct AlignedBuf {
    ptr: NonNull<u8>,
    layout: Layout,
}

impl AlignedBuf {
    fn new(len: usize) -> Self {
        let layout = Layout::from_size_align(len.max(DIRECT_ALIGN), DIRECT_ALIGN).unwrap();
        // SAFETY: layout has non-zero size.
        let ptr = unsafe { alloc::alloc(layout) };
        let ptr = NonNull::new(ptr).unwrap_or_else(|| alloc::handle_alloc_error(layout));
        Self { ptr, layout }
    }

    fn as_slice(&self) -> &[u8] {
        // SAFETY: ptr is valid for layout.size() bytes for the lifetime of self.
        // Contents may be uninitialized before a read; callers only view filled ranges.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.layout.size()) }
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        // SAFETY: as above, with unique access through &mut self.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.layout.size()) }
    }
}

impl Drop for AlignedBuf {
    fn drop(&mut self) {
        // SAFETY: allocated in `new` with the same layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr(), self.layout) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generated(count: u64) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.master");
        generate_master(count, 7, &path).unwrap();
        (dir, path)
    }

    #[test]
    fn header_round_trip_and_sizes() {
        let (_dir, path) = generated(1000);
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 32 + 1000 * 120 + 16 * 12);
        let store = open_master(&path).unwrap();
        assert_eq!(store.record_count(), 1000);
        assert_eq!(store.min_key(), Some(1));
        assert_eq!(store.max_key(), Some(1000));
        assert_eq!(store.key_space().unwrap(), KeySpace::Dense { count: 1000 });
    }

    #[test]
    fn empty_file_is_valid() {
        let (_dir, path) = generated(0);
        let store = open_master(&path).unwrap();
        assert_eq!(store.record_count(), 0);
        assert!(matches!(store.read_partition(1, 10), Err(Error::EmptyRelation)));
        assert!(!store.contains_key(1).unwrap());
    }

    #[test]
    fn flipped_magic_is_format_error() {
        let (_dir, path) = generated(10);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(open_master(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_is_corruption() {
        let (_dir, path) = generated(10);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(open_master(&path), Err(Error::Corruption { .. })));
    }

    #[test]
    fn capacity_limit() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_master_with_limit(1000, 1, dir.path().join("x"), 1000).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn payload_is_seeded_per_key() {
        let (_dir, path) = generated(200);
        let store = open_master(&path).unwrap();
        let rec = store.record_at(150).unwrap();
        assert_eq!(rec.key, 151);
        assert_eq!(rec.payload, master_payload(7, 151));
        assert_ne!(master_payload(7, 151), master_payload(8, 151));
    }

    #[test]
    fn sparse_keys_resolve_to_next_present_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse");
        let mut w = MasterWriter::create(&path).unwrap();
        for key in (10..=2000).step_by(10) {
            w.push(&MasterRecord {
                key,
                payload: [key as u8; MASTER_PAYLOAD_WIDTH],
            })
            .unwrap();
        }
        w.finish().unwrap();
        let store = open_master(&path).unwrap();
        let p = store.read_partition(655, 3).unwrap();
        assert_eq!(p.keys().collect::<Vec<_>>(), vec![660, 670, 680]);
        assert!(!p.starts_at_requested_key());
        assert!(store.contains_key(660).unwrap());
        assert!(!store.contains_key(655).unwrap());
        let p = store.read_partition(5000, 2).unwrap();
        assert_eq!(p.keys().collect::<Vec<_>>(), vec![10, 20]);
        assert!(p.wrapped());
        assert!(matches!(store.key_space().unwrap(), KeySpace::Explicit(k) if k.len() == 200));
    }

    #[test]
    fn writer_rejects_unsorted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MasterWriter::create(dir.path().join("bad")).unwrap();
        let rec = |key| MasterRecord {
            key,
            payload: [0; MASTER_PAYLOAD_WIDTH],
        };
        w.push(&rec(5)).unwrap();
        assert!(w.push(&rec(5)).is_err());
    }

    #[test]
    fn direct_and_buffered_reads_agree() {
        let (_dir, path) = generated(3000);
        let buffered = MasterStore::open(&path, IoMode::Buffered).unwrap();
        let direct = MasterStore::open(&path, IoMode::Direct).unwrap();
        for start in [1, 63, 64, 65, 1234, 2999, 3000, 3001] {
            assert_eq!(
                buffered.read_partition(start, 850).unwrap(),
                direct.read_partition(start, 850).unwrap()
            );
        }
    }
}
