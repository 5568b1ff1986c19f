//! The `SKVC` attention cache: self-attention keys and values recorded while
//! inverting one style image, stored per (layer, timestep, head).
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! header   magic "SKVC" | format_version u32 | source_image_id u64 | entry_count u32
//! index    entry_count × (layer u16 | timestep u16 | head u16 | n_tokens u32 | dim u32 | byte_offset u64)
//! payload  per entry: K (n_tokens × dim f32) then V (n_tokens × dim f32)
//! ```
//!
//! `byte_offset` is absolute. Entries are stored in key order and payloads
//! are contiguous, so offsets are strictly increasing and the last payload
//! ends exactly at the end of the file.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::binio::{decode_f32s, read_exact_at, LeCursor, LeWriter};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

pub const CACHE_MAGIC: [u8; 4] = *b"SKVC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_BYTES: u64 = 4 + 4 + 8 + 4;
pub const CACHE_INDEX_ENTRY_BYTES: u64 = 2 + 2 + 2 + 4 + 4 + 8;

/// Position of one attention head's features. Timestep is the index into
/// the sampling schedule, 0 being the most noised step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub layer: u16,
    pub timestep: u16,
    pub head: u16,
}

impl CacheKey {
    pub fn new(layer: u16, timestep: u16, head: u16) -> Self {
        Self {
            layer,
            timestep,
            head,
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.layer, self.timestep, self.head)
    }
}

/// Keys and values of one head at one step; row `i` of `k` and row `i` of
/// `v` belong to the same token.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub k: FeatureMatrix,
    pub v: FeatureMatrix,
}

impl CacheEntry {
    pub fn new(key: CacheKey, k: FeatureMatrix, v: FeatureMatrix) -> Result<Self> {
        if k.rows() != v.rows() || k.cols() != v.cols() {
            return Err(Error::shape(format!(
                "entry {key}: K is {}x{}, V is {}x{}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        Ok(Self { key, k, v })
    }

    pub fn n_tokens(&self) -> usize {
        self.k.rows()
    }

    pub fn dim(&self) -> usize {
        self.k.cols()
    }

    /// Bytes taken by K and V in the payload section.
    pub fn payload_bytes(&self) -> u64 {
        payload_len(self.n_tokens() as u32, self.dim() as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub key: CacheKey,
    pub n_tokens: u32,
    pub dim: u32,
    pub byte_offset: u64,
}

impl IndexEntry {
    pub fn payload_bytes(&self) -> u64 {
        payload_len(self.n_tokens, self.dim)
    }
}

pub(crate) fn payload_len(n_tokens: u32, dim: u32) -> u64 {
    2 * n_tokens as u64 * dim as u64 * 4
}

pub(crate) fn check_sorted_unique<'a>(keys: impl Iterator<Item = &'a CacheKey>) -> Result<()> {
    let mut prev: Option<&CacheKey> = None;
    for key in keys {
        if let Some(p) = prev {
            if key == p {
                return Err(Error::DuplicateKey(*key));
            }
            if key < p {
                return Err(Error::Unsorted(*key));
            }
        }
        prev = Some(key);
    }
    Ok(())
}

/// Writes `entries` as an SKVC file. Entries must be sorted by key with no
/// duplicates. The file is synced before returning.
pub fn write_cache(entries: &[CacheEntry], source_image_id: u64, path: &Path) -> Result<()> {
    check_sorted_unique(entries.iter().map(|e| &e.key))?;
    let entry_count = u32::try_from(entries.len())
        .map_err(|_| Error::invalid("too many cache entries"))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    let mut w = LeWriter::new(BufWriter::new(file));
    w.bytes(&CACHE_MAGIC).map_err(io)?;
    w.u32(CACHE_VERSION).map_err(io)?;
    w.u64(source_image_id).map_err(io)?;
    w.u32(entry_count).map_err(io)?;

    let mut offset = CACHE_HEADER_BYTES + CACHE_INDEX_ENTRY_BYTES * entries.len() as u64;
    for e in entries {
        w.u16(e.key.layer).map_err(io)?;
        w.u16(e.key.timestep).map_err(io)?;
        w.u16(e.key.head).map_err(io)?;
        w.u32(e.n_tokens() as u32).map_err(io)?;
        w.u32(e.dim() as u32).map_err(io)?;
        w.u64(offset).map_err(io)?;
        offset += e.payload_bytes();
    }
    for e in entries {
        w.f32s(e.k.as_slice()).map_err(io)?;
        w.f32s(e.v.as_slice()).map_err(io)?;
    }
    debug_assert_eq!(w.written(), offset);
    let file = w
        .into_inner()
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(io)?;
    Ok(())
}

/// Read handle over an SKVC file. Only the header and index are loaded;
/// payloads are read on demand with positioned reads, so a reader can be
/// shared between threads.
#[derive(Debug)]
pub struct CacheReader {
    path: PathBuf,
    file: File,
    source_image_id: u64,
    index: Vec<IndexEntry>,
    bytes_read: AtomicU64,
}

impl CacheReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let bytes_read = AtomicU64::new(0);

        let mut header = [0u8; CACHE_HEADER_BYTES as usize];
        if file_len < CACHE_HEADER_BYTES {
            return Err(Error::TruncatedIndex { path });
        }
        read_exact_at(&file, &mut header, 0).map_err(|e| Error::io(&path, e))?;
        bytes_read.fetch_add(header.len() as u64, Ordering::Relaxed);
        let mut cur = LeCursor::new(&header);
        let magic = cur.array::<4>().unwrap();
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic {
                path,
                expected: CACHE_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32().unwrap();
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion {
                path,
                expected: CACHE_VERSION,
                found: version,
            });
        }
        let source_image_id = cur.u64().unwrap();
        let entry_count = cur.u32().unwrap() as u64;

        let index_bytes = entry_count * CACHE_INDEX_ENTRY_BYTES;
        if file_len < CACHE_HEADER_BYTES + index_bytes {
            return Err(Error::TruncatedIndex { path });
        }
        let mut raw = vec![0u8; index_bytes as usize];
        read_exact_at(&file, &mut raw, CACHE_HEADER_BYTES).map_err(|e| Error::io(&path, e))?;
        bytes_read.fetch_add(raw.len() as u64, Ordering::Relaxed);

        let mut cur = LeCursor::new(&raw);
        let mut index = Vec::with_capacity(entry_count as usize);
        for _ in 0..entry_count {
            let key = CacheKey::new(cur.u16().unwrap(), cur.u16().unwrap(), cur.u16().unwrap());
            index.push(IndexEntry {
                key,
                n_tokens: cur.u32().unwrap(),
                dim: cur.u32().unwrap(),
                byte_offset: cur.u64().unwrap(),
            });
        }
        validate_index(&path, &index, CACHE_HEADER_BYTES + index_bytes, file_len)?;

        Ok(Self {
            path,
            file,
            source_image_id,
            index,
            bytes_read,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn source_image_id(&self) -> u64 {
        self.source_image_id
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn keys(&self) -> impl Iterator<Item = CacheKey> + '_ {
        self.index.iter().map(|e| e.key)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Total bytes read from the file so far, header and index included.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    /// Sum of K/V payload bytes over all entries.
    pub fn payload_bytes(&self) -> u64 {
        self.index.iter().map(IndexEntry::payload_bytes).sum()
    }

    pub fn lookup(&self, key: CacheKey) -> Result<&IndexEntry> {
        self.index
            .binary_search_by(|e| e.key.cmp(&key))
            .map(|i| &self.index[i])
            .map_err(|_| Error::EntryNotFound(key))
    }

    pub fn read_entry(&self, key: CacheKey) -> Result<CacheEntry> {
        let entry = *self.lookup(key)?;
        let half = (entry.payload_bytes() / 2) as usize;
        let mut buf = vec![0u8; 2 * half];
        read_exact_at(&self.file, &mut buf, entry.byte_offset)
            .map_err(|e| Error::io(&self.path, e))?;
        self.bytes_read.fetch_add(buf.len() as u64, Ordering::Relaxed);
        let (n, d) = (entry.n_tokens as usize, entry.dim as usize);
        let k = FeatureMatrix::new(n, d, decode_f32s(&buf[..half]))?;
        let v = FeatureMatrix::new(n, d, decode_f32s(&buf[half..]))?;
        CacheEntry::new(key, k, v)
    }
}

pub(crate) fn validate_index(
    path: &Path,
    index: &[IndexEntry],
    payload_start: u64,
    file_len: u64,
) -> Result<()> {
    let corrupt = |reason: String| Error::CorruptIndex {
        path: path.to_path_buf(),
        reason,
    };
    for pair in index.windows(2) {
        if pair[1].key <= pair[0].key {
            return Err(corrupt(format!("key {} out of order", pair[1].key)));
        }
    }
    let mut expected = payload_start;
    for e in index {
        if e.byte_offset != expected {
            return Err(corrupt(format!(
                "entry {} at offset {}, expected {expected}",
                e.key, e.byte_offset
            )));
        }
        expected = expected
            .checked_add(e.payload_bytes())
            .ok_or_else(|| corrupt("payload size overflow".into()))?;
    }
    if expected > file_len {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            needed: expected,
            actual: file_len,
        });
    }
    if expected < file_len {
        return Err(corrupt(format!(
            "{} trailing bytes after payload",
            file_len - expected
        )));
    }
    Ok(())
}

/// One reader's share of a group read: its K and V rows for the key.
#[derive(Clone, Debug)]
pub struct GroupChunk {
    pub reader: usize,
    pub k: FeatureMatrix,
    pub v: FeatureMatrix,
}

/// Streams the rows stored under one key from several caches, one reader at
/// a time, in reader order.
pub struct GroupRows<'a> {
    readers: &'a [CacheReader],
    key: CacheKey,
    next: usize,
    dim: Option<usize>,
}

impl Iterator for GroupRows<'_> {
    type Item = Result<GroupChunk>;

    fn next(&mut self) -> Option<Self::Item> {
        let reader = self.next;
        let r = self.readers.get(reader)?;
        self.next += 1;
        let entry = match r.read_entry(self.key) {
            Ok(e) => e,
            Err(e) => return Some(Err(e)),
        };
        match self.dim {
            Some(d) if d != entry.dim() => {
                self.next = self.readers.len();
                return Some(Err(Error::shape(format!(
                    "key {}: {} has dim {}, earlier caches have {d}",
                    self.key,
                    r.path().display(),
                    entry.dim()
                ))));
            }
            _ => self.dim = Some(entry.dim()),
        }
        Some(Ok(GroupChunk {
            reader,
            k: entry.k,
            v: entry.v,
        }))
    }
}

/// Streaming view of `key` across `readers`.
pub fn group_rows(readers: &[CacheReader], key: CacheKey) -> GroupRows<'_> {
    GroupRows {
        readers,
        key,
        next: 0,
        dim: None,
    }
}

/// Concatenated (K, V) rows for `key` from every reader: reader order first,
/// then token order.
pub fn iter_group(readers: &[CacheReader], key: CacheKey) -> Result<(FeatureMatrix, FeatureMatrix)> {
    if readers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let chunks = group_rows(readers, key).collect::<Result<Vec<_>>>()?;
    let ks: Vec<&FeatureMatrix> = chunks.iter().map(|c| &c.k).collect();
    let vs: Vec<&FeatureMatrix> = chunks.iter().map(|c| &c.v).collect();
    Ok((FeatureMatrix::vstack(&ks)?, FeatureMatrix::vstack(&vs)?))
}

/// Prints one line per entry: `layer,timestep,head,n_tokens,dim,offset`.
pub fn write_index_listing(reader: &CacheReader, out: &mut impl Write) -> std::io::Result<()> {
    for e in reader.index() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.key.layer, e.key.timestep, e.key.head, e.n_tokens, e.dim, e.byte_offset
        )?;
    }
    Ok(())
}
