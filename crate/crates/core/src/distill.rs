//! Distills the attention caches of several style images into one
//! single-image-sized [`StyleBank`].
//!
//! For every (layer, timestep, head) the value rows of all images are
//! clustered; the value row nearest each centroid is kept together with the
//! key row it was recorded with.
//!
//! The `SKVB` container mirrors `SKVC`, with a source table between the
//! index and the payload:
//!
//! ```text
//! header   magic "SKVB" | format_version u32 | n_style_images u32 | seed u64
//!          | k_policy_tag u32 | k_policy_value f32 | entry_count u32
//! index    entry_count × (layer u16 | timestep u16 | head u16 | k u32 | dim u32 | byte_offset u64)
//! sources  per entry, k × (reader u32 | row u32)
//! payload  per entry: K* (k × dim f32) then V* (k × dim f32)
//! ```

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{read_file, write_file_synced, LeCursor, LeWriter};
use crate::cache::{
    check_sorted_unique, group_rows, payload_len, validate_index, CacheKey, CacheReader,
    IndexEntry, CACHE_INDEX_ENTRY_BYTES,
};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, select_representatives, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::matrix::FeatureMatrix;

pub const BANK_MAGIC: [u8; 4] = *b"SKVB";
pub const BANK_VERSION: u32 = 1;
pub const BANK_HEADER_BYTES: u64 = 4 + 4 + 4 + 8 + 4 + 4 + 4;

/// How many representatives to keep per key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KPolicy {
    /// The token count of a single style image at that key.
    SingleImage,
    /// `round(factor × single-image count)`, clamped to `[1, total rows]`.
    Scaled(f32),
    /// A fixed count, clamped to the total row count.
    Fixed(u32),
    /// Every row of every image (no compression).
    All,
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::SingleImage
    }
}

impl KPolicy {
    pub fn k_for(&self, single: usize, total: usize) -> usize {
        let k = match *self {
            KPolicy::SingleImage => single,
            KPolicy::Scaled(f) => (f as f64 * single as f64).round() as usize,
            KPolicy::Fixed(k) => k as usize,
            KPolicy::All => total,
        };
        k.clamp(1, total.max(1))
    }

    fn encode(&self) -> (u32, f32) {
        match *self {
            KPolicy::SingleImage => (0, 1.0),
            KPolicy::Scaled(f) => (1, f),
            KPolicy::Fixed(k) => (2, k as f32),
            KPolicy::All => (3, 0.0),
        }
    }

    fn decode(tag: u32, value: f32) -> Option<Self> {
        match tag {
            0 => Some(KPolicy::SingleImage),
            1 => Some(KPolicy::Scaled(value)),
            2 => Some(KPolicy::Fixed(value as u32)),
            3 => Some(KPolicy::All),
            _ => None,
        }
    }
}

/// Origin of a representative row: which style cache, which token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceIndex {
    pub reader: u32,
    pub row: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub key: CacheKey,
    pub k: FeatureMatrix,
    pub v: FeatureMatrix,
    pub sources: Vec<SourceIndex>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    pub n_style_images: u32,
    pub seed: u64,
    pub k_policy: KPolicy,
    /// Sorted by key.
    pub entries: Vec<BankEntry>,
}

impl StyleBank {
    pub fn get(&self, key: CacheKey) -> Result<&BankEntry> {
        self.entries
            .binary_search_by(|e| e.key.cmp(&key))
            .map(|i| &self.entries[i])
            .map_err(|_| Error::EntryNotFound(key))
    }

    pub fn keys(&self) -> impl Iterator<Item = CacheKey> + '_ {
        self.entries.iter().map(|e| e.key)
    }

    /// Number of denoising steps covered, from the largest timestep index.
    pub fn steps(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.key.timestep as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Bytes of K*/V* features, the quantity comparable with
    /// [`CacheReader::payload_bytes`].
    pub fn payload_bytes(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| payload_len(e.k.rows() as u32, e.k.cols() as u32))
            .sum()
    }
}

/// Options for [`distill`].
#[derive(Clone, Copy, Debug)]
pub struct DistillOptions {
    pub k_policy: KPolicy,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f32,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            k_policy: KPolicy::SingleImage,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Per-key clustering seed, independent of the order keys are processed in.
fn key_seed(seed: u64, key: CacheKey) -> u64 {
    let mut z = seed
        ^ (key.layer as u64) << 32
        ^ (key.timestep as u64) << 16
        ^ key.head as u64;
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_same_keys(caches: &[CacheReader]) -> Result<Vec<CacheKey>> {
    let all: BTreeSet<CacheKey> = caches.iter().flat_map(|c| c.keys()).collect();
    let mut missing = BTreeSet::new();
    for c in caches {
        let have: BTreeSet<CacheKey> = c.keys().collect();
        missing.extend(all.difference(&have).copied());
    }
    if !missing.is_empty() {
        return Err(Error::InconsistentKeys {
            missing: missing.into_iter().collect(),
        });
    }
    Ok(all.into_iter().collect())
}

fn distill_key(caches: &[CacheReader], key: CacheKey, opts: &DistillOptions) -> Result<BankEntry> {
    let mut ks = Vec::with_capacity(caches.len());
    let mut vs = Vec::with_capacity(caches.len());
    let mut origin = Vec::new();
    for chunk in group_rows(caches, key) {
        let chunk = chunk?;
        origin.extend((0..chunk.k.rows()).map(|row| SourceIndex {
            reader: chunk.reader as u32,
            row: row as u32,
        }));
        ks.push(chunk.k);
        vs.push(chunk.v);
    }
    let single = ks[0].rows();
    let points_k = FeatureMatrix::vstack(&ks.iter().collect::<Vec<_>>())?;
    let points_v = FeatureMatrix::vstack(&vs.iter().collect::<Vec<_>>())?;
    drop((ks, vs));

    let k = opts.k_policy.k_for(single, points_v.rows());
    let clusters = kmeans(&points_v, k, key_seed(opts.seed, key), opts.max_iters, opts.tol)?;
    let reps = select_representatives(&points_v, &points_k, &clusters)?;
    Ok(BankEntry {
        key,
        k: reps.k,
        v: reps.v,
        sources: reps.rows.iter().map(|&i| origin[i]).collect(),
    })
}

/// Builds a style bank from one cache per style image.
///
/// Keys are processed in parallel on the current rayon pool; each key is
/// clustered with a seed derived from `opts.seed` and the key alone, so the
/// result does not depend on the thread count.
pub fn distill(caches: &[CacheReader], opts: &DistillOptions) -> Result<StyleBank> {
    if caches.is_empty() {
        return Err(Error::EmptyInput);
    }
    let keys = check_same_keys(caches)?;
    let entries = keys
        .par_iter()
        .map(|&key| distill_key(caches, key, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleBank {
        n_style_images: caches.len() as u32,
        seed: opts.seed,
        k_policy: opts.k_policy,
        entries,
    })
}

pub fn write_bank(bank: &StyleBank, path: &Path) -> Result<()> {
    check_sorted_unique(bank.entries.iter().map(|e| &e.key))?;
    for e in &bank.entries {
        if e.k.rows() != e.v.rows() || e.k.cols() != e.v.cols() || e.sources.len() != e.k.rows() {
            return Err(Error::shape(format!("bank entry {} has inconsistent shapes", e.key)));
        }
    }
    let io = |e| Error::io(path, e);
    let mut w = LeWriter::new(Vec::new());
    let (tag, value) = bank.k_policy.encode();
    w.bytes(&BANK_MAGIC).map_err(io)?;
    w.u32(BANK_VERSION).map_err(io)?;
    w.u32(bank.n_style_images).map_err(io)?;
    w.u64(bank.seed).map_err(io)?;
    w.u32(tag).map_err(io)?;
    w.f32(value).map_err(io)?;
    w.u32(bank.entries.len() as u32).map_err(io)?;

    let source_bytes: u64 = bank.entries.iter().map(|e| 8 * e.sources.len() as u64).sum();
    let mut offset =
        BANK_HEADER_BYTES + CACHE_INDEX_ENTRY_BYTES * bank.entries.len() as u64 + source_bytes;
    for e in &bank.entries {
        w.u16(e.key.layer).map_err(io)?;
        w.u16(e.key.timestep).map_err(io)?;
        w.u16(e.key.head).map_err(io)?;
        w.u32(e.k.rows() as u32).map_err(io)?;
        w.u32(e.k.cols() as u32).map_err(io)?;
        w.u64(offset).map_err(io)?;
        offset += payload_len(e.k.rows() as u32, e.k.cols() as u32);
    }
    for e in &bank.entries {
        for s in &e.sources {
            w.u32(s.reader).map_err(io)?;
            w.u32(s.row).map_err(io)?;
        }
    }
    for e in &bank.entries {
        w.f32s(e.k.as_slice()).map_err(io)?;
        w.f32s(e.v.as_slice()).map_err(io)?;
    }
    write_file_synced(path, &w.into_inner())
}

pub fn open_bank(path: &Path) -> Result<StyleBank> {
    let bytes = read_file(path)?;
    let file_len = bytes.len() as u64;
    let truncated = || Error::TruncatedIndex {
        path: path.to_path_buf(),
    };
    let mut cur = LeCursor::new(&bytes);
    let magic = cur.array::<4>().ok_or_else(truncated)?;
    if magic != BANK_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: BANK_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != BANK_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            expected: BANK_VERSION,
            found: version,
        });
    }
    let n_style_images = cur.u32().ok_or_else(truncated)?;
    let seed = cur.u64().ok_or_else(truncated)?;
    let tag = cur.u32().ok_or_else(truncated)?;
    let value = cur.f32().ok_or_else(truncated)?;
    let k_policy = KPolicy::decode(tag, value).ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        reason: format!("unknown k policy tag {tag}"),
    })?;
    let count = cur.u32().ok_or_else(truncated)? as usize;

    let mut index = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        index.push(IndexEntry {
            key: CacheKey::new(
                cur.u16().ok_or_else(truncated)?,
                cur.u16().ok_or_else(truncated)?,
                cur.u16().ok_or_else(truncated)?,
            ),
            n_tokens: cur.u32().ok_or_else(truncated)?,
            dim: cur.u32().ok_or_else(truncated)?,
            byte_offset: cur.u64().ok_or_else(truncated)?,
        });
    }
    let mut sources = Vec::with_capacity(count.min(1 << 20));
    for e in &index {
        let mut s = Vec::with_capacity(e.n_tokens as usize);
        for _ in 0..e.n_tokens {
            s.push(SourceIndex {
                reader: cur.u32().ok_or_else(truncated)?,
                row: cur.u32().ok_or_else(truncated)?,
            });
        }
        sources.push(s);
    }
    let payload_start = file_len - cur.remaining() as u64;
    validate_index(path, &index, payload_start, file_len)?;

    let mut entries = Vec::with_capacity(index.len());
    for (e, sources) in index.iter().zip(sources) {
        let (n, d) = (e.n_tokens as usize, e.dim as usize);
        // validate_index guarantees these reads succeed
        let k = FeatureMatrix::new(n, d, cur.f32s(n * d).ok_or_else(truncated)?)?;
        let v = FeatureMatrix::new(n, d, cur.f32s(n * d).ok_or_else(truncated)?)?;
        entries.push(BankEntry {
            key: e.key,
            k,
            v,
            sources,
        });
    }
    Ok(StyleBank {
        n_style_images,
        seed,
        k_policy,
        entries,
    })
}

/// One line per entry: `layer,timestep,head,k,dim`.
pub fn write_bank_listing(bank: &StyleBank, out: &mut impl Write) -> std::io::Result<()> {
    for e in &bank.entries {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.key.layer,
            e.key.timestep,
            e.key.head,
            e.k.rows(),
            e.k.cols()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{write_cache, CacheEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_cache(dir: &Path, name: &str, seed: u64, tokens: usize) -> CacheReader {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for layer in 0..2 {
            for t in 0..2 {
                for head in 0..2 {
                    let mut m = || FeatureMatrix::from_fn(tokens, 4, |_, _| StandardNormal.sample(&mut rng));
                    let k = m();
                    let v = m();
                    entries.push(CacheEntry::new(CacheKey::new(layer, t, head), k, v).unwrap());
                }
            }
        }
        let path = dir.join(name);
        write_cache(&entries, seed, &path).unwrap();
        CacheReader::open(&path).unwrap()
    }

    #[test]
    fn single_image_bank_is_that_image() {
        let dir = tempfile::tempdir().unwrap();
        let caches = vec![random_cache(dir.path(), "a.skvc", 1, 12)];
        let bank = distill(&caches, &DistillOptions::default()).unwrap();
        assert_eq!(bank.steps(), 2);
        for e in &bank.entries {
            let src = caches[0].read_entry(e.key).unwrap();
            assert_eq!(e.k, src.k);
            assert_eq!(e.v, src.v);
        }
    }

    #[test]
    fn membership_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let caches: Vec<_> = (0..3)
            .map(|i| random_cache(dir.path(), &format!("{i}.skvc"), 10 + i, 10))
            .collect();
        let bank = distill(&caches, &DistillOptions { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(bank.n_style_images, 3);
        for e in &bank.entries {
            assert_eq!(e.k.rows(), 10);
            for (j, s) in e.sources.iter().enumerate() {
                let src = caches[s.reader as usize].read_entry(e.key).unwrap();
                assert_eq!(e.k.row(j), src.k.row(s.row as usize));
                assert_eq!(e.v.row(j), src.v.row(s.row as usize));
            }
        }
        assert!(bank.payload_bytes() <= caches[0].payload_bytes());
    }

    #[test]
    fn saturated_policy_equals_concatenation() {
        let dir = tempfile::tempdir().unwrap();
        let caches: Vec<_> = (0..2)
            .map(|i| random_cache(dir.path(), &format!("{i}.skvc"), 20 + i, 6))
            .collect();
        let bank = distill(
            &caches,
            &DistillOptions {
                k_policy: KPolicy::All,
                ..Default::default()
            },
        )
        .unwrap();
        for e in &bank.entries {
            let (k, v) = crate::cache::iter_group(&caches, e.key).unwrap();
            assert_eq!(e.k, k);
            assert_eq!(e.v, v);
        }
    }

    #[test]
    fn inconsistent_keys_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let a = random_cache(dir.path(), "a.skvc", 1, 4);
        let path = dir.path().join("b.skvc");
        let only = a.read_entry(CacheKey::new(0, 0, 0)).unwrap();
        write_cache(&[only], 2, &path).unwrap();
        let b = CacheReader::open(&path).unwrap();
        let err = distill(&[a, b], &DistillOptions::default()).unwrap_err();
        match err {
            Error::InconsistentKeys { missing } => assert_eq!(missing.len(), 7),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bank_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let caches: Vec<_> = (0..2)
            .map(|i| random_cache(dir.path(), &format!("{i}.skvc"), 30 + i, 8))
            .collect();
        let bank = distill(
            &caches,
            &DistillOptions {
                k_policy: KPolicy::Scaled(0.5),
                seed: 77,
                ..Default::default()
            },
        )
        .unwrap();
        let path = dir.path().join("bank.skvb");
        write_bank(&bank, &path).unwrap();
        assert_eq!(open_bank(&path).unwrap(), bank);

        let mut listing = Vec::new();
        write_bank_listing(&bank, &mut listing).unwrap();
        let text = String::from_utf8(listing).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().all(|l| l.ends_with(",4,4")));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(open_bank(&path), Err(Error::TruncatedPayload { .. })));
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(open_bank(&path), Err(Error::TruncatedIndex { .. })));
        std::fs::write(&path, b"SKVC").unwrap();
        assert!(matches!(open_bank(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn k_policy_clamps() {
        assert_eq!(KPolicy::SingleImage.k_for(64, 192), 64);
        assert_eq!(KPolicy::Scaled(2.0).k_for(64, 192), 128);
        assert_eq!(KPolicy::Scaled(10.0).k_for(64, 192), 192);
        assert_eq!(KPolicy::Scaled(0.0).k_for(64, 192), 1);
        assert_eq!(KPolicy::Fixed(7).k_for(64, 192), 7);
        assert_eq!(KPolicy::All.k_for(64, 192), 192);
    }
}
