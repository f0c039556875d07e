//! Character corpus handling: vocabulary, fixed-length block packing,
//! train/validation split, and seeded batch iteration.
//!
//! On-disk artifacts:
//! * vocabulary: JSON `{ "symbols": [...], "mask_id": N }`
//! * packed dataset: little-endian binary, magic `AOLABPK1`, then
//!   `ctx_len: u32`, `block_count: u32`, the SHA-256 of the source text,
//!   then `block_count * ctx_len` token ids as `u32`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CoreError;
use crate::rng::{self, Domain};
use crate::Result;

/// Marker string used for the mask token in the symbol table. Real
/// symbols are single characters, so the multi-character marker cannot
/// collide with them.
pub const MASK_SYMBOL: &str = "<mask>";

const PACK_MAGIC: &[u8; 8] = b"AOLABPK1";

/// Character-level vocabulary. Symbols are the distinct characters of the
/// corpus sorted by code point, with one mask token appended at the end,
/// so `mask_id == len - 1` always holds. The mask id exists for the
/// encoder family and the diffusion-style sampler; `encode` never emits it.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    mask_id: u32,
    char_to_id: HashMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    symbols: Vec<String>,
    mask_id: u32,
}

impl Vocabulary {
    /// Builds the vocabulary of `text`: distinct characters sorted by code
    /// point, then the mask token.
    pub fn build(text: &str) -> Vocabulary {
        let mut chars: Vec<char> = {
            let mut set: Vec<char> = text.chars().collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        chars.shrink_to_fit();
        let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        symbols.push(MASK_SYMBOL.to_string());
        let mask_id = (symbols.len() - 1) as u32;
        let char_to_id = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        Vocabulary {
            symbols,
            mask_id,
            char_to_id,
        }
    }

    /// Total symbol count including the mask token.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.char_to_id.get(&c).copied().ok_or_else(|| {
                    CoreError::config(format!("character {c:?} not in vocabulary"))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            let sym = self
                .symbols
                .get(id as usize)
                .ok_or_else(|| CoreError::config(format!("token id {id} out of range")))?;
            out.push_str(sym);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            symbols: self.symbols.clone(),
            mask_id: self.mask_id,
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| CoreError::format(format!("vocab serialize: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let json = fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&json)
            .map_err(|e| CoreError::format(format!("vocab parse: {e}")))?;
        if file.mask_id as usize != file.symbols.len().saturating_sub(1) {
            return Err(CoreError::format(
                "vocab mask_id must index the last symbol".to_string(),
            ));
        }
        let mut char_to_id = HashMap::new();
        for (i, sym) in file.symbols.iter().enumerate() {
            if i as u32 == file.mask_id {
                continue;
            }
            let mut chars = sym.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(CoreError::format(format!(
                    "vocab symbol {i} is not a single character"
                )));
            };
            if char_to_id.insert(c, i as u32).is_some() {
                return Err(CoreError::format(format!("duplicate vocab symbol {c:?}")));
            }
        }
        Ok(Vocabulary {
            symbols: file.symbols,
            mask_id: file.mask_id,
            char_to_id,
        })
    }
}

/// Which slice of the corpus a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Validation,
}

/// Token ids packed into non-overlapping `ctx_len` blocks. The trailing
/// remainder of the corpus that does not fill a block is dropped.
#[derive(Debug, Clone)]
pub struct PackedDataset {
    ctx_len: usize,
    data: Vec<u32>,
    split: Split,
    corpus_sha256: [u8; 32],
}

impl PackedDataset {
    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.ctx_len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn corpus_sha256(&self) -> &[u8; 32] {
        &self.corpus_sha256
    }

    pub fn block(&self, i: usize) -> &[u32] {
        &self.data[i * self.ctx_len..(i + 1) * self.ctx_len]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks_exact(self.ctx_len)
    }

    /// Deterministic split: the last `ceil(val_frac * len)` blocks become
    /// validation, everything before them stays training data.
    pub fn split_train_val(&self, val_frac: f64) -> Result<(PackedDataset, PackedDataset)> {
        if !(0.0..1.0).contains(&val_frac) {
            return Err(CoreError::config(format!("val_frac {val_frac} not in [0, 1)")));
        }
        let n = self.len();
        let val_blocks = ((n as f64) * val_frac).ceil() as usize;
        let train_blocks = n - val_blocks;
        if train_blocks == 0 {
            return Err(CoreError::config("split leaves no training blocks"));
        }
        let cut = train_blocks * self.ctx_len;
        let train = PackedDataset {
            ctx_len: self.ctx_len,
            data: self.data[..cut].to_vec(),
            split: Split::Train,
            corpus_sha256: self.corpus_sha256,
        };
        let val = PackedDataset {
            ctx_len: self.ctx_len,
            data: self.data[cut..].to_vec(),
            split: Split::Validation,
            corpus_sha256: self.corpus_sha256,
        };
        Ok((train, val))
    }

    /// A dataset holding the first `max_blocks` blocks of `self`.
    pub fn take(&self, max_blocks: usize) -> PackedDataset {
        let blocks = self.len().min(max_blocks);
        PackedDataset {
            ctx_len: self.ctx_len,
            data: self.data[..blocks * self.ctx_len].to_vec(),
            split: self.split,
            corpus_sha256: self.corpus_sha256,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(48 + self.data.len() * 4);
        buf.extend_from_slice(PACK_MAGIC);
        buf.extend_from_slice(&(self.ctx_len as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.corpus_sha256);
        for &id in &self.data {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PackedDataset> {
        let mut f = fs::File::open(path)?;
        let mut header = [0u8; 48];
        f.read_exact(&mut header)
            .map_err(|_| CoreError::format("packed dataset header truncated".to_string()))?;
        if &header[..8] != PACK_MAGIC {
            return Err(CoreError::format("bad packed dataset magic".to_string()));
        }
        let ctx_len = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut corpus_sha256 = [0u8; 32];
        corpus_sha256.copy_from_slice(&header[16..48]);
        if ctx_len == 0 {
            return Err(CoreError::format("packed dataset has ctx_len 0".to_string()));
        }
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        if raw.len() != count * ctx_len * 4 {
            return Err(CoreError::format(format!(
                "packed dataset payload is {} bytes, expected {}",
                raw.len(),
                count * ctx_len * 4
            )));
        }
        let data: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(PackedDataset {
            ctx_len,
            data,
            split: Split::Full,
            corpus_sha256,
        })
    }
}

/// Packs raw token ids into blocks, dropping the remainder.
pub fn pack_blocks(ids: &[u32], ctx_len: usize) -> Result<PackedDataset> {
    if ctx_len == 0 {
        return Err(CoreError::config("ctx_len must be positive"));
    }
    let blocks = ids.len() / ctx_len;
    Ok(PackedDataset {
        ctx_len,
        data: ids[..blocks * ctx_len].to_vec(),
        split: Split::Full,
        corpus_sha256: [0u8; 32],
    })
}

/// Encodes `text` with `vocab` and packs it, recording the text's SHA-256
/// for provenance checks between runs.
pub fn pack_corpus(text: &str, vocab: &Vocabulary, ctx_len: usize) -> Result<PackedDataset> {
    let ids = vocab.encode(text)?;
    let mut ds = pack_blocks(&ids, ctx_len)?;
    let digest = Sha256::digest(text.as_bytes());
    ds.corpus_sha256.copy_from_slice(&digest);
    if ds.is_empty() {
        return Err(CoreError::config(format!(
            "corpus of {} tokens yields no {}-token blocks",
            ids.len(),
            ctx_len
        )));
    }
    Ok(ds)
}

/// Shuffled block batches. Every epoch visits each block exactly once in a
/// fresh seeded order; the final batch of an epoch may be short.
pub struct BatchIter<'a> {
    ds: &'a PackedDataset,
    batch_blocks: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a PackedDataset, batch_blocks: usize, seed: u64) -> Result<BatchIter<'a>> {
        if batch_blocks == 0 {
            return Err(CoreError::config("batch_blocks must be positive"));
        }
        if ds.is_empty() {
            return Err(CoreError::config("cannot iterate an empty dataset"));
        }
        let mut it = BatchIter {
            ds,
            batch_blocks,
            seed,
            epoch: 0,
            perm: Vec::new(),
            cursor: 0,
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        let mut rng = rng::stream(self.seed, Domain::Data, self.epoch);
        self.perm = (0..self.ds.len()).collect();
        self.perm.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch of blocks, rolling over into a newly shuffled epoch when
    /// the current one is exhausted.
    pub fn next_batch(&mut self) -> Vec<&'a [u32]> {
        if self.cursor >= self.perm.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_blocks).min(self.perm.len());
        let batch = self.perm[self.cursor..end]
            .iter()
            .map(|&i| self.ds.block(i))
            .collect();
        self.cursor = end;
        batch
    }
}

/// Hex rendering of a corpus digest for logs and manifests.
pub fn hex_digest(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_of_aba_matches_contract() {
        let v = Vocabulary::build("aba");
        assert_eq!(v.size(), 3);
        assert_eq!(v.mask_id(), 2);
        assert_eq!(v.symbols(), &["a".to_string(), "b".to_string(), MASK_SYMBOL.to_string()]);
        assert_eq!(v.encode("aba").unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn vocab_sorts_by_code_point() {
        let v = Vocabulary::build("ba\n!");
        assert_eq!(
            v.symbols(),
            &[
                "\n".to_string(),
                "!".to_string(),
                "a".to_string(),
                "b".to_string(),
                MASK_SYMBOL.to_string()
            ]
        );
    }

    #[test]
    fn encode_rejects_unknown_characters() {
        let v = Vocabulary::build("ab");
        assert!(v.encode("abc").is_err());
    }

    #[test]
    fn vocab_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocabulary::build("hello world");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.symbols(), v.symbols());
        assert_eq!(loaded.mask_id(), v.mask_id());
        assert_eq!(loaded.encode("hello").unwrap(), v.encode("hello").unwrap());
        // The serialized form is the documented shape.
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(json.get("symbols").is_some() && json.get("mask_id").is_some());
    }

    #[test]
    fn packing_drops_remainder() {
        let ids: Vec<u32> = (0..2050).map(|i| (i % 7) as u32).collect();
        let ds = pack_blocks(&ids, 1024).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.block(0).len(), 1024);
        assert_eq!(ds.block(1)[0], ids[1024]);
    }

    #[test]
    fn split_takes_validation_from_the_end() {
        let ids: Vec<u32> = (0..100 * 8).map(|i| (i % 5) as u32).collect();
        let ds = pack_blocks(&ids, 8).unwrap();
        let (train, val) = ds.split_train_val(0.05).unwrap();
        assert_eq!(train.len(), 95);
        assert_eq!(val.len(), 5);
        assert_eq!(train.split(), Split::Train);
        assert_eq!(val.split(), Split::Validation);
        assert_eq!(val.block(0), ds.block(95));
    }

    #[test]
    fn batch_iter_covers_each_epoch_exactly_once() {
        let ids: Vec<u32> = (0..10 * 4).map(|i| i as u32).collect();
        let ds = pack_blocks(&ids, 4).unwrap();
        let mut it = BatchIter::new(&ds, 3, 7).unwrap();
        let mut seen = Vec::new();
        // 10 blocks with batches of 3: batches of 3,3,3,1 per epoch.
        for _ in 0..4 {
            for block in it.next_batch() {
                seen.push(block[0]);
            }
        }
        assert_eq!(it.epoch(), 0);
        seen.sort_unstable();
        let want: Vec<u32> = (0..10).map(|b| (b * 4) as u32).collect();
        assert_eq!(seen, want, "each block exactly once per epoch");

        // Next call rolls into epoch 1 with a different order.
        let first_of_next = it.next_batch()[0][0];
        assert_eq!(it.epoch(), 1);
        let mut it2 = BatchIter::new(&ds, 3, 7).unwrap();
        let first_of_first = it2.next_batch()[0][0];
        // Seeded: rebuilding reproduces epoch 0 exactly.
        assert_eq!(first_of_first, {
            let mut it3 = BatchIter::new(&ds, 7, 7).unwrap();
            it3.next_batch()[0][0]
        });
        // Epoch orders differ (10 blocks: collision chance is tiny, and
        // the seeds are fixed so this is a deterministic assertion).
        assert_ne!(first_of_next, first_of_first);
    }

    #[test]
    fn packed_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pack.bin");
        let v = Vocabulary::build("abcd");
        let ds = pack_corpus("abcdabcdabcd", &v, 5).unwrap();
        ds.save(&path).unwrap();
        let loaded = PackedDataset::load(&path).unwrap();
        assert_eq!(loaded.ctx_len(), 5);
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.block(1), ds.block(1));
        assert_eq!(loaded.corpus_sha256(), ds.corpus_sha256());
    }

    #[test]
    fn packed_container_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pack.bin");
        let v = Vocabulary::build("ab");
        let ds = pack_corpus("abababab", &v, 2).unwrap();
        ds.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            PackedDataset::load(&path),
            Err(CoreError::Format(_))
        ));
        // Truncated payload is also rejected.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'A';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            PackedDataset::load(&path),
            Err(CoreError::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn pack_conserves_full_blocks(len in 0usize..5000, ctx in 1usize..600) {
            let ids: Vec<u32> = (0..len).map(|i| (i % 11) as u32).collect();
            let ds = pack_blocks(&ids, ctx).unwrap();
            prop_assert_eq!(ds.len(), len / ctx);
            for (i, block) in ds.blocks().enumerate() {
                prop_assert_eq!(block, &ids[i * ctx..(i + 1) * ctx]);
            }
        }

        #[test]
        fn split_partitions_blocks(blocks in 2usize..300, frac in 0.0f64..0.5) {
            let ids: Vec<u32> = (0..blocks * 3).map(|i| i as u32).collect();
            let ds = pack_blocks(&ids, 3).unwrap();
            let (train, val) = ds.split_train_val(frac).unwrap();
            prop_assert_eq!(train.len() + val.len(), ds.len());
            prop_assert!(train.len() >= 1);
        }
    }
}
