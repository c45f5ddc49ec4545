//! Streaming inverted semantic index.
//!
//! Each target layer maps SAE feature ids to the positions where the feature
//! fired. Feature frequencies are summed across layers and feed the IDF
//! weights used at query time.
//!
//! `S3IX` file layout (little-endian): magic, version u32, L u64, layer count
//! u32, layer ids u32[], SAE fingerprint (32 bytes), then per layer: feature
//! count u32 followed by `(feature_id u32, payload length u32, payload)`
//! entries sorted by feature id.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::activation::ActivationSource;
use crate::error::{Error, Result};
use crate::posting::PostingList;
use crate::sae::{Fingerprint, SaeParams};

pub const INDEX_MAGIC: &[u8; 4] = b"S3IX";
pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedSemanticIndex {
    context_len: u64,
    layer_ids: Vec<u32>,
    postings: Vec<BTreeMap<u32, PostingList>>,
    freq: BTreeMap<u32, u64>,
    fingerprint: Fingerprint,
    frozen: bool,
}

/// Posting counts and storage cost of a frozen index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    /// Total number of postings across all layers and features.
    pub postings: u64,
    /// Idealized storage with one 4-byte integer per posting.
    pub positions_bytes: u64,
    /// Varint payload actually stored.
    pub payload_bytes: u64,
    /// Header and per-feature framing in the serialized index.
    pub overhead_bytes: u64,
    /// Size of the serialized index (`payload_bytes + overhead_bytes`).
    pub encoded_bytes: u64,
}

/// Instrumentation gathered while building.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub chunks: usize,
    /// Largest number of dense vectors held at once.
    pub peak_resident_vectors: usize,
}

impl InvertedSemanticIndex {
    pub fn new(context_len: u64, layer_ids: Vec<u32>, fingerprint: Fingerprint) -> Result<Self> {
        let mut sorted = layer_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != layer_ids.len() {
            return Err(Error::contract("duplicate layer id"));
        }
        if layer_ids.is_empty() {
            return Err(Error::contract("index needs at least one layer"));
        }
        Ok(InvertedSemanticIndex {
            context_len,
            postings: vec![BTreeMap::new(); layer_ids.len()],
            layer_ids,
            freq: BTreeMap::new(),
            fingerprint,
            frozen: false,
        })
    }

    pub fn context_len(&self) -> u64 {
        self.context_len
    }

    pub fn layer_ids(&self) -> &[u32] {
        &self.layer_ids
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn layer_slot(&self, layer: u32) -> Result<usize> {
        self.layer_ids
            .iter()
            .position(|&l| l == layer)
            .ok_or(Error::UnknownLayer(layer))
    }

    pub fn insert_posting(&mut self, layer: u32, feature: u32, position: u64) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let slot = self.layer_slot(layer)?;
        if position >= self.context_len {
            return Err(Error::contract(format!(
                "position {position} outside context of length {}",
                self.context_len
            )));
        }
        self.postings[slot]
            .entry(feature)
            .or_default()
            .push(position)
            .map_err(|last| Error::OutOfOrder {
                layer,
                feature,
                position,
                last,
            })?;
        *self.freq.entry(feature).or_insert(0) += 1;
        Ok(())
    }

    fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::contract("index must be frozen before it is read"))
        }
    }

    pub fn lookup(&self, layer: u32, feature: u32) -> Result<Vec<u64>> {
        Ok(self
            .postings(layer, feature)?
            .map(PostingList::to_vec)
            .unwrap_or_default())
    }

    pub fn postings(&self, layer: u32, feature: u32) -> Result<Option<&PostingList>> {
        self.require_frozen()?;
        let slot = self.layer_slot(layer)?;
        Ok(self.postings[slot].get(&feature))
    }

    /// Features indexed in `layer`, with their posting lists, by increasing id.
    pub fn layer_features(&self, layer: u32) -> Result<impl Iterator<Item = (u32, &PostingList)>> {
        let slot = self.layer_slot(layer)?;
        Ok(self.postings[slot].iter().map(|(&f, p)| (f, p)))
    }

    /// Occurrences of `feature` summed over all layers.
    pub fn freq(&self, feature: u32) -> u64 {
        self.freq.get(&feature).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &BTreeMap<u32, u64> {
        &self.freq
    }

    pub fn total_postings(&self) -> u64 {
        self.postings
            .iter()
            .flat_map(|m| m.values())
            .map(PostingList::len)
            .sum()
    }

    pub fn memory_report(&self) -> Result<MemoryReport> {
        self.require_frozen()?;
        let postings = self.total_postings();
        let payload_bytes: u64 = self
            .postings
            .iter()
            .flat_map(|m| m.values())
            .map(|p| p.encoded().len() as u64)
            .sum();
        let entries: u64 = self.postings.iter().map(|m| m.len() as u64).sum();
        let header = 4 + 4 + 8 + 4 + 4 * self.layer_ids.len() as u64 + 32;
        let overhead_bytes = header + 4 * self.layer_ids.len() as u64 + 8 * entries;
        Ok(MemoryReport {
            postings,
            positions_bytes: 4 * postings,
            payload_bytes,
            overhead_bytes,
            encoded_bytes: payload_bytes + overhead_bytes,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.require_frozen()?;
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.context_len)?;
        w.write_u32::<LittleEndian>(self.layer_ids.len() as u32)?;
        for &l in &self.layer_ids {
            w.write_u32::<LittleEndian>(l)?;
        }
        w.write_all(&self.fingerprint.0)?;
        for layer in &self.postings {
            w.write_u32::<LittleEndian>(layer.len() as u32)?;
            for (&f, list) in layer {
                let payload = list.encoded();
                let len = u32::try_from(payload.len())
                    .map_err(|_| Error::contract("posting payload exceeds 4 GiB"))?;
                w.write_u32::<LittleEndian>(f)?;
                w.write_u32::<LittleEndian>(len)?;
                w.write_all(payload)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Loads a serialized index; the result is frozen.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format("index file is truncated")
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::format("not an index file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported index version {version}"
            )));
        }
        let context_len = r.read_u64::<LittleEndian>().map_err(eof)?;
        let n_layers = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut layer_ids = vec![0u32; n_layers];
        r.read_u32_into::<LittleEndian>(&mut layer_ids)
            .map_err(eof)?;
        let mut fp = [0u8; 32];
        r.read_exact(&mut fp).map_err(eof)?;
        let mut index = Self::new(context_len, layer_ids, Fingerprint(fp))
            .map_err(|e| Error::format(e.to_string()))?;
        for slot in 0..n_layers {
            let n_features = r.read_u32::<LittleEndian>().map_err(eof)?;
            let mut prev: Option<u32> = None;
            for _ in 0..n_features {
                let f = r.read_u32::<LittleEndian>().map_err(eof)?;
                if prev.is_some_and(|p| f <= p) {
                    return Err(Error::format("feature ids are not sorted"));
                }
                prev = Some(f);
                let len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
                let mut payload = vec![0u8; len];
                r.read_exact(&mut payload).map_err(eof)?;
                let list = PostingList::from_encoded(payload)?;
                if list.is_empty() {
                    return Err(Error::format(format!("empty posting list for feature {f}")));
                }
                if list.last().is_some_and(|p| p >= context_len) {
                    return Err(Error::format(format!(
                        "posting for feature {f} lies outside the context"
                    )));
                }
                *index.freq.entry(f).or_insert(0) += list.len();
                index.postings[slot].insert(f, list);
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("trailing bytes after index"));
        }
        index.freeze();
        Ok(index)
    }
}

/// Builds and freezes an index over `source`, `chunk_size` positions at a time.
pub fn build_index<S: ActivationSource + ?Sized>(
    source: &mut S,
    params: &SaeParams,
    chunk_size: usize,
) -> Result<InvertedSemanticIndex> {
    build_index_with_stats(source, params, chunk_size).map(|(index, _)| index)
}

pub fn build_index_with_stats<S: ActivationSource + ?Sized>(
    source: &mut S,
    params: &SaeParams,
    chunk_size: usize,
) -> Result<(InvertedSemanticIndex, BuildStats)> {
    if chunk_size == 0 {
        return Err(Error::contract("chunk_size must be positive"));
    }
    if source.d_in() != params.d_in() {
        return Err(Error::contract(format!(
            "activations have dimension {}, SAE expects {}",
            source.d_in(),
            params.d_in()
        )));
    }
    let context_len = source.context_len();
    if context_len == 0 {
        return Err(Error::input("no records: activation stream is empty"));
    }
    let layers = source.layers().to_vec();
    let mut index = InvertedSemanticIndex::new(context_len, layers.clone(), params.fingerprint())?;
    let mut stats = BuildStats::default();
    let mut expected = 0u64;

    while let Some(chunk) = source.next_chunk(chunk_size)? {
        if chunk.start != expected {
            return Err(Error::contract(format!(
                "non-monotone positions: chunk starts at {}, expected {expected}",
                chunk.start
            )));
        }
        if chunk.n_layers != layers.len() || chunk.d_in != params.d_in() {
            return Err(Error::contract(
                "chunk shape does not match the stream header",
            ));
        }
        stats.chunks += 1;
        stats.peak_resident_vectors = stats.peak_resident_vectors.max(chunk.vector_count());
        let vectors: Vec<&[f32]> = chunk.vectors().collect();
        let codes = params.encode_batch(&vectors)?;
        drop(vectors);
        drop(chunk.data);

        for (i, code) in codes.iter().enumerate() {
            let position = chunk.start + (i / layers.len()) as u64;
            let layer = layers[i % layers.len()];
            for f in code.ids() {
                index.insert_posting(layer, f, position)?;
            }
        }
        expected += chunk.len as u64;
    }
    if expected != context_len {
        return Err(Error::format(format!(
            "stream ended after {expected} of {context_len} positions"
        )));
    }
    index.freeze();
    Ok((index, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{ActivationStream, Token};
    use crate::sae::SaeShape;
    use std::collections::HashMap;

    fn index_with(layers: Vec<u32>, len: u64) -> InvertedSemanticIndex {
        InvertedSemanticIndex::new(len, layers, Fingerprint::default()).unwrap()
    }

    #[test]
    fn insert_then_lookup() {
        let mut idx = index_with(vec![0], 20);
        for p in [3, 7, 12] {
            idx.insert_posting(0, 4, p).unwrap();
        }
        idx.freeze();
        assert_eq!(idx.lookup(0, 4).unwrap(), vec![3, 7, 12]);
        assert_eq!(idx.postings(0, 4).unwrap().unwrap().encoded(), &[3, 4, 5]);
        assert_eq!(idx.lookup(0, 99).unwrap(), Vec::<u64>::new());
        assert_eq!(idx.freq(4), 3);
        assert!(matches!(idx.lookup(1, 4), Err(Error::UnknownLayer(1))));
    }

    #[test]
    fn insert_errors() {
        let mut idx = index_with(vec![0], 20);
        idx.insert_posting(0, 1, 5).unwrap();
        assert!(matches!(
            idx.insert_posting(0, 1, 5),
            Err(Error::OutOfOrder {
                position: 5,
                last: 5,
                ..
            })
        ));
        assert!(matches!(
            idx.insert_posting(2, 1, 6),
            Err(Error::UnknownLayer(2))
        ));
        assert!(matches!(
            idx.insert_posting(0, 1, 20),
            Err(Error::Contract(_))
        ));
        idx.freeze();
        assert!(matches!(idx.insert_posting(0, 1, 9), Err(Error::Frozen)));
    }

    #[test]
    fn lookup_requires_frozen() {
        let idx = index_with(vec![0], 5);
        assert!(matches!(idx.lookup(0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_index_report_is_header_only() {
        let mut idx = index_with(vec![0, 1], 10);
        idx.freeze();
        let report = idx.memory_report().unwrap();
        assert_eq!(report.postings, 0);
        assert_eq!(report.positions_bytes, 0);
        assert_eq!(report.payload_bytes, 0);
        assert_eq!(report.encoded_bytes, idx.to_bytes().unwrap().len() as u64);
    }

    #[test]
    fn single_token_index() {
        let shape = SaeShape::new(1, 8, 1).unwrap();
        let mut w_enc = vec![0.0; 8];
        w_enc[7] = 1.0;
        let params =
            SaeParams::from_parts(shape, w_enc.clone(), vec![0.0; 8], w_enc, vec![0.0]).unwrap();
        let stream =
            ActivationStream::new(Token::table_from_words(&["x"]), vec![0], 1, vec![1.0]).unwrap();
        let idx = build_index(&mut stream.source(), &params, 4).unwrap();
        assert_eq!(idx.lookup(0, 7).unwrap(), vec![0]);
        assert_eq!(idx.freq(7), 1);
        assert_eq!(idx.memory_report().unwrap().postings, 1);
    }

    #[test]
    fn randomized_lookup_matches_shadow_map() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let layers = vec![2, 5];
        let len = 5_000u64;
        let mut idx = index_with(layers.clone(), len);
        let mut shadow: HashMap<(u32, u32), Vec<u64>> = HashMap::new();
        for pos in 0..len {
            for &l in &layers {
                let n = rng.random_range(0..4);
                let mut feats: Vec<u32> = (0..n).map(|_| rng.random_range(0..1000)).collect();
                feats.sort_unstable();
                feats.dedup();
                for f in feats {
                    idx.insert_posting(l, f, pos).unwrap();
                    shadow.entry((l, f)).or_default().push(pos);
                }
            }
        }
        idx.freeze();
        for l in &layers {
            for f in 0..1000u32 {
                let want = shadow.get(&(*l, f)).cloned().unwrap_or_default();
                assert_eq!(idx.lookup(*l, f).unwrap(), want);
            }
        }
        let total: usize = shadow.values().map(Vec::len).sum();
        assert_eq!(idx.total_postings(), total as u64);
        let mut freq: HashMap<u32, u64> = HashMap::new();
        for ((_, f), v) in &shadow {
            *freq.entry(*f).or_default() += v.len() as u64;
        }
        for (f, n) in freq {
            assert_eq!(idx.freq(f), n);
        }
        let report = idx.memory_report().unwrap();
        let bytes = idx.to_bytes().unwrap();
        assert_eq!(report.encoded_bytes, bytes.len() as u64);
        assert!(report.payload_bytes <= 5 * report.postings);
        assert_eq!(
            InvertedSemanticIndex::read_from(bytes.as_slice()).unwrap(),
            idx
        );
    }

    #[test]
    fn corrupt_index_files_are_rejected() {
        let mut idx = index_with(vec![0], 10);
        idx.insert_posting(0, 3, 4).unwrap();
        idx.freeze();
        let bytes = idx.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            InvertedSemanticIndex::read_from(bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut short = bytes.clone();
        short.pop();
        assert!(matches!(
            InvertedSemanticIndex::read_from(short.as_slice()),
            Err(Error::Format(_))
        ));
        // Shrink L below the stored posting.
        let mut small = bytes;
        small[8..16].copy_from_slice(&3u64.to_le_bytes());
        assert!(matches!(
            InvertedSemanticIndex::read_from(small.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
