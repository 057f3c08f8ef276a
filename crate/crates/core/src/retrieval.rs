//! The retrieval set: stored object triples with mean-pooled embeddings,
//! exact cosine top-k search and majority voting over the hits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::codec::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::object_encoder::{EncoderKind, MaskRle, ObjectEmbedding, ObjectMask};

pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRecord {
    pub record_id: u64,
    pub mask: MaskRle,
    pub description: String,
    pub image_id: String,
    pub embedding: ObjectEmbedding,
    pub label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub record_id: u64,
    pub similarity: f32,
}

/// Hits sorted by similarity descending, ties by ascending record id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

/// Exact-scan index. Unit-normalized rows are cached in f64 and rebuilt
/// lazily after any mutation.
#[derive(Debug, Default)]
pub struct RetrievalIndex {
    dim: Option<usize>,
    records: Vec<RetrievalRecord>,
    positions: BTreeMap<u64, usize>,
    next_id: u64,
    revision: u64,
    normalized: OnceLock<Vec<f64>>,
}

impl Clone for RetrievalIndex {
    fn clone(&self) -> Self {
        RetrievalIndex {
            dim: self.dim,
            records: self.records.clone(),
            positions: self.positions.clone(),
            next_id: self.next_id,
            revision: self.revision,
            normalized: OnceLock::new(),
        }
    }
}

impl PartialEq for RetrievalIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.next_id == other.next_id
            && self.revision == other.revision
            && self.records.len() == other.records.len()
            && self.records.iter().all(|r| other.get(r.record_id).is_some_and(|o| records_bit_eq(r, o)))
    }
}

fn records_bit_eq(a: &RetrievalRecord, b: &RetrievalRecord) -> bool {
    a.record_id == b.record_id
        && a.mask == b.mask
        && a.description == b.description
        && a.image_id == b.image_id
        && a.label == b.label
        && a.embedding.kind == b.embedding.kind
        && a.embedding.norm.to_bits() == b.embedding.norm.to_bits()
        && a.embedding.vec.len() == b.embedding.vec.len()
        && a.embedding.vec.iter().zip(&b.embedding.vec).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn f64_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl RetrievalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Embedding width, fixed by the first record.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Bumped on every mutation.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn records(&self) -> &[RetrievalRecord] {
        &self.records
    }

    pub fn get(&self, record_id: u64) -> Option<&RetrievalRecord> {
        self.positions.get(&record_id).map(|&i| &self.records[i])
    }

    fn check_embedding(&self, e: &ObjectEmbedding) -> Result<()> {
        if e.kind != EncoderKind::Meanpool {
            return Err(Error::Usage("retrieval embeddings must be mean-pooled".into()));
        }
        if let Some(d) = self.dim {
            if e.dim() != d {
                return Err(Error::shape("retrieval", format!("embedding width {} but index width {d}", e.dim())));
            }
        }
        let norm = f64_norm(&e.vec);
        if !e.is_finite() || norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(())
    }

    /// Appends a record with the next free id.
    pub fn add_record(
        &mut self,
        mask: &ObjectMask,
        description: impl Into<String>,
        image_id: impl Into<String>,
        embedding: ObjectEmbedding,
        label: Option<String>,
    ) -> Result<u64> {
        let id = self.next_id;
        self.insert(RetrievalRecord {
            record_id: id,
            mask: mask.to_rle(),
            description: description.into(),
            image_id: image_id.into(),
            embedding,
            label,
        })?;
        Ok(id)
    }

    /// Inserts a record under its own id, which must be unused.
    pub fn insert(&mut self, record: RetrievalRecord) -> Result<()> {
        self.check_embedding(&record.embedding)?;
        ObjectMask::from_rle(&record.mask)?;
        if self.positions.contains_key(&record.record_id) {
            return Err(Error::Usage(format!("record id {} already present", record.record_id)));
        }
        self.dim = Some(record.embedding.dim());
        self.next_id = self.next_id.max(record.record_id + 1);
        self.positions.insert(record.record_id, self.records.len());
        self.records.push(record);
        self.touch();
        Ok(())
    }

    /// Removes a record; ids are never handed out again.
    pub fn remove(&mut self, record_id: u64) -> Result<RetrievalRecord> {
        let pos = self
            .positions
            .remove(&record_id)
            .ok_or_else(|| Error::NotFound(format!("record {record_id}")))?;
        let rec = self.records.remove(pos);
        for p in self.positions.values_mut() {
            if *p > pos {
                *p -= 1;
            }
        }
        self.touch();
        Ok(rec)
    }

    fn touch(&mut self) {
        self.revision += 1;
        self.normalized = OnceLock::new();
    }

    fn normalized(&self) -> &[f64] {
        self.normalized.get_or_init(|| {
            let mut out = Vec::with_capacity(self.records.len() * self.dim.unwrap_or(0));
            for r in &self.records {
                let n = f64_norm(&r.embedding.vec);
                out.extend(r.embedding.vec.iter().map(|&x| x as f64 / n));
            }
            out
        })
    }

    /// Exact cosine top-k, skipping ids in `exclude`.
    pub fn query_topk(&self, query: &ObjectEmbedding, k: usize, exclude: &BTreeSet<u64>) -> Result<QueryResult> {
        if k == 0 {
            return Err(Error::Usage("k must be at least 1".into()));
        }
        let d = match self.dim {
            Some(d) if !self.records.is_empty() => d,
            _ => return Err(Error::EmptyIndex),
        };
        if query.kind != EncoderKind::Meanpool {
            return Err(Error::Usage("retrieval queries must be mean-pooled".into()));
        }
        if query.dim() != d {
            return Err(Error::shape("query_topk", format!("query width {} but index width {d}", query.dim())));
        }
        let qn = f64_norm(&query.vec);
        if !query.is_finite() || qn == 0.0 || !qn.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        let q: Vec<f64> = query.vec.iter().map(|&x| x as f64).collect();
        let rows = self.normalized();
        // The ranking key leaves the query unnormalized; dividing by its
        // norm afterwards cannot reorder candidates.
        let mut scored: Vec<(f64, u64)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| !exclude.contains(&r.record_id))
            .map(|(i, r)| (kernels::dot(&q, &rows[i * d..(i + 1) * d]), r.record_id))
            .collect();
        if scored.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let order = |a: &(f64, u64), b: &(f64, u64)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(QueryResult {
            hits: scored
                .into_iter()
                .map(|(s, id)| Hit {
                    record_id: id,
                    similarity: (s / qn).clamp(-1.0, 1.0) as f32,
                })
                .collect(),
        })
    }

    /// Majority vote over hits using the stored labels.
    pub fn vote(&self, result: &QueryResult) -> Result<String> {
        majority_vote(result, |id| self.get(id).and_then(|r| r.label.as_deref()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read(path)?)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            version: INDEX_VERSION,
            d: self.dim,
            count: self.records.len(),
            revision: self.revision,
            next_id: self.next_id,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for r in &self.records {
            let line = RecordLine {
                record_id: r.record_id,
                label: r.label.clone(),
                description: r.description.clone(),
                image_id: r.image_id.clone(),
                mask_rle: r.mask.clone(),
                embedding: r.embedding.vec.iter().map(|v| format!("{:08x}", v.to_bits())).collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = bytes.split_inclusive(|&b| b == b'\n').map(|l| {
            let start = offset;
            offset += l.len() as u64;
            (start, l)
        });
        let (_, first) = lines.next().ok_or_else(|| Error::format(0, "missing index header"))?;
        let header: IndexHeader =
            serde_json::from_slice(first).map_err(|e| Error::format(0, format!("bad index header: {e}")))?;
        if header.version != INDEX_VERSION {
            return Err(Error::format(0, format!("unsupported index version {}", header.version)));
        }
        let mut index = RetrievalIndex::new();
        for (start, line) in lines {
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            let rec: RecordLine =
                serde_json::from_slice(line).map_err(|e| Error::format(start, format!("bad record: {e}")))?;
            let vec = rec
                .embedding
                .iter()
                .map(|h| u32::from_str_radix(h, 16).map(f32::from_bits))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(start, format!("bad embedding bits: {e}")))?;
            index
                .insert(RetrievalRecord {
                    record_id: rec.record_id,
                    mask: rec.mask_rle,
                    description: rec.description,
                    image_id: rec.image_id,
                    embedding: ObjectEmbedding::new(vec, EncoderKind::Meanpool),
                    label: rec.label,
                })
                .map_err(|e| Error::format(start, e.to_string()))?;
        }
        if index.len() != header.count || index.dim != header.d {
            return Err(Error::format(
                offset,
                format!("header promises {} records of width {:?}", header.count, header.d),
            ));
        }
        if header.next_id < index.next_id {
            return Err(Error::format(0, "next_id below a stored record id"));
        }
        index.next_id = header.next_id;
        index.revision = header.revision;
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    d: Option<usize>,
    count: usize,
    revision: u64,
    next_id: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    record_id: u64,
    label: Option<String>,
    description: String,
    image_id: String,
    mask_rle: MaskRle,
    embedding: Vec<String>,
}

/// Modal label among the hits. Ties go to the larger summed similarity,
/// then to the lexicographically smaller label.
pub fn majority_vote<'a, F>(result: &QueryResult, label_of: F) -> Result<String>
where
    F: Fn(u64) -> Option<&'a str>,
{
    if result.hits.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for h in &result.hits {
        let label = label_of(h.record_id).ok_or(Error::MissingLabel(h.record_id))?;
        let e = tally.entry(label).or_default();
        e.0 += 1;
        e.1 += h.similarity as f64;
    }
    let mut best: Option<(&str, usize, f64)> = None;
    // BTreeMap iterates labels in ascending order, so strict comparisons
    // keep the smaller label on a full tie.
    for (label, (count, sum)) in tally {
        let better = match best {
            None => true,
            Some((_, c, s)) => count > c || (count == c && sum > s),
        };
        if better {
            best = Some((label, count, sum));
        }
    }
    Ok(best.map(|b| b.0.to_string()).unwrap_or_default())
}
