//! Precomputed embedding store with exact cosine top-k retrieval.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "CESTORE1" | u32 version=1 | u32 kind | u64 N | u32 d
//! N × u64 id | N×d × f32 vectors (row-major) | N × f32 norms
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::SentenceEncoder;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CESTORE1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreKind {
    Context = 0,
    Response = 1,
}

impl StoreKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(StoreKind::Context),
            1 => Ok(StoreKind::Response),
            other => Err(Error::Format(format!("unknown store kind {other}"))),
        }
    }
}

/// Immutable id-indexed matrix of vectors with their Euclidean norms.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    kind: StoreKind,
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    norms: Vec<f32>,
    index: HashMap<u64, usize>,
}

/// One retrieval hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<'a> {
    pub id: u64,
    pub similarity: f32,
    pub vector: &'a [f32],
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

/// Worker count for batch encoding, capped by `CERANK_THREADS` when set.
pub fn worker_threads() -> usize {
    std::env::var("CERANK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Encodes `seqs` in parallel; output order matches input order.
pub fn encode_all(encoder: &dyn SentenceEncoder, seqs: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| seqs.par_iter().map(|s| encoder.encode(s)).collect())
}

impl EmbeddingStore {
    /// Builds from already-computed vectors.
    pub fn from_vectors(kind: StoreKind, dim: usize, rows: Vec<(u64, Vec<f32>)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        let mut norms = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::shape("store row", &[dim], &[v.len()]));
            }
            if index.insert(id, ids.len()).is_some() {
                return Err(Error::DuplicateId(id));
            }
            let n = l2_norm(&v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::ZeroNorm(id));
            }
            ids.push(id);
            vectors.extend_from_slice(&v);
            norms.push(n);
        }
        Ok(EmbeddingStore {
            kind,
            dim,
            ids,
            vectors,
            norms,
            index,
        })
    }

    /// Encodes every item with a frozen encoder.
    pub fn build(encoder: &dyn SentenceEncoder, kind: StoreKind, items: &[(u64, Vec<u32>)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        if let Some((id, _)) = items.iter().find(|(id, _)| !seen.insert(*id)) {
            return Err(Error::DuplicateId(*id));
        }
        let seqs: Vec<&[u32]> = items.iter().map(|(_, s)| s.as_slice()).collect();
        let vecs = encode_all(encoder, &seqs)?;
        Self::from_vectors(kind, encoder.dim(), items.iter().map(|(id, _)| *id).zip(vecs).collect())
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn norms(&self) -> &[f32] {
        &self.norms
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Row index of `id`.
    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn get(&self, id: u64) -> Result<&[f32]> {
        self.index
            .get(&id)
            .map(|&i| self.row(i))
            .ok_or(Error::UnknownId(id))
    }

    /// The `k` rows most cosine-similar to `query`, excluding `exclude`.
    /// Descending similarity, ties by ascending id.
    pub fn top_k(&self, query: &[f32], k: usize, exclude: &HashSet<u64>) -> Result<Vec<Neighbor<'_>>> {
        if query.len() != self.dim {
            return Err(Error::shape("top_k", &[self.dim], &[query.len()]));
        }
        let qn = l2_norm(query) as f64;
        if qn == 0.0 {
            return Err(Error::ZeroQuery);
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(k + 1);
        for (i, &id) in self.ids.iter().enumerate() {
            if exclude.contains(&id) {
                continue;
            }
            let dot: f64 = self
                .row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let hit = Hit {
                sim: dot / (qn * self.norms[i] as f64),
                id,
                row: i,
            };
            if heap.len() < k {
                heap.push(hit);
            } else if hit < *heap.peek().expect("non-empty") {
                heap.pop();
                heap.push(hit);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|h| Neighbor {
                id: h.id,
                similarity: h.sim as f32,
                vector: self.row(h.row),
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        for n in &self.norms {
            w.write_all(&n.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a store; `expected_dim` guards against a model/store mismatch.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format(format!("{}: bad magic", path.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let kind = StoreKind::from_u32(r.u32()?)?;
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if let Some(want) = expected_dim {
            if want != dim {
                return Err(Error::shape("store dimension", &[dim], &[want]));
            }
        }
        let need = n
            .checked_mul(8 + 4 * dim + 4)
            .ok_or_else(|| Error::Format("store size overflow".into()))?;
        if bytes.len() - r.pos != need {
            return Err(Error::Format(format!(
                "store body is {} bytes, expected {need} (truncated or trailing data)",
                bytes.len() - r.pos
            )));
        }
        let ids: Vec<u64> = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
        let vectors: Vec<f32> = (0..n * dim).map(|_| r.f32()).collect::<Result<_>>()?;
        let norms: Vec<f32> = (0..n).map(|_| r.f32()).collect::<Result<_>>()?;
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(*id, i).is_some() {
                return Err(Error::DuplicateId(*id));
            }
        }
        Ok(EmbeddingStore {
            kind,
            dim,
            ids,
            vectors,
            norms,
            index,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    sim: f64,
    id: u64,
    row: usize,
}

impl PartialEq for Hit {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Hit {}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit {
    /// "Less" means ranked earlier: higher similarity, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.id.cmp(&other.id))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated store file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> EmbeddingStore {
        EmbeddingStore::from_vectors(
            StoreKind::Context,
            2,
            vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0]), (3, vec![1.0, 1.0])],
        )
        .unwrap()
    }

    #[test]
    fn top_k_examples() {
        let s = abc();
        let hits = s.top_k(&[1.0, 0.0], 2, &HashSet::new()).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].id, 1);
        assert_eq!(hits[0].similarity, 1.0);
        assert_eq!(hits[1].id, 3);
        assert!((hits[1].similarity - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(hits[1].vector, &[1.0, 1.0]);

        let hits = s.top_k(&[1.0, 0.0], 10, &HashSet::from([1])).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![3, 2]);
        assert!(s.top_k(&[1.0, 0.0], 0, &HashSet::new()).unwrap().is_empty());
        assert!(matches!(s.top_k(&[0.0, 0.0], 1, &HashSet::new()), Err(Error::ZeroQuery)));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let s = EmbeddingStore::from_vectors(
            StoreKind::Context,
            2,
            vec![(7, vec![0.3, 0.4]), (3, vec![0.3, 0.4]), (5, vec![-1.0, 0.0])],
        )
        .unwrap();
        let hits = s.top_k(&[0.3, 0.4], 3, &HashSet::new()).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![3, 7, 5]);
    }

    #[test]
    fn build_rejects_bad_rows() {
        assert!(matches!(
            EmbeddingStore::from_vectors(StoreKind::Context, 2, vec![(1, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]),
            Err(Error::DuplicateId(1))
        ));
        assert!(matches!(
            EmbeddingStore::from_vectors(StoreKind::Context, 2, vec![(4, vec![0.0, 0.0])]),
            Err(Error::ZeroNorm(4))
        ));
    }

    #[test]
    fn save_load_and_corruption() {
        let s = abc();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ctx.store");
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p, Some(2)).unwrap(), s);
        assert!(matches!(EmbeddingStore::load(&p, Some(8)), Err(Error::Shape { .. })));

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(EmbeddingStore::load(&p, None), Err(Error::Format(_))));

        s.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        let err = EmbeddingStore::load(&p, None).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
