//! Sequence serialization, embeddings, and exact top-k retrieval.
//!
//! The index is a flat scan: every query scores every entry, so results are
//! exact by construction and ties break lexicographically by id. At the scale
//! this engine targets (thousands of knowledge units) that beats maintaining
//! an approximate structure.

use serde::{Deserialize, Serialize};

use crate::kb::{KnowledgeBase, KnowledgeUnit};
use crate::model::Event;
use crate::par::{maybe_par_into_iter, maybe_par_iter};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const LOCAL_EMBED_DIM: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum VindexError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("duplicate index id {0:?}")]
    DuplicateId(String),
    #[error("index id {0:?} is not in the knowledge base")]
    UnknownUnit(String),
    #[error("embedder backend: {0}")]
    Backend(String),
}

/// Fixed-dimension embedding. Construction rejects NaN and infinities, so
/// similarity scores are always finite and totally ordered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, VindexError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VindexError::NonFinite);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    /// Stable identifier persisted in KB manifests; a KB built with one
    /// embedder refuses vectors from another.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, VindexError>;
}

/// Renders events one per line as `<subject-key> <action> <object-key>`.
/// This is the text the embedders see; identical event lists embed identically.
pub fn serialize_sequence(events: &[Event]) -> String {
    let mut out = String::new();
    for (i, ev) in events.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&ev.subject.canonical_key);
        out.push(' ');
        out.push_str(&ev.action);
        out.push(' ');
        out.push_str(&ev.object.canonical_key);
    }
    out
}

/// Tab-separated, timestamped rendering used in prompts:
/// `<ts>\t<subject-key>\t<action>\t<object-key>`. Canonical keys may contain
/// spaces, so prompts use tabs to stay machine-parseable.
pub fn serialize_sequence_tabbed(events: &[Event]) -> String {
    let mut out = String::new();
    for (i, ev) in events.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            ev.timestamp, ev.subject.canonical_key, ev.action, ev.object.canonical_key
        ));
    }
    out
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic local embedding: hashed bag of tokens with a signed hashing
/// trick, L2-normalized. Tokens are maximal alphanumeric runs. Empty text maps
/// to the zero vector (the only non-unit output).
pub fn embed_local(text: &str) -> EmbeddingVector {
    let mut acc = vec![0.0f32; LOCAL_EMBED_DIM];
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a64(token.as_bytes());
        let bucket = (h % LOCAL_EMBED_DIM as u64) as usize;
        let sign = if (h >> 8) & 1 == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        for v in &mut acc {
            *v /= norm;
        }
    }
    EmbeddingVector(acc)
}

/// The default offline embedder. Pure function of the text.
#[derive(Debug, Clone, Default)]
pub struct HashEmbedder;

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        "hash-bow-v1-256"
    }

    fn dim(&self) -> usize {
        LOCAL_EMBED_DIM
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VindexError> {
        Ok(embed_local(text))
    }
}

/// Embeds a batch of texts, fanning out when the `parallel` feature is on.
/// Output order matches input order either way.
pub fn embed_batch(embedder: &dyn Embedder, texts: Vec<String>) -> Result<Vec<EmbeddingVector>, VindexError> {
    maybe_par_into_iter(texts).map(|t| embedder.embed(&t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    InnerProduct,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Metric::Cosine,
            "ip" | "inner_product" | "dot" => Metric::InnerProduct,
            "euclid" | "euclidean" | "l2" => Metric::Euclidean,
            other => return Err(format!("unknown metric {other:?} (expected cosine|ip|euclid)")),
        })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score_unchecked(a: &EmbeddingVector, b: &EmbeddingVector, metric: Metric) -> f32 {
    match metric {
        Metric::Cosine => {
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot(&a.0, &b.0) / (na * nb)
            }
        }
        Metric::InnerProduct => dot(&a.0, &b.0),
        // negated distance so that "higher is more similar" holds for all metrics
        Metric::Euclidean => -a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt(),
    }
}

/// Similarity under the chosen metric; higher always means more similar.
/// Cosine with a zero vector on either side is defined as 0.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector, metric: Metric) -> Result<f32, VindexError> {
    if a.dim() != b.dim() {
        return Err(VindexError::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(score_unchecked(a, b, metric))
}

/// Flat exact-scan index. Ids are unique; every entry has the index dimension.
#[derive(Debug)]
pub struct VectorIndex {
    metric: Metric,
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
}

impl VectorIndex {
    pub fn new(metric: Metric, dim: usize) -> Self {
        VectorIndex { metric, dim, entries: Vec::new() }
    }

    pub fn from_kb(kb: &KnowledgeBase, metric: Metric) -> Result<Self, VindexError> {
        let mut index = VectorIndex::new(metric, kb.manifest.dim);
        for unit in kb.units() {
            index.insert(unit.unit_id.clone(), unit.vector.clone())?;
        }
        Ok(index)
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: String, vector: EmbeddingVector) -> Result<(), VindexError> {
        if vector.dim() != self.dim {
            return Err(VindexError::DimensionMismatch { expected: self.dim, found: vector.dim() });
        }
        if self.entries.iter().any(|(existing, _)| *existing == id) {
            return Err(VindexError::DuplicateId(id));
        }
        self.entries.push((id, vector));
        Ok(())
    }

    /// Exact top-k by score, descending; ties break lexicographically by id,
    /// so results are a deterministic function of (index contents, query).
    /// Returns fewer than k entries when the index is smaller than k.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f32)>, VindexError> {
        if self.entries.is_empty() {
            return Err(VindexError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(VindexError::DimensionMismatch { expected: self.dim, found: query.dim() });
        }
        let metric = self.metric;
        let mut scored: Vec<(&str, f32)> =
            maybe_par_iter(&self.entries).map(|(id, v)| (id.as_str(), score_unchecked(query, v, metric))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect())
    }
}

/// Embeds the sequence and returns the single most similar knowledge unit and
/// its score (argmax of the threat score over the KB).
pub fn threat_retrieve<'a>(
    index: &VectorIndex,
    kb: &'a KnowledgeBase,
    events: &[Event],
    embedder: &dyn Embedder,
) -> Result<(&'a KnowledgeUnit, f32), VindexError> {
    let hits = threat_retrieve_k(index, kb, events, embedder, 1)?;
    Ok(hits.into_iter().next().expect("k=1 on a non-empty index"))
}

/// Top-k variant; units come back in score order for use as extended context.
pub fn threat_retrieve_k<'a>(
    index: &VectorIndex,
    kb: &'a KnowledgeBase,
    events: &[Event],
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<(&'a KnowledgeUnit, f32)>, VindexError> {
    let query = embedder.embed(&serialize_sequence(events))?;
    let hits = index.search(&query, k.max(1))?;
    hits.into_iter()
        .map(|(id, score)| kb.get(&id).map(|u| (u, score)).ok_or(VindexError::UnknownUnit(id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Entity, EntityKind};

    fn ev(ts: u64, s: &str, a: &str, o: &str) -> Event {
        Event {
            timestamp: ts,
            host_id: "h1".into(),
            subject: Entity::new(EntityKind::Process, s, None).unwrap(),
            action: a.into(),
            object: Entity::new(EntityKind::File, o, None).unwrap(),
            seq_no: ts,
            raw_ref: None,
        }
    }

    #[test]
    fn serialize_sequence_formats() {
        let events = vec![ev(1, "a.exe", "write", "/tmp/x"), ev(2, "b.exe", "read", "/tmp/x")];
        assert_eq!(serialize_sequence(&events), "process:a.exe write file:/tmp/x\nprocess:b.exe read file:/tmp/x");
        assert_eq!(serialize_sequence(&[]), "");
        assert_eq!(
            serialize_sequence_tabbed(&events[..1]),
            "1\tprocess:a.exe\twrite\tfile:/tmp/x"
        );
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let a = embed_local("process:a.exe write file:/tmp/x");
        let b = embed_local("process:a.exe write file:/tmp/x");
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a.dim(), LOCAL_EMBED_DIM);
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        let z = embed_local("");
        assert_eq!(z.norm(), 0.0);
        // cosine against the zero vector is defined as 0
        let a = embed_local("something");
        assert_eq!(similarity(&a, &z, Metric::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn repeated_text_embeds_to_the_same_direction() {
        let t = "process:a.exe write file:/tmp/x\nprocess:b.exe read file:/tmp/x";
        let doubled = format!("{t}\n{t}");
        let a = embed_local(t);
        let b = embed_local(&doubled);
        assert!((similarity(&a, &b, Metric::Cosine).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn similarity_closed_forms() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let b = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        let c = EmbeddingVector::new(vec![2.0, 0.0]).unwrap();
        assert_eq!(similarity(&a, &b, Metric::Cosine).unwrap(), 0.0);
        assert!((similarity(&a, &c, Metric::Cosine).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(similarity(&a, &c, Metric::InnerProduct).unwrap(), 2.0);
        assert_eq!(similarity(&a, &c, Metric::Euclidean).unwrap(), -1.0);
        // symmetric in both arguments
        assert_eq!(
            similarity(&a, &b, Metric::Euclidean).unwrap(),
            similarity(&b, &a, Metric::Euclidean).unwrap()
        );
        let d3 = EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(similarity(&a, &d3, Metric::Cosine), Err(VindexError::DimensionMismatch { .. })));
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(matches!(EmbeddingVector::new(vec![1.0, f32::NAN]), Err(VindexError::NonFinite)));
        assert!(matches!(EmbeddingVector::new(vec![f32::INFINITY]), Err(VindexError::NonFinite)));
    }

    #[test]
    fn search_singleton_and_empty() {
        let mut idx = VectorIndex::new(Metric::Cosine, 2);
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(idx.search(&q, 1), Err(VindexError::EmptyIndex)));
        idx.insert("only".into(), EmbeddingVector::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let hits = idx.search(&q, 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "only");
    }

    #[test]
    fn search_ties_break_by_id() {
        let mut idx = VectorIndex::new(Metric::Cosine, 2);
        // same direction, different magnitude: identical cosine scores
        idx.insert("zeta".into(), EmbeddingVector::new(vec![2.0, 0.0]).unwrap()).unwrap();
        idx.insert("alpha".into(), EmbeddingVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        idx.insert("mid".into(), EmbeddingVector::new(vec![3.0, 0.0]).unwrap()).unwrap();
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let hits = idx.search(&q, 3).unwrap();
        let ids: Vec<_> = hits.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut idx = VectorIndex::new(Metric::Cosine, 1);
        idx.insert("u1".into(), EmbeddingVector::new(vec![1.0]).unwrap()).unwrap();
        assert!(matches!(
            idx.insert("u1".into(), EmbeddingVector::new(vec![2.0]).unwrap()),
            Err(VindexError::DuplicateId(_))
        ));
        assert!(matches!(
            idx.insert("u2".into(), EmbeddingVector::new(vec![1.0, 2.0]).unwrap()),
            Err(VindexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_query_under_cosine_returns_lexicographically_first() {
        let mut idx = VectorIndex::new(Metric::Cosine, 2);
        idx.insert("b-unit".into(), EmbeddingVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        idx.insert("a-unit".into(), EmbeddingVector::new(vec![0.0, 1.0]).unwrap()).unwrap();
        let hits = idx.search(&EmbeddingVector::new(vec![0.0, 0.0]).unwrap(), 1).unwrap();
        assert_eq!(hits[0], ("a-unit".to_string(), 0.0));
    }

    #[test]
    fn batch_embedding_preserves_order() {
        let texts: Vec<String> = (0..32).map(|i| format!("token{i} shared")).collect();
        let batch = embed_batch(&HashEmbedder, texts.clone()).unwrap();
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(batch[i], embed_local(t));
        }
    }
}
