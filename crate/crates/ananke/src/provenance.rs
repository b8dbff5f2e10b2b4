//! Provenance graph over a log set: entities are nodes, events are edges.
//!
//! The graph is immutable once built. Queries never mutate it, so expansion
//! during an investigation cannot drift the underlying evidence.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::ingest::LogSet;
use crate::model::{Entity, Event};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
}

/// Which edges an expansion keeps.
///
/// `Full` keeps every edge whose both endpoints lie in the one-hop
/// neighborhood, including neighbor-neighbor edges. `Star` keeps only edges
/// incident to the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducedEdges {
    Full,
    Star,
}

#[derive(Debug, Serialize)]
pub struct ProvenanceGraph {
    nodes: BTreeMap<String, Entity>,
    edges: Vec<Event>,
    adjacency: BTreeMap<String, Vec<usize>>,
}

impl ProvenanceGraph {
    /// Nodes are keyed by canonical key; raw spellings that normalize alike
    /// merge into one node (first-seen entity metadata wins). Self-loops are
    /// legal and recorded once in the adjacency list.
    pub fn build(log_set: LogSet) -> Self {
        let mut nodes = BTreeMap::new();
        let mut adjacency: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let edges = log_set.events;
        for (idx, ev) in edges.iter().enumerate() {
            let s_key = ev.subject.canonical_key.clone();
            let o_key = ev.object.canonical_key.clone();
            nodes.entry(s_key.clone()).or_insert_with(|| ev.subject.clone());
            nodes.entry(o_key.clone()).or_insert_with(|| ev.object.clone());
            adjacency.entry(s_key.clone()).or_default().push(idx);
            if o_key != s_key {
                adjacency.entry(o_key).or_default().push(idx);
            }
        }
        ProvenanceGraph { nodes, edges, adjacency }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_node(&self, key: &str) -> bool {
        self.nodes.contains_key(key)
    }

    pub fn node_keys(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(|s| s.as_str())
    }

    pub fn entity(&self, key: &str) -> Option<&Entity> {
        self.nodes.get(key)
    }

    pub fn edges(&self) -> &[Event] {
        &self.edges
    }

    /// Edge indices incident to `key`, ascending (which is (ts, seq_no) order
    /// because edges are stored sorted).
    pub fn incident(&self, key: &str) -> &[usize] {
        self.adjacency.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// One-hop closed neighborhood: the node itself plus every endpoint of an
    /// incident edge.
    pub fn neighbors(&self, key: &str) -> Result<BTreeSet<String>, GraphError> {
        if !self.nodes.contains_key(key) {
            return Err(GraphError::UnknownNode(key.to_string()));
        }
        let mut out = BTreeSet::new();
        out.insert(key.to_string());
        for &idx in self.incident(key) {
            let ev = &self.edges[idx];
            out.insert(ev.subject.canonical_key.clone());
            out.insert(ev.object.canonical_key.clone());
        }
        Ok(out)
    }

    /// Expands around `center`: member nodes are the closed neighborhood, edge
    /// set per `mode`. Edge indices come back ascending.
    pub fn adjacency_subgraph(&self, center: &str, mode: InducedEdges) -> Result<AdjacencySubgraph, GraphError> {
        let member_keys = self.neighbors(center)?;
        let mut edge_indices: Vec<usize> = match mode {
            InducedEdges::Star => self.incident(center).to_vec(),
            InducedEdges::Full => {
                let mut candidates: Vec<usize> = member_keys.iter().flat_map(|k| self.incident(k).iter().copied()).collect();
                candidates.sort_unstable();
                candidates.dedup();
                candidates
                    .into_iter()
                    .filter(|&idx| {
                        let ev = &self.edges[idx];
                        member_keys.contains(&ev.subject.canonical_key) && member_keys.contains(&ev.object.canonical_key)
                    })
                    .collect()
            }
        };
        edge_indices.sort_unstable();
        Ok(AdjacencySubgraph { center: center.to_string(), member_keys, edge_indices })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("graph serializes")
    }
}

/// One-hop expansion result. `edge_indices` index into the parent graph's
/// edge array and stay sorted by (timestamp, seq_no).
#[derive(Debug, Clone, Serialize)]
pub struct AdjacencySubgraph {
    pub center: String,
    pub member_keys: BTreeSet<String>,
    pub edge_indices: Vec<usize>,
}

/// A chunk of a subgraph's events, in temporal order, ready for reasoning.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ContextSequence {
    pub events: Vec<Event>,
    pub origin_node: String,
    pub chunk_index: usize,
}

/// Orders the subgraph's events by (timestamp, seq_no) and splits them into
/// chunks of at most `n_max`. Lossless: concatenating the chunks yields the
/// sorted event list. An empty subgraph yields no sequences.
pub fn order_and_partition(sub: &AdjacencySubgraph, graph: &ProvenanceGraph, n_max: usize) -> Vec<ContextSequence> {
    assert!(n_max >= 1, "n_max must be at least 1");
    let edges = graph.edges();
    debug_assert!(sub.edge_indices.windows(2).all(|w| w[0] < w[1]));
    sub.edge_indices
        .chunks(n_max)
        .enumerate()
        .map(|(chunk_index, chunk)| ContextSequence {
            events: chunk.iter().map(|&i| edges[i].clone()).collect(),
            origin_node: sub.center.clone(),
            chunk_index,
        })
        .collect()
}
