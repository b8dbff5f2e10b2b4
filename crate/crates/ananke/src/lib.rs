//! Alert-driven attack investigation over provenance graphs.
//!
//! The pipeline in one breath: host logs become a provenance graph
//! ([`provenance`]); labeled attack traces are annotated into kill-chain
//! phase segments, chunked, and embedded into a knowledge base ([`kb`]);
//! an investigation walks the graph outward from an alert, retrieving the
//! closest attack pattern for each context sequence and asking a language
//! model which entities are malicious ([`investigator`]); results are scored
//! ([`eval`]) and rendered ([`report`]). [`scenario`] generates labeled
//! synthetic inputs so the whole loop runs offline, and [`llm`] hosts the
//! model backends (HTTP, record/replay cassette, deterministic rule oracle).
//!
//! The `parallel` feature (on by default) fans embedding and similarity
//! search out with rayon; disabling it yields the same results sequentially.

pub mod config;
pub mod eval;
pub mod ingest;
pub mod investigator;
pub mod kb;
pub mod llm;
pub mod model;
mod par;
pub mod provenance;
pub mod report;
pub mod scenario;
pub mod vindex;
