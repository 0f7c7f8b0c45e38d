//! Collective KV cache reuse for round-based multi-agent prompts.
//!
//! Each round every agent's prompt is its private history followed by the
//! round's shared outputs in an agent-specific order. Cached segments are
//! reused at arbitrary offsets by RoPE re-rotation and selective
//! recomputation, compatible requests are recovered together, and the
//! resulting sibling caches are stored as one dense master plus block-sparse
//! mirrors that restore straight into a paged pool.

pub mod collective;
pub mod diffstore;
pub mod fused_restore;
pub mod harness;
pub mod ledger;
pub mod paged_pool;
pub mod pic;
pub mod segment_index;
pub mod toymodel;
pub mod types;
