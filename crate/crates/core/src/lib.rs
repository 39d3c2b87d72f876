//! Search-agent trajectories with per-query credit.
//!
//! The crate runs a tool-using search policy, scores every search query for
//! novelty and usefulness, rewrites weak queries and regenerates from them,
//! and turns the results into supervised, preference and group-relative
//! training data.

pub mod agent_loop;
pub mod backends;
pub mod credit;
pub mod curriculum;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod refine;
pub mod transcript;
