//! Select-then-predict machinery for tabular in-context learning.
//!
//! The crate covers the full desk-scale workflow:
//!
//! - [`table`] / [`prompt`]: tables, task instances, and the
//!   `<select> ... </select>` / `\boxed{...}` text protocol;
//! - [`pipeline`]: identifier removal, mutual-information feature filtering,
//!   row embeddings, evidence retrieval, and context assembly;
//! - [`rewards`]: the format / evidence / correctness reward triple;
//! - [`advantage`]: group whitening, EMA task-advantage balancing, and
//!   combined advantages;
//! - [`grpo`]: grouped rollouts, the clipped surrogate objective, and a
//!   training loop over an analytically differentiable toy policy;
//! - [`synthesis`]: the teacher-driven cold-start corpus workflow with
//!   rejection gates, plus the RL-set difficulty filter;
//! - [`eval`] / [`synthetic`]: the multi-shot evaluation protocol, rank
//!   aggregation, and seeded synthetic table generation.
//!
//! See the book under `book/` for a guided tour; its code blocks run as
//! doctests.

pub mod advantage;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod prompt;
pub mod rewards;
pub mod synthesis;
pub mod synthetic;
pub mod table;

pub use error::{Error, Result};

/// Deterministic seed derivation: folds the parts into a single 64-bit seed
/// with splitmix64 steps, so parallel and serial schedules can draw from
/// identical per-slot streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &part in parts {
        state ^= splitmix64(part.wrapping_add(state));
        state = splitmix64(state);
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(doctest)]
mod booktests {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tables-and-prompts.md")]
    pub struct TablesAndPrompts;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub struct Pipeline;
    #[doc = include_str!("../../../book/src/rewards.md")]
    pub struct Rewards;
    #[doc = include_str!("../../../book/src/advantages.md")]
    pub struct Advantages;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/synthesis.md")]
    pub struct Synthesis;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_order_sensitive() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }
}
