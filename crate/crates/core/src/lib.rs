//! Sparse "best known answer" qrels for leaderboards.
//!
//! The pipeline is: pool the top of every run together with the incumbent
//! qrels, judge every pool pair as a preference, aggregate the judgments with
//! a per-query tournament, and evaluate runs against the winners.

pub mod aggregate;
pub mod corpus;
pub mod ids;
pub mod judgment_log;
pub mod metrics;
pub mod pooling;
pub mod provenance;
pub mod seed;
pub mod sim_assessor;
pub mod tasking;

pub use aggregate::{build_preference_qrels, run_tournament, Mode, PreferenceQrels, Resolution, TournamentResult};
pub use corpus::{Collection, QrelSet, Run};
pub use ids::{ItemId, QueryId};
pub use judgment_log::{JudgmentLog, LogEvent, PairKind, PreferenceJudgment, PreferenceSet};
pub use pooling::{build_pools, Pool, Pools};
pub use provenance::Provenance;
pub use tasking::{JudgmentPair, Side, Task};
