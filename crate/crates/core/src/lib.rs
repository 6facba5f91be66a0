//! Trace-driven simulation of a round-based anonymous posting system that
//! actively resists long-term intersection attacks.
//!
//! The model: users churn on and off line while an anonymizer runs
//! synchronous rounds. Each round one pseudonym (nym) is scheduled; every
//! online user submits cover traffic, and the nym's owner may post a real
//! message — unless a policy oracle, working from public information only,
//! filters users out to keep the nym's anonymity from degrading. Watching
//! only filtered sets and null/non-null outcomes, an adversary can
//! intersect away a nym's anonymity; the policies here meter that loss and
//! trade availability to bound it.
//!
//! Module map:
//!
//! * [`trace`] — event-log parsing, reconnect repair, synthetic traces,
//!   and discretization into per-round online sets ([`trace::RoundGrid`]).
//! * [`engine`] — the per-round protocol loop for one nym
//!   ([`engine::simulate_nym`]).
//! * [`policy`] — the policy oracle: straw-man, possinymity floor,
//!   loss-rate limiting, and buddy-set enforcement with lazy splits.
//! * [`metrics`] — possinymity and indinymity meters, ideal-anonymity
//!   analyses, and usability statistics.
//! * [`attack`] — a probabilistic intersection adversary used to validate
//!   the enforced bounds empirically.
//!
//! Everything is deterministic for a fixed seed: traces, policies, and the
//! adversary all draw from explicit seeded generators, so a configuration
//! reproduces byte-identical results.

pub mod attack;
pub mod engine;
pub mod metrics;
pub mod policy;
pub mod trace;
pub mod userset;

pub use attack::{evaluate_attack, AttackConfig, AttackState};
pub use engine::{simulate_nym, NymId, NymState, Outcome, RoundRecord, SimulationRun};
pub use metrics::{
    ideal_lowlatency, ideal_maxoffline, partition_from_history, possinymity, usability_stats,
};
pub use policy::{Formation, PolicyOracle, PolicySpec, SacrificeOrder};
pub use trace::{
    discretize, generate_synthetic, parse_trace, repair_reconnects, RoundGrid, SyntheticParams,
    Trace, UserTag,
};
pub use userset::{UserId, UserSet};
