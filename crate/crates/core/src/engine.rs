//! Round-based protocol execution for a single nym.
//!
//! Each simulation run drives one pseudonym over a [`RoundGrid`]: per round
//! the engine forms the online subset of the nym's roster, asks the policy
//! oracle for the filtered set, posts a queued message iff the owner
//! survived the filter, and feeds the realized outcome back to the oracle.
//! The owner is known only to the engine and to the evaluation harness;
//! the oracle's inputs never include it.

use std::collections::VecDeque;
use std::io::Write;

use thiserror::Error;

use crate::policy::{PolicyOracle, PolicySpec, SacrificeOrder};
use crate::trace::{RoundGrid, UserTag};
use crate::userset::{UserId, UserSet};

/// Opaque pseudonym identifier, unique within a simulation batch.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NymId(String);

impl NymId {
    pub fn new(id: impl Into<String>) -> Self {
        NymId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for NymId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NymStatus {
    Usable,
    /// Permanently disabled; never transitions back within a run.
    Squelched,
}

/// A pseudonym's run state. `owner` stays private to the engine and the
/// evaluation harness.
#[derive(Debug, Clone, PartialEq)]
pub struct NymState {
    pub id: NymId,
    owner: UserId,
    /// Frozen at first post: the users online in the creation round, and
    /// the largest anonymity set the nym can ever have.
    pub roster: UserSet,
    pub policy: PolicySpec,
    pub created_round: usize,
    pub status: NymStatus,
}

impl NymState {
    /// Ground-truth accessor for the evaluation harness. Policy code never
    /// receives this.
    pub fn owner(&self) -> UserId {
        self.owner
    }

    /// Direct construction for evaluation harnesses, e.g. attack
    /// calibration against hand-built histories or uniformly random owner
    /// assignment.
    pub fn for_harness(
        id: NymId,
        owner: UserId,
        roster: UserSet,
        policy: PolicySpec,
        created_round: usize,
    ) -> NymState {
        debug_assert!(roster.contains(owner));
        NymState {
            id,
            owner,
            roster,
            policy,
            created_round,
            status: NymStatus::Usable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// A real message was posted this round.
    Posted { payload_len: u32, delay_rounds: u64 },
    /// Null output: owner offline, filtered, or idle. Indistinguishable to
    /// observers.
    Null,
}

impl Outcome {
    pub fn is_posted(&self) -> bool {
        matches!(self, Outcome::Posted { .. })
    }
}

/// One protocol round as an observer sees it, plus the queue depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub index: usize,
    /// Online roster members this round.
    pub online: UserSet,
    /// The policy oracle's filtered set, always a subset of `online`.
    pub filtered: UserSet,
    pub outcome: Outcome,
    /// Messages still queued after this round.
    pub delayed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub nym: NymState,
    /// Contiguous records from `nym.created_round`.
    pub history: Vec<RoundRecord>,
    pub rng_seed: u64,
}

#[derive(Error, Debug)]
pub enum EngineError {
    #[error("user {0} does not appear in the grid")]
    UnknownUser(String),
    #[error("round {round} out of range ({rounds} rounds)")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("owner {tag} is offline in round {round}; a nym cannot be born from an offline owner")]
    OwnerOffline { tag: String, round: usize },
    #[error("user {0} has no messages to schedule")]
    NoMessages(String),
    #[error("user {0} is never online from its first message round onward")]
    OwnerNeverOnline(String),
}

/// Create a nym at `first_post_round`. The roster freezes to that round's
/// online set; users joining later never enter the nym's anonymity sets.
pub fn new_nym(
    grid: &RoundGrid,
    id: NymId,
    owner: &UserTag,
    policy: &PolicySpec,
    first_post_round: usize,
) -> Result<NymState, EngineError> {
    let owner_id = grid
        .id_of(owner)
        .ok_or_else(|| EngineError::UnknownUser(owner.to_string()))?;
    if first_post_round >= grid.rounds() {
        return Err(EngineError::RoundOutOfRange {
            round: first_post_round,
            rounds: grid.rounds(),
        });
    }
    if !grid.online(first_post_round).contains(owner_id) {
        return Err(EngineError::OwnerOffline {
            tag: owner.to_string(),
            round: first_post_round,
        });
    }
    Ok(NymState {
        id,
        owner: owner_id,
        roster: grid.online(first_post_round).clone(),
        policy: policy.clone(),
        created_round: first_post_round,
        status: NymStatus::Usable,
    })
}

fn build_oracle(grid: &RoundGrid, roster: &UserSet, policy: &PolicySpec) -> PolicyOracle {
    let mut per_user = vec![None; grid.user_count()];
    for (tag, tol) in &policy.per_user_tolerance {
        if let Some(id) = grid.id_of(tag) {
            per_user[id.0] = Some(*tol);
        }
    }
    let deity = (policy.sacrifice_order == SacrificeOrder::OracleMaxOffline)
        .then(|| grid.max_offline_streaks());
    PolicyOracle::new(policy.clone(), roster, per_user, deity)
}

/// Replay one user's message schedule as a pseudonym.
///
/// The nym is created at the owner's first message round (or the first
/// round at or after it where the owner is online, when discretization put
/// the message just ahead of the interval start). It is scheduled every
/// round until the last queued message is delivered, the policy squelches
/// it, or the grid ends. Message delays count from the original schedule
/// round.
pub fn simulate_nym(
    grid: &RoundGrid,
    id: NymId,
    owner: &UserTag,
    policy: &PolicySpec,
) -> Result<SimulationRun, EngineError> {
    let owner_id = grid
        .id_of(owner)
        .ok_or_else(|| EngineError::UnknownUser(owner.to_string()))?;
    let schedule = grid.user_message_rounds(owner_id);
    if schedule.is_empty() {
        return Err(EngineError::NoMessages(owner.to_string()));
    }
    let first_msg_round = schedule[0].0;
    let created = (first_msg_round..grid.rounds())
        .find(|&r| grid.online(r).contains(owner_id))
        .ok_or_else(|| EngineError::OwnerNeverOnline(owner.to_string()))?;
    let mut nym = new_nym(grid, id, owner, policy, created)?;
    let mut oracle = build_oracle(grid, &nym.roster, policy);

    let mut history = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut next_sched = 0;
    for round in created..grid.rounds() {
        while next_sched < schedule.len() && schedule[next_sched].0 <= round {
            let (sched_round, count) = schedule[next_sched];
            for _ in 0..count {
                queue.push_back(sched_round);
            }
            next_sched += 1;
        }
        let online = grid.online(round).intersection(&nym.roster);
        let filtered = oracle.filter(round, &online);
        debug_assert!(filtered.is_subset_of(&online));
        let outcome = if !queue.is_empty() && filtered.contains(owner_id) {
            let sched_round = queue.pop_front().expect("non-empty");
            Outcome::Posted {
                payload_len: 1,
                delay_rounds: (round - sched_round) as u64,
            }
        } else {
            Outcome::Null
        };
        oracle.observe_outcome(outcome.is_posted(), &filtered);
        history.push(RoundRecord {
            index: round,
            online,
            filtered,
            outcome,
            delayed: queue.len(),
        });
        if oracle.is_squelched() {
            nym.status = NymStatus::Squelched;
            break;
        }
        if queue.is_empty() && next_sched == schedule.len() {
            break;
        }
    }

    Ok(SimulationRun {
        rng_seed: policy.seed,
        nym,
        history,
    })
}

/// Export a run's public history:
/// `round,scheduled_nym,online_count,filtered_count,outcome,delivered_delay_rounds`.
pub fn write_history_csv<W: Write>(run: &SimulationRun, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "round,scheduled_nym,online_count,filtered_count,outcome,delivered_delay_rounds"
    )?;
    for rec in &run.history {
        match &rec.outcome {
            Outcome::Posted { delay_rounds, .. } => writeln!(
                w,
                "{},{},{},{},nonnull,{}",
                rec.index,
                run.nym.id,
                rec.online.len(),
                rec.filtered.len(),
                delay_rounds
            )?,
            Outcome::Null => writeln!(
                w,
                "{},{},{},{},null,",
                rec.index,
                run.nym.id,
                rec.online.len(),
                rec.filtered.len()
            )?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Formation;
    use crate::trace::{discretize, parse_trace};
    use std::io::Cursor;

    fn grid_from_log(text: &str, interval: u64) -> RoundGrid {
        let trace = parse_trace(Cursor::new(text)).unwrap();
        discretize(&trace, interval).unwrap()
    }

    /// Grid built directly from per-round online rows and message rounds.
    fn grid_from_rows(
        names: &[&str],
        rows: &[&[usize]],
        messages: &[(usize, usize)], // (round, user)
    ) -> RoundGrid {
        let users: Vec<UserTag> = names.iter().map(|&n| UserTag::from(n)).collect();
        let n = users.len();
        let online: Vec<UserSet> = rows
            .iter()
            .map(|row| UserSet::from_ids(n, row.iter().map(|&i| UserId(i))))
            .collect();
        let mut msgs: Vec<Vec<(UserId, u32)>> = vec![Vec::new(); rows.len()];
        for &(round, user) in messages {
            match msgs[round].binary_search_by_key(&UserId(user), |&(u, _)| u) {
                Ok(pos) => msgs[round][pos].1 += 1,
                Err(pos) => msgs[round].insert(pos, (UserId(user), 1)),
            }
        }
        RoundGrid::from_parts(1, users, online, msgs).unwrap()
    }

    #[test]
    fn new_nym_captures_roster() {
        let grid = grid_from_rows(&["a", "b", "c"], &[&[0, 1, 2], &[0, 1]], &[]);
        let nym = new_nym(
            &grid,
            NymId::new("n"),
            &UserTag::from("a"),
            &PolicySpec::default(),
            0,
        )
        .unwrap();
        assert_eq!(nym.roster, UserSet::full(3));
        assert_eq!(nym.status, NymStatus::Usable);
    }

    #[test]
    fn new_nym_rejects_offline_owner() {
        let grid = grid_from_rows(&["a", "b"], &[&[0]], &[]);
        let err = new_nym(
            &grid,
            NymId::new("n"),
            &UserTag::from("b"),
            &PolicySpec::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::OwnerOffline { .. }));
        let err = new_nym(
            &grid,
            NymId::new("n"),
            &UserTag::from("zz"),
            &PolicySpec::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::UnknownUser(_)));
    }

    #[test]
    fn permissive_policy_delivers_without_delay() {
        // owner posts at rounds 2 and 5; nobody ever goes offline
        let grid = grid_from_log("0 JOIN a\n0 JOIN b\n2 MSG a\n5 MSG a\n9 LEAVE a\n9 LEAVE b\n", 1);
        let run = simulate_nym(
            &grid,
            NymId::new("n"),
            &UserTag::from("a"),
            &PolicySpec::default(),
        )
        .unwrap();
        assert_eq!(run.nym.created_round, 2);
        assert_eq!(run.history.len(), 4); // rounds 2..=5
        let delays: Vec<_> = run
            .history
            .iter()
            .filter_map(|r| match r.outcome {
                Outcome::Posted { delay_rounds, .. } => Some(delay_rounds),
                Outcome::Null => None,
            })
            .collect();
        assert_eq!(delays, vec![0, 0]);
        assert_eq!(run.nym.status, NymStatus::Usable);
    }

    #[test]
    fn offline_owner_round_is_null_despite_queue() {
        // owner a: online round 0, offline round 1, online 2..; messages at rounds 0 and 1
        let grid = grid_from_rows(
            &["a", "b"],
            &[&[0, 1], &[1], &[0, 1]],
            &[(0, 0), (1, 0)],
        );
        let run = simulate_nym(
            &grid,
            NymId::new("n"),
            &UserTag::from("a"),
            &PolicySpec::default(),
        )
        .unwrap();
        assert_eq!(run.history[0].outcome.is_posted(), true);
        assert_eq!(run.history[1].outcome, Outcome::Null);
        match run.history[2].outcome {
            Outcome::Posted { delay_rounds, .. } => assert_eq!(delay_rounds, 1),
            _ => panic!("message should deliver at round 2"),
        }
    }

    #[test]
    fn strawman_waits_for_full_roster() {
        // b offline in rounds 1 and 2; owner's message at round 1 waits
        let grid = grid_from_rows(
            &["a", "b", "c"],
            &[&[0, 1, 2], &[0, 2], &[0, 2], &[0, 1, 2]],
            &[(0, 0), (1, 0)],
        );
        let spec = PolicySpec {
            strawman: true,
            ..Default::default()
        };
        let run = simulate_nym(&grid, NymId::new("n"), &UserTag::from("a"), &spec).unwrap();
        assert!(run.history[0].outcome.is_posted());
        assert_eq!(run.history[1].outcome, Outcome::Null);
        assert!(run.history[1].filtered.is_empty());
        assert_eq!(run.history[2].outcome, Outcome::Null);
        match run.history[3].outcome {
            Outcome::Posted { delay_rounds, .. } => assert_eq!(delay_rounds, 2),
            _ => panic!("delayed message should post once everyone returns"),
        }
    }

    #[test]
    fn lazy_buddy_run_matches_hand_stepped_execution() {
        // Four users, K=2, zero tolerance. d misses round 1 only.
        let grid = grid_from_rows(
            &["a", "b", "c", "d"],
            &[&[0, 1, 2, 3], &[0, 1, 2], &[0, 1, 2, 3]],
            &[(0, 0), (1, 0)],
        );
        let spec = PolicySpec {
            buddy_min: 2,
            offline_tolerance: Some(0),
            formation: Formation::Lazy,
            sacrifice_order: crate::policy::SacrificeOrder::LeastReliable,
            ..Default::default()
        };
        let run = simulate_nym(&grid, NymId::new("n"), &UserTag::from("a"), &spec).unwrap();
        // round 0: one big buddy set, everyone passes, message posts
        assert_eq!(run.history[0].filtered, UserSet::full(4));
        assert!(run.history[0].outcome.is_posted());
        // round 1: d gone; the set splits and the least reliable online
        // member (a, by tag order among ties) is sacrificed into d's set,
        // leaving {b,c} filtered and the owner's message delayed
        assert_eq!(
            run.history[1].filtered,
            UserSet::from_ids(4, [UserId(1), UserId(2)])
        );
        assert_eq!(run.history[1].outcome, Outcome::Null);
        // round 2: {a,d} fully online again, rejoins in unison
        assert_eq!(run.history[2].filtered, UserSet::full(4));
        match run.history[2].outcome {
            Outcome::Posted { delay_rounds, .. } => assert_eq!(delay_rounds, 1),
            _ => panic!("queued message should deliver after rejoin"),
        }
        assert_eq!(run.history.len(), 3);
    }

    #[test]
    fn runs_are_deterministic_and_independent() {
        let grid = grid_from_log(
            "0 JOIN a\n0 JOIN b\n0 JOIN c\n1 MSG a\n2 MSG b\n4 LEAVE c\n6 MSG a\n8 LEAVE a\n8 LEAVE b\n",
            1,
        );
        let spec = PolicySpec {
            buddy_min: 2,
            offline_tolerance: Some(1),
            seed: 7,
            ..Default::default()
        };
        let a1 = simulate_nym(&grid, NymId::new("n1"), &UserTag::from("a"), &spec).unwrap();
        let b = simulate_nym(&grid, NymId::new("n2"), &UserTag::from("b"), &spec).unwrap();
        let a2 = simulate_nym(&grid, NymId::new("n1"), &UserTag::from("a"), &spec).unwrap();
        assert_eq!(a1, a2);
        assert!(!b.history.is_empty());
    }

    #[test]
    fn policies_cannot_see_the_owner() {
        // a and b have identical online rows and message schedules; with
        // the owner hidden from the policy, both runs must produce the
        // same filtered sequences
        let grid = grid_from_rows(
            &["a", "b", "c", "d"],
            &[
                &[0, 1, 2, 3],
                &[0, 1, 3],
                &[0, 1, 2],
                &[0, 1, 2, 3],
                &[0, 1],
            ],
            &[(0, 0), (3, 0), (0, 1), (3, 1)],
        );
        for spec in [
            PolicySpec::default(),
            PolicySpec {
                possinymity_floor: 2,
                ..Default::default()
            },
            PolicySpec {
                possinymity_floor: 2,
                offline_tolerance: Some(1),
                ..Default::default()
            },
        ] {
            let run_a = simulate_nym(&grid, NymId::new("n"), &UserTag::from("a"), &spec).unwrap();
            let run_b = simulate_nym(&grid, NymId::new("n"), &UserTag::from("b"), &spec).unwrap();
            let p_a: Vec<&UserSet> = run_a.history.iter().map(|r| &r.filtered).collect();
            let p_b: Vec<&UserSet> = run_b.history.iter().map(|r| &r.filtered).collect();
            assert_eq!(p_a, p_b);
        }
    }

    #[test]
    fn no_messages_is_an_error() {
        let grid = grid_from_rows(&["a"], &[&[0]], &[]);
        let err =
            simulate_nym(&grid, NymId::new("n"), &UserTag::from("a"), &PolicySpec::default())
                .unwrap_err();
        assert!(matches!(err, EngineError::NoMessages(_)));
    }

    #[test]
    fn undersized_roster_squelches_at_first_round() {
        let grid = grid_from_rows(&["a", "b"], &[&[0], &[0, 1]], &[(0, 0)]);
        let spec = PolicySpec {
            buddy_min: 2,
            ..Default::default()
        };
        let run = simulate_nym(&grid, NymId::new("n"), &UserTag::from("a"), &spec).unwrap();
        assert_eq!(run.nym.roster.len(), 1);
        assert_eq!(run.history.len(), 1);
        assert!(run.history[0].filtered.is_empty());
        assert_eq!(run.nym.status, NymStatus::Squelched);
    }

    #[test]
    fn history_csv_has_contracted_header() {
        let grid = grid_from_rows(&["a", "b"], &[&[0, 1], &[0, 1]], &[(0, 0)]);
        let run = simulate_nym(
            &grid,
            NymId::new("N0"),
            &UserTag::from("a"),
            &PolicySpec::default(),
        )
        .unwrap();
        let mut out = Vec::new();
        write_history_csv(&run, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,scheduled_nym,online_count,filtered_count,outcome,delivered_delay_rounds"
        );
        assert_eq!(lines.next().unwrap(), "0,N0,2,2,nonnull,0");
    }
}
