//! The Policy Oracle: per-round user filtering from public information.
//!
//! The oracle decides which online users may post in a round. It sees only
//! public data — the roster, per-round online sets, and the null/non-null
//! outcomes fed back by the engine — never a nym's owner. Four sub-policies
//! compose; a user passes only if every enabled sub-policy admits it:
//!
//! * straw-man: admit everyone when the whole roster is online, else nobody;
//! * possibilistic-anonymity floor: block the round if posting would shrink
//!   the running anonymity set below `possinymity_floor`;
//! * loss-rate limiting: block the round while recently missing members are
//!   within their offline tolerance, then give up on them permanently;
//! * buddy enforcement: partition the roster into sets of at least
//!   `buddy_min` users that pass or fail the filter as a unit, splitting
//!   lazily (and sacrificing online users) as members churn away.
//!
//! All randomness flows through the seeded generator in [`PolicySpec`], so a
//! policy is a deterministic function of its inputs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::userset::{UserId, UserSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formation {
    Static,
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SacrificeOrder {
    /// Seeded random priority, fixed for the nym's lifetime.
    Random,
    /// Worst observed offline streak first; ties by longest time since
    /// first seen, then tag order.
    LeastReliable,
    /// Worst whole-trace offline streak first ("deity" ranking computed
    /// from the full grid, future included).
    OracleMaxOffline,
}

#[derive(Error, Debug)]
pub enum PolicyError {
    #[error("unknown policy key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for policy key {key:?}")]
    InvalidValue { key: String, value: String },
}

/// Per-nym mitigation parameters, announced with the nym's first post.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    /// Minimum possibilistic anonymity to preserve; 0 disables.
    pub possinymity_floor: usize,
    /// Minimum buddy-set size K; 1 disables buddy enforcement.
    pub buddy_min: usize,
    /// Rounds a member may be missing before the policy gives up on it;
    /// `Some(0)` gives up immediately, `None` disables loss-rate limiting.
    pub offline_tolerance: Option<u32>,
    /// Longer thresholds for users worth waiting for.
    pub per_user_tolerance: BTreeMap<crate::trace::UserTag, u32>,
    pub formation: Formation,
    pub sacrifice_order: SacrificeOrder,
    pub strawman: bool,
    pub seed: u64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            possinymity_floor: 0,
            buddy_min: 1,
            offline_tolerance: None,
            per_user_tolerance: BTreeMap::new(),
            formation: Formation::Lazy,
            sacrifice_order: SacrificeOrder::Random,
            strawman: false,
            seed: 0,
        }
    }
}

impl PolicySpec {
    /// Flat key=value form used by config files.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert(
            "possinymity_floor".into(),
            self.possinymity_floor.to_string(),
        );
        kv.insert("buddy_min".into(), self.buddy_min.to_string());
        if let Some(t) = self.offline_tolerance {
            kv.insert("offline_tolerance_rounds".into(), t.to_string());
        }
        kv.insert(
            "formation".into(),
            match self.formation {
                Formation::Static => "static".into(),
                Formation::Lazy => "lazy".into(),
            },
        );
        kv.insert(
            "sacrifice_order".into(),
            match self.sacrifice_order {
                SacrificeOrder::Random => "random".into(),
                SacrificeOrder::LeastReliable => "least_reliable".into(),
                SacrificeOrder::OracleMaxOffline => "oracle_max_offline".into(),
            },
        );
        kv.insert("strawman".into(), self.strawman.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv
    }

    pub fn from_kv<'a, I>(pairs: I) -> Result<PolicySpec, PolicyError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut spec = PolicySpec::default();
        for (key, value) in pairs {
            let bad = || PolicyError::InvalidValue {
                key: key.into(),
                value: value.into(),
            };
            match key {
                "possinymity_floor" => spec.possinymity_floor = value.parse().map_err(|_| bad())?,
                "buddy_min" => {
                    spec.buddy_min = value.parse().map_err(|_| bad())?;
                    if spec.buddy_min == 0 {
                        return Err(bad());
                    }
                }
                "offline_tolerance_rounds" => {
                    spec.offline_tolerance = Some(value.parse().map_err(|_| bad())?)
                }
                "formation" => {
                    spec.formation = match value {
                        "static" => Formation::Static,
                        "lazy" => Formation::Lazy,
                        _ => return Err(bad()),
                    }
                }
                "sacrifice_order" => {
                    spec.sacrifice_order = match value {
                        "random" => SacrificeOrder::Random,
                        "least_reliable" => SacrificeOrder::LeastReliable,
                        "oracle_max_offline" => SacrificeOrder::OracleMaxOffline,
                        _ => return Err(bad()),
                    }
                }
                "strawman" => spec.strawman = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                other => return Err(PolicyError::UnknownKey(other.into())),
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuddyStatus {
    /// May appear in filtered sets while fully online.
    Eligible,
    /// Excluded until all members are simultaneously online again.
    Offline,
    /// Permanently excluded (undersized residual or collapsed formation).
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuddySet {
    pub members: UserSet,
    pub status: BuddyStatus,
}

/// Disjoint buddy sets covering the roster exactly. Sets only split over a
/// nym's lifetime, never merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuddyPartition {
    pub sets: Vec<BuddySet>,
}

impl BuddyPartition {
    pub fn is_partition_of(&self, roster: &UserSet) -> bool {
        let mut union = UserSet::empty(roster.universe());
        for (i, s) in self.sets.iter().enumerate() {
            if !union.is_disjoint(&s.members) {
                return false;
            }
            union.union_with(&s.members);
            for other in &self.sets[i + 1..] {
                if !s.members.is_disjoint(&other.members) {
                    return false;
                }
            }
        }
        union == *roster
    }

    /// True iff every set is a subset of some set of `earlier`.
    pub fn refines(&self, earlier: &BuddyPartition) -> bool {
        self.sets.iter().all(|s| {
            earlier
                .sets
                .iter()
                .any(|e| s.members.is_subset_of(&e.members))
        })
    }
}

/// Divide the roster into `floor(|roster|/K)` sets of size at least K,
/// grouping users adjacent in the given priority order; the remainder is
/// spread one per set. A roster smaller than K yields one dead set.
pub fn form_static_partition(roster: &UserSet, k: usize, order: &[UserId]) -> BuddyPartition {
    debug_assert_eq!(order.len(), roster.len());
    let n = roster.len();
    let universe = roster.universe();
    if k == 0 || n < k {
        return BuddyPartition {
            sets: vec![BuddySet {
                members: roster.clone(),
                status: BuddyStatus::Dead,
            }],
        };
    }
    let groups = n / k;
    // spread all n users over the groups; base size is at least k because
    // groups = floor(n/k)
    let base = n / groups;
    let extra = n % groups;
    let mut sets = Vec::with_capacity(groups);
    let mut cursor = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        let members = UserSet::from_ids(universe, order[cursor..cursor + size].iter().copied());
        cursor += size;
        sets.push(BuddySet {
            members,
            status: BuddyStatus::Eligible,
        });
    }
    debug_assert_eq!(cursor, n);
    BuddyPartition { sets }
}

/// Lazy formation at a nym's first filtered round: one eligible set of the
/// online roster members and one offline residual. An online side smaller
/// than K collapses into a single dead set; an offline residual smaller
/// than K is kept but permanently offline.
pub fn dynamic_initial_partition(roster: &UserSet, online: &UserSet, k: usize) -> BuddyPartition {
    let online_side = roster.intersection(online);
    let offline_side = roster.difference(online);
    if online_side.len() < k {
        return BuddyPartition {
            sets: vec![BuddySet {
                members: roster.clone(),
                status: BuddyStatus::Dead,
            }],
        };
    }
    let mut sets = vec![BuddySet {
        members: online_side,
        status: BuddyStatus::Eligible,
    }];
    if !offline_side.is_empty() {
        let status = if offline_side.len() < k {
            BuddyStatus::Dead
        } else {
            BuddyStatus::Offline
        };
        sets.push(BuddySet {
            members: offline_side,
            status,
        });
    }
    BuddyPartition { sets }
}

/// Per-nym filtering state. Owned by one simulation run; sees only public
/// information.
#[derive(Debug, Clone)]
pub struct PolicyOracle {
    spec: PolicySpec,
    roster: UserSet,
    running: UserSet,
    partition: Option<BuddyPartition>,
    waiting_since: Vec<Option<usize>>,
    first_seen: Vec<Option<usize>>,
    cur_streak: Vec<u32>,
    max_streak: Vec<u32>,
    online_rounds: Vec<u32>,
    per_user_tolerance: Vec<Option<u32>>,
    random_rank: Vec<u32>,
    deity_streak: Option<Vec<u32>>,
    loss_enabled: bool,
    squelched: bool,
}

impl PolicyOracle {
    /// `per_user_tolerance` and `deity_streak` are indexed by the grid
    /// universe; `deity_streak` is required for
    /// [`SacrificeOrder::OracleMaxOffline`].
    pub fn new(
        spec: PolicySpec,
        roster: &UserSet,
        per_user_tolerance: Vec<Option<u32>>,
        deity_streak: Option<Vec<u32>>,
    ) -> Self {
        let universe = roster.universe();
        assert_eq!(per_user_tolerance.len(), universe);
        assert!(
            deity_streak.is_some() || spec.sacrifice_order != SacrificeOrder::OracleMaxOffline,
            "oracle_max_offline ordering needs whole-grid offline streaks"
        );
        let mut ids: Vec<u32> = (0..universe as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        ids.shuffle(&mut rng);
        let mut random_rank = vec![0u32; universe];
        for (rank, id) in ids.into_iter().enumerate() {
            random_rank[id as usize] = rank as u32;
        }
        let loss_enabled =
            spec.offline_tolerance.is_some() || per_user_tolerance.iter().any(Option::is_some);
        PolicyOracle {
            spec,
            roster: roster.clone(),
            running: roster.clone(),
            partition: None,
            waiting_since: vec![None; universe],
            first_seen: vec![None; universe],
            cur_streak: vec![0; universe],
            max_streak: vec![0; universe],
            online_rounds: vec![0; universe],
            per_user_tolerance,
            random_rank,
            deity_streak,
            loss_enabled,
            squelched: false,
        }
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn running_possinymity(&self) -> &UserSet {
        &self.running
    }

    pub fn partition(&self) -> Option<&BuddyPartition> {
        self.partition.as_ref()
    }

    /// True once the oracle can prove no future round will let anyone post:
    /// every buddy set is permanently dead, or the running anonymity set
    /// has fallen below the enforced floor.
    pub fn is_squelched(&self) -> bool {
        self.squelched
    }

    fn tolerance(&self, u: UserId) -> u32 {
        self.per_user_tolerance[u.0]
            .or(self.spec.offline_tolerance)
            .unwrap_or(0)
    }

    fn effective_streak(&self, u: UserId) -> u32 {
        self.max_streak[u.0].max(self.cur_streak[u.0])
    }

    /// Sort candidates most-sacrificeable first.
    fn sacrifice_order(&self, candidates: &UserSet) -> Vec<UserId> {
        let mut ids: Vec<UserId> = candidates.iter().collect();
        match self.spec.sacrifice_order {
            SacrificeOrder::Random => ids.sort_by_key(|u| self.random_rank[u.0]),
            SacrificeOrder::LeastReliable => ids.sort_by_key(|u| {
                (
                    std::cmp::Reverse(self.effective_streak(*u)),
                    self.first_seen[u.0].unwrap_or(usize::MAX),
                    u.0,
                )
            }),
            SacrificeOrder::OracleMaxOffline => {
                let deity = self.deity_streak.as_ref().expect("checked in new");
                ids.sort_by_key(|u| (std::cmp::Reverse(deity[u.0]), u.0));
            }
        }
        ids
    }

    fn observe_presence(&mut self, round: usize, online: &UserSet) {
        for u in self.roster.clone().iter() {
            if online.contains(u) {
                self.online_rounds[u.0] += 1;
                if self.first_seen[u.0].is_none() {
                    self.first_seen[u.0] = Some(round);
                }
                self.cur_streak[u.0] = 0;
                self.waiting_since[u.0] = None;
            } else {
                self.cur_streak[u.0] += 1;
                self.max_streak[u.0] = self.max_streak[u.0].max(self.cur_streak[u.0]);
                if self.waiting_since[u.0].is_none() {
                    self.waiting_since[u.0] = Some(round);
                }
            }
        }
        // offline buddy sets of enforceable size rejoin in unison
        if let Some(partition) = &mut self.partition {
            for set in &mut partition.sets {
                if set.status == BuddyStatus::Offline
                    && set.members.len() >= self.spec.buddy_min
                    && set.members.is_subset_of(online)
                {
                    set.status = BuddyStatus::Eligible;
                }
            }
        }
    }

    fn ensure_partition(&mut self, online: &UserSet) {
        if self.partition.is_some() || self.spec.buddy_min <= 1 {
            return;
        }
        let partition = match self.spec.formation {
            Formation::Static => {
                let order = self.sacrifice_order(&self.roster);
                form_static_partition(&self.roster, self.spec.buddy_min, &order)
            }
            Formation::Lazy => {
                dynamic_initial_partition(&self.roster, online, self.spec.buddy_min)
            }
        };
        self.partition = Some(partition);
    }

    /// Users whose current absence the policy is prepared to wait out:
    /// missing members of the running anonymity set (when loss-rate
    /// limiting is on) and missing members of eligible buddy sets.
    fn watch_set(&self, online: &UserSet) -> UserSet {
        let mut watch = UserSet::empty(self.roster.universe());
        if self.loss_enabled {
            watch.union_with(&self.running.difference(online));
        }
        if self.spec.buddy_min > 1 {
            if let Some(partition) = &self.partition {
                for set in &partition.sets {
                    if set.status == BuddyStatus::Eligible {
                        watch.union_with(&set.members.difference(online));
                    }
                }
            }
        }
        watch
    }

    /// Split every eligible buddy set containing given-up members into an
    /// offline part and an online part. The offline part is padded to K by
    /// sacrificing online members; if the surviving online part would drop
    /// below K the whole set goes offline instead.
    fn lazy_split(&mut self, given_up: &UserSet, online: &UserSet) {
        let k = self.spec.buddy_min;
        let Some(partition) = self.partition.take() else {
            return;
        };
        let mut sets = Vec::with_capacity(partition.sets.len() + 2);
        for set in partition.sets {
            if set.status != BuddyStatus::Eligible || set.members.is_disjoint(given_up) {
                sets.push(set);
                continue;
            }
            let missing = set.members.difference(online);
            debug_assert!(missing.is_subset_of(given_up));
            let online_part = set.members.intersection(online);
            let (offline_side, online_side) = if missing.len() >= k {
                (missing, online_part)
            } else {
                let need = k - missing.len();
                if online_part.len() < need + k {
                    // not enough online members to both pad the offline
                    // side and keep an enforceable online side
                    sets.push(BuddySet {
                        members: set.members,
                        status: BuddyStatus::Offline,
                    });
                    continue;
                }
                let sacrifices = UserSet::from_ids(
                    set.members.universe(),
                    self.sacrifice_order(&online_part).into_iter().take(need),
                );
                (missing.union(&sacrifices), online_part.difference(&sacrifices))
            };
            if online_side.len() < k {
                sets.push(BuddySet {
                    members: set.members,
                    status: BuddyStatus::Offline,
                });
            } else {
                sets.push(BuddySet {
                    members: offline_side,
                    status: BuddyStatus::Offline,
                });
                sets.push(BuddySet {
                    members: online_side,
                    status: BuddyStatus::Eligible,
                });
            }
        }
        self.partition = Some(BuddyPartition { sets });
    }

    fn assess_squelch(&mut self) {
        if self.spec.possinymity_floor > 0 && self.running.len() < self.spec.possinymity_floor {
            self.squelched = true;
        }
        if self.spec.buddy_min > 1 {
            if let Some(partition) = &self.partition {
                if partition
                    .sets
                    .iter()
                    .all(|s| s.status == BuddyStatus::Dead)
                {
                    self.squelched = true;
                }
            }
        }
    }

    /// One scheduled round: returns the filtered set P ⊆ `online`. The
    /// caller must report the realized outcome via [`observe_outcome`]
    /// before the next call.
    ///
    /// [`observe_outcome`]: PolicyOracle::observe_outcome
    pub fn filter(&mut self, round: usize, online: &UserSet) -> UserSet {
        debug_assert!(online.is_subset_of(&self.roster));
        self.observe_presence(round, online);
        let empty = UserSet::empty(self.roster.universe());
        if self.squelched {
            return empty;
        }
        self.ensure_partition(online);

        let mut candidates = online.clone();
        if self.spec.strawman && *online != self.roster {
            candidates = empty.clone();
        }

        let watch = self.watch_set(online);
        if !watch.is_empty() {
            let mut given_up = UserSet::empty(self.roster.universe());
            let mut any_within = false;
            for u in watch.iter() {
                let since = self.waiting_since[u.0].expect("missing user has absence start");
                if round - since < self.tolerance(u) as usize {
                    any_within = true;
                } else {
                    given_up.insert(u);
                }
            }
            if any_within {
                // wait for the recently missing before acting
                return empty;
            }
            if self.loss_enabled {
                for u in given_up.iter() {
                    self.running.remove(u);
                }
            }
            if self.spec.buddy_min > 1 && self.spec.formation == Formation::Lazy {
                self.lazy_split(&given_up, online);
            }
            self.assess_squelch();
            if self.squelched {
                return empty;
            }
        }

        if self.spec.buddy_min > 1 {
            let mut admitted = UserSet::empty(self.roster.universe());
            if let Some(partition) = &self.partition {
                for set in &partition.sets {
                    if set.status == BuddyStatus::Eligible && set.members.is_subset_of(online) {
                        admitted.union_with(&set.members);
                    }
                }
            }
            candidates.intersect_with(&admitted);
        }

        if self.spec.possinymity_floor > 0
            && self.running.intersection_len(&candidates) < self.spec.possinymity_floor
        {
            candidates = empty;
        }

        self.assess_squelch();
        candidates
    }

    /// Feed back the round's realized outcome. The running possibilistic
    /// anonymity set intersects only on actual posts; null rounds leave it
    /// unchanged.
    pub fn observe_outcome(&mut self, non_null: bool, filtered: &UserSet) {
        if non_null {
            self.running.intersect_with(filtered);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(universe: usize, members: &[usize]) -> UserSet {
        UserSet::from_ids(universe, members.iter().map(|&i| UserId(i)))
    }

    fn oracle(spec: PolicySpec, universe: usize) -> PolicyOracle {
        let roster = UserSet::full(universe);
        PolicyOracle::new(spec, &roster, vec![None; universe], None)
    }

    #[test]
    fn disabled_policies_pass_everything_through() {
        let mut o = oracle(PolicySpec::default(), 4);
        let online = ids(4, &[0, 2]);
        assert_eq!(o.filter(0, &online), online);
        o.observe_outcome(true, &online);
        assert!(!o.is_squelched());
    }

    #[test]
    fn strawman_requires_full_roster() {
        let spec = PolicySpec {
            strawman: true,
            ..Default::default()
        };
        let mut o = oracle(spec, 3);
        assert!(o.filter(0, &ids(3, &[0, 1])).is_empty());
        assert_eq!(o.filter(1, &ids(3, &[0, 1, 2])), ids(3, &[0, 1, 2]));
    }

    #[test]
    fn floor_passes_and_commits_on_post() {
        let spec = PolicySpec {
            possinymity_floor: 3,
            ..Default::default()
        };
        let mut o = oracle(spec, 4);
        let online = ids(4, &[0, 1, 2]);
        // running {0,1,2,3} ∩ online has 3 members, at the floor: pass
        assert_eq!(o.filter(0, &online), online);
        o.observe_outcome(true, &online);
        assert_eq!(o.running_possinymity(), &ids(4, &[0, 1, 2]));
        // now only two of the running set online: blocked
        let online2 = ids(4, &[0, 1]);
        assert!(o.filter(1, &online2).is_empty());
        o.observe_outcome(false, &UserSet::empty(4));
        // the missing member returns: posting resumes
        assert_eq!(o.filter(2, &online), online);
    }

    #[test]
    fn floor_zero_is_passthrough() {
        let mut o = oracle(PolicySpec::default(), 3);
        let online = ids(3, &[1]);
        assert_eq!(o.filter(0, &online), online);
    }

    #[test]
    fn null_rounds_leave_running_set_unchanged() {
        let spec = PolicySpec {
            possinymity_floor: 2,
            ..Default::default()
        };
        let mut o = oracle(spec, 4);
        let online = ids(4, &[0, 1]);
        let p = o.filter(0, &online);
        o.observe_outcome(false, &p);
        assert_eq!(o.running_possinymity(), &UserSet::full(4));
    }

    #[test]
    fn loss_rate_waits_then_drops() {
        let spec = PolicySpec {
            offline_tolerance: Some(3),
            ..Default::default()
        };
        let mut o = oracle(spec, 3);
        let all = ids(3, &[0, 1, 2]);
        assert_eq!(o.filter(0, &all), all);
        o.observe_outcome(true, &all);
        // user 2 goes missing at round 1; tolerance 3 waits three rounds
        let online = ids(3, &[0, 1]);
        for round in 1..=3 {
            assert!(o.filter(round, &online).is_empty(), "round {round}");
            o.observe_outcome(false, &UserSet::empty(3));
        }
        // fourth consecutive absence: give up, posting resumes without 2
        assert_eq!(o.filter(4, &online), online);
        assert_eq!(o.running_possinymity(), &ids(3, &[0, 1]));
    }

    #[test]
    fn loss_rate_zero_tolerance_drops_immediately() {
        let spec = PolicySpec {
            offline_tolerance: Some(0),
            ..Default::default()
        };
        let mut o = oracle(spec, 3);
        let online = ids(3, &[0, 1]);
        assert_eq!(o.filter(0, &online), online);
        assert_eq!(o.running_possinymity(), &ids(3, &[0, 1]));
    }

    #[test]
    fn per_user_tolerance_overrides_default() {
        let spec = PolicySpec {
            offline_tolerance: Some(1),
            ..Default::default()
        };
        let roster = UserSet::full(3);
        // user 2 is worth waiting for: tolerance 4
        let mut per_user = vec![None; 3];
        per_user[2] = Some(4);
        let mut o = PolicyOracle::new(spec, &roster, per_user, None);
        let all = ids(3, &[0, 1, 2]);
        assert_eq!(o.filter(0, &all), all);
        let online = ids(3, &[0, 1]);
        for round in 1..=4 {
            assert!(o.filter(round, &online).is_empty(), "round {round}");
        }
        assert_eq!(o.filter(5, &online), online);
    }

    #[test]
    fn returning_member_is_forgiven() {
        let spec = PolicySpec {
            offline_tolerance: Some(2),
            ..Default::default()
        };
        let mut o = oracle(spec, 2);
        let all = ids(2, &[0, 1]);
        let online = ids(2, &[0]);
        assert!(o.filter(0, &online).is_empty());
        // member returns within tolerance: running set intact
        assert_eq!(o.filter(1, &all), all);
        assert_eq!(o.running_possinymity(), &all);
    }

    #[test]
    fn static_partition_sizes() {
        let roster = UserSet::full(10);
        let order: Vec<UserId> = (0..10).map(UserId).collect();
        let p = form_static_partition(&roster, 3, &order);
        assert!(p.is_partition_of(&roster));
        let mut sizes: Vec<usize> = p.sets.iter().map(|s| s.members.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert!(p.sets.iter().all(|s| s.status == BuddyStatus::Eligible));
    }

    #[test]
    fn static_partition_covers_roster_for_any_size() {
        // remainder can exceed the group count; every user must land in a
        // set and every set must reach K
        for n in 1..40usize {
            for k in 1..12usize {
                let roster = UserSet::full(n);
                let order: Vec<UserId> = (0..n).map(UserId).collect();
                let p = form_static_partition(&roster, k, &order);
                assert!(p.is_partition_of(&roster), "n={n} k={k}");
                if n >= k {
                    assert_eq!(p.sets.len(), n / k, "n={n} k={k}");
                    assert!(p.sets.iter().all(|s| s.members.len() >= k), "n={n} k={k}");
                }
            }
        }
        // fifteen users at K=8 form a single set of fifteen
        let roster = UserSet::full(15);
        let order: Vec<UserId> = (0..15).map(UserId).collect();
        let p = form_static_partition(&roster, 8, &order);
        assert_eq!(p.sets.len(), 1);
        assert_eq!(p.sets[0].members.len(), 15);
    }

    #[test]
    fn static_partition_k1_is_singletons() {
        let roster = UserSet::full(4);
        let order: Vec<UserId> = (0..4).map(UserId).collect();
        let p = form_static_partition(&roster, 1, &order);
        assert_eq!(p.sets.len(), 4);
        assert!(p.sets.iter().all(|s| s.members.len() == 1));
    }

    #[test]
    fn static_partition_undersized_roster_is_dead() {
        let roster = UserSet::full(2);
        let order: Vec<UserId> = (0..2).map(UserId).collect();
        let p = form_static_partition(&roster, 3, &order);
        assert_eq!(p.sets.len(), 1);
        assert_eq!(p.sets[0].status, BuddyStatus::Dead);
    }

    #[test]
    fn dynamic_initial_partition_cases() {
        let roster = UserSet::full(10);
        // everyone online: one eligible set
        let p = dynamic_initial_partition(&roster, &roster, 3);
        assert_eq!(p.sets.len(), 1);
        assert_eq!(p.sets[0].status, BuddyStatus::Eligible);
        // 7 online, 3 offline
        let online = ids(10, &[0, 1, 2, 3, 4, 5, 6]);
        let p = dynamic_initial_partition(&roster, &online, 3);
        assert!(p.is_partition_of(&roster));
        assert_eq!(p.sets[0].members.len(), 7);
        assert_eq!(p.sets[1].members.len(), 3);
        assert_eq!(p.sets[1].status, BuddyStatus::Offline);
        // undersized offline residual is permanently dead
        let online = ids(10, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let p = dynamic_initial_partition(&roster, &online, 3);
        assert_eq!(p.sets[1].status, BuddyStatus::Dead);
        // online side below K collapses entirely
        let online = ids(10, &[0, 1]);
        let p = dynamic_initial_partition(&roster, &online, 3);
        assert_eq!(p.sets.len(), 1);
        assert_eq!(p.sets[0].status, BuddyStatus::Dead);
    }

    #[test]
    fn collapsed_formation_squelches() {
        let spec = PolicySpec {
            buddy_min: 2,
            ..Default::default()
        };
        let roster = ids(1, &[0]);
        let mut o = PolicyOracle::new(spec, &roster, vec![None; 1], None);
        assert!(o.filter(0, &ids(1, &[0])).is_empty());
        assert!(o.is_squelched());
    }

    #[test]
    fn buddy_filter_excludes_sets_with_missing_members() {
        // everyone online at formation, so static formation in tag order
        // gives sets {0,1} and {2,3}
        let spec = PolicySpec {
            buddy_min: 2,
            formation: Formation::Static,
            sacrifice_order: SacrificeOrder::LeastReliable,
            ..Default::default()
        };
        let mut o = oracle(spec, 4);
        let all = UserSet::full(4);
        assert_eq!(o.filter(0, &all), all);
        o.observe_outcome(true, &all);
        // user 3 offline excludes its whole set {2,3}
        assert_eq!(o.filter(1, &ids(4, &[0, 1, 2])), ids(4, &[0, 1]));
        o.observe_outcome(true, &ids(4, &[0, 1]));
        // everybody back: both sets pass again
        assert_eq!(o.filter(2, &all), all);
        o.observe_outcome(false, &all);
        // a lone survivor passes no complete set
        assert!(o.filter(3, &ids(4, &[0])).is_empty());
    }

    #[test]
    fn lazy_split_sacrifices_to_pad_offline_side() {
        let spec = PolicySpec {
            buddy_min: 2,
            offline_tolerance: Some(0),
            sacrifice_order: SacrificeOrder::LeastReliable,
            ..Default::default()
        };
        let mut o = oracle(spec, 6);
        let all = UserSet::full(6);
        assert_eq!(o.filter(0, &all), all);
        o.observe_outcome(true, &all);
        // user 0 disappears; zero tolerance: split immediately
        let online = ids(6, &[1, 2, 3, 4, 5]);
        let p = o.filter(1, &online);
        o.observe_outcome(true, &p);
        let partition = o.partition().unwrap();
        assert!(partition.is_partition_of(&all));
        assert_eq!(partition.sets.len(), 2);
        let offline: Vec<&BuddySet> = partition
            .sets
            .iter()
            .filter(|s| s.status == BuddyStatus::Offline)
            .collect();
        assert_eq!(offline.len(), 1);
        assert_eq!(offline[0].members.len(), 2);
        assert!(offline[0].members.contains(UserId(0)));
        // the filtered set is the surviving online part (4 users)
        assert_eq!(p.len(), 4);
        assert!(!p.contains(UserId(0)));
    }

    #[test]
    fn lazy_split_collapses_small_sets_whole() {
        let spec = PolicySpec {
            buddy_min: 2,
            offline_tolerance: Some(0),
            ..Default::default()
        };
        let mut o = oracle(spec, 3);
        let all = UserSet::full(3);
        assert_eq!(o.filter(0, &all), all);
        o.observe_outcome(true, &all);
        let online = ids(3, &[1, 2]);
        // splitting would leave an online part of 1 < K: all go offline
        assert!(o.filter(1, &online).is_empty());
        let partition = o.partition().unwrap();
        assert_eq!(partition.sets.len(), 1);
        assert_eq!(partition.sets[0].status, BuddyStatus::Offline);
        assert!(!o.is_squelched());
        // the whole set rejoins in unison
        assert_eq!(o.filter(2, &all), all);
    }

    #[test]
    fn lazy_waits_before_splitting() {
        let spec = PolicySpec {
            buddy_min: 2,
            offline_tolerance: Some(2),
            ..Default::default()
        };
        let mut o = oracle(spec, 6);
        let all = UserSet::full(6);
        assert_eq!(o.filter(0, &all), all);
        let online = ids(6, &[1, 2, 3, 4, 5]);
        // two waiting rounds while within tolerance
        assert!(o.filter(1, &online).is_empty());
        assert!(o.filter(2, &online).is_empty());
        assert_eq!(o.partition().unwrap().sets.len(), 1);
        // third consecutive absence: give up and split
        let p = o.filter(3, &online);
        assert_eq!(p.len(), 4);
        assert_eq!(o.partition().unwrap().sets.len(), 2);
    }

    #[test]
    fn partitions_only_refine() {
        let spec = PolicySpec {
            buddy_min: 2,
            offline_tolerance: Some(0),
            seed: 17,
            ..Default::default()
        };
        let mut o = oracle(spec, 12);
        let all = UserSet::full(12);
        let mut prev: Option<BuddyPartition> = None;
        // churn users out two at a time
        for round in 0..5 {
            let online = ids(12, &(round * 2..12).collect::<Vec<_>>());
            o.filter(round, &online);
            o.observe_outcome(false, &UserSet::empty(12));
            if let Some(partition) = o.partition() {
                assert!(partition.is_partition_of(&all));
                if let Some(prev) = &prev {
                    assert!(partition.refines(prev));
                }
                prev = Some(partition.clone());
            }
        }
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = PolicySpec {
            possinymity_floor: 5,
            buddy_min: 4,
            offline_tolerance: Some(7),
            formation: Formation::Static,
            sacrifice_order: SacrificeOrder::OracleMaxOffline,
            strawman: false,
            seed: 42,
            ..Default::default()
        };
        let kv = spec.to_kv();
        let back =
            PolicySpec::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, spec);
        assert!(PolicySpec::from_kv([("no_such_key", "1")]).is_err());
        assert!(PolicySpec::from_kv([("buddy_min", "0")]).is_err());
    }
}
