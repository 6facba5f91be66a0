//! Anonymity meters and usability statistics.
//!
//! Two meters simulate what an intersection attacker learns from a run's
//! public history. The possibilistic set intersects the filtered sets of
//! non-null rounds: the users who might conceivably own the nym given its
//! visible posts. The indistinguishability partition groups users whose
//! filtered-set membership agrees on every scheduled round (null or not);
//! its smallest class bounds what any probabilistic intersection attack
//! can conclude. The ideal analyses bound what any policy could achieve on
//! a given trace, independent of the protocol.

use std::io::Write;

use crate::engine::{NymStatus, Outcome, RoundRecord, SimulationRun};
use crate::trace::{RoundGrid, Trace};
use crate::userset::UserSet;

/// Users consistent with every observed non-null post of a nym.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PossinymitySet {
    pub members: UserSet,
    /// Round index of the last record folded in, if any.
    pub as_of_round: Option<usize>,
}

/// Fold a run's history into the possibilistic anonymity set: start from
/// the roster and intersect the filtered set of every non-null round.
/// Null rounds eliminate nobody.
pub fn possinymity(history: &[RoundRecord], roster: &UserSet) -> PossinymitySet {
    let mut members = roster.clone();
    for rec in history {
        if rec.outcome.is_posted() {
            members.intersect_with(&rec.filtered);
        }
    }
    PossinymitySet {
        members,
        as_of_round: history.last().map(|r| r.index),
    }
}

/// Possinymity after each round of the history.
pub fn possinymity_series(history: &[RoundRecord], roster: &UserSet) -> Vec<usize> {
    let mut members = roster.clone();
    let mut out = Vec::with_capacity(history.len());
    for rec in history {
        if rec.outcome.is_posted() {
            members.intersect_with(&rec.filtered);
        }
        out.push(members.len());
    }
    out
}

/// History-derived buddy classes and the indinymity they imply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndinymityReport {
    /// Disjoint classes covering the roster; users in one class have
    /// identical filtered-set membership over the whole history.
    pub classes: Vec<UserSet>,
    /// Size of the smallest class.
    pub indinymity: usize,
}

impl IndinymityReport {
    /// Anonymity left after discounting `f` colluding users, floored at 0.
    pub fn effective_indinymity(&self, f: usize) -> usize {
        self.indinymity.saturating_sub(f)
    }
}

fn refine(classes: &mut Vec<UserSet>, filtered: &UserSet) {
    let mut out = Vec::with_capacity(classes.len() + 2);
    for class in classes.drain(..) {
        let inside = class.intersection(filtered);
        if inside.is_empty() || inside.len() == class.len() {
            out.push(class);
        } else {
            out.push(class.difference(filtered));
            out.push(inside);
        }
    }
    *classes = out;
}

/// Partition the roster by equality of filtered-set membership vectors
/// over all scheduled rounds, null and non-null alike.
pub fn partition_from_history(history: &[RoundRecord], roster: &UserSet) -> IndinymityReport {
    let mut classes = vec![roster.clone()];
    for rec in history {
        refine(&mut classes, &rec.filtered);
    }
    let indinymity = classes.iter().map(UserSet::len).min().unwrap_or(0);
    IndinymityReport {
        classes,
        indinymity,
    }
}

/// Indinymity after each round of the history.
pub fn indinymity_series(history: &[RoundRecord], roster: &UserSet) -> Vec<usize> {
    let mut classes = vec![roster.clone()];
    let mut out = Vec::with_capacity(history.len());
    let mut min = roster.len();
    let mut last: Option<&UserSet> = None;
    for rec in history {
        // refining twice by the same set is a no-op
        if last != Some(&rec.filtered) {
            refine(&mut classes, &rec.filtered);
            min = classes.iter().map(UserSet::len).min().unwrap_or(0);
            last = Some(&rec.filtered);
        }
        out.push(min);
    }
    out
}

struct Fenwick {
    tree: Vec<u32>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of added indices < i.
    fn prefix(&self, mut i: usize) -> u32 {
        let mut sum = 0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }
}

/// Ideal anonymity for low-latency pseudonyms of a given lifetime: every
/// maximal online interval of length at least `lifetime` stands in for a
/// pseudonym living at its start, and its anonymity set is the users
/// continuously online across that whole window. Returns the multiset of
/// set sizes; a lifetime of 0 degenerates to instantaneous online counts.
pub fn ideal_lowlatency(trace: &Trace, lifetime: u64) -> Vec<usize> {
    let mut intervals: Vec<(u64, u64)> = Vec::new();
    let mut windows: Vec<u64> = Vec::new();
    for (_, tl) in trace.timelines() {
        for &(a, b) in &tl.intervals {
            intervals.push((a, b));
            if b - a >= lifetime {
                windows.push(a);
            }
        }
    }
    // count intervals [a,b) with a <= s and b >= s + max(lifetime, 1);
    // intervals of one user are disjoint, so interval count = user count
    let mut ends: Vec<u64> = intervals.iter().map(|&(_, b)| b).collect();
    ends.sort_unstable();
    ends.dedup();
    let rank = |v: u64| ends.partition_point(|&e| e < v);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| windows[i]);
    intervals.sort_unstable();

    let mut fen = Fenwick::new(ends.len());
    let mut added = 0usize;
    let mut next = 0usize;
    let mut counts = vec![0usize; windows.len()];
    for &w in &order {
        let s = windows[w];
        while next < intervals.len() && intervals[next].0 <= s {
            fen.add(rank(intervals[next].1));
            next += 1;
            added += 1;
        }
        let threshold = s + lifetime.max(1);
        counts[w] = added - fen.prefix(rank(threshold)) as usize;
    }
    counts
}

/// Number of users whose every offline gap, including leading and trailing
/// gaps against `[0, horizon]`, is at most `tolerance` seconds.
pub fn ideal_maxoffline(trace: &Trace, tolerance: u64) -> usize {
    let horizon = trace.horizon();
    trace
        .timelines()
        .filter(|(_, tl)| {
            if tl.intervals.is_empty() {
                return horizon <= tolerance;
            }
            let mut prev_end = 0;
            for &(a, b) in &tl.intervals {
                if a - prev_end > tolerance {
                    return false;
                }
                prev_end = b;
            }
            horizon - prev_end <= tolerance
        })
        .count()
}

/// Delay of one scheduled message, in rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageDelay {
    Rounds(u64),
    Undelivered,
}

impl std::fmt::Display for MessageDelay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MessageDelay::Rounds(d) => write!(f, "{d}"),
            MessageDelay::Undelivered => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsabilityStats {
    /// Rounds from the owner's first to last scheduled message.
    pub nominal_lifetime: u64,
    /// Rounds from the nym's creation to its last delivery, or to the
    /// squelch round for squelched nyms.
    pub useful_lifetime: u64,
    /// Per scheduled message, in schedule order.
    pub delays: Vec<MessageDelay>,
}

pub fn usability_stats(run: &SimulationRun, grid: &RoundGrid) -> UsabilityStats {
    let schedule = grid.user_message_rounds(run.nym.owner());
    let total: u64 = schedule.iter().map(|&(_, c)| c as u64).sum();
    let nominal_lifetime = match (schedule.first(), schedule.last()) {
        (Some(&(first, _)), Some(&(last, _))) => (last - first) as u64,
        _ => 0,
    };
    let mut delays = Vec::with_capacity(total as usize);
    let mut last_delivery = None;
    for rec in &run.history {
        if let Outcome::Posted { delay_rounds, .. } = rec.outcome {
            delays.push(MessageDelay::Rounds(delay_rounds));
            last_delivery = Some(rec.index);
        }
    }
    while (delays.len() as u64) < total {
        delays.push(MessageDelay::Undelivered);
    }
    let created = run.nym.created_round;
    let useful_lifetime = match run.nym.status {
        NymStatus::Squelched => run
            .history
            .last()
            .map(|r| (r.index - created) as u64)
            .unwrap_or(0),
        NymStatus::Usable => last_delivery.map(|r| (r - created) as u64).unwrap_or(0),
    };
    UsabilityStats {
        nominal_lifetime,
        useful_lifetime,
        delays,
    }
}

/// Per-run metric export:
/// `round,possinymity,indinymity,attack_success_prob`.
///
/// `attack_success` must align with the history; pass the worst case over
/// whatever adversary parameters were swept.
pub fn write_metrics_csv<W: Write>(
    run: &SimulationRun,
    attack_success: &[f64],
    mut w: W,
) -> std::io::Result<()> {
    let poss = possinymity_series(&run.history, &run.nym.roster);
    let ind = indinymity_series(&run.history, &run.nym.roster);
    writeln!(w, "round,possinymity,indinymity,attack_success_prob")?;
    for (i, rec) in run.history.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{}",
            rec.index, poss[i], ind[i], attack_success[i]
        )?;
    }
    Ok(())
}
