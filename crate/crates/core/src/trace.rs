//! Trace ingestion and discretization.
//!
//! A [`Trace`] is the simulation's ground truth: per-user online intervals
//! plus message times, built from an IRC-style event log, from canonical
//! CSV files, or synthesized. [`discretize`] turns a trace into a
//! [`RoundGrid`]: per-round online sets and message schedules indexed by
//! compact user ids.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::userset::{UserId, UserSet};

/// Opaque per-user identifier within a trace. Stands in for the anonymized
/// linkage tag a deployment would report: it carries no network identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserTag(String);

impl UserTag {
    pub fn new(tag: impl Into<String>) -> Self {
        UserTag(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for UserTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserTag {
    fn from(s: &str) -> Self {
        UserTag(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Join,
    Leave,
    Message,
    NickChange { new: UserTag },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: u64,
    pub user: UserTag,
    pub kind: EventKind,
}

#[derive(Error, Debug)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: non-monotonic timestamp {time} (previous {prev})")]
    NonMonotonicTimestamp { line: usize, time: u64, prev: u64 },
    #[error("round interval must be at least 1 second")]
    ZeroRoundInterval,
    #[error("grid dimensions inconsistent: {0}")]
    BadGrid(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One user's activity: disjoint sorted half-open online intervals
/// `[start, end)` and sorted message times, each inside some interval.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Timeline {
    pub intervals: Vec<(u64, u64)>,
    pub messages: Vec<u64>,
}

impl Timeline {
    fn online_at(&self, t: u64) -> bool {
        self.intervals.iter().any(|&(a, b)| a <= t && t < b)
    }

    fn total_online(&self) -> u64 {
        self.intervals.iter().map(|&(a, b)| b - a).sum()
    }
}

/// A recorded nick-change event, kept for reconnect repair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NickLink {
    pub time: u64,
    pub old: UserTag,
    pub new: UserTag,
}

/// Ground-truth user behavior over `[0, horizon]` seconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    timelines: BTreeMap<UserTag, Timeline>,
    nick_links: Vec<NickLink>,
    horizon: u64,
}

impl Trace {
    pub fn from_timelines(timelines: BTreeMap<UserTag, Timeline>, horizon: u64) -> Self {
        Trace {
            timelines,
            nick_links: Vec::new(),
            horizon,
        }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn user_count(&self) -> usize {
        self.timelines.len()
    }

    pub fn users(&self) -> impl Iterator<Item = &UserTag> {
        self.timelines.keys()
    }

    pub fn timeline(&self, user: &UserTag) -> Option<&Timeline> {
        self.timelines.get(user)
    }

    pub fn timelines(&self) -> impl Iterator<Item = (&UserTag, &Timeline)> {
        self.timelines.iter()
    }

    pub fn message_count(&self) -> usize {
        self.timelines.values().map(|t| t.messages.len()).sum()
    }

    /// Re-emit the trace as a canonical event log. Parsing the output
    /// reproduces the trace exactly; at equal timestamps leaves sort before
    /// joins so that back-to-back intervals of one user survive the round
    /// trip.
    pub fn to_event_log(&self) -> String {
        // (time, kind rank, tag, line)
        let mut events: Vec<(u64, u8, &UserTag, String)> = Vec::new();
        for (tag, tl) in &self.timelines {
            for &(a, b) in &tl.intervals {
                events.push((a, 1, tag, format!("{a} JOIN {tag}")));
                events.push((b, 0, tag, format!("{b} LEAVE {tag}")));
            }
            for &m in &tl.messages {
                events.push((m, 2, tag, format!("{m} MSG {tag}")));
            }
        }
        events.sort_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
        let mut out = String::new();
        for (_, _, _, line) in events {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Write the canonical CSV serialization: one `user,start,end` file for
    /// intervals and one `user,time` file for messages.
    pub fn write_csv<W1: Write, W2: Write>(
        &self,
        intervals: W1,
        messages: W2,
    ) -> Result<(), TraceError> {
        let mut iw = csv::Writer::from_writer(intervals);
        iw.write_record(["user", "start", "end"])?;
        for (tag, tl) in &self.timelines {
            for &(a, b) in &tl.intervals {
                iw.write_record([tag.as_str(), &a.to_string(), &b.to_string()])?;
            }
        }
        iw.flush()?;
        let mut mw = csv::Writer::from_writer(messages);
        mw.write_record(["user", "time"])?;
        for (tag, tl) in &self.timelines {
            for &m in &tl.messages {
                mw.write_record([tag.as_str(), &m.to_string()])?;
            }
        }
        mw.flush()?;
        Ok(())
    }

    pub fn read_csv<R1: std::io::Read, R2: std::io::Read>(
        intervals: R1,
        messages: R2,
    ) -> Result<Trace, TraceError> {
        let mut timelines: BTreeMap<UserTag, Timeline> = BTreeMap::new();
        let mut horizon = 0;
        let mut ir = csv::Reader::from_reader(intervals);
        for rec in ir.records() {
            let rec = rec?;
            let bad = |msg: &str| TraceError::Parse {
                line: 0,
                msg: format!("interval csv: {msg}: {rec:?}"),
            };
            let tag = UserTag::new(rec.get(0).ok_or_else(|| bad("missing user"))?);
            let a: u64 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad start"))?;
            let b: u64 = rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad end"))?;
            horizon = horizon.max(b);
            timelines.entry(tag).or_default().intervals.push((a, b));
        }
        let mut mr = csv::Reader::from_reader(messages);
        for rec in mr.records() {
            let rec = rec?;
            let bad = |msg: &str| TraceError::Parse {
                line: 0,
                msg: format!("message csv: {msg}: {rec:?}"),
            };
            let tag = UserTag::new(rec.get(0).ok_or_else(|| bad("missing user"))?);
            let t: u64 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad time"))?;
            horizon = horizon.max(t);
            timelines.entry(tag).or_default().messages.push(t);
        }
        for tl in timelines.values_mut() {
            tl.intervals.sort_unstable();
            tl.messages.sort_unstable();
        }
        Ok(Trace {
            timelines,
            nick_links: Vec::new(),
            horizon,
        })
    }
}

/// Parse an IRC-style event log into a trace.
///
/// Grammar, one event per line, fields space-separated:
/// `<time> JOIN <tag>` | `<time> LEAVE <tag>` | `<time> MSG <tag>` |
/// `<time> NICK <old-tag> <new-tag>`.
///
/// Real logs are dirty: a message from a user with no open interval opens
/// one at that instant, duplicate joins and stray leaves are ignored, and a
/// message in the final second of an interval extends the interval by one
/// second so every message lies strictly inside one. All such repairs are
/// logged as warnings. A NICK closes the old tag's interval and opens the
/// new tag's, and the link is recorded for [`repair_reconnects`].
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut timelines: BTreeMap<UserTag, Timeline> = BTreeMap::new();
    let mut open: BTreeMap<UserTag, u64> = BTreeMap::new();
    let mut nick_links = Vec::new();
    let mut prev_time = 0u64;
    let mut max_time = 0u64;
    let mut saw_event = false;

    fn close(
        timelines: &mut BTreeMap<UserTag, Timeline>,
        open: &mut BTreeMap<UserTag, u64>,
        user: &UserTag,
        end: u64,
    ) {
        if let Some(start) = open.remove(user) {
            let tl = timelines.entry(user.clone()).or_default();
            // keep the last message strictly inside the interval
            let mut end = end;
            if let Some(&m) = tl.messages.last() {
                if m >= start && m >= end {
                    end = m + 1;
                }
            }
            if end > start {
                tl.intervals.push((start, end));
            }
        }
    }

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let err = |msg: String| TraceError::Parse { line: lineno, msg };
        let time: u64 = fields
            .next()
            .ok_or_else(|| err("missing timestamp".into()))?
            .parse()
            .map_err(|e| err(format!("bad timestamp: {e}")))?;
        if saw_event && time < prev_time {
            return Err(TraceError::NonMonotonicTimestamp {
                line: lineno,
                time,
                prev: prev_time,
            });
        }
        saw_event = true;
        prev_time = time;
        max_time = max_time.max(time);
        let kind = fields.next().ok_or_else(|| err("missing event kind".into()))?;
        let tag = UserTag::new(fields.next().ok_or_else(|| err("missing user tag".into()))?);
        match kind {
            "JOIN" => {
                timelines.entry(tag.clone()).or_default();
                if open.contains_key(&tag) {
                    log::warn!("line {lineno}: duplicate JOIN for {tag}, ignored");
                } else {
                    open.insert(tag, time);
                }
            }
            "LEAVE" => {
                timelines.entry(tag.clone()).or_default();
                if open.contains_key(&tag) {
                    close(&mut timelines, &mut open, &tag, time);
                } else {
                    log::warn!("line {lineno}: LEAVE for {tag} with no open interval, ignored");
                }
            }
            "MSG" => {
                if !open.contains_key(&tag) {
                    log::warn!(
                        "line {lineno}: MSG from {tag} with no open interval, opening one"
                    );
                    open.insert(tag.clone(), time);
                }
                timelines.entry(tag.clone()).or_default().messages.push(time);
            }
            "NICK" => {
                let new = UserTag::new(
                    fields
                        .next()
                        .ok_or_else(|| err("NICK missing new tag".into()))?,
                );
                timelines.entry(tag.clone()).or_default();
                timelines.entry(new.clone()).or_default();
                close(&mut timelines, &mut open, &tag, time);
                if open.contains_key(&new) {
                    log::warn!("line {lineno}: NICK target {new} already online");
                } else {
                    open.insert(new.clone(), time);
                }
                nick_links.push(NickLink {
                    time,
                    old: tag,
                    new,
                });
            }
            other => return Err(err(format!("unknown event kind {other:?}"))),
        }
        if fields.next().is_some() {
            return Err(err("trailing fields".into()));
        }
    }

    // users still online at the end of the log stay online through the
    // last observed instant
    let still_open: Vec<UserTag> = open.keys().cloned().collect();
    for tag in still_open {
        close(&mut timelines, &mut open, &tag, max_time);
    }
    let horizon = timelines
        .values()
        .flat_map(|tl| tl.intervals.iter().map(|&(_, b)| b))
        .max()
        .unwrap_or(0)
        .max(max_time);

    Ok(Trace {
        timelines,
        nick_links,
        horizon,
    })
}

/// Merge reconnect artifacts.
///
/// Two repairs, both conservative: timelines of users linked by an explicit
/// nick-change cycle (old -> new followed later by new -> old) are merged
/// and attributed to the original tag, and consecutive intervals of one
/// user separated by a gap smaller than `max_gap` seconds are joined.
/// `max_gap = 0` leaves gaps alone; overlaps introduced by a merge always
/// collapse. Idempotent.
pub fn repair_reconnects(trace: &Trace, max_gap: u64) -> Trace {
    let mut timelines = trace.timelines.clone();

    // nick cycles: old -> new at t1, new -> old at t2 > t1
    let mut merged: Vec<UserTag> = Vec::new();
    for (i, link) in trace.nick_links.iter().enumerate() {
        if merged.contains(&link.old) || merged.contains(&link.new) {
            continue;
        }
        let cycles_back = trace.nick_links[i + 1..].iter().any(|back| {
            back.time >= link.time && back.old == link.new && back.new == link.old
        });
        if !cycles_back {
            continue;
        }
        let (Some(donor), Some(_)) = (timelines.get(&link.new), timelines.get(&link.old)) else {
            continue;
        };
        let donor = donor.clone();
        let target = timelines.get_mut(&link.old).expect("checked above");
        target.intervals.extend_from_slice(&donor.intervals);
        target.messages.extend_from_slice(&donor.messages);
        target.intervals.sort_unstable();
        target.messages.sort_unstable();
        timelines.remove(&link.new);
        log::warn!(
            "nick cycle {} -> {} -> {}: timelines merged under {}",
            link.old,
            link.new,
            link.old,
            link.old
        );
        merged.push(link.new.clone());
    }

    for tl in timelines.values_mut() {
        tl.intervals.sort_unstable();
        let mut out: Vec<(u64, u64)> = Vec::with_capacity(tl.intervals.len());
        for &(a, b) in &tl.intervals {
            match out.last_mut() {
                Some(last) if (a as i64 - last.1 as i64) < max_gap as i64 || a < last.1 => {
                    last.1 = last.1.max(b);
                }
                _ => out.push((a, b)),
            }
        }
        tl.intervals = out;
    }

    Trace {
        timelines,
        nick_links: trace.nick_links.clone(),
        horizon: trace.horizon,
    }
}

/// Discrete protocol rounds derived from a trace: who is online each round
/// and how many messages each user has scheduled in it.
#[derive(Debug, Clone)]
pub struct RoundGrid {
    interval: u64,
    rounds: usize,
    users: Vec<UserTag>,
    index: BTreeMap<UserTag, UserId>,
    online: Vec<UserSet>,
    messages: Vec<Vec<(UserId, u32)>>,
}

impl RoundGrid {
    pub fn from_parts(
        interval: u64,
        users: Vec<UserTag>,
        online: Vec<UserSet>,
        messages: Vec<Vec<(UserId, u32)>>,
    ) -> Result<Self, TraceError> {
        if interval == 0 {
            return Err(TraceError::ZeroRoundInterval);
        }
        if online.len() != messages.len() {
            return Err(TraceError::BadGrid(format!(
                "{} online rows vs {} message rows",
                online.len(),
                messages.len()
            )));
        }
        if online.iter().any(|s| s.universe() != users.len()) {
            return Err(TraceError::BadGrid("online set universe mismatch".into()));
        }
        let index = users
            .iter()
            .enumerate()
            .map(|(i, tag)| (tag.clone(), UserId(i)))
            .collect();
        let rounds = online.len();
        Ok(RoundGrid {
            interval,
            rounds,
            users,
            index,
            online,
            messages,
        })
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn tag(&self, id: UserId) -> &UserTag {
        &self.users[id.0]
    }

    pub fn id_of(&self, tag: &UserTag) -> Option<UserId> {
        self.index.get(tag).copied()
    }

    pub fn users(&self) -> &[UserTag] {
        &self.users
    }

    pub fn online(&self, round: usize) -> &UserSet {
        &self.online[round]
    }

    pub fn round_messages(&self, round: usize) -> &[(UserId, u32)] {
        &self.messages[round]
    }

    /// Rounds in which `user` has messages scheduled, with counts.
    pub fn user_message_rounds(&self, user: UserId) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        for (round, msgs) in self.messages.iter().enumerate() {
            if let Ok(pos) = msgs.binary_search_by_key(&user, |&(u, _)| u) {
                out.push((round, msgs[pos].1));
            }
        }
        out
    }

    /// Per-user longest run of consecutive offline rounds over the whole
    /// grid, counting leading and trailing absence.
    pub fn max_offline_streaks(&self) -> Vec<u32> {
        let n = self.user_count();
        let mut cur = vec![0u32; n];
        let mut max = vec![0u32; n];
        for online in &self.online {
            for u in 0..n {
                if online.contains(UserId(u)) {
                    cur[u] = 0;
                } else {
                    cur[u] += 1;
                    max[u] = max[u].max(cur[u]);
                }
            }
        }
        max
    }
}

/// Discretize a trace into rounds of `interval` seconds.
///
/// A user is online in round `i` iff online at the round's start instant
/// `i * interval`; a message at time `t` is scheduled in round
/// `t / interval`.
pub fn discretize(trace: &Trace, interval: u64) -> Result<RoundGrid, TraceError> {
    if interval == 0 {
        return Err(TraceError::ZeroRoundInterval);
    }
    let users: Vec<UserTag> = trace.timelines.keys().cloned().collect();
    let n = users.len();
    let rounds = (trace.horizon.div_ceil(interval)) as usize;
    let mut online = vec![UserSet::empty(n); rounds];
    let mut messages: Vec<Vec<(UserId, u32)>> = vec![Vec::new(); rounds];
    for (uid, tag) in users.iter().enumerate() {
        let tl = &trace.timelines[tag];
        for &(a, b) in &tl.intervals {
            let lo = a.div_ceil(interval);
            let hi = b.div_ceil(interval).min(rounds as u64);
            for r in lo..hi {
                online[r as usize].insert(UserId(uid));
            }
        }
        for &m in &tl.messages {
            let r = (m / interval) as usize;
            if r < rounds {
                match messages[r].binary_search_by_key(&UserId(uid), |&(u, _)| u) {
                    Ok(pos) => messages[r][pos].1 += 1,
                    Err(pos) => messages[r].insert(pos, (UserId(uid), 1)),
                }
            }
        }
    }
    RoundGrid::from_parts(interval, users, online, messages)
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticParams {
    /// Users online for the whole horizon.
    pub core: usize,
    /// Users online once per `period` for a random sub-window.
    pub periodic: usize,
    pub period: u64,
    /// Users online for a single short interval.
    pub ephemeral: usize,
    pub horizon: u64,
    /// Expected messages per user per hour of online time.
    pub message_rate_per_hour: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            core: 0,
            periodic: 0,
            period: 3600,
            ephemeral: 0,
            horizon: 3600,
            message_rate_per_hour: 0.0,
            seed: 0,
        }
    }
}

/// Generate a synthetic trace mirroring the usual structure of a public
/// chat room: an always-online core, periodically returning users, and
/// one-shot ephemeral visitors. Deterministic for a fixed seed.
///
/// Sampling rules: each periodic user gets, in every full window
/// `[k*period, (k+1)*period)`, one interval with a uniform start in the
/// window and a uniform length covering at least one second of it. Each
/// ephemeral user gets one interval of length at most `horizon / 20`
/// starting uniformly in the horizon. Message counts are Poisson with mean
/// `rate * online_time / 3600`, each placed uniformly over the user's
/// online seconds.
pub fn generate_synthetic(params: &SyntheticParams) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let horizon = params.horizon;
    let mut entries: Vec<(UserTag, Timeline)> = Vec::new();
    if horizon == 0 {
        return Trace::default();
    }

    for i in 0..params.core {
        let tag = UserTag::new(format!("core{i:04}"));
        entries.push((
            tag,
            Timeline {
                intervals: vec![(0, horizon)],
                messages: Vec::new(),
            },
        ));
    }
    for i in 0..params.periodic {
        let tag = UserTag::new(format!("per{i:04}"));
        let mut intervals = Vec::new();
        if params.period > 0 {
            let mut w = 0;
            while w + params.period <= horizon {
                let start = w + rng.random_range(0..params.period);
                let len = rng.random_range(1..=(w + params.period - start));
                intervals.push((start, start + len));
                w += params.period;
            }
        }
        entries.push((
            tag,
            Timeline {
                intervals,
                messages: Vec::new(),
            },
        ));
    }
    let short_max = (horizon / 20).max(1);
    for i in 0..params.ephemeral {
        let tag = UserTag::new(format!("eph{i:04}"));
        let start = rng.random_range(0..horizon);
        let len = rng.random_range(1..=short_max.min(horizon - start).max(1));
        entries.push((
            tag,
            Timeline {
                intervals: vec![(start, start + len)],
                messages: Vec::new(),
            },
        ));
    }

    for (_, tl) in entries.iter_mut() {
        let online = tl.total_online();
        let mean = params.message_rate_per_hour * online as f64 / 3600.0;
        if mean <= 0.0 {
            continue;
        }
        let count = Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64;
        for _ in 0..count {
            let mut offset = rng.random_range(0..online);
            for &(a, b) in &tl.intervals {
                let len = b - a;
                if offset < len {
                    tl.messages.push(a + offset);
                    break;
                }
                offset -= len;
            }
        }
        tl.messages.sort_unstable();
    }

    Trace {
        timelines: entries.into_iter().collect(),
        nick_links: Vec::new(),
        horizon,
    }
}

/// Brute-force point query used by tests and analysis: is the user online
/// at instant `t` according to the raw trace?
pub fn online_at(trace: &Trace, user: &UserTag, t: u64) -> bool {
    trace
        .timelines
        .get(user)
        .map(|tl| tl.online_at(t))
        .unwrap_or(false)
}
