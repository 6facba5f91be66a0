//! Compact user sets over a fixed universe.
//!
//! Every set produced for one simulation (online sets, rosters, filtered
//! sets, buddy sets, anonymity sets) shares the universe of the round grid
//! it came from, so set algebra is plain bit arithmetic.

use fixedbitset::FixedBitSet;

/// Index of a user within a round grid's user table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub usize);

/// A set of users over a fixed universe.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UserSet {
    bits: FixedBitSet,
}

impl UserSet {
    pub fn empty(universe: usize) -> Self {
        UserSet {
            bits: FixedBitSet::with_capacity(universe),
        }
    }

    pub fn full(universe: usize) -> Self {
        let mut bits = FixedBitSet::with_capacity(universe);
        bits.insert_range(..);
        UserSet { bits }
    }

    pub fn from_ids<I: IntoIterator<Item = UserId>>(universe: usize, ids: I) -> Self {
        let mut s = Self::empty(universe);
        for id in ids {
            s.insert(id);
        }
        s
    }

    /// Size of the universe this set ranges over (not the cardinality).
    pub fn universe(&self) -> usize {
        self.bits.len()
    }

    pub fn insert(&mut self, u: UserId) {
        self.bits.insert(u.0);
    }

    pub fn remove(&mut self, u: UserId) {
        self.bits.set(u.0, false);
    }

    pub fn contains(&self, u: UserId) -> bool {
        self.bits.contains(u.0)
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_clear()
    }

    pub fn iter(&self) -> impl Iterator<Item = UserId> + '_ {
        self.bits.ones().map(UserId)
    }

    pub fn intersect_with(&mut self, other: &UserSet) {
        self.bits.intersect_with(&other.bits);
    }

    pub fn intersection(&self, other: &UserSet) -> UserSet {
        let mut out = self.clone();
        out.intersect_with(other);
        out
    }

    pub fn intersection_len(&self, other: &UserSet) -> usize {
        self.bits.intersection(&other.bits).count()
    }

    pub fn union_with(&mut self, other: &UserSet) {
        self.bits.union_with(&other.bits);
    }

    pub fn union(&self, other: &UserSet) -> UserSet {
        let mut out = self.clone();
        out.union_with(other);
        out
    }

    /// Elements of `self` not in `other`.
    pub fn difference(&self, other: &UserSet) -> UserSet {
        let mut out = self.clone();
        out.bits.difference_with(&other.bits);
        out
    }

    pub fn is_subset_of(&self, other: &UserSet) -> bool {
        self.bits.is_subset(&other.bits)
    }

    pub fn is_disjoint(&self, other: &UserSet) -> bool {
        self.bits.is_disjoint(&other.bits)
    }
}
