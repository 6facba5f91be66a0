//! A simulated probabilistic intersection adversary.
//!
//! The adversary watches one nym's scheduled rounds, seeing only the
//! filtered set and whether the output was null. It assumes the owner has
//! nothing to send in any round with a fixed independent probability `p`,
//! and keeps a likelihood weight per roster member: a non-null round
//! eliminates everyone outside the filtered set, a null round multiplies
//! the weight of everyone inside it by `p`. Users with identical
//! filtered-set histories therefore always carry identical weights, which
//! is exactly the indistinguishability the buddy policies enforce.

use std::io::Write;

use thiserror::Error;

use crate::engine::{RoundRecord, SimulationRun};
use crate::metrics::{indinymity_series, possinymity_series};
use crate::userset::{UserId, UserSet};

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    /// Adversary's assumed probability that the owner has nothing to send
    /// in a round.
    pub p: f64,
    /// Relative tolerance when grouping weights into equivalence classes.
    pub weight_tolerance: f64,
}

impl AttackConfig {
    pub fn new(p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "p must lie in [0, 1]");
        AttackConfig {
            p,
            weight_tolerance: 1e-9,
        }
    }
}

#[derive(Error, Debug)]
pub enum AttackError {
    /// Every remaining candidate was eliminated: the observed history is
    /// impossible under the adversary's model, which has been falsified.
    #[error("all ownership weights are zero; the adversary's posting model contradicts the history")]
    AllWeightsZero,
}

/// Per-user ownership likelihoods, renormalized to sum 1 after each update.
#[derive(Debug, Clone)]
pub struct AttackState {
    roster: UserSet,
    weights: Vec<f64>,
}

impl AttackState {
    /// Uniform prior over the roster.
    pub fn new(roster: &UserSet) -> Self {
        let mut weights = vec![0.0; roster.universe()];
        let share = 1.0 / roster.len() as f64;
        for u in roster.iter() {
            weights[u.0] = share;
        }
        AttackState {
            roster: roster.clone(),
            weights,
        }
    }

    pub fn weight(&self, u: UserId) -> f64 {
        self.weights[u.0]
    }

    /// Update on one observed round. The adversary sees only membership in
    /// the filtered set and the null/non-null outcome.
    pub fn observe(
        &mut self,
        filtered: &UserSet,
        non_null: bool,
        cfg: &AttackConfig,
    ) -> Result<(), AttackError> {
        if non_null {
            // the owner provably sat in the filtered set
            for u in self.roster.iter() {
                if !filtered.contains(u) {
                    self.weights[u.0] = 0.0;
                }
            }
        } else {
            // a filtered-set member stayed silent only by choice
            for u in filtered.iter() {
                self.weights[u.0] *= cfg.p;
            }
        }
        let sum: f64 = self.roster.iter().map(|u| self.weights[u.0]).sum();
        if sum == 0.0 {
            return Err(AttackError::AllWeightsZero);
        }
        // one shared factor keeps equal weights bit-identical
        let inv = 1.0 / sum;
        for u in self.roster.iter() {
            self.weights[u.0] *= inv;
        }
        Ok(())
    }

    /// Group roster members into classes of equal weight (within the
    /// relative tolerance), heaviest class first.
    pub fn weight_classes(&self, cfg: &AttackConfig) -> Vec<UserSet> {
        let mut ids: Vec<UserId> = self.roster.iter().collect();
        ids.sort_by(|a, b| {
            self.weights[b.0]
                .partial_cmp(&self.weights[a.0])
                .expect("weights are finite")
                .then(a.0.cmp(&b.0))
        });
        let mut classes: Vec<UserSet> = Vec::new();
        let mut head = f64::NAN;
        for u in ids {
            let w = self.weights[u.0];
            if classes.is_empty() || w < head * (1.0 - cfg.weight_tolerance) {
                classes.push(UserSet::empty(self.roster.universe()));
                head = w;
            }
            classes.last_mut().expect("just pushed").insert(u);
        }
        classes
    }

    /// The adversary's best guess: the maximal-weight equivalence class,
    /// and the success probability if the owner is inside it. Equivalent to
    /// the first entry of [`weight_classes`] but a single pass.
    ///
    /// [`weight_classes`]: AttackState::weight_classes
    pub fn best_guess(&self, cfg: &AttackConfig) -> (UserSet, f64) {
        let mut max = 0.0f64;
        for u in self.roster.iter() {
            max = max.max(self.weights[u.0]);
        }
        let mut top = UserSet::empty(self.roster.universe());
        if max > 0.0 {
            let cut = max * (1.0 - cfg.weight_tolerance);
            for u in self.roster.iter() {
                if self.weights[u.0] >= cut {
                    top.insert(u);
                }
            }
        }
        let success = if top.is_empty() {
            0.0
        } else {
            1.0 / top.len() as f64
        };
        (top, success)
    }
}

/// Update on an engine round record.
pub fn observe_round(
    state: &mut AttackState,
    record: &RoundRecord,
    cfg: &AttackConfig,
) -> Result<(), AttackError> {
    state.observe(&record.filtered, record.outcome.is_posted(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackPoint {
    pub round: usize,
    /// 1/|top class| when the true owner is in the adversary's top class,
    /// 0 otherwise.
    pub expected_success: f64,
}

/// Replay a run from the adversary's viewpoint. If the adversary's model
/// collapses (all weights zero, possible when its assumed `p` contradicts
/// the owner's real behavior), its guesses count as failures from that
/// round on.
pub fn evaluate_attack(run: &SimulationRun, cfg: &AttackConfig) -> Vec<AttackPoint> {
    let owner = run.nym.owner();
    let mut state = AttackState::new(&run.nym.roster);
    let mut collapsed = false;
    let mut points = Vec::with_capacity(run.history.len());
    for rec in &run.history {
        if !collapsed && observe_round(&mut state, rec, cfg).is_err() {
            collapsed = true;
        }
        let expected_success = if collapsed {
            0.0
        } else {
            let (top, success) = state.best_guess(cfg);
            if top.contains(owner) {
                success
            } else {
                0.0
            }
        };
        points.push(AttackPoint {
            round: rec.index,
            expected_success,
        });
    }
    points
}

/// Attack export: `round,p,expected_success,possinymity,indinymity`.
pub fn write_attack_csv<W: Write>(
    run: &SimulationRun,
    sweeps: &[(f64, Vec<AttackPoint>)],
    mut w: W,
) -> std::io::Result<()> {
    let poss = possinymity_series(&run.history, &run.nym.roster);
    let ind = indinymity_series(&run.history, &run.nym.roster);
    writeln!(w, "round,p,expected_success,possinymity,indinymity")?;
    for (p, points) in sweeps {
        for (i, pt) in points.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                pt.round, p, pt.expected_success, poss[i], ind[i]
            )?;
        }
    }
    Ok(())
}
