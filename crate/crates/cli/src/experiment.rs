//! Batch experiment execution: load or synthesize a trace, run the
//! ideal-anonymity analyses or per-nym policy/attack sweeps, and write the
//! CSV outputs. Runs are independent and execute on a work pool; files are
//! written afterwards in a fixed order so outputs are byte-reproducible.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use buddies::attack::{evaluate_attack, AttackConfig, AttackPoint};
use buddies::engine::{simulate_nym, write_history_csv, NymId, NymStatus, SimulationRun};
use buddies::metrics::{
    ideal_lowlatency, ideal_maxoffline, indinymity_series, possinymity_series, usability_stats,
    write_metrics_csv, MessageDelay, UsabilityStats,
};
use buddies::trace::{discretize, generate_synthetic, parse_trace, RoundGrid, Trace, UserTag};

use crate::config::{ExperimentConfig, NymSelection, TraceSource};

/// Derive one run's policy seed from the master seed, the nym's owner tag,
/// the policy index, and the policy's base seed, so each run reproduces
/// independently of execution order.
pub fn derive_seed(master: u64, nym_tag: &str, policy_index: usize, policy_seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((nym_tag.len() as u64).to_le_bytes());
    hasher.update(nym_tag.as_bytes());
    hasher.update((policy_index as u64).to_le_bytes());
    hasher.update(policy_seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn load_trace(cfg: &ExperimentConfig) -> Result<Trace> {
    let trace = match &cfg.trace {
        TraceSource::Events(path) => {
            let file = File::open(path)
                .with_context(|| format!("opening trace file {}", path.display()))?;
            parse_trace(std::io::BufReader::new(file))
                .with_context(|| format!("parsing trace {}", path.display()))?
        }
        TraceSource::Csv {
            intervals,
            messages,
        } => {
            let iv = File::open(intervals)
                .with_context(|| format!("opening interval csv {}", intervals.display()))?;
            let mv = File::open(messages)
                .with_context(|| format!("opening message csv {}", messages.display()))?;
            Trace::read_csv(iv, mv)?
        }
        TraceSource::Synthetic(params) => {
            let mut params = params.clone();
            if cfg.trace_seed_from_master {
                params.seed = derive_seed(cfg.master_seed, "synthetic-trace", 0, 0);
            }
            generate_synthetic(&params)
        }
    };
    Ok(match cfg.repair_max_gap {
        Some(gap) => buddies::trace::repair_reconnects(&trace, gap),
        None => trace,
    })
}

fn percentile(sorted: &[u64], q: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    sorted[((sorted.len() - 1) as u64 * q / 100) as usize]
}

/// Sweep the ideal analyses over the configured lifetimes and tolerances,
/// writing `ideal_lifetime.csv` and `ideal_maxoffline.csv`.
pub fn cmd_ideal(cfg: &ExperimentConfig) -> Result<()> {
    let trace = load_trace(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let path = cfg.output_dir.join("ideal_lifetime.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "lifetime_secs,percentile,anonymity_set_size")?;
    for &lifetime in &cfg.ideal_lifetimes {
        let mut counts: Vec<u64> = ideal_lowlatency(&trace, lifetime)
            .into_iter()
            .map(|c| c as u64)
            .collect();
        counts.sort_unstable();
        if counts.is_empty() {
            continue;
        }
        for q in [0, 10, 25, 50, 75, 90, 100] {
            writeln!(w, "{lifetime},{q},{}", percentile(&counts, q))?;
        }
    }
    w.flush()?;

    let path = cfg.output_dir.join("ideal_maxoffline.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "tolerance_secs,user_count")?;
    if trace.user_count() > 0 {
        for &tolerance in &cfg.ideal_tolerances {
            writeln!(w, "{tolerance},{}", ideal_maxoffline(&trace, tolerance))?;
        }
    }
    w.flush()?;
    log::info!(
        "ideal analyses over {} users written to {}",
        trace.user_count(),
        cfg.output_dir.display()
    );
    Ok(())
}

/// Users eligible to model a nym: they have messages, and are online at
/// some round from their first message onward.
fn eligible(grid: &RoundGrid, tag: &UserTag) -> bool {
    let Some(id) = grid.id_of(tag) else {
        return false;
    };
    match grid.user_message_rounds(id).first() {
        Some(&(first, _)) => (first..grid.rounds()).any(|r| grid.online(r).contains(id)),
        None => false,
    }
}

fn select_nyms(grid: &RoundGrid, selection: &NymSelection) -> Result<Vec<UserTag>> {
    let mut selected: Vec<UserTag> = match selection {
        NymSelection::AllWithMessages => grid
            .users()
            .iter()
            .filter(|tag| eligible(grid, tag))
            .cloned()
            .collect(),
        NymSelection::TopByMessages(n) => {
            let mut by_count: Vec<(u64, &UserTag)> = grid
                .users()
                .iter()
                .filter(|tag| eligible(grid, tag))
                .map(|tag| {
                    let id = grid.id_of(tag).expect("eligible user");
                    let count: u64 = grid
                        .user_message_rounds(id)
                        .iter()
                        .map(|&(_, c)| c as u64)
                        .sum();
                    (count, tag)
                })
                .collect();
            by_count.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
            by_count.into_iter().take(*n).map(|(_, t)| t.clone()).collect()
        }
        NymSelection::Tags(tags) => {
            let mut out = Vec::new();
            for tag in tags {
                if eligible(grid, tag) {
                    out.push(tag.clone());
                } else {
                    log::warn!("selected tag {tag} has no schedulable messages, skipped");
                }
            }
            out
        }
    };
    selected.dedup();
    if selected.is_empty() {
        bail!("nym selection yields zero users");
    }
    Ok(selected)
}

struct RunOutput {
    nym_id: NymId,
    owner: UserTag,
    policy_index: usize,
    run: SimulationRun,
    possinymity: Vec<usize>,
    indinymity: Vec<usize>,
    /// One series per configured p.
    attack: Vec<(f64, Vec<AttackPoint>)>,
    usability: UsabilityStats,
    schedule_rounds: Vec<usize>,
}

fn execute_run(
    grid: &RoundGrid,
    cfg: &ExperimentConfig,
    nym_index: usize,
    owner: &UserTag,
    policy_index: usize,
) -> Result<RunOutput> {
    let mut spec = cfg.policies[policy_index].clone();
    spec.seed = derive_seed(cfg.master_seed, owner.as_str(), policy_index, spec.seed);
    let nym_id = NymId::new(format!("N{nym_index:04}"));
    let run = simulate_nym(grid, nym_id.clone(), owner, &spec)?;
    let possinymity = possinymity_series(&run.history, &run.nym.roster);
    let indinymity = indinymity_series(&run.history, &run.nym.roster);
    let attack = cfg
        .attack_ps
        .iter()
        .map(|&p| {
            let mut acfg = AttackConfig::new(p);
            acfg.weight_tolerance = cfg.weight_tolerance;
            (p, evaluate_attack(&run, &acfg))
        })
        .collect();
    let usability = usability_stats(&run, grid);
    let owner_id = grid.id_of(owner).expect("owner resolved");
    let mut schedule_rounds = Vec::new();
    for (round, count) in grid.user_message_rounds(owner_id) {
        for _ in 0..count {
            schedule_rounds.push(round);
        }
    }
    Ok(RunOutput {
        nym_id,
        owner: owner.clone(),
        policy_index,
        run,
        possinymity,
        indinymity,
        attack,
        usability,
        schedule_rounds,
    })
}

fn write_run_files(out_dir: &Path, output: &RunOutput) -> Result<()> {
    let stem = format!("{}-p{}", output.nym_id, output.policy_index);
    let runs_dir = out_dir.join("runs");

    let mut w = BufWriter::new(File::create(runs_dir.join(format!("{stem}.history.csv")))?);
    write_history_csv(&output.run, &mut w)?;
    w.flush()?;

    // the metric file carries the worst guessing success over the p sweep
    let worst: Vec<f64> = (0..output.run.history.len())
        .map(|i| {
            output
                .attack
                .iter()
                .map(|(_, pts)| pts[i].expected_success)
                .fold(0.0, f64::max)
        })
        .collect();
    let mut w = BufWriter::new(File::create(runs_dir.join(format!("{stem}.metrics.csv")))?);
    write_metrics_csv(&output.run, &worst, &mut w)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(runs_dir.join(format!("{stem}.attack.csv")))?);
    buddies::attack::write_attack_csv(&output.run, &output.attack, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Round offsets sampled for the aggregate files: every offset when runs
/// are short, a uniform stride capping the table near a thousand rows
/// otherwise.
fn sample_offsets(max_len: usize) -> Vec<usize> {
    if max_len == 0 {
        return Vec::new();
    }
    let stride = max_len.div_ceil(1000).max(1);
    (0..max_len).step_by(stride).collect()
}

fn write_aggregates(out_dir: &Path, cfg: &ExperimentConfig, outputs: &[RunOutput]) -> Result<()> {
    let mut w = BufWriter::new(File::create(out_dir.join("aggregate_metrics.csv"))?);
    writeln!(w, "policy,metric,rounds_since_creation,percentile,value")?;
    for policy in 0..cfg.policies.len() {
        let runs: Vec<&RunOutput> = outputs
            .iter()
            .filter(|o| o.policy_index == policy)
            .collect();
        let max_len = runs.iter().map(|o| o.possinymity.len()).max().unwrap_or(0);
        for metric in ["possinymity", "indinymity"] {
            for &offset in &sample_offsets(max_len) {
                let mut values: Vec<u64> = runs
                    .iter()
                    .filter_map(|o| {
                        let series = match metric {
                            "possinymity" => &o.possinymity,
                            _ => &o.indinymity,
                        };
                        series.get(offset).map(|&v| v as u64)
                    })
                    .collect();
                if values.is_empty() {
                    continue;
                }
                values.sort_unstable();
                for q in [0, 25, 50, 75, 100] {
                    writeln!(
                        w,
                        "{policy},{metric},{offset},{q},{}",
                        percentile(&values, q)
                    )?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(out_dir.join("aggregate_attack.csv"))?);
    writeln!(w, "policy,p,rounds_since_creation,max_expected_success")?;
    for policy in 0..cfg.policies.len() {
        let runs: Vec<&RunOutput> = outputs
            .iter()
            .filter(|o| o.policy_index == policy)
            .collect();
        let max_len = runs
            .iter()
            .map(|o| o.run.history.len())
            .max()
            .unwrap_or(0);
        for &p in &cfg.attack_ps {
            for &offset in &sample_offsets(max_len) {
                let mut any = false;
                let mut worst = 0.0f64;
                for o in &runs {
                    if let Some((_, pts)) =
                        o.attack.iter().find(|(q, _)| q.to_bits() == p.to_bits())
                    {
                        if let Some(pt) = pts.get(offset) {
                            any = true;
                            worst = worst.max(pt.expected_success);
                        }
                    }
                }
                if any {
                    writeln!(w, "{policy},{p},{offset},{worst}")?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Run every selected nym under every policy, with metric and attack
/// evaluation, writing per-run and aggregate CSVs. Nym identities are
/// sequential; the owner linkage appears only under `ground_truth/`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<()> {
    let trace = load_trace(cfg)?;
    let grid = discretize(&trace, cfg.round_interval)?;
    let owners = select_nyms(&grid, &cfg.nym_selection)?;
    log::info!(
        "{} nyms x {} policies over {} rounds of {} users",
        owners.len(),
        cfg.policies.len(),
        grid.rounds(),
        grid.user_count()
    );

    let jobs: Vec<(usize, &UserTag, usize)> = owners
        .iter()
        .enumerate()
        .flat_map(|(ni, tag)| (0..cfg.policies.len()).map(move |pi| (ni, tag, pi)))
        .collect();
    let outputs: Vec<RunOutput> = jobs
        .par_iter()
        .map(|&(ni, tag, pi)| execute_run(&grid, cfg, ni, tag, pi))
        .collect::<Result<_>>()?;

    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir.join("runs"))?;
    std::fs::create_dir_all(out_dir.join("ground_truth"))?;

    for output in &outputs {
        write_run_files(out_dir, output)?;
    }

    let mut w = BufWriter::new(File::create(out_dir.join("policies.csv"))?);
    writeln!(
        w,
        "policy,possinymity_floor,buddy_min,offline_tolerance_rounds,formation,sacrifice_order,strawman,seed"
    )?;
    for (i, spec) in cfg.policies.iter().enumerate() {
        let kv = spec.to_kv();
        let get = |k: &str| kv.get(k).cloned().unwrap_or_default();
        writeln!(
            w,
            "{i},{},{},{},{},{},{},{}",
            get("possinymity_floor"),
            get("buddy_min"),
            get("offline_tolerance_rounds"),
            get("formation"),
            get("sacrifice_order"),
            get("strawman"),
            get("seed"),
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(out_dir.join("lifetimes.csv"))?);
    writeln!(w, "nym,policy,nominal_rounds,useful_rounds,squelched")?;
    for o in &outputs {
        writeln!(
            w,
            "{},{},{},{},{}",
            o.nym_id,
            o.policy_index,
            o.usability.nominal_lifetime,
            o.usability.useful_lifetime,
            o.run.nym.status == NymStatus::Squelched
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(out_dir.join("delays.csv"))?);
    writeln!(w, "nym,policy,schedule_round,delay_rounds")?;
    for o in &outputs {
        for (i, delay) in o.usability.delays.iter().enumerate() {
            let sched = o
                .schedule_rounds
                .get(i)
                .copied()
                .unwrap_or(o.run.nym.created_round);
            writeln!(w, "{},{},{sched},{delay}", o.nym_id, o.policy_index)?;
        }
    }
    w.flush()?;

    write_aggregates(out_dir, cfg, &outputs)?;

    let mut w = BufWriter::new(File::create(
        out_dir.join("ground_truth").join("owners.csv"),
    )?);
    writeln!(w, "nym,owner")?;
    for o in &outputs {
        if o.policy_index == 0 {
            writeln!(w, "{},{}", o.nym_id, o.owner)?;
        }
    }
    w.flush()?;

    let delivered: usize = outputs
        .iter()
        .flat_map(|o| &o.usability.delays)
        .filter(|d| matches!(d, MessageDelay::Rounds(_)))
        .count();
    let total: usize = outputs.iter().map(|o| o.usability.delays.len()).sum();
    log::info!(
        "{} runs complete: {delivered}/{total} messages delivered",
        outputs.len()
    );
    Ok(())
}
