//! Experiment configuration: a flat INI file with `[trace]`, `[rounds]`,
//! `[policy]` (repeatable), `[attack]`, and `[output]` sections. A config
//! plus its master seed uniquely determines every output byte.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use buddies::policy::PolicySpec;
use buddies::trace::{SyntheticParams, UserTag};

#[derive(Debug, Clone)]
pub enum TraceSource {
    /// IRC-style event log.
    Events(PathBuf),
    /// Canonical CSV pair.
    Csv {
        intervals: PathBuf,
        messages: PathBuf,
    },
    Synthetic(SyntheticParams),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NymSelection {
    /// Every user with at least one message.
    AllWithMessages,
    /// The n most active users by message count.
    TopByMessages(usize),
    /// An explicit tag list.
    Tags(Vec<UserTag>),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub trace: TraceSource,
    /// Reconnect-repair gap in seconds; absent skips the repair pass.
    pub repair_max_gap: Option<u64>,
    /// Synthetic trace seed was left to the master seed.
    pub trace_seed_from_master: bool,
    pub round_interval: u64,
    pub policies: Vec<PolicySpec>,
    pub attack_ps: Vec<f64>,
    pub weight_tolerance: f64,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub nym_selection: NymSelection,
    pub ideal_lifetimes: Vec<u64>,
    pub ideal_tolerances: Vec<u64>,
}

/// Ordered sections of an INI document; section names repeat.
type Sections = Vec<(String, Vec<(String, String)>)>;

fn parse_ini(text: &str) -> Result<Sections> {
    let mut sections: Sections = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| anyhow!("line {lineno}: unterminated section header"))?;
            sections.push((name.trim().to_ascii_lowercase(), Vec::new()));
        } else {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {lineno}: expected key = value"))?;
            let section = sections
                .last_mut()
                .ok_or_else(|| anyhow!("line {lineno}: key before any section"))?;
            section
                .1
                .push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    Ok(sections)
}

fn get<'a>(kv: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kv.iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

fn parse_num<T: std::str::FromStr>(kv: &[(String, String)], key: &str, default: T) -> Result<T> {
    match get(kv, key) {
        Some(v) => v
            .parse()
            .map_err(|_| anyhow!("bad value {v:?} for key {key}")),
        None => Ok(default),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| anyhow!("bad entry {s:?} in {key}")))
        .collect()
}

const DEFAULT_PS: [f64; 5] = [0.0, 0.1, 0.5, 0.9, 1.0];
const DEFAULT_LIFETIMES: [u64; 7] = [0, 60, 600, 3600, 21_600, 86_400, 604_800];
const DEFAULT_TOLERANCES: [u64; 7] = [0, 30, 60, 600, 3600, 21_600, 86_400];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_ini(&text, base)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_ini(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
        let sections = parse_ini(text)?;
        let known: BTreeSet<&str> = ["trace", "rounds", "policy", "attack", "output"].into();
        for (name, _) in &sections {
            if !known.contains(name.as_str()) {
                bail!("unknown section [{name}]");
            }
        }
        let section = |name: &str| -> Option<&[(String, String)]> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, kv)| kv.as_slice())
        };

        let trace_kv = section("trace").ok_or_else(|| anyhow!("missing [trace] section"))?;
        let join = |p: &str| base_dir.join(p);
        let mut trace_seed_from_master = false;
        let trace = match get(trace_kv, "source").unwrap_or("synthetic") {
            "events" => TraceSource::Events(join(
                get(trace_kv, "path").ok_or_else(|| anyhow!("events source needs path"))?,
            )),
            "csv" => TraceSource::Csv {
                intervals: join(
                    get(trace_kv, "intervals")
                        .ok_or_else(|| anyhow!("csv source needs intervals"))?,
                ),
                messages: join(
                    get(trace_kv, "messages")
                        .ok_or_else(|| anyhow!("csv source needs messages"))?,
                ),
            },
            "synthetic" => {
                trace_seed_from_master = get(trace_kv, "seed").is_none();
                TraceSource::Synthetic(SyntheticParams {
                    core: parse_num(trace_kv, "core", 0)?,
                    periodic: parse_num(trace_kv, "periodic", 0)?,
                    period: parse_num(trace_kv, "period", 3600)?,
                    ephemeral: parse_num(trace_kv, "ephemeral", 0)?,
                    horizon: parse_num(trace_kv, "horizon", 3600)?,
                    message_rate_per_hour: parse_num(trace_kv, "message_rate", 0.0)?,
                    seed: parse_num(trace_kv, "seed", 0)?,
                })
            }
            other => bail!("unknown trace source {other:?}"),
        };
        let repair_max_gap = match get(trace_kv, "repair_max_gap") {
            Some(v) => Some(
                v.parse()
                    .map_err(|_| anyhow!("bad repair_max_gap {v:?}"))?,
            ),
            None => None,
        };

        let rounds_kv = section("rounds").unwrap_or(&[]);
        let round_interval = parse_num(rounds_kv, "interval", 1)?;
        if round_interval == 0 {
            bail!("round interval must be at least 1");
        }

        let mut policies = Vec::new();
        for (name, kv) in &sections {
            if name == "policy" {
                let spec =
                    PolicySpec::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
                policies.push(spec);
            }
        }
        if policies.is_empty() {
            policies.push(PolicySpec::default());
        }

        let attack_kv = section("attack").unwrap_or(&[]);
        let attack_ps = match get(attack_kv, "p") {
            Some(raw) => {
                let ps: Vec<f64> = parse_list(raw, "p")?;
                if ps.is_empty() {
                    bail!("attack p list is empty");
                }
                for &p in &ps {
                    if !(0.0..=1.0).contains(&p) {
                        bail!("attack p {p} outside [0, 1]");
                    }
                }
                ps
            }
            None => DEFAULT_PS.to_vec(),
        };
        let weight_tolerance = parse_num(attack_kv, "weight_tolerance", 1e-9)?;

        let output_kv = section("output").ok_or_else(|| anyhow!("missing [output] section"))?;
        let output_dir = join(
            get(output_kv, "dir").ok_or_else(|| anyhow!("[output] needs dir"))?,
        );
        let master_seed = parse_num(output_kv, "master_seed", 0)?;
        let nym_selection = match get(output_kv, "nym_selection").unwrap_or("all") {
            "all" => NymSelection::AllWithMessages,
            other => {
                if let Some(n) = other.strip_prefix("top:") {
                    NymSelection::TopByMessages(
                        n.parse().map_err(|_| anyhow!("bad nym_selection {other:?}"))?,
                    )
                } else if let Some(tags) = other.strip_prefix("tags:") {
                    let tags: Vec<UserTag> = tags
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(UserTag::from)
                        .collect();
                    if tags.is_empty() {
                        bail!("nym_selection tags list is empty");
                    }
                    NymSelection::Tags(tags)
                } else {
                    bail!("bad nym_selection {other:?}");
                }
            }
        };
        let ideal_lifetimes = match get(output_kv, "ideal_lifetimes") {
            Some(raw) => parse_list(raw, "ideal_lifetimes")?,
            None => DEFAULT_LIFETIMES.to_vec(),
        };
        let ideal_tolerances = match get(output_kv, "ideal_tolerances") {
            Some(raw) => parse_list(raw, "ideal_tolerances")?,
            None => DEFAULT_TOLERANCES.to_vec(),
        };

        Ok(ExperimentConfig {
            trace,
            repair_max_gap,
            trace_seed_from_master,
            round_interval,
            policies,
            attack_ps,
            weight_tolerance,
            output_dir,
            master_seed,
            nym_selection,
            ideal_lifetimes,
            ideal_tolerances,
        })
    }
}
