//! Fold a simulation output directory into CDFs and worst-case time
//! series, with a plain-text summary on standard output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

const METRICS_HEADER: &str = "round,possinymity,indinymity,attack_success_prob";

struct RunSeries {
    possinymity: Vec<u64>,
    indinymity: Vec<u64>,
    attack: Vec<f64>,
}

fn read_metrics_file(path: &Path) -> Result<RunSeries> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(header)) if header == METRICS_HEADER => {}
        other => bail!(
            "inconsistent header in {}: {:?} (expected {METRICS_HEADER:?})",
            path.display(),
            other
        ),
    }
    let mut series = RunSeries {
        possinymity: Vec::new(),
        indinymity: Vec::new(),
        attack: Vec::new(),
    };
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("malformed row in {}: {line:?}", path.display());
        }
        series.possinymity.push(fields[1].parse()?);
        series.indinymity.push(fields[2].parse()?);
        series.attack.push(fields[3].parse()?);
    }
    Ok(series)
}

/// Cumulative distribution of `values` (plus `infinite` samples beyond any
/// finite value), as `(value, cumulative_fraction)` steps.
fn cdf(values: &mut Vec<u64>, infinite: usize) -> Vec<(Option<u64>, f64)> {
    values.sort_unstable();
    let total = (values.len() + infinite) as f64;
    let mut points = Vec::new();
    let mut covered = 0usize;
    let mut i = 0;
    while i < values.len() {
        let v = values[i];
        while i < values.len() && values[i] == v {
            covered += 1;
            i += 1;
        }
        points.push((Some(v), covered as f64 / total));
    }
    if infinite > 0 {
        points.push((None, 1.0));
    }
    points
}

fn write_cdf(path: &Path, value_column: &str, points: &[(Option<u64>, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{value_column},cum_fraction")?;
    for (value, fraction) in points {
        match value {
            Some(v) => writeln!(w, "{v},{fraction}")?,
            None => writeln!(w, "inf,{fraction}")?,
        }
    }
    w.flush()?;
    Ok(())
}

fn percentile(sorted: &[u64], q: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    sorted[((sorted.len() - 1) as u64 * q / 100) as usize]
}

pub fn cmd_report(dir: &Path) -> Result<()> {
    // lifetimes
    let lifetimes_path = dir.join("lifetimes.csv");
    let file = File::open(&lifetimes_path)
        .with_context(|| format!("opening {}", lifetimes_path.display()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == "nym,policy,nominal_rounds,useful_rounds,squelched" => {}
        other => bail!("inconsistent header in lifetimes.csv: {other:?}"),
    }
    let mut useful: Vec<u64> = Vec::new();
    let mut squelched = 0usize;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("malformed row in lifetimes.csv: {line:?}");
        }
        useful.push(fields[3].parse()?);
        if fields[4] == "true" {
            squelched += 1;
        }
    }
    let run_count = useful.len();

    // delays
    let delays_path = dir.join("delays.csv");
    let file =
        File::open(&delays_path).with_context(|| format!("opening {}", delays_path.display()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == "nym,policy,schedule_round,delay_rounds" => {}
        other => bail!("inconsistent header in delays.csv: {other:?}"),
    }
    let mut delays: Vec<u64> = Vec::new();
    let mut undelivered = 0usize;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let value = line
            .rsplit(',')
            .next()
            .ok_or_else(|| anyhow::anyhow!("malformed row in delays.csv: {line:?}"))?;
        if value == "inf" {
            undelivered += 1;
        } else {
            delays.push(value.parse()?);
        }
    }

    // per-run metric series
    let runs_dir = dir.join("runs");
    let mut metric_paths: Vec<std::path::PathBuf> = std::fs::read_dir(&runs_dir)
        .with_context(|| format!("reading {}", runs_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".metrics.csv"))
        })
        .collect();
    metric_paths.sort();
    let mut series = Vec::with_capacity(metric_paths.len());
    for path in &metric_paths {
        series.push(read_metrics_file(path)?);
    }

    let report_dir = dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let delivered = delays.len();
    let delay_cdf = cdf(&mut delays, undelivered);
    write_cdf(&report_dir.join("delay_cdf.csv"), "delay_rounds", &delay_cdf)?;
    let lifetime_cdf = cdf(&mut useful, 0);
    write_cdf(
        &report_dir.join("lifetime_cdf.csv"),
        "useful_rounds",
        &lifetime_cdf,
    )?;

    // worst case over nyms, keyed by rounds since creation
    let max_len = series.iter().map(|s| s.possinymity.len()).max().unwrap_or(0);
    let mut w = BufWriter::new(File::create(report_dir.join("worst_case.csv"))?);
    writeln!(
        w,
        "rounds_since_creation,min_possinymity,min_indinymity,max_attack_success"
    )?;
    let mut final_worst = (u64::MAX, u64::MAX, 0.0f64);
    for offset in 0..max_len {
        let mut min_poss = u64::MAX;
        let mut min_ind = u64::MAX;
        let mut max_attack = 0.0f64;
        let mut any = false;
        for s in &series {
            if let Some(&v) = s.possinymity.get(offset) {
                any = true;
                min_poss = min_poss.min(v);
                min_ind = min_ind.min(s.indinymity[offset]);
                max_attack = max_attack.max(s.attack[offset]);
            }
        }
        if any {
            writeln!(w, "{offset},{min_poss},{min_ind},{max_attack}")?;
            final_worst = (
                final_worst.0.min(min_poss),
                final_worst.1.min(min_ind),
                final_worst.2.max(max_attack),
            );
        }
    }
    w.flush()?;

    let total_msgs = delivered + undelivered;
    useful.sort_unstable();
    println!("runs:                {run_count} ({squelched} squelched)");
    println!(
        "messages:            {delivered}/{total_msgs} delivered, {undelivered} undelivered"
    );
    println!(
        "delay rounds:        p50 {}, p90 {}, max {}",
        percentile(&delays, 50),
        percentile(&delays, 90),
        delays.last().copied().unwrap_or(0)
    );
    println!(
        "useful lifetime:     p50 {}, p90 {} rounds",
        percentile(&useful, 50),
        percentile(&useful, 90)
    );
    if max_len > 0 {
        println!(
            "worst case over all rounds: possinymity {}, indinymity {}, attack success {}",
            final_worst.0, final_worst.1, final_worst.2
        );
    }
    println!("report written to {}", report_dir.display());
    Ok(())
}
