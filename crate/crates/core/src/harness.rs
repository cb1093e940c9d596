//! Experiment plumbing: config files, CSV emission, and parameter sweeps.
//!
//! Config files are plain `key = value` lines (keys match the parameter
//! field names, `#` starts a comment, omitted keys keep their defaults).
//! Sweeps vary the participant churn rate `p_d` across seeds, keeping the
//! churn mix feasible by rebalancing `r_d`, and run in parallel with
//! deterministic, sorted output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::run;
use crate::model::{RunSummary, SimParams, Snapshot, ValidationError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no sweep data to plot")]
    NoData,
}

/// Parse a config file body. Unknown keys, duplicate keys, and malformed
/// values are errors (reported with their line number); keys that never
/// appear keep their default values. The result is not validated here —
/// callers decide when to apply [`SimParams::validate`].
pub fn parse_config(text: &str) -> Result<SimParams, HarnessError> {
    let mut params = SimParams::default();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(HarnessError::Config {
                line: line_no,
                message: format!("duplicate key `{key}`"),
            });
        }
        set_field(&mut params, key, value, line_no)?;
    }
    Ok(params)
}

fn set_field(
    params: &mut SimParams,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), HarnessError> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        value.parse().map_err(|e| HarnessError::Config {
            line,
            message: format!("bad value for `{key}`: {e}"),
        })
    }
    macro_rules! fields {
        ($($name:ident),* $(,)?) => {
            match key {
                $(stringify!($name) => params.$name = parse(key, value, line)?,)*
                _ => {
                    return Err(HarnessError::Config {
                        line,
                        message: format!("unknown key `{key}`"),
                    })
                }
            }
        };
    }
    fields!(
        grid_w, grid_h, pc_rate, ic_rate, r_rate, n_rate, a_rate, p_rate, nr_rate, ic_d, n_d,
        a_d, p_d, r_d, churn_count, steps, record_every, seed, service_duration,
        activity_duration, activity_min_size, activity_capacity, activity_types,
        participant_wait_window, deadline_alarm, deadline_nonurgent, pref_informal,
    );
    Ok(())
}

/// Render parameters as a config file that [`parse_config`] reads back
/// exactly (floats use Rust's shortest round-trip formatting).
pub fn write_config(params: &SimParams) -> String {
    let mut out = String::new();
    macro_rules! emit {
        ($($name:ident),* $(,)?) => {
            $(let _ = writeln!(out, "{} = {}", stringify!($name), params.$name);)*
        };
    }
    out.push_str("# simulation configuration: `key = value`, `#` starts a comment,\n");
    out.push_str("# omitted keys keep their defaults\n\n");
    out.push_str("# grid\n");
    emit!(grid_w, grid_h);
    out.push_str("\n# initial role mix (sums to 1)\n");
    emit!(pc_rate, ic_rate, r_rate, n_rate);
    out.push_str("\n# request kind mix at start (sums to 1)\n");
    emit!(a_rate, p_rate, nr_rate);
    out.push_str("\n# churn: cells re-rolled per step and their target mix\n");
    out.push_str("# (ic_d + n_d <= 1, remainder becomes requesters split a_d/p_d/r_d)\n");
    emit!(churn_count, ic_d, n_d, a_d, p_d, r_d);
    out.push_str("\n# run length and recording cadence\n");
    emit!(steps, record_every, seed);
    out.push_str("\n# interaction durations and activity shape\n");
    emit!(
        service_duration,
        activity_duration,
        activity_min_size,
        activity_capacity,
        activity_types
    );
    out.push_str("\n# timing: participant wait window and abort deadlines\n");
    emit!(participant_wait_window, deadline_alarm, deadline_nonurgent);
    out.push_str("\n# chance that a non-urgent request prefers an informal carer\n");
    emit!(pref_informal);
    out
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<SimParams, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

pub const SNAPSHOT_HEADER: &str = "step,pc_total,pc_idle,ic_total,ic_idle,neutral_total,\
alarm_total,alarm_waiting,part_total,part_waiting,nonurg_total,nonurg_waiting,\
failures_cum,mean_wait";

/// Render recorded snapshots as CSV, one row per snapshot.
pub fn snapshot_csv(snapshots: &[Snapshot]) -> String {
    let mut out = String::with_capacity(snapshots.len() * 64 + 128);
    out.push_str(SNAPSHOT_HEADER);
    out.push('\n');
    for s in snapshots {
        let c = &s.census;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.step,
            c.pc.total,
            c.pc.idle,
            c.ic.total,
            c.ic.idle,
            c.neutral.total,
            c.alarm.total,
            c.alarm.idle,
            c.participant.total,
            c.participant.idle,
            c.non_urgent.total,
            c.non_urgent.idle,
            s.failures_cum,
            s.mean_wait
        );
    }
    out
}

/// Write snapshots as CSV to a file.
pub fn write_snapshot_csv(path: &Path, snapshots: &[Snapshot]) -> Result<(), HarnessError> {
    fs::write(path, snapshot_csv(snapshots))
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Render the end-of-run summary as a small human-readable block.
pub fn format_summary(summary: &RunSummary) -> String {
    let c = &summary.census;
    let mut out = String::new();
    let _ = writeln!(out, "PC #: {:.2}; idle {:.2}", c.pc.total, c.pc.idle);
    let _ = writeln!(out, "IC #: {:.2}; idle {:.2}", c.ic.total, c.ic.idle);
    let _ = writeln!(out, "Neutral #: {:.2}", c.neutral.total);
    let _ = writeln!(out, "Alarm #: {:.2}; waiting {:.2}", c.alarm.total, c.alarm.idle);
    let _ = writeln!(
        out,
        "Participant #: {:.2}; waiting {:.2}",
        c.participant.total, c.participant.idle
    );
    let _ = writeln!(
        out,
        "Non-urgent #: {:.2}; waiting {:.2}",
        c.non_urgent.total, c.non_urgent.idle
    );
    let _ = writeln!(out, "Failures: {}", summary.failures_total);
    let _ = writeln!(out, "Ave latency: {:.2}", summary.ave_latency);
    out
}

/// A sweep over participant churn rates: every `p_d` value is run once per
/// seed, with `r_d` rebalanced so the churn kind mix keeps summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub p_d_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self, base: &SimParams) -> Result<(), ValidationError> {
        let mut violations = Vec::new();
        if self.p_d_values.is_empty() {
            violations.push("sweep needs at least one p_d value".to_string());
        }
        if self.seeds.is_empty() {
            violations.push("sweep needs at least one seed".to_string());
        }
        for &p_d in &self.p_d_values {
            if let Err(e) = coupled_params(base, p_d, 0) {
                violations.push(format!("p_d = {p_d}: {e}"));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationError::new(violations))
        }
    }
}

/// Base parameters with the churn kind mix re-coupled to a new `p_d`:
/// `r_d` absorbs the change so `a_d + p_d + r_d` stays 1.
pub fn coupled_params(base: &SimParams, p_d: f64, seed: u64) -> Result<SimParams, ValidationError> {
    let params = SimParams { p_d, r_d: 1.0 - base.a_d - p_d, seed, ..base.clone() };
    params.validate()?;
    Ok(params)
}

/// One completed run within a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p_d: f64,
    pub seed: u64,
    pub summary: RunSummary,
}

/// Run the full sweep in parallel. Rows come back sorted by `(p_d, seed)`
/// regardless of scheduling, so output is deterministic.
pub fn run_sweep(base: &SimParams, spec: &SweepSpec) -> Result<Vec<SweepRow>, ValidationError> {
    spec.validate(base)?;
    let combos: Vec<(f64, u64)> = spec
        .p_d_values
        .iter()
        .flat_map(|&p_d| spec.seeds.iter().map(move |&seed| (p_d, seed)))
        .collect();
    let mut rows: Vec<SweepRow> = combos
        .into_par_iter()
        .map(|(p_d, seed)| {
            let params = coupled_params(base, p_d, seed)?;
            let (summary, _) = run(&params)?;
            Ok(SweepRow { p_d, seed, summary })
        })
        .collect::<Result<Vec<_>, ValidationError>>()?;
    rows.sort_by(|a, b| a.p_d.total_cmp(&b.p_d).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "p_d,seed,failures_total,ave_latency,pc_total,pc_idle,\
ic_total,ic_idle,neutral_total,alarm_total,alarm_waiting,part_total,part_waiting,\
nonurg_total,nonurg_waiting";

/// Render sweep rows as CSV, one row per run.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 96 + 160);
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        let c = &row.summary.census;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.p_d,
            row.seed,
            row.summary.failures_total,
            row.summary.ave_latency,
            c.pc.total,
            c.pc.idle,
            c.ic.total,
            c.ic.idle,
            c.neutral.total,
            c.alarm.total,
            c.alarm.idle,
            c.participant.total,
            c.participant.idle,
            c.non_urgent.total,
            c.non_urgent.idle
        );
    }
    out
}

/// Per-`p_d` statistics over the seeds of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PdAggregate {
    pub p_d: f64,
    pub runs: usize,
    pub mean_failures: f64,
    pub std_failures: f64,
    pub mean_latency: f64,
    pub std_latency: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation; zero for a single run.
fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Collapse sorted sweep rows into one aggregate per `p_d` value.
pub fn aggregate_by_p_d(rows: &[SweepRow]) -> Vec<PdAggregate> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let p_d = rows[i].p_d;
        let mut j = i;
        while j < rows.len() && rows[j].p_d.total_cmp(&p_d).is_eq() {
            j += 1;
        }
        let group = &rows[i..j];
        let failures: Vec<f64> =
            group.iter().map(|r| r.summary.failures_total as f64).collect();
        let latencies: Vec<f64> = group.iter().map(|r| r.summary.ave_latency).collect();
        out.push(PdAggregate {
            p_d,
            runs: group.len(),
            mean_failures: mean(&failures),
            std_failures: pop_std(&failures),
            mean_latency: mean(&latencies),
            std_latency: pop_std(&latencies),
        });
        i = j;
    }
    out
}

/// Render aggregates as two plot-ready TSV tables (failures and latency
/// against `p_d`), separated by a blank line.
pub fn emit_plot_data(aggregates: &[PdAggregate]) -> Result<String, HarnessError> {
    if aggregates.is_empty() {
        return Err(HarnessError::NoData);
    }
    let mut out = String::new();
    out.push_str("# failures vs participant churn rate\n");
    out.push_str("# p_d\tmean\tstddev\n");
    for a in aggregates {
        let _ = writeln!(out, "{}\t{}\t{}", a.p_d, a.mean_failures, a.std_failures);
    }
    out.push('\n');
    out.push_str("# latency vs participant churn rate\n");
    out.push_str("# p_d\tmean\tstddev\n");
    for a in aggregates {
        let _ = writeln!(out, "{}\t{}\t{}", a.p_d, a.mean_latency, a.std_latency);
    }
    Ok(out)
}
