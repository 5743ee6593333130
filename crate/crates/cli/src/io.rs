//! Artifact readers and writers.
//!
//! Every file format here is stable: column names are part of the contract
//! and reruns of the same config must reproduce output files byte for byte,
//! so nothing written depends on wall-clock time or map iteration order.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use ppsim::control::{ControllerSpec, SignalEvent, SignalEventKind};
use ppsim::engine::TripRecord;
use ppsim::market::{Consumer, EntitlementAllocation, WageBand};
use ppsim::metrics::{EfficiencyStats, FundamentalSample, GroupDelays, SignalStats};
use ppsim::optimize::{Candidate, PointMetrics, SweepRow};

use crate::scenario::CliError;

pub const TRIP_HEADER: &str =
    "vehicle_id,entrance,exit,route_length_m,entitled,vot,spawn_s,depart_s,arrive_s,delay_s";
pub const EVENT_HEADER: &str = "clock_s,intersection_id,event,phase_id";
pub const EFFICIENCY_HEADER: &str = "controller,gamma,tau,flow_veh_h,seed,throughput_veh_h,\
completion_rate,mean_queue_veh,mean_delay_s_km,total_travel_time_veh_s";
pub const FUNDAMENTALS_HEADER: &str = "seed,t,accumulation,flow,speed";
pub const SIGNALS_HEADER: &str = "controller,phase,duration_s,color";
pub const WAGE_HEADER: &str = "wage_usd_per_h,probability";
pub const ALLOCATION_HEADER: &str = "consumer_id,vot,reservation_price,bought,paid,transfer";
pub const SWEEP_HEADER: &str = "controller,t_f1,t_f2,t_min,t_auc,t_max,t_trans,\
chessboard_offsets,gamma,tau,flow_veh_h,seed,spawned,completed,throughput_veh_h,\
completion_rate,mean_queue_veh,mean_delay_s_km,total_travel_time_veh_s,mean_speed_m_s,\
n_entitled,n_other,entitled_delay_s_km,other_delay_s_km,overall_delay_s_km";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn opt_u32(v: Option<u32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trip_log(path: &Path, trips: &[TripRecord]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{TRIP_HEADER}")?;
    for t in trips {
        let delay = t.delay_s().map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            t.vehicle_id,
            t.entrance,
            t.exit,
            t.route_length_m,
            t.entitled,
            t.vot,
            t.spawn_s,
            opt_u32(t.depart_s),
            opt_u32(t.arrive_s),
            delay
        )?;
    }
    Ok(w.flush()?)
}

pub fn write_event_log(path: &Path, events: &[SignalEvent]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{EVENT_HEADER}")?;
    for e in events {
        let kind = match e.kind {
            SignalEventKind::GreenStart => "green_start",
            SignalEventKind::TransitionStart => "transition_start",
        };
        writeln!(w, "{},{},{},{}", e.clock_s, e.intersection, kind, e.phase)?;
    }
    Ok(w.flush()?)
}

/// Scenario identity plus the five window aggregates, one row per seed.
pub struct EfficiencyRow {
    pub controller: String,
    pub gamma: f64,
    pub tau: f64,
    pub flow_veh_h: f64,
    pub seed: u64,
    pub stats: EfficiencyStats,
}

pub fn write_efficiency(path: &Path, rows: &[EfficiencyRow]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{EFFICIENCY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.controller,
            r.gamma,
            r.tau,
            r.flow_veh_h,
            r.seed,
            r.stats.throughput_veh_h,
            r.stats.completion_rate,
            r.stats.mean_queue_veh,
            r.stats.mean_delay_s_km,
            r.stats.total_travel_time_veh_s
        )?;
    }
    Ok(w.flush()?)
}

pub fn write_fundamentals(path: &Path, samples: &[(u64, FundamentalSample)]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{FUNDAMENTALS_HEADER}")?;
    for (seed, s) in samples {
        writeln!(
            w,
            "{},{},{},{},{}",
            seed, s.t_s, s.accumulation_veh, s.flow_veh_h, s.mean_speed_m_s
        )?;
    }
    Ok(w.flush()?)
}

/// Green and red duration distributions per controller.
pub fn write_signal_summary(path: &Path, per_controller: &[(String, SignalStats)]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{SIGNALS_HEADER}")?;
    for (label, stats) in per_controller {
        for d in &stats.green_durations {
            writeln!(w, "{label},{},{},green", d.phase, d.duration_s)?;
        }
        for d in &stats.red_durations {
            writeln!(w, "{label},{},{},red", d.phase, d.duration_s)?;
        }
    }
    Ok(w.flush()?)
}

pub fn read_wage_table(path: &Path) -> Result<Vec<WageBand>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingDependency(format!(
            "wage table `{}` not found",
            path.display()
        )));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    {
        let headers = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
        if headers != WAGE_HEADER {
            return Err(CliError::Io(format!(
                "{}: expected columns `{WAGE_HEADER}`, got `{headers}`",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CliError::Io(format!("{}: bad row {rec:?}", path.display())))
        };
        out.push(WageBand { wage_usd_h: field(0)?, probability: field(1)? });
    }
    Ok(out)
}

fn cents_to_usd(cents: i64) -> String {
    let sign = if cents < 0 { "-" } else { "" };
    let abs = cents.unsigned_abs();
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}

pub fn write_allocation(
    path: &Path,
    consumers: &[Consumer],
    reservation_prices: &[f64],
    alloc: &EntitlementAllocation,
) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{ALLOCATION_HEADER}")?;
    let paid_cents = if alloc.price.is_finite() { (alloc.price * 100.0).round() as i64 } else { 0 };
    for (i, c) in consumers.iter().enumerate() {
        let bought = alloc.bought[i];
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.id,
            c.vot_usd_h,
            reservation_prices[i],
            bought,
            cents_to_usd(if bought { paid_cents } else { 0 }),
            cents_to_usd(alloc.transfer_cents[i])
        )?;
    }
    Ok(w.flush()?)
}

/// One sweep evaluation as a flat row; the inapplicable timing columns of
/// the other controller families stay empty.
pub fn write_sweep(path: &Path, rows: &[(f64, SweepRow)]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{SWEEP_HEADER}")?;
    for (flow, r) in rows {
        let (t_f1, t_f2, t_min, t_auc, t_max, t_trans, chessboard, tau) = match r.candidate.controller {
            ControllerSpec::FixedCycle { t_f1, t_f2, t_trans, chessboard_offsets } => (
                t_f1.to_string(),
                t_f2.to_string(),
                String::new(),
                String::new(),
                String::new(),
                t_trans.to_string(),
                chessboard_offsets.to_string(),
                0.0,
            ),
            ControllerSpec::MaxPressure { t_min, t_auc, t_max, t_trans } => (
                String::new(),
                String::new(),
                t_min.to_string(),
                t_auc.to_string(),
                t_max.to_string(),
                t_trans.to_string(),
                String::new(),
                0.0,
            ),
            ControllerSpec::PriorityPass { tau, t_min, t_auc, t_max, t_trans } => (
                String::new(),
                String::new(),
                t_min.to_string(),
                t_auc.to_string(),
                t_max.to_string(),
                t_trans.to_string(),
                String::new(),
                tau,
            ),
        };
        writeln!(
            w,
            "{},{t_f1},{t_f2},{t_min},{t_auc},{t_max},{t_trans},{chessboard},{},{tau},{flow},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.candidate.controller.label(),
            r.candidate.gamma,
            r.seed,
            r.m.eff.spawned,
            r.m.eff.completed,
            r.m.eff.throughput_veh_h,
            r.m.eff.completion_rate,
            r.m.eff.mean_queue_veh,
            r.m.eff.mean_delay_s_km,
            r.m.eff.total_travel_time_veh_s,
            r.m.mean_speed_m_s,
            r.m.groups.n_entitled,
            r.m.groups.n_other,
            r.m.groups.entitled_mean_s_km,
            r.m.groups.other_mean_s_km,
            r.m.groups.overall_mean_s_km
        )?;
    }
    Ok(w.flush()?)
}

pub fn read_sweep(path: &Path) -> Result<Vec<(f64, SweepRow)>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingDependency(format!(
            "sweep artifact `{}` not found; run `ppsim sweep` first",
            path.display()
        )));
    }
    let bad = |rec: &csv::StringRecord, what: &str| {
        CliError::Io(format!("{}: {what} in row {rec:?}", path.display()))
    };
    let mut rdr = csv::Reader::from_path(path)?;
    {
        let headers = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
        if headers != SWEEP_HEADER {
            return Err(CliError::Io(format!(
                "{}: unexpected sweep columns `{headers}`",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad(&rec, "bad numeric field"))
        };
        let int = |i: usize| -> Result<u32, CliError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad(&rec, "bad integer field"))
        };
        let controller = match rec.get(0) {
            Some("fixed_cycle") => ControllerSpec::FixedCycle {
                t_f1: int(1)?,
                t_f2: int(2)?,
                t_trans: int(6)?,
                chessboard_offsets: rec.get(7) == Some("true"),
            },
            Some("max_pressure") => ControllerSpec::MaxPressure {
                t_min: int(3)?,
                t_auc: int(4)?,
                t_max: int(5)?,
                t_trans: int(6)?,
            },
            Some("priority_pass") => ControllerSpec::PriorityPass {
                tau: num(9)?,
                t_min: int(3)?,
                t_auc: int(4)?,
                t_max: int(5)?,
                t_trans: int(6)?,
            },
            other => return Err(bad(&rec, &format!("unknown controller {other:?}"))),
        };
        let row = SweepRow {
            candidate: Candidate { controller, gamma: num(8)? },
            seed: rec
                .get(11)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(&rec, "bad seed"))?,
            m: PointMetrics {
                eff: EfficiencyStats {
                    spawned: int(12)?,
                    completed: int(13)?,
                    throughput_veh_h: num(14)?,
                    completion_rate: num(15)?,
                    mean_queue_veh: num(16)?,
                    mean_delay_s_km: num(17)?,
                    total_travel_time_veh_s: num(18)?,
                },
                groups: GroupDelays {
                    n_entitled: int(20)?,
                    n_other: int(21)?,
                    entitled_mean_s_km: num(22)?,
                    other_mean_s_km: num(23)?,
                    overall_mean_s_km: num(24)?,
                },
                mean_speed_m_s: num(19)?,
                cr_usd_km: None,
                system_cr_usd_h: None,
            },
        };
        out.push((num(10)?, row));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    writeln!(w)?;
    Ok(w.flush()?)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::MissingDependency(format!(
            "{stage} artifact `{}` not found",
            path.display()
        )));
    }
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Reproduction record for one output directory: the verbatim config, its
/// hash, the seeds used, and the files produced. Deliberately no timestamp.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config_bytes: &[u8],
    seeds: &[u64],
    outputs: &[String],
) -> Result<(), CliError> {
    let config: serde_json::Value = serde_json::from_slice(config_bytes)
        .map_err(|e| CliError::Io(format!("manifest: {e}")))?;
    let mut outputs = outputs.to_vec();
    outputs.sort();
    let manifest = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_sha256": sha256_hex(config_bytes),
        "config": config,
        "seeds": seeds,
        "outputs": outputs,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}
