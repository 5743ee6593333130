//! Multi-seed grid search over controller parameters and entitlement
//! settings, the constrained Priority Pass operating-point selection, and
//! the city-scale welfare extrapolation.
//!
//! Aggregation is order-independent: rows are re-sorted by (candidate, seed)
//! before any mean is taken, so a permuted seed list or a racing worker pool
//! cannot change a single output bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControllerSpec;
use crate::demand::{spawn_schedule, DemandConfig};
use crate::engine::{run_scenario, DynamicsParams, RunSpec};
use crate::market::{
    allocate, user_benefit_cr, AllocationMode, Consumer, DelayResponse, Deltas,
};
use crate::metrics::{aggregate_efficiency, group_delay_stats, EfficiencyStats, GroupDelays};
use crate::netgrid::{Network, RouteSet};

#[derive(Debug, Error, PartialEq)]
pub enum OptimizeError {
    #[error("grid search needs at least one candidate and one seed")]
    EmptyInput,
    #[error("objective {objective:?} needs benefit columns the sweep rows do not carry")]
    ObjectiveUnavailable { objective: Objective },
    #[error("sweep rows do not form a complete (gamma, tau) grid: {reason}")]
    IncompleteGrid { reason: &'static str },
    #[error("selection needs a (gamma=0, tau=0) reference row")]
    MissingReference,
    #[error("hourly table must cover hour {hour} exactly once")]
    ProfileGap { hour: u8 },
    #[error("city table must have 24 rows, got {rows}")]
    BadProfileLength { rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    TotalTravelTime,
    Throughput,
    Queue,
    Delay,
    UserBenefit,
    SystemBenefit,
}

impl Objective {
    fn maximizes(self) -> bool {
        matches!(self, Objective::Throughput | Objective::UserBenefit | Objective::SystemBenefit)
    }
}

/// One point of a search space: a controller plus the entitled share the
/// demand is spawned with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub controller: ControllerSpec,
    pub gamma: f64,
}

impl Candidate {
    /// Canonical ordering key: controller family, timing parameters, then
    /// (gamma, tau). Lexicographic comparison of this key breaks objective
    /// ties deterministically.
    pub fn key(&self) -> [f64; 6] {
        match self.controller {
            ControllerSpec::FixedCycle { t_f1, t_f2, t_trans, .. } => {
                [0.0, t_f1 as f64, t_f2 as f64, t_trans as f64, self.gamma, 0.0]
            }
            ControllerSpec::MaxPressure { t_min, t_auc, t_trans, .. } => {
                [1.0, t_min as f64, t_auc as f64, t_trans as f64, self.gamma, 0.0]
            }
            ControllerSpec::PriorityPass { t_min, t_auc, t_trans, tau, .. } => {
                [2.0, t_min as f64, t_auc as f64, t_trans as f64, self.gamma, tau]
            }
        }
    }

    pub fn tau(&self) -> f64 {
        match self.controller {
            ControllerSpec::PriorityPass { tau, .. } => tau,
            _ => 0.0,
        }
    }
}

fn key_cmp(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    let (ka, kb) = (a.key(), b.key());
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// Everything measured at one (candidate, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointMetrics {
    pub eff: EfficiencyStats,
    pub groups: GroupDelays,
    pub mean_speed_m_s: f64,
    pub cr_usd_km: Option<f64>,
    pub system_cr_usd_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub candidate: Candidate,
    pub seed: u64,
    pub m: PointMetrics,
}

/// Evaluates every candidate under every seed on the rayon pool and returns
/// the rows sorted by (candidate key, seed).
pub fn run_sweep<F>(candidates: &[Candidate], seeds: &[u64], eval: F) -> Vec<SweepRow>
where
    F: Fn(&Candidate, u64) -> PointMetrics + Sync,
{
    let jobs: Vec<(usize, u64)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| seeds.iter().map(move |&s| (ci, s)))
        .collect();
    let mut rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(ci, seed)| SweepRow {
            candidate: candidates[ci].clone(),
            seed,
            m: eval(&candidates[ci], seed),
        })
        .collect();
    rows.sort_by(|a, b| key_cmp(&a.candidate, &b.candidate).then(a.seed.cmp(&b.seed)));
    rows
}

/// Seed-aggregated view of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub candidate: Candidate,
    pub seeds: usize,
    pub objective_mean: f64,
    pub objective_std: f64,
    pub ttt_mean: f64,
    pub throughput_mean: f64,
    pub speed_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub objective: Objective,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<PointSummary>,
    /// Index of the winner in `summaries`.
    pub best: usize,
}

impl GridSearch {
    pub fn best_candidate(&self) -> &Candidate {
        &self.summaries[self.best].candidate
    }
}

fn objective_value(m: &PointMetrics, objective: Objective) -> Option<f64> {
    match objective {
        Objective::TotalTravelTime => Some(m.eff.total_travel_time_veh_s),
        Objective::Throughput => Some(m.eff.throughput_veh_h),
        Objective::Queue => Some(m.eff.mean_queue_veh),
        Objective::Delay => Some(m.eff.mean_delay_s_km),
        Objective::UserBenefit => m.cr_usd_km,
        Objective::SystemBenefit => m.system_cr_usd_h,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Exhaustive evaluation of the whole grid plus winner selection. Ties on
/// the seed-mean objective fall back to lower mean total travel time, then
/// to the lexicographically smallest candidate key.
pub fn grid_search<F>(
    candidates: &[Candidate],
    seeds: &[u64],
    objective: Objective,
    eval: F,
) -> Result<GridSearch, OptimizeError>
where
    F: Fn(&Candidate, u64) -> PointMetrics + Sync,
{
    if candidates.is_empty() || seeds.is_empty() {
        return Err(OptimizeError::EmptyInput);
    }
    let rows = run_sweep(candidates, seeds, eval);
    let summaries = summarize(&rows, objective)?;
    let best = pick_best(&summaries, objective);
    Ok(GridSearch { objective, rows, summaries, best })
}

/// Per-candidate seed means over already-sorted sweep rows.
pub fn summarize(rows: &[SweepRow], objective: Objective) -> Result<Vec<PointSummary>, OptimizeError> {
    let mut out: Vec<PointSummary> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j < rows.len() && rows[j].candidate == rows[i].candidate {
            j += 1;
        }
        let chunk = &rows[i..j];
        let values: Vec<f64> = chunk
            .iter()
            .map(|r| {
                objective_value(&r.m, objective)
                    .ok_or(OptimizeError::ObjectiveUnavailable { objective })
            })
            .collect::<Result<_, _>>()?;
        let (objective_mean, objective_std) = mean_std(&values);
        let ttts: Vec<f64> = chunk.iter().map(|r| r.m.eff.total_travel_time_veh_s).collect();
        let thr: Vec<f64> = chunk.iter().map(|r| r.m.eff.throughput_veh_h).collect();
        let spd: Vec<f64> = chunk.iter().map(|r| r.m.mean_speed_m_s).collect();
        out.push(PointSummary {
            candidate: chunk[0].candidate.clone(),
            seeds: chunk.len(),
            objective_mean,
            objective_std,
            ttt_mean: mean_std(&ttts).0,
            throughput_mean: mean_std(&thr).0,
            speed_mean: mean_std(&spd).0,
        });
        i = j;
    }
    Ok(out)
}

/// Ranks already-computed sweep rows without re-running anything: summaries
/// plus the index of the winner under the usual tie rules.
pub fn rank_rows(
    rows: &[SweepRow],
    objective: Objective,
) -> Result<(Vec<PointSummary>, usize), OptimizeError> {
    if rows.is_empty() {
        return Err(OptimizeError::EmptyInput);
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| key_cmp(&a.candidate, &b.candidate).then(a.seed.cmp(&b.seed)));
    let summaries = summarize(&sorted, objective)?;
    let best = pick_best(&summaries, objective);
    Ok((summaries, best))
}

fn pick_best(summaries: &[PointSummary], objective: Objective) -> usize {
    let better = |a: &PointSummary, b: &PointSummary| {
        let primary = if objective.maximizes() {
            b.objective_mean.total_cmp(&a.objective_mean)
        } else {
            a.objective_mean.total_cmp(&b.objective_mean)
        };
        primary
            .then(a.ttt_mean.total_cmp(&b.ttt_mean))
            .then(key_cmp(&a.candidate, &b.candidate))
    };
    let mut best = 0;
    for i in 1..summaries.len() {
        if better(&summaries[i], &summaries[best]) == std::cmp::Ordering::Less {
            best = i;
        }
    }
    best
}

/// Runs one candidate/seed pair on the real engine. The demand draws its
/// seed from `seed` and its entitled share from the candidate.
pub fn simulate_candidate(
    net: &Network,
    routes: &RouteSet,
    demand: &DemandConfig,
    dynamics: &DynamicsParams,
    run: &RunSpec,
    candidate: &Candidate,
    seed: u64,
) -> PointMetrics {
    let cfg = DemandConfig {
        model: demand.model.clone(),
        entitlement_share: candidate.gamma,
        duration_s: demand.duration_s,
        seed,
    };
    let vehicles = spawn_schedule(&cfg, routes).expect("sweep demand config must be valid");
    let res = run_scenario(net, routes, &vehicles, &candidate.controller, dynamics, run);
    let mean_speed = if res.window_veh_s > 0.0 {
        res.window_distance_m / res.window_veh_s
    } else {
        res.speed_limit_m_s
    };
    PointMetrics {
        eff: aggregate_efficiency(&res),
        groups: group_delay_stats(&res),
        mean_speed_m_s: mean_speed,
        cr_usd_km: None,
        system_cr_usd_h: None,
    }
}

/// All (t_f1, t_f2) fixed-cycle candidates over inclusive ranges with a step.
pub fn fixed_cycle_grid(
    f1: (u32, u32),
    f2: (u32, u32),
    step: u32,
    t_trans: u32,
    chessboard_offsets: bool,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut a = f1.0;
    while a <= f1.1 {
        let mut b = f2.0;
        while b <= f2.1 {
            out.push(Candidate {
                controller: ControllerSpec::FixedCycle { t_f1: a, t_f2: b, t_trans, chessboard_offsets },
                gamma: 0.0,
            });
            b += step;
        }
        a += step;
    }
    out
}

/// All (t_min, t_auc) Max-Pressure candidates over inclusive ranges.
pub fn max_pressure_grid(
    tmin: (u32, u32),
    tauc: (u32, u32),
    step: u32,
    t_max: u32,
    t_trans: u32,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut a = tmin.0;
    while a <= tmin.1 {
        let mut b = tauc.0;
        while b <= tauc.1 {
            out.push(Candidate {
                controller: ControllerSpec::MaxPressure { t_min: a, t_auc: b, t_max, t_trans },
                gamma: 0.0,
            });
            b += step;
        }
        a += step;
    }
    out
}

/// The (gamma, tau) response grid on top of fixed auction timing.
pub fn priority_grid(
    gammas: &[f64],
    taus: &[f64],
    t_min: u32,
    t_auc: u32,
    t_max: u32,
    t_trans: u32,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for &gamma in gammas {
        for &tau in taus {
            out.push(Candidate {
                controller: ControllerSpec::PriorityPass { t_min, t_auc, t_max, t_trans, tau },
                gamma,
            });
        }
    }
    out
}

/// Evenly spaced grid axis `start..=end` with `step`, snapped to clean
/// multiples so repeated addition cannot drift.
pub fn axis(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

/// Seed-mean group delays per (gamma, tau) point, assembled into a bilinear
/// response table. Rows whose entitled (or other) group is empty contribute
/// their overall mean for the missing side, so degenerate shares still
/// produce defined, zero-advantage entries.
pub fn response_from_rows(flow_veh_h: f64, rows: &[SweepRow]) -> Result<DelayResponse, OptimizeError> {
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(u64, u64), Vec<(f64, f64, f64)>> = BTreeMap::new();
    let mut gammas: Vec<f64> = Vec::new();
    let mut taus: Vec<f64> = Vec::new();
    for row in rows {
        if !matches!(row.candidate.controller, ControllerSpec::PriorityPass { .. }) {
            continue;
        }
        let (g, t) = (row.candidate.gamma, row.candidate.tau());
        let avg = row.m.groups.overall_mean_s_km;
        let pp = if row.m.groups.n_entitled == 0 { avg } else { row.m.groups.entitled_mean_s_km };
        let npp = if row.m.groups.n_other == 0 { avg } else { row.m.groups.other_mean_s_km };
        cells.entry((g.to_bits(), t.to_bits())).or_default().push((avg, pp, npp));
        if !gammas.contains(&g) {
            gammas.push(g);
        }
        if !taus.contains(&t) {
            taus.push(t);
        }
    }
    if cells.is_empty() {
        return Err(OptimizeError::IncompleteGrid { reason: "no priority rows" });
    }
    gammas.sort_by(f64::total_cmp);
    taus.sort_by(f64::total_cmp);
    let per_cell = cells.values().next().map(|v| v.len()).unwrap_or(0);
    if cells.len() != gammas.len() * taus.len() {
        return Err(OptimizeError::IncompleteGrid { reason: "missing (gamma, tau) combinations" });
    }
    if cells.values().any(|v| v.len() != per_cell) {
        return Err(OptimizeError::IncompleteGrid { reason: "uneven seed counts per cell" });
    }

    let mut grid = Vec::with_capacity(cells.len());
    for &g in &gammas {
        for &t in &taus {
            let samples = &cells[&(g.to_bits(), t.to_bits())];
            let avgs: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let pps: Vec<f64> = samples.iter().map(|s| s.1).collect();
            let npps: Vec<f64> = samples.iter().map(|s| s.2).collect();
            let (avg, _) = mean_std(&avgs);
            let (pp, std_pp) = mean_std(&pps);
            let (npp, std_npp) = mean_std(&npps);
            grid.push(Deltas { avg, pp, npp, std_pp, std_npp });
        }
    }
    DelayResponse::from_grid(flow_veh_h, gammas, taus, grid)
        .map_err(|_| OptimizeError::IncompleteGrid { reason: "response grid failed validation" })
}

/// Chosen Priority Pass operating point with its audited constraint slacks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrioritySelection {
    pub gamma: f64,
    pub tau: f64,
    /// Market-clearing price at gamma; infinite when nobody is entitled.
    pub price_usd: f64,
    pub cr_usd_km: f64,
    pub system_cr_usd_h: f64,
    pub throughput_veh_h: f64,
    pub mean_speed_m_s: f64,
    /// Fractional headroom against the efficiency floor; nonnegative at a
    /// feasible point.
    pub flow_slack: f64,
    pub speed_slack: f64,
}

/// Maximizes the system benefit over the swept (gamma, tau) points, subject
/// to a positive user benefit and to flow/speed staying within
/// `efficiency_budget` of the (gamma=0, tau=0) reference. When no point with
/// gamma > 0 qualifies, the reference point itself is returned with zero
/// benefit: no prioritization is the honest optimum then.
pub fn select_priority_params(
    rows: &[SweepRow],
    response: &DelayResponse,
    consumers: &[Consumer],
    retention_fraction: f64,
    efficiency_budget: f64,
) -> Result<PrioritySelection, OptimizeError> {
    let summaries = summarize(rows, Objective::TotalTravelTime)?;
    let reference = summaries
        .iter()
        .find(|s| s.candidate.gamma == 0.0 && s.candidate.tau() == 0.0)
        .ok_or(OptimizeError::MissingReference)?;
    let flow_floor = (1.0 - efficiency_budget) * reference.throughput_mean;
    let speed_floor = (1.0 - efficiency_budget) * reference.speed_mean;
    let l_avg: f64 =
        consumers.iter().map(|c| c.route_km).sum::<f64>() / consumers.len().max(1) as f64;

    let mut best: Option<(PrioritySelection, [f64; 6])> = None;
    for s in &summaries {
        let (gamma, tau) = (s.candidate.gamma, s.candidate.tau());
        if gamma <= 0.0 {
            continue;
        }
        let Ok(deltas) = response.lookup(gamma, tau) else { continue };
        let alloc = allocate(consumers, AllocationMode::Market, gamma, &deltas, retention_fraction);
        let mut vot_sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for (c, &b) in consumers.iter().zip(&alloc.bought) {
            vot_sums[b as usize] += c.vot_usd_h;
            counts[b as usize] += 1;
        }
        let u = |g: usize| if counts[g] == 0 { 0.0 } else { vot_sums[g] / counts[g] as f64 };
        let cr = user_benefit_cr(deltas.avg, deltas.pp, deltas.npp, gamma, u(1), u(0));
        let system = cr * s.throughput_mean * l_avg;
        let flow_slack = s.throughput_mean / flow_floor - 1.0;
        let speed_slack = s.speed_mean / speed_floor - 1.0;
        if cr <= 0.0 || flow_slack < 0.0 || speed_slack < 0.0 {
            continue;
        }
        let candidate_key = s.candidate.key();
        let selection = PrioritySelection {
            gamma,
            tau,
            price_usd: alloc.price,
            cr_usd_km: cr,
            system_cr_usd_h: system,
            throughput_veh_h: s.throughput_mean,
            mean_speed_m_s: s.speed_mean,
            flow_slack,
            speed_slack,
        };
        let replace = match &best {
            None => true,
            Some((incumbent, inc_key)) => {
                match system.total_cmp(&incumbent.system_cr_usd_h) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => {
                        candidate_key
                            .iter()
                            .zip(inc_key)
                            .find_map(|(a, b)| match a.total_cmp(b) {
                                std::cmp::Ordering::Equal => None,
                                other => Some(other == std::cmp::Ordering::Less),
                            })
                            .unwrap_or(false)
                    }
                }
            }
        };
        if replace {
            best = Some((selection, candidate_key));
        }
    }

    Ok(best.map(|(s, _)| s).unwrap_or(PrioritySelection {
        gamma: 0.0,
        tau: 0.0,
        price_usd: f64::INFINITY,
        cr_usd_km: 0.0,
        system_cr_usd_h: 0.0,
        throughput_veh_h: reference.throughput_mean,
        mean_speed_m_s: reference.speed_mean,
        flow_slack: efficiency_budget / (1.0 - efficiency_budget),
        speed_slack: efficiency_budget / (1.0 - efficiency_budget),
    }))
}

/// One hour of the city accounting table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourlyEntry {
    pub hour: u8,
    pub trips: f64,
    /// Net benefit per trip-maker in this hour, $.
    pub benefit_per_user_usd: f64,
    pub price_usd: f64,
    /// Share of this hour's trips holding an entitlement.
    pub buyer_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CityOutcome {
    pub welfare_per_day_usd: f64,
    pub revenue_per_day_usd: f64,
    /// Buyer-weighted mean of the hourly prices; zero with no buyers.
    pub mean_price_usd: f64,
    pub prioritized_per_day: f64,
    pub trips_per_day: f64,
    pub hourly: Vec<HourlyEntry>,
}

/// Scales hourly per-user outcomes to daily city totals. Pure accounting:
/// welfare = sum of benefit * trips, revenue = sum of buyers * price *
/// retention, and both are recomputable from the returned table.
pub fn extrapolate_city(
    hourly: &[HourlyEntry],
    retention_fraction: f64,
) -> Result<CityOutcome, OptimizeError> {
    if hourly.len() != 24 {
        return Err(OptimizeError::BadProfileLength { rows: hourly.len() });
    }
    let mut seen = [false; 24];
    for e in hourly {
        if e.hour >= 24 || seen[e.hour as usize] {
            return Err(OptimizeError::ProfileGap { hour: e.hour.min(23) });
        }
        seen[e.hour as usize] = true;
    }
    let mut table: Vec<HourlyEntry> = hourly.to_vec();
    table.sort_by_key(|e| e.hour);

    let mut welfare = 0.0;
    let mut revenue = 0.0;
    let mut buyers = 0.0;
    let mut price_mass = 0.0;
    let mut trips = 0.0;
    for e in &table {
        let hour_buyers = e.trips * e.buyer_share;
        welfare += e.benefit_per_user_usd * e.trips;
        if hour_buyers > 0.0 {
            revenue += hour_buyers * e.price_usd * retention_fraction;
            price_mass += hour_buyers * e.price_usd;
        }
        buyers += hour_buyers;
        trips += e.trips;
    }
    Ok(CityOutcome {
        welfare_per_day_usd: welfare,
        revenue_per_day_usd: revenue,
        mean_price_usd: if buyers > 0.0 { price_mass / buyers } else { 0.0 },
        prioritized_per_day: buyers,
        trips_per_day: trips,
        hourly: table,
    })
}

/// The response whose measured flow is closest to `flow_veh_h`; ties go to
/// the lower flow.
pub fn nearest_response<'a>(family: &'a [DelayResponse], flow_veh_h: f64) -> Option<&'a DelayResponse> {
    family.iter().min_by(|a, b| {
        (a.flow_veh_h - flow_veh_h)
            .abs()
            .total_cmp(&(b.flow_veh_h - flow_veh_h).abs())
            .then(a.flow_veh_h.total_cmp(&b.flow_veh_h))
    })
}
