//! One function per subcommand. Each names the config sections it needs,
//! runs its stage, writes the stage's artifacts, and finishes with a
//! manifest so the directory alone can reproduce the experiment.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Deserialize;

use ppsim::control::ControllerSpec;
use ppsim::demand::{spawn_schedule, DemandModel};
use ppsim::engine::{run_scenario, DynamicsParams, RunSpec, SimResult};
use ppsim::market::{
    allocate, population_net_benefit, reservation_price, synth_population, Consumer, Deltas,
};
use ppsim::metrics::{aggregate_efficiency, polyfit4, record_fundamentals, signal_stats};
use ppsim::netgrid::{enumerate_routes, Network, RouteSet};
use ppsim::optimize::{
    extrapolate_city, nearest_response, rank_rows, response_from_rows, run_sweep,
    select_priority_params, simulate_candidate, Candidate, HourlyEntry, OptimizeError, SweepRow,
};

use crate::io;
use crate::scenario::{require, CliError, OptimizeSection, ScenarioConfig};

/// Command-line values that take precedence over the config file.
pub struct Invocation {
    pub config: ScenarioConfig,
    pub config_bytes: Vec<u8>,
    pub out: Option<PathBuf>,
    pub seed_override: Option<Vec<u64>>,
}

impl Invocation {
    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .or_else(|| self.config.output_dir.clone())
            .ok_or_else(|| {
                CliError::ConfigInvalid("no output directory: set `output_dir` or pass --out".into())
            })?;
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn seeds(&self) -> Vec<u64> {
        self.seed_override
            .clone()
            .or_else(|| self.config.seeds.clone())
            .unwrap_or_else(|| vec![0])
    }

    fn dynamics(&self) -> DynamicsParams {
        self.config.dynamics.unwrap_or_default()
    }
}

fn spec_tau(c: &ControllerSpec) -> f64 {
    match c {
        ControllerSpec::PriorityPass { tau, .. } => *tau,
        _ => 0.0,
    }
}

/// Time-mean arrival rate per entrance, for the scenario columns of
/// efficiency.csv.
fn mean_rate_veh_h(model: &DemandModel, duration_s: f64) -> f64 {
    match model {
        DemandModel::Fixed { flow_veh_h } => *flow_veh_h,
        DemandModel::Ramp { start_veh_h, growth, period_s } => {
            let mut total = 0.0;
            let mut t = 0.0;
            let mut k = 0i32;
            while t < duration_s {
                let block = period_s.min(duration_s - t);
                total += start_veh_h * (1.0 + growth).powi(k) * block;
                t += block;
                k += 1;
            }
            total / duration_s
        }
        DemandModel::Profile { hourly_veh_h } => {
            let mut total = 0.0;
            let mut t = 0.0;
            while t < duration_s {
                let hour = (t / 3600.0) as usize % hourly_veh_h.len().max(1);
                let block = (3600.0 - t % 3600.0).min(duration_s - t);
                total += hourly_veh_h[hour] * block;
                t += block;
            }
            total / duration_s
        }
    }
}

fn run_once(
    net: &Network,
    routes: &RouteSet,
    demand: &crate::scenario::DemandSection,
    controller: &ControllerSpec,
    dynamics: &DynamicsParams,
    run: &RunSpec,
    seed: u64,
) -> Result<SimResult, CliError> {
    let cfg = demand.to_config(seed);
    let vehicles =
        spawn_schedule(&cfg, routes).map_err(|e| CliError::ConfigInvalid(format!("demand: {e}")))?;
    Ok(run_scenario(net, routes, &vehicles, controller, dynamics, run))
}

pub fn cmd_simulate(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let net = require(&cfg.network, "network", "simulate")?.build()?;
    let demand = require(&cfg.demand, "demand", "simulate")?;
    let controller = require(&cfg.controller, "controller", "simulate")?;
    let run = require(&cfg.run, "run", "simulate")?;
    let dynamics = inv.dynamics();
    let routes = enumerate_routes(&net, true);
    let dir = inv.out_dir()?;
    let seeds = inv.seeds();

    let results: Vec<SimResult> = seeds
        .par_iter()
        .map(|&seed| run_once(&net, &routes, demand, controller, &dynamics, run, seed))
        .collect::<Result<_, _>>()?;

    let mut outputs = Vec::new();
    let mut eff_rows = Vec::new();
    let mut signal_summaries = Vec::new();
    let flow = mean_rate_veh_h(&demand.arrivals, demand.duration_s);
    for (seed, res) in seeds.iter().zip(&results) {
        let trips = format!("trips_seed{seed}.csv");
        io::write_trip_log(&dir.join(&trips), &res.trips)?;
        let events = format!("events_seed{seed}.csv");
        io::write_event_log(&dir.join(&events), &res.signal_events)?;
        outputs.push(trips);
        outputs.push(events);
        eff_rows.push(io::EfficiencyRow {
            controller: controller.label().into(),
            gamma: demand.entitlement_share,
            tau: spec_tau(controller),
            flow_veh_h: flow,
            seed: *seed,
            stats: aggregate_efficiency(res),
        });
        let horizon = run.warmup_s + run.record_s;
        let stats = signal_stats(&res.signal_events, net.intersection_count(), horizon)
            .map_err(|e| CliError::Io(format!("signal log, seed {seed}: {e}")))?;
        signal_summaries.push((format!("{}_seed{seed}", controller.label()), stats));
    }
    io::write_efficiency(&dir.join("efficiency.csv"), &eff_rows)?;
    io::write_signal_summary(&dir.join("signals.csv"), &signal_summaries)?;
    outputs.push("efficiency.csv".into());
    outputs.push("signals.csv".into());
    io::write_manifest(&dir, "simulate", &inv.config_bytes, &seeds, &outputs)?;
    Ok(())
}

pub fn cmd_sweep(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let net = require(&cfg.network, "network", "sweep")?.build()?;
    let demand = require(&cfg.demand, "demand", "sweep")?;
    let sweep = require(&cfg.sweep, "sweep", "sweep")?;
    let run = require(&cfg.run, "run", "sweep")?;
    let dynamics = inv.dynamics();
    let routes = enumerate_routes(&net, true);
    let dir = inv.out_dir()?;
    let seeds = inv.seeds();
    let candidates = sweep.grid.candidates()?;

    let mut all_rows: Vec<(f64, SweepRow)> = Vec::new();
    for &flow in &sweep.flows {
        let base = crate::scenario::DemandSection {
            arrivals: DemandModel::Fixed { flow_veh_h: flow },
            entitlement_share: demand.entitlement_share,
            duration_s: demand.duration_s,
        }
        .to_config(0);
        let rows = run_sweep(&candidates, &seeds, |c: &Candidate, seed| {
            simulate_candidate(&net, &routes, &base, &dynamics, run, c, seed)
        });
        all_rows.extend(rows.into_iter().map(|r| (flow, r)));
    }
    io::write_sweep(&dir.join("sweep.csv"), &all_rows)?;
    io::write_manifest(&dir, "sweep", &inv.config_bytes, &seeds, &["sweep.csv".into()])?;
    Ok(())
}

fn optimize_error(e: OptimizeError) -> CliError {
    CliError::Io(format!("sweep artifact unusable: {e}"))
}

/// Rows of the sweep whose flow column is nearest to the requested flow.
fn rows_at_flow(rows: Vec<(f64, SweepRow)>, flow: f64) -> (f64, Vec<SweepRow>) {
    let nearest = rows
        .iter()
        .map(|(f, _)| *f)
        .min_by(|a, b| (a - flow).abs().total_cmp(&(b - flow).abs()).then(a.total_cmp(b)))
        .unwrap_or(flow);
    let picked = rows.into_iter().filter(|(f, _)| *f == nearest).map(|(_, r)| r).collect();
    (nearest, picked)
}

fn market_population(
    cfg: &ScenarioConfig,
    command: &str,
    p_urgency: f64,
) -> Result<Vec<Consumer>, CliError> {
    let market = require(&cfg.market, "market", command)?;
    let scenario = market.scenario(p_urgency)?;
    let route_km: Vec<f64> = match &market.route_km {
        Some(v) => v.clone(),
        None => {
            let net = require(&cfg.network, "network", command)?.build()?;
            enumerate_routes(&net, true).routes.iter().map(|r| r.length_m / 1000.0).collect()
        }
    };
    synth_population(&scenario, &route_km, market.population_seed)
        .map_err(|e| CliError::ConfigInvalid(format!("market: {e}")))
}

pub fn cmd_optimize(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let section = require(&cfg.optimize, "optimize", "optimize")?;
    let dir = inv.out_dir()?;
    match section {
        OptimizeSection::Timing { sweep_csv, objective } => {
            let rows = io::read_sweep(sweep_csv)?;
            if rows.is_empty() {
                return Err(CliError::Io(format!("{}: empty sweep", sweep_csv.display())));
            }
            let mut flows: Vec<f64> = rows.iter().map(|(f, _)| *f).collect();
            flows.sort_by(f64::total_cmp);
            flows.dedup();
            let mut per_flow = Vec::new();
            for flow in flows {
                let subset: Vec<SweepRow> =
                    rows.iter().filter(|(f, _)| *f == flow).map(|(_, r)| r.clone()).collect();
                let (summaries, best) =
                    rank_rows(&subset, *objective).map_err(optimize_error)?;
                per_flow.push(serde_json::json!({
                    "flow_veh_h": flow,
                    "best": summaries[best],
                    "points": summaries.len(),
                }));
            }
            let optimum = serde_json::json!({
                "stage": "timing",
                "objective": objective,
                "per_flow": per_flow,
            });
            io::write_json(&dir.join("optimum.json"), &optimum)?;
        }
        OptimizeSection::Priority { sweep_csv, flow_veh_h, efficiency_budget } => {
            let market = require(&cfg.market, "market", "optimize")?;
            let consumers = market_population(cfg, "optimize", market.p_urgency)?;
            let (flow_used, subset) = rows_at_flow(io::read_sweep(sweep_csv)?, *flow_veh_h);
            let response = response_from_rows(flow_used, &subset).map_err(optimize_error)?;
            let sel = select_priority_params(
                &subset,
                &response,
                &consumers,
                market.retention_fraction,
                *efficiency_budget,
            )
            .map_err(optimize_error)?;
            let optimum = serde_json::json!({
                "stage": "priority",
                "flow_veh_h": flow_used,
                "efficiency_budget": efficiency_budget,
                "gamma": sel.gamma,
                "tau": sel.tau,
                "price_usd": sel.price_usd.is_finite().then_some(sel.price_usd),
                "cr_usd_km": sel.cr_usd_km,
                "system_cr_usd_h": sel.system_cr_usd_h,
                "throughput_veh_h": sel.throughput_veh_h,
                "mean_speed_m_s": sel.mean_speed_m_s,
                "flow_slack": sel.flow_slack,
                "speed_slack": sel.speed_slack,
            });
            io::write_json(&dir.join("optimum.json"), &optimum)?;
        }
    }
    io::write_manifest(&dir, "optimize", &inv.config_bytes, &[], &["optimum.json".into()])?;
    Ok(())
}

fn market_deltas(cfg: &ScenarioConfig) -> Result<Deltas, CliError> {
    let market = cfg.market.as_ref().expect("caller checked the market section");
    if let Some(d) = market.deltas {
        return Ok(d);
    }
    let (Some(sweep_csv), Some(flow), Some(gamma), Some(tau)) =
        (&market.sweep_csv, market.flow_veh_h, market.gamma, market.tau)
    else {
        return Err(CliError::ConfigInvalid(
            "market: give `deltas` inline, or `sweep_csv` + `flow_veh_h` + `gamma` + `tau`".into(),
        ));
    };
    let (flow_used, subset) = rows_at_flow(io::read_sweep(sweep_csv)?, flow);
    let response = response_from_rows(flow_used, &subset).map_err(optimize_error)?;
    response
        .lookup(gamma, tau)
        .map_err(|e| CliError::ConfigInvalid(format!("market: {e}")))
}

pub fn cmd_market(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let market = require(&cfg.market, "market", "market")?;
    let gamma = market.gamma.ok_or_else(|| {
        CliError::ConfigInvalid("market: `gamma` is required by the market command".into())
    })?;
    let deltas = market_deltas(cfg)?;
    let consumers = market_population(cfg, "market", market.p_urgency)?;
    let rps: Vec<f64> = consumers.iter().map(|c| reservation_price(c, &deltas)).collect();
    let alloc = allocate(&consumers, market.mode, gamma, &deltas, market.retention_fraction);
    let dir = inv.out_dir()?;
    io::write_allocation(&dir.join("allocation.csv"), &consumers, &rps, &alloc)?;
    let summary = serde_json::json!({
        "mode": alloc.mode,
        "gamma_target": gamma,
        "realized_gamma": alloc.realized_gamma,
        "n_buyers": alloc.n_buyers(),
        "price_usd": alloc.price.is_finite().then_some(alloc.price),
        "municipal_revenue_usd": alloc.municipal_revenue_cents as f64 / 100.0,
        "population_net_benefit_usd": population_net_benefit(&consumers, &alloc, &deltas),
        "deltas": deltas,
    });
    io::write_json(&dir.join("market.json"), &summary)?;
    io::write_manifest(
        &dir,
        "market",
        &inv.config_bytes,
        &[market.population_seed],
        &["allocation.csv".into(), "market.json".into()],
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct OptimumFile {
    gamma: f64,
    tau: f64,
}

pub fn cmd_city(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let city = require(&cfg.city, "city", "city")?;
    let market = require(&cfg.market, "market", "city")?;
    let optimum: OptimumFile = io::read_json(&city.optimum_json, "optimum")?;
    let sweep_rows = io::read_sweep(&city.sweep_csv)?;

    let mut flows: Vec<f64> = sweep_rows.iter().map(|(f, _)| *f).collect();
    flows.sort_by(f64::total_cmp);
    flows.dedup();
    let mut family = Vec::new();
    for flow in flows {
        let subset: Vec<SweepRow> =
            sweep_rows.iter().filter(|(f, _)| *f == flow).map(|(_, r)| r.clone()).collect();
        family.push(response_from_rows(flow, &subset).map_err(optimize_error)?);
    }

    let dir = inv.out_dir()?;
    let mut report = Vec::new();
    for case in &city.scenarios {
        let consumers = market_population(cfg, "city", case.p_urgency)?;
        let mut hourly = Vec::with_capacity(24);
        for hour in 0..24u8 {
            let response = nearest_response(&family, city.hourly_flow_veh_h[hour as usize])
                .ok_or_else(|| CliError::Io("sweep artifact holds no responses".into()))?;
            let deltas = response.lookup(optimum.gamma, optimum.tau).map_err(|e| {
                CliError::Io(format!("optimum ({}, {}) not on sweep grid: {e}", optimum.gamma, optimum.tau))
            })?;
            let alloc = allocate(
                &consumers,
                market.mode,
                optimum.gamma,
                &deltas,
                city.retention_fraction,
            );
            hourly.push(HourlyEntry {
                hour,
                trips: city.trips_per_day * city.hourly_share[hour as usize],
                benefit_per_user_usd: population_net_benefit(&consumers, &alloc, &deltas),
                price_usd: if alloc.price.is_finite() { alloc.price } else { 0.0 },
                buyer_share: alloc.realized_gamma,
            });
        }
        let outcome = extrapolate_city(&hourly, city.retention_fraction).map_err(optimize_error)?;
        report.push(serde_json::json!({
            "scenario": case.name,
            "p_urgency": case.p_urgency,
            "intersections": city.intersections,
            "gamma": optimum.gamma,
            "tau": optimum.tau,
            "outcome": outcome,
        }));
    }
    io::write_json(&dir.join("city.json"), &report)?;
    io::write_manifest(&dir, "city", &inv.config_bytes, &[], &["city.json".into()])?;
    Ok(())
}

fn quartic_at(c: &[f64; 5], x: f64) -> f64 {
    c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * c[4])))
}

pub fn cmd_fundamental(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let net = require(&cfg.network, "network", "fundamental")?.build()?;
    let demand = require(&cfg.demand, "demand", "fundamental")?;
    let section = require(&cfg.fundamental, "fundamental", "fundamental")?;
    let run = require(&cfg.run, "run", "fundamental")?;
    let dynamics = inv.dynamics();
    let routes = enumerate_routes(&net, true);
    let dir = inv.out_dir()?;
    let seeds = inv.seeds();

    let mut outputs = Vec::new();
    let mut fits = Vec::new();
    let mut signal_summaries = Vec::new();
    for controller in &section.controllers {
        let results: Vec<SimResult> = seeds
            .par_iter()
            .map(|&seed| run_once(&net, &routes, demand, controller, &dynamics, run, seed))
            .collect::<Result<_, _>>()?;
        let mut samples = Vec::new();
        for (seed, res) in seeds.iter().zip(&results) {
            let horizon = run.warmup_s + run.record_s;
            let stats = signal_stats(&res.signal_events, net.intersection_count(), horizon)
                .map_err(|e| CliError::Io(format!("signal log, seed {seed}: {e}")))?;
            signal_summaries.push((format!("{}_seed{seed}", controller.label()), stats));
            let per_seed = record_fundamentals(res, section.interval_s);
            let points_flow: Vec<(f64, f64)> =
                per_seed.iter().map(|s| (s.accumulation_veh, s.flow_veh_h)).collect();
            let points_speed: Vec<(f64, f64)> =
                per_seed.iter().map(|s| (s.accumulation_veh, s.mean_speed_m_s)).collect();
            let flow_fit = polyfit4(&points_flow).ok();
            let speed_fit = polyfit4(&points_speed).ok();
            let peak = flow_fit.map(|c| {
                let max_acc = points_flow.iter().map(|p| p.0).fold(0.0, f64::max);
                (0..=1000)
                    .map(|i| {
                        let x = max_acc * i as f64 / 1000.0;
                        (quartic_at(&c, x), x)
                    })
                    .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
                    .unwrap_or((0.0, 0.0))
            });
            fits.push(serde_json::json!({
                "controller": controller.label(),
                "seed": seed,
                "flow_fit": flow_fit,
                "speed_fit": speed_fit,
                "peak_flow_veh_h": peak.map(|p| p.0),
                "peak_accumulation_veh": peak.map(|p| p.1),
            }));
            samples.extend(per_seed.into_iter().map(|s| (*seed, s)));
        }
        let name = format!("fundamentals_{}.csv", controller.label());
        io::write_fundamentals(&dir.join(&name), &samples)?;
        outputs.push(name);
    }
    io::write_json(&dir.join("fits.json"), &fits)?;
    outputs.push("fits.json".into());
    io::write_signal_summary(&dir.join("signals.csv"), &signal_summaries)?;
    outputs.push("signals.csv".into());
    io::write_manifest(&dir, "fundamental", &inv.config_bytes, &seeds, &outputs)?;
    Ok(())
}

pub fn cmd_network(inv: &Invocation) -> Result<(), CliError> {
    let net = require(&inv.config.network, "network", "network")?.build()?;
    let dir = inv.out_dir()?;
    io::write_json(&dir.join("network.json"), &net)?;
    io::write_manifest(&dir, "network", &inv.config_bytes, &[], &["network.json".into()])?;
    Ok(())
}
