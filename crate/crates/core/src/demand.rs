//! Demand synthesis: Poisson arrivals per entrance, uniform route choice,
//! and Bernoulli entitlement draws.
//!
//! Every entrance owns an independent ChaCha8 stream derived from the master
//! seed, so adding entrances or resampling one entrance never disturbs the
//! others. Arrival processes with time-varying rates are generated by exact
//! time rescaling of unit-rate exponentials, which keeps the underlying
//! random sequence identical across demand models of different intensity.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgrid::{LinkId, RouteSet};

#[derive(Debug, Error, PartialEq)]
pub enum DemandError {
    #[error("demand rate must be nonnegative (got {0})")]
    NegativeRate(f64),
    #[error("entitlement share must be in [0, 1] (got {0})")]
    InvalidShare(f64),
    #[error("hourly profile must cover 24 hours (got {0} entries)")]
    BadProfile(usize),
    #[error("allocation references unknown vehicle id {0}")]
    UnknownVehicle(u32),
}

/// Arrival-rate shape shared by all entrances. Rates are per entrance in
/// vehicles per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandModel {
    /// Stationary Poisson arrivals.
    Fixed { flow_veh_h: f64 },
    /// Stepwise geometric ramp: `start * (1 + growth)^k` during the k-th
    /// block of `period_s` seconds.
    Ramp { start_veh_h: f64, growth: f64, period_s: f64 },
    /// Piecewise-constant daily profile, one rate per hour of the day.
    Profile { hourly_veh_h: Vec<f64> },
}

impl DemandModel {
    pub fn validate(&self) -> Result<(), DemandError> {
        match self {
            DemandModel::Fixed { flow_veh_h } => {
                if *flow_veh_h < 0.0 || !flow_veh_h.is_finite() {
                    return Err(DemandError::NegativeRate(*flow_veh_h));
                }
            }
            DemandModel::Ramp { start_veh_h, growth, period_s } => {
                if *start_veh_h < 0.0 || !start_veh_h.is_finite() {
                    return Err(DemandError::NegativeRate(*start_veh_h));
                }
                if *growth < -1.0 || !growth.is_finite() {
                    return Err(DemandError::NegativeRate(*growth));
                }
                if !(period_s > &0.0) {
                    return Err(DemandError::NegativeRate(*period_s));
                }
            }
            DemandModel::Profile { hourly_veh_h } => {
                if hourly_veh_h.len() != 24 {
                    return Err(DemandError::BadProfile(hourly_veh_h.len()));
                }
                for &r in hourly_veh_h {
                    if r < 0.0 || !r.is_finite() {
                        return Err(DemandError::NegativeRate(r));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rate in veh/s at time `t`, and the end of the constant segment
    /// containing `t` (`None` when the segment is unbounded).
    fn segment_at(&self, t: f64) -> (f64, Option<f64>) {
        match self {
            DemandModel::Fixed { flow_veh_h } => (flow_veh_h / 3600.0, None),
            DemandModel::Ramp { start_veh_h, growth, period_s } => {
                let k = (t / period_s).floor();
                let rate = start_veh_h * (1.0 + growth).powf(k) / 3600.0;
                (rate, Some((k + 1.0) * period_s))
            }
            DemandModel::Profile { hourly_veh_h } => {
                let hour = (t / 3600.0).floor();
                let idx = (hour as usize) % 24;
                (hourly_veh_h[idx] / 3600.0, Some((hour + 1.0) * 3600.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub model: DemandModel,
    /// Probability that a vehicle spawns entitled (gamma).
    pub entitlement_share: f64,
    /// Arrivals are generated on [0, duration_s).
    pub duration_s: f64,
    pub seed: u64,
}

/// One trip request. `spawn_s` is when the vehicle wants to enter; actual
/// entry can be later if the entrance link is full.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vehicle {
    pub id: u32,
    /// Index of the entrance in `Network::entrances`.
    pub entrance_idx: u32,
    /// Index into `RouteSet::routes`.
    pub route: u32,
    pub entrance: LinkId,
    pub exit: LinkId,
    pub spawn_s: f64,
    pub entitled: bool,
    /// Value of time in $/h; zero until a market allocation attaches one.
    pub vot: f64,
}

/// Draws the full vehicle population for one scenario.
///
/// Per-vehicle draws per entrance stream, in order: exponential headway,
/// route choice, entitlement. Vehicles are numbered in global spawn order
/// with the entrance index breaking simultaneous spawns.
pub fn spawn_schedule(
    config: &DemandConfig,
    routes: &RouteSet,
) -> Result<Vec<Vehicle>, DemandError> {
    config.model.validate()?;
    let gamma = config.entitlement_share;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DemandError::InvalidShare(gamma));
    }

    let mut all: Vec<Vehicle> = Vec::new();
    for (idx, &(start, len)) in routes.spans.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(idx as u64);
        let mut t = 0.0f64;
        loop {
            let e: f64 = rng.sample(rand_distr::Exp1);
            t = match advance_by_unit_mass(&config.model, t, e, config.duration_s) {
                Some(next) => next,
                None => break,
            };
            let pick = rng.gen_range(0..len);
            let route_id = start + pick;
            let route = &routes.routes[route_id as usize];
            let entitled = rng.gen_bool(gamma);
            all.push(Vehicle {
                id: 0,
                entrance_idx: idx as u32,
                route: route_id,
                entrance: route.entrance,
                exit: route.exit,
                spawn_s: t,
                entitled,
                vot: 0.0,
            });
        }
    }

    all.sort_by(|a, b| {
        a.spawn_s
            .total_cmp(&b.spawn_s)
            .then(a.entrance_idx.cmp(&b.entrance_idx))
    });
    for (i, v) in all.iter_mut().enumerate() {
        v.id = i as u32;
    }
    Ok(all)
}

/// Advances the arrival clock until `mass` units of integrated rate have
/// elapsed. Returns `None` once the horizon is reached.
fn advance_by_unit_mass(model: &DemandModel, mut t: f64, mut mass: f64, horizon: f64) -> Option<f64> {
    loop {
        if t >= horizon {
            return None;
        }
        let (rate, seg_end) = model.segment_at(t);
        let end = seg_end.map_or(horizon, |e| e.min(horizon));
        if rate <= 0.0 {
            if seg_end.is_none() {
                return None;
            }
            t = end;
            continue;
        }
        let capacity = rate * (end - t);
        if mass <= capacity {
            let arrival = t + mass / rate;
            return if arrival < horizon { Some(arrival) } else { None };
        }
        mass -= capacity;
        t = end;
    }
}

/// Overwrites every vehicle's entitlement flag from a buyer set.
pub fn assign_entitlement(vehicles: &mut [Vehicle], buyers: &[u32]) -> Result<(), DemandError> {
    let mut is_buyer = vec![false; vehicles.len()];
    for &id in buyers {
        match is_buyer.get_mut(id as usize) {
            Some(slot) => *slot = true,
            None => return Err(DemandError::UnknownVehicle(id)),
        }
    }
    for v in vehicles.iter_mut() {
        v.entitled = is_buyer[v.id as usize];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgrid::{build_grid, enumerate_routes};

    fn routes3() -> RouteSet {
        let net = build_grid(3, 3, 100.0, 2, 50.0 / 3.6).unwrap();
        enumerate_routes(&net, true)
    }

    fn fixed_config(flow: f64, gamma: f64, duration: f64, seed: u64) -> DemandConfig {
        DemandConfig {
            model: DemandModel::Fixed { flow_veh_h: flow },
            entitlement_share: gamma,
            duration_s: duration,
            seed,
        }
    }

    #[test]
    fn zero_flow_produces_no_vehicles() {
        let routes = routes3();
        let vs = spawn_schedule(&fixed_config(0.0, 0.2, 3600.0, 7), &routes).unwrap();
        assert!(vs.is_empty());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let routes = routes3();
        assert_eq!(
            spawn_schedule(&fixed_config(-5.0, 0.2, 100.0, 7), &routes).unwrap_err(),
            DemandError::NegativeRate(-5.0)
        );
        assert_eq!(
            spawn_schedule(&fixed_config(100.0, 1.5, 100.0, 7), &routes).unwrap_err(),
            DemandError::InvalidShare(1.5)
        );
        let bad = DemandConfig {
            model: DemandModel::Profile { hourly_veh_h: vec![10.0; 23] },
            entitlement_share: 0.0,
            duration_s: 100.0,
            seed: 1,
        };
        assert_eq!(spawn_schedule(&bad, &routes).unwrap_err(), DemandError::BadProfile(23));
    }

    #[test]
    fn vehicles_are_sorted_and_consistently_numbered() {
        let routes = routes3();
        let vs = spawn_schedule(&fixed_config(300.0, 0.3, 3600.0, 42), &routes).unwrap();
        assert!(!vs.is_empty());
        for (i, v) in vs.iter().enumerate() {
            assert_eq!(v.id, i as u32);
            let r = &routes.routes[v.route as usize];
            assert_eq!(r.entrance, v.entrance);
            assert_eq!(r.exit, v.exit);
            assert!(v.spawn_s >= 0.0 && v.spawn_s < 3600.0);
        }
        for w in vs.windows(2) {
            assert!(w[0].spawn_s <= w[1].spawn_s);
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let routes = routes3();
        let cfg = fixed_config(450.0, 0.2, 3600.0, 123);
        let a = spawn_schedule(&cfg, &routes).unwrap();
        let b = spawn_schedule(&cfg, &routes).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entrance_streams_are_independent_of_each_other() {
        // The same seed must give each entrance the same arrivals regardless
        // of what the route set looks like elsewhere; spot-check by comparing
        // a full grid against itself (identity) and ensuring two different
        // entrances do not mirror each other's draws.
        let routes = routes3();
        let vs = spawn_schedule(&fixed_config(600.0, 0.5, 3600.0, 9), &routes).unwrap();
        let per_ent: Vec<Vec<f64>> = (0..12)
            .map(|e| vs.iter().filter(|v| v.entrance_idx == e).map(|v| v.spawn_s).collect())
            .collect();
        for e in 1..12 {
            assert_ne!(per_ent[0], per_ent[e], "streams must differ between entrances");
        }
    }

    #[test]
    fn mean_arrival_rate_matches_flow() {
        // Arrival count over 100 seeds concentrates within 2% of flow * hours.
        let routes = routes3();
        let flow = 400.0;
        let mut total = 0usize;
        let seeds = 100;
        for seed in 0..seeds {
            let vs = spawn_schedule(&fixed_config(flow, 0.0, 3600.0, seed), &routes).unwrap();
            total += vs.len();
        }
        let expect = flow * 12.0 * seeds as f64;
        let got = total as f64;
        assert!(
            (got - expect).abs() < 0.02 * expect,
            "got {got}, expected within 2% of {expect}"
        );
    }

    #[test]
    fn headways_pass_a_ks_test_against_the_exponential() {
        // Successive headways at one entrance under a stationary model are
        // iid Exp(flow). Kolmogorov-Smirnov at the 1% level, n = 10_000.
        let routes = routes3();
        let flow = 1800.0;
        let need = 10_000;
        let mut headways: Vec<f64> = Vec::with_capacity(need);
        let mut last = std::collections::BTreeMap::<u32, f64>::new();
        let mut seed = 0u64;
        while headways.len() < need {
            let vs = spawn_schedule(&fixed_config(flow, 0.0, 4.0 * 3600.0, 1000 + seed), &routes).unwrap();
            last.clear();
            for v in &vs {
                if let Some(prev) = last.insert(v.entrance_idx, v.spawn_s) {
                    headways.push(v.spawn_s - prev);
                    if headways.len() == need {
                        break;
                    }
                }
            }
            seed += 1;
        }
        headways.sort_by(f64::total_cmp);
        let mean = 3600.0 / flow;
        let n = headways.len() as f64;
        let mut d: f64 = 0.0;
        for (i, h) in headways.iter().enumerate() {
            let cdf = 1.0 - (-h / mean).exp();
            let lo = i as f64 / n;
            let hi = (i as f64 + 1.0) / n;
            d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        let critical = 1.63 / n.sqrt(); // alpha = 0.01
        assert!(d < critical, "KS statistic {d} exceeds {critical}");
    }

    #[test]
    fn route_choice_is_uniform() {
        let routes = routes3();
        let mut counts = vec![0u32; routes.routes.len()];
        let mut total_first = 0u32;
        for seed in 0..12 {
            let vs = spawn_schedule(&fixed_config(2000.0, 0.0, 3600.0, 500 + seed), &routes).unwrap();
            for v in &vs {
                if v.entrance_idx == 0 {
                    counts[v.route as usize] += 1;
                    total_first += 1;
                }
            }
        }
        let (start, len) = routes.spans[0];
        let p = 1.0 / len as f64;
        let n = total_first as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for r in start..start + len {
            let c = counts[r as usize] as f64;
            assert!(
                (c - n * p).abs() < 3.0 * sigma,
                "route {r}: {c} vs {}",
                n * p
            );
        }
    }

    #[test]
    fn entitlement_share_is_respected() {
        let routes = routes3();
        let vs = spawn_schedule(&fixed_config(1000.0, 0.0, 3600.0, 3), &routes).unwrap();
        assert!(vs.iter().all(|v| !v.entitled));
        let vs = spawn_schedule(&fixed_config(1000.0, 1.0, 3600.0, 3), &routes).unwrap();
        assert!(vs.iter().all(|v| v.entitled));
        let vs = spawn_schedule(&fixed_config(2000.0, 0.3, 3600.0, 3), &routes).unwrap();
        let frac = vs.iter().filter(|v| v.entitled).count() as f64 / vs.len() as f64;
        let sigma = (0.3f64 * 0.7 / vs.len() as f64).sqrt();
        assert!((frac - 0.3).abs() < 4.0 * sigma);
    }

    #[test]
    fn doubling_flow_keeps_a_matched_arrival_prefix() {
        // Rescaled inversion reuses the same exponential mass, so doubling
        // the rate exactly halves every spawn time.
        let routes = routes3();
        let a = spawn_schedule(&fixed_config(200.0, 0.0, 7200.0, 11), &routes).unwrap();
        let b = spawn_schedule(&fixed_config(400.0, 0.0, 7200.0, 11), &routes).unwrap();
        assert!(b.len() >= a.len());
        let per_entrance = |vs: &[Vehicle], e: u32| -> Vec<f64> {
            vs.iter().filter(|v| v.entrance_idx == e).map(|v| v.spawn_s).collect()
        };
        for e in 0..12 {
            let sa = per_entrance(&a, e);
            let sb = per_entrance(&b, e);
            for (i, t) in sa.iter().enumerate() {
                if 2.0 * sb[i] < 7200.0 {
                    assert!((sb[i] - t / 2.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ramp_rates_grow_per_block() {
        // 50 veh/h growing 8.63% per 1000 s block; block arrival counts must
        // track the block rates on aggregate.
        let model = DemandModel::Ramp { start_veh_h: 50.0, growth: 0.0863, period_s: 1000.0 };
        let routes = routes3();
        let cfg = DemandConfig { model: model.clone(), entitlement_share: 0.0, duration_s: 30_000.0, seed: 77 };
        let vs = spawn_schedule(&cfg, &routes).unwrap();
        let final_rate = 50.0 * 1.0863f64.powi(29);
        assert!((final_rate - 551.0).abs() < 1.0, "final block rate ≈ 551.6 veh/h");
        let mut per_block = [0u32; 30];
        for v in &vs {
            per_block[(v.spawn_s / 1000.0) as usize] += 1;
        }
        let early: u32 = per_block[..5].iter().sum();
        let late: u32 = per_block[25..].iter().sum();
        assert!(late > 5 * early, "arrivals must ramp up strongly, got {early} -> {late}");
        // Last block: 12 entrances at ~551.6 veh/h for 1000 s ≈ 1839 spawns.
        let expect_last = final_rate * 12.0 * 1000.0 / 3600.0;
        let got_last = per_block[29] as f64;
        assert!(
            (got_last - expect_last).abs() < 5.0 * expect_last.sqrt(),
            "last block {got_last} vs {expect_last}"
        );
    }

    #[test]
    fn profile_rates_follow_the_hours() {
        let mut hourly = vec![0.0; 24];
        hourly[1] = 720.0; // one vehicle every 5 s
        let model = DemandModel::Profile { hourly_veh_h: hourly };
        let routes = routes3();
        let cfg = DemandConfig { model, entitlement_share: 0.0, duration_s: 3.0 * 3600.0, seed: 5 };
        let vs = spawn_schedule(&cfg, &routes).unwrap();
        assert!(!vs.is_empty());
        for v in &vs {
            assert!(v.spawn_s >= 3600.0 && v.spawn_s < 7200.0, "spawns only in hour 1");
        }
    }

    #[test]
    fn entitlement_overwrite_matches_buyer_set() {
        let routes = routes3();
        let mut vs = spawn_schedule(&fixed_config(500.0, 0.5, 1800.0, 21), &routes).unwrap();
        let buyers: Vec<u32> = vs.iter().map(|v| v.id).filter(|id| id % 3 == 0).collect();
        assign_entitlement(&mut vs, &buyers).unwrap();
        for v in &vs {
            assert_eq!(v.entitled, v.id % 3 == 0);
        }
        let bad = vec![vs.len() as u32 + 10];
        assert_eq!(assign_entitlement(&mut vs, &bad).unwrap_err(), DemandError::UnknownVehicle(bad[0]));
    }
}
