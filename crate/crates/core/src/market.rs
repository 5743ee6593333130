//! Consumer population synthesis, reservation pricing, inverse demand,
//! entitlement allocation, and welfare accounting.
//!
//! Money that actually moves (payments, redistributions, retained revenue)
//! is booked in integer cents so the budget identity
//! `municipal + distributed = revenue` holds exactly; prices themselves stay
//! floating-point because they are quantiles of computed reservation prices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MarketError {
    #[error("wage table is empty or has non-positive total probability")]
    EmptyWageTable,
    #[error("wage table entry {index} is invalid: {reason}")]
    BadWageBand { index: usize, reason: &'static str },
    #[error("wage probabilities must sum to 1, got {total}")]
    BadProbabilityMass { total: f64 },
    #[error("all wage mass lies below the minimum wage of {minimum_wage} $/h")]
    AllWagesBelowMinimum { minimum_wage: f64 },
    #[error("urgency parameter must satisfy 0 < p < 1, got {p}")]
    BadUrgency { p: f64 },
    #[error("population size must be positive")]
    EmptyPopulation,
    #[error("no routes to assign")]
    NoRoutes,
    #[error("delay response has no entry at gamma={gamma}, tau={tau}")]
    MissingEntry { gamma: f64, tau: f64 },
    #[error("delay response grid is malformed: {reason}")]
    BadResponseGrid { reason: &'static str },
}

/// One row of an empirical wage distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WageBand {
    pub wage_usd_h: f64,
    pub probability: f64,
}

fn default_minimum_wage() -> f64 {
    15.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketScenario {
    pub wage_table: Vec<WageBand>,
    /// Success probability of the geometric urgency distribution.
    pub p_urgency: f64,
    #[serde(default = "default_minimum_wage")]
    pub minimum_wage: f64,
    pub population: usize,
}

impl MarketScenario {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.p_urgency > 0.0 && self.p_urgency < 1.0) {
            return Err(MarketError::BadUrgency { p: self.p_urgency });
        }
        if self.population == 0 {
            return Err(MarketError::EmptyPopulation);
        }
        let mut total = 0.0;
        for (index, band) in self.wage_table.iter().enumerate() {
            if !(band.wage_usd_h.is_finite() && band.wage_usd_h >= 0.0) {
                return Err(MarketError::BadWageBand { index, reason: "wage must be finite and nonnegative" });
            }
            if !(band.probability.is_finite() && band.probability >= 0.0) {
                return Err(MarketError::BadWageBand { index, reason: "probability must be finite and nonnegative" });
            }
            total += band.probability;
        }
        if self.wage_table.is_empty() || total <= 0.0 {
            return Err(MarketError::EmptyWageTable);
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(MarketError::BadProbabilityMass { total });
        }
        Ok(())
    }
}

/// One synthesized trip-maker. `vot` is exactly `urgency * wage`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Consumer {
    pub id: u32,
    pub wage_usd_h: f64,
    pub urgency: u32,
    pub vot_usd_h: f64,
    /// Index into the route list the population was synthesized against.
    pub route: u32,
    pub route_km: f64,
}

/// Draws wages from the table conditioned on clearing the minimum wage,
/// geometric urgency levels, and uniform route assignments.
pub fn synth_population(
    scenario: &MarketScenario,
    route_km: &[f64],
    seed: u64,
) -> Result<Vec<Consumer>, MarketError> {
    scenario.validate()?;
    if route_km.is_empty() {
        return Err(MarketError::NoRoutes);
    }
    let eligible: Vec<WageBand> = scenario
        .wage_table
        .iter()
        .copied()
        .filter(|b| b.wage_usd_h >= scenario.minimum_wage && b.probability > 0.0)
        .collect();
    let mass: f64 = eligible.iter().map(|b| b.probability).sum();
    if mass <= 0.0 {
        return Err(MarketError::AllWagesBelowMinimum { minimum_wage: scenario.minimum_wage });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_q = (1.0 - scenario.p_urgency).ln();
    let mut out = Vec::with_capacity(scenario.population);
    for id in 0..scenario.population {
        let mut pick = rng.gen::<f64>() * mass;
        let mut wage = eligible[eligible.len() - 1].wage_usd_h;
        for band in &eligible {
            if pick < band.probability {
                wage = band.wage_usd_h;
                break;
            }
            pick -= band.probability;
        }
        // Inverse-CDF geometric on {1, 2, ...}: P(l) = (1-p)^(l-1) p.
        let u: f64 = rng.gen();
        let urgency = ((1.0 - u).ln() / log_q).floor() as u32 + 1;
        let route = rng.gen_range(0..route_km.len());
        out.push(Consumer {
            id: id as u32,
            wage_usd_h: wage,
            urgency,
            vot_usd_h: urgency as f64 * wage,
            route: route as u32,
            route_km: route_km[route],
        });
    }
    Ok(out)
}

/// Group delay levels (s/km) a market scenario prices against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub avg: f64,
    pub pp: f64,
    pub npp: f64,
    pub std_pp: f64,
    pub std_npp: f64,
}

/// Bilinear table of group delays over a (gamma, tau) grid at one demand
/// level. Queries off the grid hull are errors, not extrapolations.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayResponse {
    pub flow_veh_h: f64,
    gammas: Vec<f64>,
    taus: Vec<f64>,
    /// Row-major over gammas, then taus.
    grid: Vec<Deltas>,
}

/// Bracketing index and interpolation weight of `x` on a sorted axis.
/// Accepts a 1e-9 overhang beyond the ends so grids built by repeated
/// addition still cover their nominal range.
fn bracket(axis: &[f64], x: f64) -> Option<(usize, f64)> {
    let lo = axis[0];
    let hi = axis[axis.len() - 1];
    if x < lo - 1e-9 || x > hi + 1e-9 {
        return None;
    }
    if axis.len() == 1 {
        return Some((0, 0.0));
    }
    let x = x.clamp(lo, hi);
    let seg = match axis.binary_search_by(|v| v.total_cmp(&x)) {
        Ok(i) => i.min(axis.len() - 2),
        Err(i) => i - 1,
    };
    Some((seg, (x - axis[seg]) / (axis[seg + 1] - axis[seg])))
}

impl DelayResponse {
    pub fn from_grid(
        flow_veh_h: f64,
        gammas: Vec<f64>,
        taus: Vec<f64>,
        grid: Vec<Deltas>,
    ) -> Result<Self, MarketError> {
        if gammas.is_empty() || taus.is_empty() {
            return Err(MarketError::BadResponseGrid { reason: "empty axis" });
        }
        if grid.len() != gammas.len() * taus.len() {
            return Err(MarketError::BadResponseGrid { reason: "grid size does not match axes" });
        }
        for axis in [&gammas, &taus] {
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MarketError::BadResponseGrid {
                    reason: "axis values must be strictly increasing",
                });
            }
        }
        for d in &grid {
            let vals = [d.avg, d.pp, d.npp, d.std_pp, d.std_npp];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(MarketError::BadResponseGrid {
                    reason: "delays must be finite and nonnegative",
                });
            }
        }
        Ok(DelayResponse { flow_veh_h, gammas, taus, grid })
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn lookup(&self, gamma: f64, tau: f64) -> Result<Deltas, MarketError> {
        let miss = MarketError::MissingEntry { gamma, tau };
        let (gi, gw) = bracket(&self.gammas, gamma).ok_or(miss.clone())?;
        let (ti, tw) = bracket(&self.taus, tau).ok_or(miss)?;
        let nt = self.taus.len();
        let at = |g: usize, t: usize| self.grid[g * nt + t];
        let lerp = |a: Deltas, b: Deltas, w: f64| Deltas {
            avg: a.avg + (b.avg - a.avg) * w,
            pp: a.pp + (b.pp - a.pp) * w,
            npp: a.npp + (b.npp - a.npp) * w,
            std_pp: a.std_pp + (b.std_pp - a.std_pp) * w,
            std_npp: a.std_npp + (b.std_npp - a.std_npp) * w,
        };
        let g_hi = (gi + 1).min(self.gammas.len() - 1);
        let t_hi = (ti + 1).min(self.taus.len() - 1);
        let low = lerp(at(gi, ti), at(gi, t_hi), tw);
        let high = lerp(at(g_hi, ti), at(g_hi, t_hi), tw);
        Ok(lerp(low, high, gw))
    }
}

/// Value of the delay difference between travelling entitled and not, for
/// one consumer's trip: (delta_npp - delta_pp)/3600 * vot * route length.
pub fn reservation_price(consumer: &Consumer, deltas: &Deltas) -> f64 {
    (deltas.npp - deltas.pp) / 3600.0 * consumer.vot_usd_h * consumer.route_km
}

/// Reservation price against a response surface at an operating point.
pub fn reservation_price_at(
    consumer: &Consumer,
    response: &DelayResponse,
    gamma: f64,
    tau: f64,
) -> Result<f64, MarketError> {
    Ok(reservation_price(consumer, &response.lookup(gamma, tau)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseDemand {
    /// k-th largest reservation price, infinite when the target rounds to
    /// zero buyers.
    pub price: f64,
    /// Target buyer count round(gamma * n).
    pub k: usize,
    /// Consumers with reservation price >= price; exceeds k under ties.
    pub n_buyers: usize,
}

/// Price at which a target share of consumers is willing to buy.
pub fn inverse_demand(reservation_prices: &[f64], gamma_target: f64) -> InverseDemand {
    let n = reservation_prices.len();
    assert!(n > 0, "inverse demand needs at least one consumer");
    assert!((0.0..=1.0).contains(&gamma_target), "gamma must lie in [0,1]");
    let k = (gamma_target * n as f64).round() as usize;
    if k == 0 {
        return InverseDemand { price: f64::INFINITY, k, n_buyers: 0 };
    }
    let mut sorted = reservation_prices.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let price = sorted[k - 1];
    let n_buyers = reservation_prices.iter().filter(|&&rp| rp >= price).count();
    InverseDemand { price, k, n_buyers }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    FreeTopVot,
    Market,
    MarketRedistribute,
}

/// Outcome of handing out entitlements to a consumer population.
///
/// `transfer_cents[i]` is consumer i's net money movement (negative means
/// they paid). `municipal_revenue_cents` absorbs whatever is not handed
/// back: the full revenue in plain market mode, the retained share plus the
/// integer-division remainder under redistribution, zero in free mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EntitlementAllocation {
    pub mode: AllocationMode,
    pub price: f64,
    pub bought: Vec<bool>,
    pub transfer_cents: Vec<i64>,
    pub municipal_revenue_cents: i64,
    pub realized_gamma: f64,
}

impl EntitlementAllocation {
    pub fn n_buyers(&self) -> usize {
        self.bought.iter().filter(|&&b| b).count()
    }
}

/// Grants entitlements per `mode` at the target share, pricing against the
/// supplied group delays.
pub fn allocate(
    consumers: &[Consumer],
    mode: AllocationMode,
    gamma_target: f64,
    deltas: &Deltas,
    retention_fraction: f64,
) -> EntitlementAllocation {
    assert!(!consumers.is_empty(), "allocation needs at least one consumer");
    assert!((0.0..=1.0).contains(&retention_fraction), "retention must lie in [0,1]");
    let n = consumers.len();
    let mut bought = vec![false; n];
    let mut transfer_cents = vec![0i64; n];

    match mode {
        AllocationMode::FreeTopVot => {
            let k = ((gamma_target * n as f64).ceil() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                consumers[b]
                    .vot_usd_h
                    .total_cmp(&consumers[a].vot_usd_h)
                    .then(consumers[a].id.cmp(&consumers[b].id))
            });
            for &i in order.iter().take(k) {
                bought[i] = true;
            }
            let buyers = bought.iter().filter(|&&b| b).count();
            EntitlementAllocation {
                mode,
                price: 0.0,
                bought,
                transfer_cents,
                municipal_revenue_cents: 0,
                realized_gamma: buyers as f64 / n as f64,
            }
        }
        AllocationMode::Market | AllocationMode::MarketRedistribute => {
            let rps: Vec<f64> = consumers.iter().map(|c| reservation_price(c, deltas)).collect();
            let inv = inverse_demand(&rps, gamma_target);
            let mut n_buyers = 0i64;
            for (i, &rp) in rps.iter().enumerate() {
                if inv.price.is_finite() && rp >= inv.price {
                    bought[i] = true;
                    n_buyers += 1;
                }
            }
            let payment_cents = if n_buyers > 0 { (inv.price * 100.0).round() as i64 } else { 0 };
            let revenue_cents = payment_cents * n_buyers;
            for (i, t) in transfer_cents.iter_mut().enumerate() {
                if bought[i] {
                    *t = -payment_cents;
                }
            }
            let municipal = match mode {
                AllocationMode::Market => revenue_cents,
                _ => {
                    let n_nb = n as i64 - n_buyers;
                    let retained = (revenue_cents as f64 * retention_fraction).round() as i64;
                    let retained = retained.clamp(0, revenue_cents);
                    let distributable = revenue_cents - retained;
                    if n_nb == 0 {
                        // Nobody to redistribute to; the authority keeps it.
                        revenue_cents
                    } else {
                        let share = distributable / n_nb;
                        for (i, t) in transfer_cents.iter_mut().enumerate() {
                            if !bought[i] {
                                *t = share;
                            }
                        }
                        retained + distributable % n_nb
                    }
                }
            };
            EntitlementAllocation {
                mode,
                price: inv.price,
                bought,
                transfer_cents,
                municipal_revenue_cents: municipal,
                realized_gamma: n_buyers as f64 / n as f64,
            }
        }
    }
}

/// Mean benefit of prioritization per user and kilometre:
/// gamma * (avg - pp)/3600 * u_pp + (1 - gamma) * (avg - npp)/3600 * u_npp.
pub fn user_benefit_cr(
    delta_avg: f64,
    delta_pp: f64,
    delta_npp: f64,
    gamma: f64,
    u_pp_usd_h: f64,
    u_npp_usd_h: f64,
) -> f64 {
    gamma * (delta_avg - delta_pp) / 3600.0 * u_pp_usd_h
        + (1.0 - gamma) * (delta_avg - delta_npp) / 3600.0 * u_npp_usd_h
}

/// System-level benefit rate: per-user-km benefit times flow times mean trip
/// length.
pub fn system_benefit_cr(cr_usd_km: f64, flow_veh_h: f64, mean_trip_km: f64) -> f64 {
    cr_usd_km * flow_veh_h * mean_trip_km
}

/// Population net benefit in $/km per user: the Eq-style group-mean benefit
/// of the realized allocation minus the money that leaks out of the
/// population (municipal revenue), normalized by population and mean trip
/// length. Internal transfers cancel and do not appear.
pub fn population_net_benefit(
    consumers: &[Consumer],
    alloc: &EntitlementAllocation,
    deltas: &Deltas,
) -> f64 {
    let n = consumers.len();
    assert_eq!(n, alloc.bought.len(), "allocation must match the population");
    let mut vot_sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (c, &b) in consumers.iter().zip(&alloc.bought) {
        vot_sums[b as usize] += c.vot_usd_h;
        counts[b as usize] += 1;
    }
    let mean_vot = |g: usize| if counts[g] == 0 { 0.0 } else { vot_sums[g] / counts[g] as f64 };
    let cr = user_benefit_cr(
        deltas.avg,
        deltas.pp,
        deltas.npp,
        alloc.realized_gamma,
        mean_vot(1),
        mean_vot(0),
    );
    let l_avg: f64 = consumers.iter().map(|c| c.route_km).sum::<f64>() / n as f64;
    let leak_usd = alloc.municipal_revenue_cents as f64 / 100.0;
    cr - leak_usd / (n as f64 * l_avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::RngCore;

    fn scenario(p: f64, population: usize) -> MarketScenario {
        MarketScenario {
            wage_table: vec![
                WageBand { wage_usd_h: 12.0, probability: 0.25 },
                WageBand { wage_usd_h: 20.0, probability: 0.35 },
                WageBand { wage_usd_h: 40.0, probability: 0.30 },
                WageBand { wage_usd_h: 90.0, probability: 0.10 },
            ],
            p_urgency: p,
            minimum_wage: 15.0,
            population,
        }
    }

    fn flat_deltas(avg: f64, pp: f64, npp: f64) -> Deltas {
        Deltas { avg, pp, npp, std_pp: 0.0, std_npp: 0.0 }
    }

    #[test]
    fn geometric_urgency_pmf_and_mean() {
        let pop = synth_population(&scenario(0.5, 100_000), &[1.0], 11).unwrap();
        let n = pop.len() as f64;
        let share = |l: u32| pop.iter().filter(|c| c.urgency == l).count() as f64 / n;
        assert_abs_diff_eq!(share(1), 0.5, epsilon = 0.01);
        assert_abs_diff_eq!(share(2), 0.25, epsilon = 0.01);
        let mean = pop.iter().map(|c| c.urgency as f64).sum::<f64>() / n;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean urgency {mean} not within 2% of 2");
        for c in &pop {
            assert!(c.urgency >= 1);
            assert_eq!(c.vot_usd_h, c.urgency as f64 * c.wage_usd_h);
        }
    }

    #[test]
    fn wages_below_minimum_are_excluded_and_renormalized() {
        let pop = synth_population(&scenario(0.5, 50_000), &[1.0, 2.0], 3).unwrap();
        assert!(pop.iter().all(|c| c.wage_usd_h >= 15.0));
        // Conditional shares: 0.35/0.75, 0.30/0.75, 0.10/0.75.
        let n = pop.len() as f64;
        let share = |w: f64| pop.iter().filter(|c| c.wage_usd_h == w).count() as f64 / n;
        for (w, expect) in [(20.0, 0.35 / 0.75), (40.0, 0.30 / 0.75), (90.0, 0.10 / 0.75)] {
            let sigma = (expect * (1.0 - expect) / n).sqrt();
            assert!(
                (share(w) - expect).abs() < 4.0 * sigma + 1e-12,
                "wage {w}: share {} vs {expect}",
                share(w)
            );
        }
    }

    #[test]
    fn all_wages_below_minimum_is_an_error() {
        let mut s = scenario(0.5, 10);
        s.wage_table = vec![WageBand { wage_usd_h: 14.0, probability: 1.0 }];
        assert_eq!(
            synth_population(&s, &[1.0], 0),
            Err(MarketError::AllWagesBelowMinimum { minimum_wage: 15.0 })
        );
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let a = synth_population(&scenario(0.4, 500), &[1.0, 1.4, 2.2], 99).unwrap();
        let b = synth_population(&scenario(0.4, 500), &[1.0, 1.4, 2.2], 99).unwrap();
        assert_eq!(a, b);
        let c = synth_population(&scenario(0.4, 500), &[1.0, 1.4, 2.2], 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn reservation_price_examples() {
        let c = Consumer {
            id: 0,
            wage_usd_h: 30.0,
            urgency: 2,
            vot_usd_h: 60.0,
            route: 0,
            route_km: 1.2,
        };
        let rp = reservation_price(&c, &flat_deltas(60.0, 36.0, 66.0));
        assert_abs_diff_eq!(rp, 0.60, epsilon = 1e-12);
        let broke = Consumer { vot_usd_h: 0.0, ..c.clone() };
        assert_eq!(reservation_price(&broke, &flat_deltas(60.0, 36.0, 66.0)), 0.0);
        assert_eq!(reservation_price(&c, &flat_deltas(60.0, 50.0, 50.0)), 0.0);
    }

    #[test]
    fn response_lookup_interpolates_bilinearly() {
        let grid = vec![
            flat_deltas(10.0, 8.0, 12.0),
            flat_deltas(20.0, 14.0, 24.0),
            flat_deltas(30.0, 22.0, 36.0),
            flat_deltas(40.0, 28.0, 48.0),
        ];
        let resp = DelayResponse::from_grid(250.0, vec![0.1, 0.3], vec![0.0, 1.0], grid).unwrap();
        // Corners are exact.
        assert_eq!(resp.lookup(0.1, 0.0).unwrap().avg, 10.0);
        assert_eq!(resp.lookup(0.3, 1.0).unwrap().avg, 40.0);
        // Centre averages all four corners.
        let mid = resp.lookup(0.2, 0.5).unwrap();
        assert_abs_diff_eq!(mid.avg, 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.pp, 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid.npp, 30.0, epsilon = 1e-12);
        // Off the hull is a miss, not an extrapolation.
        assert!(matches!(resp.lookup(0.5, 0.5), Err(MarketError::MissingEntry { .. })));
        assert!(matches!(resp.lookup(0.2, -0.2), Err(MarketError::MissingEntry { .. })));
    }

    #[test]
    fn response_single_point_axis_requires_exact_hit() {
        let resp =
            DelayResponse::from_grid(250.0, vec![0.2], vec![0.8], vec![flat_deltas(30.0, 20.0, 40.0)])
                .unwrap();
        assert_eq!(resp.lookup(0.2, 0.8).unwrap().pp, 20.0);
        assert!(resp.lookup(0.25, 0.8).is_err());
    }

    #[test]
    fn inverse_demand_quantile_examples() {
        let rps = [1.0, 2.0, 3.0, 4.0, 5.0];
        let inv = inverse_demand(&rps, 0.4);
        assert_eq!(inv.price, 4.0);
        assert_eq!(inv.n_buyers, 2);
        let all = inverse_demand(&rps, 1.0);
        assert_eq!(all.price, 1.0);
        assert_eq!(all.n_buyers, 5);
        let none = inverse_demand(&rps, 0.0);
        assert_eq!(none.price, f64::INFINITY);
        assert_eq!(none.n_buyers, 0);
    }

    #[test]
    fn ties_at_the_marginal_price_overfill_and_are_reported() {
        let rps = [5.0, 4.0, 4.0, 4.0, 1.0];
        let inv = inverse_demand(&rps, 0.4);
        assert_eq!(inv.k, 2);
        assert_eq!(inv.price, 4.0);
        assert_eq!(inv.n_buyers, 4);
    }

    /// Exhaustive price scan: the best candidate price admitting at most k
    /// buyers, preferring more buyers, breaking ties toward lower price.
    fn brute_force_price(rps: &[f64], k: usize) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0usize);
        let mut candidates = rps.to_vec();
        candidates.push(f64::INFINITY);
        for &p in &candidates {
            let buyers = rps.iter().filter(|&&rp| rp >= p).count();
            if buyers <= k && (buyers > best.1 || (buyers == best.1 && p < best.0)) {
                best = (p, buyers);
            }
        }
        best
    }

    #[test]
    fn inverse_demand_matches_brute_force_on_continuous_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=100);
            let rps: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0).collect();
            let gamma = rng.gen::<f64>();
            let inv = inverse_demand(&rps, gamma);
            if inv.k == 0 {
                assert_eq!(inv.n_buyers, 0);
                continue;
            }
            let (price, buyers) = brute_force_price(&rps, inv.k);
            assert_eq!(inv.price, price);
            assert_eq!(inv.n_buyers, buyers);
        }
    }

    #[test]
    fn buyer_count_is_monotone_in_price() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rps: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() * 5.0).collect();
        let mut prices: Vec<f64> = rps.clone();
        prices.sort_by(f64::total_cmp);
        let mut last = usize::MAX;
        for p in prices {
            let buyers = rps.iter().filter(|&&rp| rp >= p).count();
            assert!(buyers <= last);
            last = buyers;
        }
    }

    #[test]
    fn free_mode_hands_passes_to_top_vot() {
        let pop = synth_population(&scenario(0.5, 40), &[1.0], 5).unwrap();
        let alloc =
            allocate(&pop, AllocationMode::FreeTopVot, 0.25, &flat_deltas(60.0, 40.0, 70.0), 0.0);
        assert_eq!(alloc.n_buyers(), 10);
        assert_eq!(alloc.price, 0.0);
        assert_eq!(alloc.municipal_revenue_cents, 0);
        assert!(alloc.transfer_cents.iter().all(|&t| t == 0));
        let floor = pop
            .iter()
            .zip(&alloc.bought)
            .filter(|(_, &b)| b)
            .map(|(c, _)| c.vot_usd_h)
            .fold(f64::INFINITY, f64::min);
        let ceil = pop
            .iter()
            .zip(&alloc.bought)
            .filter(|(_, &b)| !b)
            .map(|(c, _)| c.vot_usd_h)
            .fold(0.0, f64::max);
        assert!(floor >= ceil, "a non-buyer outranks a buyer: {ceil} > {floor}");
    }

    #[test]
    fn redistribution_splits_revenue_exactly() {
        // Two buyers at price 3 and six non-buyers: each non-buyer gets 1 $.
        let mut pop = synth_population(&scenario(0.5, 8), &[1.0], 21).unwrap();
        for (i, c) in pop.iter_mut().enumerate() {
            c.route_km = 1.0;
            c.urgency = 1;
            c.wage_usd_h = if i < 2 { 360.0 } else { 36.0 };
            c.vot_usd_h = c.wage_usd_h;
        }
        // (npp - pp)/3600 = 1/120 so RP = vot/120: 3.0 for buyers, 0.3 rest.
        let deltas = flat_deltas(60.0, 30.0, 60.0);
        let alloc = allocate(&pop, AllocationMode::MarketRedistribute, 0.25, &deltas, 0.0);
        assert_eq!(alloc.n_buyers(), 2);
        assert_abs_diff_eq!(alloc.price, 3.0, epsilon = 1e-12);
        for (i, &t) in alloc.transfer_cents.iter().enumerate() {
            assert_eq!(t, if alloc.bought[i] { -300 } else { 100 });
        }
        assert_eq!(alloc.municipal_revenue_cents, 0);

        let kept = allocate(&pop, AllocationMode::MarketRedistribute, 0.25, &deltas, 1.0);
        assert_eq!(kept.municipal_revenue_cents, 600);
        assert!(kept.transfer_cents.iter().all(|&t| t == -300 || t == 0));
    }

    #[test]
    fn budget_balances_exactly_across_modes_and_retentions() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for round in 0u64..200 {
            let n = rng.gen_range(2..120);
            let pop = synth_population(&scenario(0.5, n), &[0.4, 1.0, 1.7, 2.6], round).unwrap();
            let deltas = flat_deltas(55.0, 30.0, 70.0);
            let gamma = rng.gen_range(0.0..=1.0);
            let retention = [0.0, 0.25, 0.5, 0.9, 1.0][(round % 5) as usize];
            for mode in [AllocationMode::Market, AllocationMode::MarketRedistribute] {
                let alloc = allocate(&pop, mode, gamma, &deltas, retention);
                let revenue: i64 = alloc
                    .transfer_cents
                    .iter()
                    .zip(&alloc.bought)
                    .filter(|(_, &b)| b)
                    .map(|(&t, _)| -t)
                    .sum();
                let distributed: i64 = alloc
                    .transfer_cents
                    .iter()
                    .zip(&alloc.bought)
                    .filter(|(_, &b)| !b)
                    .map(|(&t, _)| t)
                    .sum();
                assert_eq!(alloc.municipal_revenue_cents + distributed, revenue);
                let net: i64 =
                    alloc.transfer_cents.iter().sum::<i64>() + alloc.municipal_revenue_cents;
                assert_eq!(net, 0, "money created or destroyed");
            }
        }
    }

    #[test]
    fn eq_style_unit_examples() {
        let cr = user_benefit_cr(60.0, 36.0, 66.0, 0.2, 40.0, 20.0);
        assert_abs_diff_eq!(cr, 96.0 / 3600.0, epsilon = 1e-12);
        assert_eq!(user_benefit_cr(60.0, 60.0, 60.0, 0.0, 40.0, 20.0), 0.0);
        assert_abs_diff_eq!(system_benefit_cr(0.1, 1000.0, 2.0), 200.0, epsilon = 1e-12);
        assert_eq!(system_benefit_cr(0.0, 1000.0, 2.0), 0.0);
        // Linear in flow and length.
        let base = system_benefit_cr(0.05, 700.0, 1.5);
        assert_abs_diff_eq!(system_benefit_cr(0.05, 1400.0, 1.5), 2.0 * base, epsilon = 1e-12);
        assert_abs_diff_eq!(system_benefit_cr(0.05, 700.0, 4.5), 3.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn welfare_ordering_free_then_redistribute_then_market() {
        // Single route length: reservation-price order then equals VOT order,
        // so the top-VOT set collects at least as much group benefit as the
        // market's buyer set and transfers only rearrange the rest.
        let deltas = flat_deltas(58.0, 34.0, 67.0);
        for seed in 0..8 {
            let pop = synth_population(&scenario(0.5, 2000), &[1.5], seed).unwrap();
            let free = allocate(&pop, AllocationMode::FreeTopVot, 0.2, &deltas, 0.0);
            let redis = allocate(&pop, AllocationMode::MarketRedistribute, 0.2, &deltas, 0.3);
            let market = allocate(&pop, AllocationMode::Market, 0.2, &deltas, 0.0);
            let b_free = population_net_benefit(&pop, &free, &deltas);
            let b_redis = population_net_benefit(&pop, &redis, &deltas);
            let b_market = population_net_benefit(&pop, &market, &deltas);
            assert!(
                b_free >= b_redis && b_redis >= b_market,
                "seed {seed}: ordering violated ({b_free} / {b_redis} / {b_market})"
            );
            assert!(b_redis > b_market, "retention 0.3 must leak less than the full price");
        }
    }

    #[test]
    fn per_consumer_accounting_matches_group_formula_on_equal_lengths() {
        let deltas = flat_deltas(62.0, 35.0, 71.0);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..100 {
            let seed = rng.next_u64();
            let pop = synth_population(&scenario(0.6, 300), &[1.3], seed).unwrap();
            let alloc =
                allocate(&pop, AllocationMode::MarketRedistribute, 0.3, &deltas, 0.4);
            // Individual benefit plus own transfer, in dollars.
            let total: f64 = pop
                .iter()
                .zip(&alloc.bought)
                .zip(&alloc.transfer_cents)
                .map(|((c, &b), &t)| {
                    let delta = if b { deltas.pp } else { deltas.npp };
                    (deltas.avg - delta) / 3600.0 * c.vot_usd_h * c.route_km
                        + t as f64 / 100.0
                })
                .sum();
            let per_km = total / (pop.len() as f64 * 1.3);
            let pnb = population_net_benefit(&pop, &alloc, &deltas);
            assert_abs_diff_eq!(per_km, pnb, epsilon = 1e-9);
        }
    }

    #[test]
    fn scenario_validation_rejects_bad_inputs() {
        let mut s = scenario(0.5, 10);
        s.p_urgency = 1.0;
        assert!(matches!(s.validate(), Err(MarketError::BadUrgency { .. })));
        let mut s = scenario(0.5, 0);
        s.population = 0;
        assert_eq!(s.validate(), Err(MarketError::EmptyPopulation));
        let mut s = scenario(0.5, 10);
        s.wage_table[0].probability = 0.5;
        assert!(matches!(s.validate(), Err(MarketError::BadProbabilityMass { .. })));
        let mut s = scenario(0.5, 10);
        s.wage_table[1].probability = -0.1;
        assert!(matches!(s.validate(), Err(MarketError::BadWageBand { index: 1, .. })));
        let mut s = scenario(0.5, 10);
        s.wage_table.clear();
        assert_eq!(s.validate(), Err(MarketError::EmptyWageTable));
        assert_eq!(synth_population(&scenario(0.5, 5), &[], 0), Err(MarketError::NoRoutes));
    }
}
