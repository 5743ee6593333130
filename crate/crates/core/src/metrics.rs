//! Efficiency, delay, fundamental-diagram, and signal statistics computed
//! from finished simulation runs.
//!
//! Membership in the recording window is decided by spawn time: a vehicle
//! belongs to the window when `warmup_s <= spawn_s < warmup_s + record_s`.
//! That keeps vehicles stuck in a virtual entrance queue inside the
//! completion-rate denominator, so demand lost to spawn blocking stays
//! visible in the aggregates.

use serde::Serialize;
use thiserror::Error;

use crate::control::{SignalEvent, SignalEventKind};
use crate::engine::{SimResult, TripRecord};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    /// polyfit4 needs five distinct abscissae to pin down a quartic.
    #[error("quartic fit needs at least 5 distinct x values, got {distinct}")]
    RankDeficient { distinct: usize },
    /// Signal logs must alternate green_start / transition_start per
    /// intersection.
    #[error("signal log for intersection {intersection} repeats {kind:?} at t={clock_s}")]
    MalformedLog { intersection: u32, clock_s: u32, kind: SignalEventKind },
}

/// Network-level efficiency aggregates over one recording window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyStats {
    /// Vehicles whose spawn time fell inside the window.
    pub spawned: u32,
    /// Of those, vehicles that finished their trip before the run ended.
    pub completed: u32,
    pub throughput_veh_h: f64,
    pub completion_rate: f64,
    /// Time-average of the total stop-line queue across the window.
    pub mean_queue_veh: f64,
    /// Mean delay per kilometre over completed window trips.
    pub mean_delay_s_km: f64,
    /// Completed trips contribute arrive - depart; unfinished trips their
    /// elapsed time at the horizon (from depart, or from spawn if they never
    /// entered the network).
    pub total_travel_time_veh_s: f64,
}

/// Delay accumulated per kilometre of route, `None` until the trip finishes.
pub fn delay_per_km(trip: &TripRecord) -> Option<f64> {
    trip.delay_s().map(|d| d / (trip.route_length_m / 1000.0))
}

fn in_window(trip: &TripRecord, warmup_s: u32, record_s: u32) -> bool {
    let t = trip.spawn_s;
    t >= warmup_s as f64 && t < (warmup_s + record_s) as f64
}

pub fn aggregate_efficiency(result: &SimResult) -> EfficiencyStats {
    let end_s = (result.warmup_s + result.record_s) as f64;
    let hours = result.record_s as f64 / 3600.0;

    let mut spawned = 0u32;
    let mut completed = 0u32;
    let mut delay_sum = 0.0;
    let mut ttt = 0.0;
    for trip in &result.trips {
        if !in_window(trip, result.warmup_s, result.record_s) {
            continue;
        }
        spawned += 1;
        match (trip.depart_s, trip.arrive_s) {
            (Some(d), Some(a)) => {
                completed += 1;
                delay_sum += delay_per_km(trip).expect("completed trip has a delay");
                ttt += (a - d) as f64;
            }
            (Some(d), None) => ttt += end_s - d as f64,
            (None, _) => ttt += end_s - trip.spawn_s,
        }
    }

    let window = result.warmup_s as usize..(result.warmup_s + result.record_s) as usize;
    let mean_queue = if result.record_s == 0 {
        0.0
    } else {
        result.queue_series[window].iter().map(|&q| q as f64).sum::<f64>()
            / result.record_s as f64
    };

    EfficiencyStats {
        spawned,
        completed,
        throughput_veh_h: completed as f64 / hours,
        completion_rate: if spawned == 0 { 1.0 } else { completed as f64 / spawned as f64 },
        mean_queue_veh: mean_queue,
        mean_delay_s_km: if completed == 0 { 0.0 } else { delay_sum / completed as f64 },
        total_travel_time_veh_s: ttt,
    }
}

/// Per-group delay means over completed window trips. An empty group reports
/// a mean of zero; callers deciding policy on top of these numbers must check
/// the counts first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupDelays {
    pub n_entitled: u32,
    pub n_other: u32,
    pub entitled_mean_s_km: f64,
    pub other_mean_s_km: f64,
    pub overall_mean_s_km: f64,
}

pub fn group_delay_stats(result: &SimResult) -> GroupDelays {
    let mut sums = [0.0f64; 2];
    let mut counts = [0u32; 2];
    for trip in &result.trips {
        if !in_window(trip, result.warmup_s, result.record_s) || !trip.completed() {
            continue;
        }
        let g = trip.entitled as usize;
        sums[g] += delay_per_km(trip).expect("completed trip has a delay");
        counts[g] += 1;
    }
    let mean = |g: usize| if counts[g] == 0 { 0.0 } else { sums[g] / counts[g] as f64 };
    let total = counts[0] + counts[1];
    GroupDelays {
        n_entitled: counts[1],
        n_other: counts[0],
        entitled_mean_s_km: mean(1),
        other_mean_s_km: mean(0),
        overall_mean_s_km: if total == 0 { 0.0 } else { (sums[0] + sums[1]) / total as f64 },
    }
}

/// One fundamental-diagram sample covering `[t_s, t_s + interval)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FundamentalSample {
    pub t_s: u32,
    /// Mean vehicles on the network over the interval.
    pub accumulation_veh: f64,
    /// Trip completions scaled to an hourly rate.
    pub flow_veh_h: f64,
    /// Distance travelled over time spent; an empty interval reports the
    /// speed limit.
    pub mean_speed_m_s: f64,
}

/// Samples accumulation/flow/speed over consecutive whole intervals of the
/// run, dropping any ragged tail. Vehicles in free-flow transit are credited
/// the speed limit for each second; queued vehicles cover no distance.
pub fn record_fundamentals(result: &SimResult, interval_s: u32) -> Vec<FundamentalSample> {
    assert!(interval_s > 0, "sampling interval must be positive");
    let n = interval_s as usize;
    let mut samples = Vec::with_capacity(result.on_network_series.len() / n);
    for (i, chunk) in result.on_network_series.chunks_exact(n).enumerate() {
        let t0 = i * n;
        let veh_s: f64 = chunk.iter().map(|&v| v as f64).sum();
        let transit_s: f64 =
            result.transit_series[t0..t0 + n].iter().map(|&v| v as f64).sum();
        let exits: u32 = result.completions_series[t0..t0 + n].iter().sum();
        samples.push(FundamentalSample {
            t_s: t0 as u32,
            accumulation_veh: veh_s / interval_s as f64,
            flow_veh_h: exits as f64 * 3600.0 / interval_s as f64,
            mean_speed_m_s: if veh_s == 0.0 {
                result.speed_limit_m_s
            } else {
                transit_s * result.speed_limit_m_s / veh_s
            },
        });
    }
    samples
}

/// Least-squares quartic through `points`, returned as monomial coefficients
/// `a[0] + a[1] x + ... + a[4] x^4`.
///
/// The system is solved by Householder QR on a Vandermonde basis in the
/// centred and scaled abscissa, then expanded back; raw powers of large x
/// values would wreck the conditioning long before degree four.
pub fn polyfit4(points: &[(f64, f64)]) -> Result<[f64; 5], MetricsError> {
    const DEG: usize = 4;
    const COLS: usize = DEG + 1;
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < COLS {
        return Err(MetricsError::RankDeficient { distinct: xs.len() });
    }

    let m = points.len();
    let mu = points.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let scale = points
        .iter()
        .map(|p| (p.0 - mu).abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    // Column-major Vandermonde in u = (x - mu)/scale.
    let mut a = vec![vec![0.0f64; m]; COLS];
    let mut y: Vec<f64> = points.iter().map(|p| p.1).collect();
    for (row, p) in points.iter().enumerate() {
        let u = (p.0 - mu) / scale;
        let mut pw = 1.0;
        for col in a.iter_mut() {
            col[row] = pw;
            pw *= u;
        }
    }

    // Householder QR, applying each reflector to the trailing columns and y.
    for k in 0..COLS {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(MetricsError::RankDeficient { distinct: xs.len() });
        }
        let alpha = if a[k][k] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vtv = v.iter().map(|w| w * w).sum::<f64>();
        if vtv > 0.0 {
            for col in a[k..].iter_mut() {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(w, c)| w * c).sum();
                let f = 2.0 * dot / vtv;
                for (w, c) in v.iter().zip(&mut col[k..]) {
                    *c -= f * w;
                }
            }
            let dot: f64 = v.iter().zip(&y[k..]).map(|(w, c)| w * c).sum();
            let f = 2.0 * dot / vtv;
            for (w, c) in v.iter().zip(&mut y[k..]) {
                *c -= f * w;
            }
        }
        a[k][k] = alpha;
    }

    // Back-substitution on the R factor.
    let mut c = [0.0f64; COLS];
    for k in (0..COLS).rev() {
        let mut acc = y[k];
        for j in k + 1..COLS {
            acc -= a[j][k] * c[j];
        }
        c[k] = acc / a[k][k];
    }

    // Expand sum c_k ((x - mu)/scale)^k into monomials of x.
    let mut coeffs = [0.0f64; COLS];
    let binom = [
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0, 0.0],
        [1.0, 3.0, 3.0, 1.0, 0.0],
        [1.0, 4.0, 6.0, 4.0, 1.0],
    ];
    for k in 0..COLS {
        let ck = c[k] / scale.powi(k as i32);
        for j in 0..=k {
            coeffs[j] += ck * binom[k][j] * (-mu).powi((k - j) as i32);
        }
    }
    Ok(coeffs)
}

/// Sum of squared residuals of a quartic against `points`.
pub fn quartic_residual(coeffs: &[f64; 5], points: &[(f64, f64)]) -> f64 {
    points
        .iter()
        .map(|&(x, y)| {
            let p = coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c);
            (y - p) * (y - p)
        })
        .sum()
}

/// One observed duration of a phase staying green (or staying red).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseDuration {
    pub intersection: u32,
    pub phase: u8,
    pub duration_s: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalStats {
    pub switches_per_intersection_hour: f64,
    pub green_durations: Vec<PhaseDuration>,
    pub red_durations: Vec<PhaseDuration>,
}

/// Duration distributions and switch rate from a merged signal event log.
///
/// The first green per intersection is dropped (a schedule offset truncates
/// it), as is anything still open at the horizon. A phase's red runs from the
/// transition that ends its green until its next green start, so the leading
/// red of each phase is likewise unmeasurable and skipped.
pub fn signal_stats(
    events: &[SignalEvent],
    n_intersections: usize,
    horizon_s: u32,
) -> Result<SignalStats, MetricsError> {
    #[derive(Default)]
    struct PerIntersection {
        last_kind: Option<SignalEventKind>,
        /// Phase and start of the running green.
        open_green: Option<(u8, u32)>,
        greens_seen: u32,
        /// Clock at which each phase last lost its green.
        green_end: [Option<u32>; 4],
    }

    let mut state: Vec<PerIntersection> =
        (0..n_intersections).map(|_| Default::default()).collect();
    let mut switches = 0u64;
    let mut greens = Vec::new();
    let mut reds = Vec::new();

    for ev in events {
        let s = &mut state[ev.intersection as usize];
        if s.last_kind == Some(ev.kind) {
            return Err(MetricsError::MalformedLog {
                intersection: ev.intersection,
                clock_s: ev.clock_s,
                kind: ev.kind,
            });
        }
        s.last_kind = Some(ev.kind);
        match ev.kind {
            SignalEventKind::GreenStart => {
                s.greens_seen += 1;
                s.open_green = Some((ev.phase, ev.clock_s));
                if let Some(end) = s.green_end[ev.phase as usize] {
                    reds.push(PhaseDuration {
                        intersection: ev.intersection,
                        phase: ev.phase,
                        duration_s: ev.clock_s - end,
                    });
                }
            }
            SignalEventKind::TransitionStart => {
                switches += 1;
                if let Some((phase, start)) = s.open_green.take() {
                    if s.greens_seen > 1 {
                        greens.push(PhaseDuration {
                            intersection: ev.intersection,
                            phase,
                            duration_s: ev.clock_s - start,
                        });
                    }
                    s.green_end[phase as usize] = Some(ev.clock_s);
                }
            }
        }
    }

    let hours = horizon_s as f64 / 3600.0;
    Ok(SignalStats {
        switches_per_intersection_hour: if n_intersections == 0 || hours == 0.0 {
            0.0
        } else {
            switches as f64 / (n_intersections as f64 * hours)
        },
        green_durations: greens,
        red_durations: reds,
    })
}
