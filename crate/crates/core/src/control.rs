//! Signal controllers: fixed-cycle schedules and the auction-based
//! actuated machine used by both Max-Pressure and Priority Pass control.
//!
//! All controllers run on a shared 1 s tick. A tick returns the indication
//! for that second: one phase green, or an all-red/amber transition toward a
//! target phase. Phase changes always pass through a transition of
//! `t_trans` seconds.
//!
//! The actuated machine holds each green for at least `t_min` seconds, then
//! auctions the right of way every `t_auc` seconds. A challenger takes the
//! intersection only on a strictly higher bid; ties retain the incumbent.
//! Any phase whose continuous red reaches `t_max` preempts the auction as
//! soon as the minimum green allows. Max-Pressure bids the vehicle count per
//! phase; Priority Pass bids `(1 - tau) * total + tau * entitled`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgrid::PHASE_COUNT;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("controller parameter out of range: {0}")]
    InvalidParams(String),
}

/// Vehicles observed upstream of one intersection, grouped by the phase that
/// would serve them.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseCount {
    pub total: u32,
    pub entitled: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseObservation {
    pub phases: [PhaseCount; PHASE_COUNT],
}

/// Bid a phase submits in the right-of-way auction: a convex blend of its
/// total vehicle count and its entitled vehicle count.
pub fn compute_bid(obs: &PhaseObservation, phase: usize, tau: f64) -> f64 {
    let c = &obs.phases[phase];
    (1.0 - tau) * c.total as f64 + tau * c.entitled as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignalIndication {
    Green(usize),
    Transition { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalEventKind {
    GreenStart,
    TransitionStart,
}

/// One signal phase change. `phase` is the phase turning green, or the
/// target phase of a starting transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SignalEvent {
    pub clock_s: u32,
    pub intersection: u32,
    pub kind: SignalEventKind,
    pub phase: u8,
}

/// A phase that turned green only after its continuous red exceeded the
/// guaranteed single-violation bound `t_max + t_trans + 1`.
///
/// `concurrent_violations` counts other phases served during this phase's
/// red window whose own red had already reached `t_max`; each such service
/// extends the guarantee by `t_min + t_trans`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaxRedObservation {
    pub clock_s: u32,
    pub intersection: u32,
    pub phase: u8,
    pub red_s: u32,
    pub concurrent_violations: u32,
}

fn default_t_trans() -> u32 {
    3
}

fn default_t_max() -> u32 {
    120
}

fn default_true() -> bool {
    true
}

/// Controller selection plus parameters, as written in scenario configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    FixedCycle {
        t_f1: u32,
        t_f2: u32,
        #[serde(default = "default_t_trans")]
        t_trans: u32,
        /// Offset alternate intersections by half a cycle in a chessboard
        /// pattern.
        #[serde(default = "default_true")]
        chessboard_offsets: bool,
    },
    MaxPressure {
        t_min: u32,
        t_auc: u32,
        #[serde(default = "default_t_max")]
        t_max: u32,
        #[serde(default = "default_t_trans")]
        t_trans: u32,
    },
    PriorityPass {
        tau: f64,
        t_min: u32,
        t_auc: u32,
        #[serde(default = "default_t_max")]
        t_max: u32,
        #[serde(default = "default_t_trans")]
        t_trans: u32,
    },
}

impl ControllerSpec {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = |name: &str, v: u32| {
            if v == 0 {
                Err(ControlError::InvalidParams(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        match *self {
            ControllerSpec::FixedCycle { t_f1, t_f2, t_trans, .. } => {
                positive("t_f1", t_f1)?;
                positive("t_f2", t_f2)?;
                positive("t_trans", t_trans)
            }
            ControllerSpec::MaxPressure { t_min, t_auc, t_max, t_trans } => {
                positive("t_min", t_min)?;
                positive("t_auc", t_auc)?;
                positive("t_max", t_max)?;
                positive("t_trans", t_trans)
            }
            ControllerSpec::PriorityPass { tau, t_min, t_auc, t_max, t_trans } => {
                if !(0.0..=1.0).contains(&tau) {
                    return Err(ControlError::InvalidParams(format!("tau must be in [0, 1], got {tau}")));
                }
                positive("t_min", t_min)?;
                positive("t_auc", t_auc)?;
                positive("t_max", t_max)?;
                positive("t_trans", t_trans)
            }
        }
    }

    /// Name used in output artifacts.
    pub fn label(&self) -> &'static str {
        match self {
            ControllerSpec::FixedCycle { .. } => "fixed_cycle",
            ControllerSpec::MaxPressure { .. } => "max_pressure",
            ControllerSpec::PriorityPass { .. } => "priority_pass",
        }
    }

    /// Instantiates the per-intersection controller. Grid position feeds the
    /// fixed-cycle chessboard offset and is ignored by actuated control.
    pub fn build(&self, row: u32, col: u32) -> Controller {
        match *self {
            ControllerSpec::FixedCycle { t_f1, t_f2, t_trans, chessboard_offsets } => {
                let offset_half_s = if chessboard_offsets && (row + col) % 2 == 1 {
                    // Half the combined green time; odd sums land on half
                    // seconds, which the half-step clock keeps exact.
                    t_f1 + t_f2
                } else {
                    0
                };
                Controller::FixedCycle(FixedCycleCtl::new(t_f1, t_f2, t_trans, offset_half_s))
            }
            ControllerSpec::MaxPressure { t_min, t_auc, t_max, t_trans } => {
                Controller::Auction(AuctionCtl::new(
                    BidRule::VehicleCount,
                    Timing { t_min, t_auc, t_max, t_trans },
                ))
            }
            ControllerSpec::PriorityPass { tau, t_min, t_auc, t_max, t_trans } => {
                Controller::Auction(AuctionCtl::new(
                    BidRule::Weighted { tau },
                    Timing { t_min, t_auc, t_max, t_trans },
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub t_min: u32,
    pub t_auc: u32,
    pub t_max: u32,
    pub t_trans: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BidRule {
    VehicleCount,
    Weighted { tau: f64 },
}

impl BidRule {
    fn bids(self, obs: &PhaseObservation) -> [f64; PHASE_COUNT] {
        let mut out = [0.0; PHASE_COUNT];
        for (p, slot) in out.iter_mut().enumerate() {
            *slot = match self {
                BidRule::VehicleCount => obs.phases[p].total as f64,
                BidRule::Weighted { tau } => compute_bid(obs, p, tau),
            };
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PhaseStatus {
    Green { elapsed: u32 },
    Transition { target: usize, remaining: u32 },
}

#[derive(Debug, Clone)]
pub struct AuctionCtl {
    rule: BidRule,
    timing: Timing,
    current: usize,
    status: PhaseStatus,
    red_elapsed: [u32; PHASE_COUNT],
    /// Every green start: (clock, phase, continuous red served away).
    service_log: Vec<(u32, usize, u32)>,
    max_red_log: Vec<MaxRedObservation>,
    started: bool,
}

impl AuctionCtl {
    fn new(rule: BidRule, timing: Timing) -> Self {
        AuctionCtl {
            rule,
            timing,
            current: 0,
            status: PhaseStatus::Green { elapsed: 0 },
            red_elapsed: [0; PHASE_COUNT],
            service_log: Vec::new(),
            max_red_log: Vec::new(),
            started: false,
        }
    }

    pub fn red_elapsed(&self) -> [u32; PHASE_COUNT] {
        self.red_elapsed
    }

    fn log_service(&mut self, clock: u32, intersection: u32, phase: usize, red_s: u32) {
        if red_s > self.timing.t_max + self.timing.t_trans + 1 {
            let window_start = clock - red_s;
            let concurrent = self
                .service_log
                .iter()
                .rev()
                .take_while(|&&(c, _, _)| c > window_start)
                .filter(|&&(_, p, r)| p != phase && r >= self.timing.t_max)
                .count() as u32;
            self.max_red_log.push(MaxRedObservation {
                clock_s: clock,
                intersection,
                phase: phase as u8,
                red_s,
                concurrent_violations: concurrent,
            });
        }
        self.service_log.push((clock, phase, red_s));
    }

    fn tick(
        &mut self,
        obs: &PhaseObservation,
        clock: u32,
        intersection: u32,
        events: &mut Vec<SignalEvent>,
    ) -> SignalIndication {
        if !self.started {
            self.started = true;
            events.push(SignalEvent {
                clock_s: clock,
                intersection,
                kind: SignalEventKind::GreenStart,
                phase: self.current as u8,
            });
            self.log_service(clock, intersection, self.current, 0);
        }

        if let PhaseStatus::Transition { target, remaining } = self.status {
            if remaining > 1 {
                self.status = PhaseStatus::Transition { target, remaining: remaining - 1 };
                self.accrue_red(Some(target));
                return SignalIndication::Transition { target };
            }
            // The transition expires now; the target's first green second is
            // this tick, so it joins auction cadence with elapsed 0.
            self.log_service(clock, intersection, target, self.red_elapsed[target]);
            self.current = target;
            self.status = PhaseStatus::Green { elapsed: 0 };
            self.red_elapsed[target] = 0;
            events.push(SignalEvent {
                clock_s: clock,
                intersection,
                kind: SignalEventKind::GreenStart,
                phase: target as u8,
            });
        }

        let elapsed = match self.status {
            PhaseStatus::Green { elapsed } => elapsed,
            PhaseStatus::Transition { .. } => unreachable!("transition handled above"),
        };

        let mut target: Option<usize> = None;
        if elapsed >= self.timing.t_min {
            // Starvation guard first: longest-waiting violator wins outright.
            let mut worst: Option<(u32, usize)> = None;
            for p in 0..PHASE_COUNT {
                if self.red_elapsed[p] >= self.timing.t_max {
                    let better = match worst {
                        None => true,
                        Some((red, idx)) => self.red_elapsed[p] > red || (self.red_elapsed[p] == red && p < idx),
                    };
                    if better {
                        worst = Some((self.red_elapsed[p], p));
                    }
                }
            }
            if let Some((_, p)) = worst {
                target = Some(p);
            } else if (elapsed - self.timing.t_min) % self.timing.t_auc == 0 {
                let bids = self.rule.bids(obs);
                let max_bid = bids.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if bids[self.current] < max_bid {
                    // Strictly best challengers; break ties by longest red,
                    // then lowest phase index.
                    let mut winner: Option<usize> = None;
                    for p in 0..PHASE_COUNT {
                        if bids[p] == max_bid {
                            let better = match winner {
                                None => true,
                                Some(w) => self.red_elapsed[p] > self.red_elapsed[w],
                            };
                            if better {
                                winner = Some(p);
                            }
                        }
                    }
                    target = winner;
                }
            }
        }

        match target {
            Some(t) => {
                self.status = PhaseStatus::Transition { target: t, remaining: self.timing.t_trans };
                events.push(SignalEvent {
                    clock_s: clock,
                    intersection,
                    kind: SignalEventKind::TransitionStart,
                    phase: t as u8,
                });
                self.accrue_red(Some(t));
                SignalIndication::Transition { target: t }
            }
            None => {
                self.status = PhaseStatus::Green { elapsed: elapsed + 1 };
                self.accrue_red(None);
                SignalIndication::Green(self.current)
            }
        }
    }

    /// Ends a tick by aging every red phase. During green the current phase
    /// is exempt; during a transition the incoming target is exempt instead,
    /// so its red stands still until it turns green.
    fn accrue_red(&mut self, frozen: Option<usize>) {
        let exempt = match frozen {
            Some(t) => t,
            None => self.current,
        };
        for p in 0..PHASE_COUNT {
            if p != exempt {
                self.red_elapsed[p] += 1;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedCycleCtl {
    /// Segment starts in half-second units, paired with indications.
    segments: Vec<(u32, SignalIndication)>,
    cycle_half_s: u32,
    offset_half_s: u32,
    previous: Option<SignalIndication>,
}

impl FixedCycleCtl {
    fn new(t_f1: u32, t_f2: u32, t_trans: u32, offset_half_s: u32) -> Self {
        let mut segments = Vec::with_capacity(2 * PHASE_COUNT);
        let mut start = 0;
        for phase in 0..PHASE_COUNT {
            let green = if phase % 2 == 0 { t_f1 } else { t_f2 };
            segments.push((start, SignalIndication::Green(phase)));
            start += 2 * green;
            segments.push((start, SignalIndication::Transition { target: (phase + 1) % PHASE_COUNT }));
            start += 2 * t_trans;
        }
        FixedCycleCtl { segments, cycle_half_s: start, offset_half_s, previous: None }
    }

    fn indication_at(&self, clock: u32) -> SignalIndication {
        let local = (2 * clock + self.offset_half_s) % self.cycle_half_s;
        let mut current = self.segments[self.segments.len() - 1].1;
        for &(start, ind) in &self.segments {
            if local >= start {
                current = ind;
            } else {
                break;
            }
        }
        current
    }

    fn tick(&mut self, clock: u32, intersection: u32, events: &mut Vec<SignalEvent>) -> SignalIndication {
        let ind = self.indication_at(clock);
        if self.previous != Some(ind) {
            let (kind, phase) = match ind {
                SignalIndication::Green(p) => (SignalEventKind::GreenStart, p),
                SignalIndication::Transition { target } => (SignalEventKind::TransitionStart, target),
            };
            events.push(SignalEvent { clock_s: clock, intersection, kind, phase: phase as u8 });
            self.previous = Some(ind);
        }
        ind
    }
}

#[derive(Debug, Clone)]
pub enum Controller {
    FixedCycle(FixedCycleCtl),
    Auction(AuctionCtl),
}

impl Controller {
    /// Advances one second. The returned indication governs discharge for
    /// this tick; any phase-change events are appended to `events`.
    pub fn tick(
        &mut self,
        obs: &PhaseObservation,
        clock: u32,
        intersection: u32,
        events: &mut Vec<SignalEvent>,
    ) -> SignalIndication {
        match self {
            Controller::FixedCycle(c) => c.tick(clock, intersection, events),
            Controller::Auction(c) => c.tick(obs, clock, intersection, events),
        }
    }

    /// Services that breached the single-violation red-time bound.
    pub fn take_max_red_log(&mut self) -> Vec<MaxRedObservation> {
        match self {
            Controller::FixedCycle(_) => Vec::new(),
            Controller::Auction(c) => std::mem::take(&mut c.max_red_log),
        }
    }
}
