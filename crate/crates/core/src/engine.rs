//! Discrete 1 s mesoscopic engine: free-flow link traversal into vertical
//! stop-line queues, saturation-limited discharge under signal control, and
//! finite link storage with spill-back into a virtual entrance queue.
//!
//! Step order within one second:
//! (a) controllers observe upstream counts and pick indications,
//! (b) green lane groups discharge into downstream links,
//! (c) vehicles finishing free-flow traversal join their stop-line queue or
//!     complete their trip on an exit stub,
//! (d) newly due vehicles enter from the virtual entrance queues.
//!
//! All iteration is in fixed id order and all state is integer or exactly
//! reproducible f64, so identical inputs give bit-identical results.

use serde::{Deserialize, Serialize};

use crate::control::{
    Controller, ControllerSpec, MaxRedObservation, PhaseCount, PhaseObservation, SignalEvent,
    SignalIndication,
};
use crate::demand::Vehicle;
use crate::netgrid::{phase_components, turn_between, LinkKind, Network, RouteSet, TurnClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsParams {
    /// Seconds of green per discharged vehicle and lane.
    pub saturation_headway_s: f64,
    /// Queue space one vehicle occupies, bumper to bumper.
    pub effective_vehicle_length_m: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams { saturation_headway_s: 2.0, effective_vehicle_length_m: 7.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Seconds simulated before the recording window opens.
    pub warmup_s: u32,
    /// Length of the recording window; the run stops at its end.
    pub record_s: u32,
}

impl RunSpec {
    pub fn total_s(&self) -> u32 {
        self.warmup_s + self.record_s
    }
}

/// Outcome of one scheduled vehicle. Times are whole simulation seconds;
/// `depart_s`/`arrive_s` stay `None` if the vehicle never entered or never
/// finished within the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripRecord {
    pub vehicle_id: u32,
    pub entrance: u32,
    pub exit: u32,
    pub route_length_m: f64,
    pub free_flow_s: f64,
    pub entitled: bool,
    pub vot: f64,
    pub spawn_s: f64,
    pub depart_s: Option<u32>,
    pub arrive_s: Option<u32>,
}

impl TripRecord {
    pub fn completed(&self) -> bool {
        self.arrive_s.is_some()
    }

    /// Travel time beyond free flow; `None` until the trip completes.
    pub fn delay_s(&self) -> Option<f64> {
        match (self.depart_s, self.arrive_s) {
            (Some(d), Some(a)) => Some((a - d) as f64 - self.free_flow_s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub controller: ControllerSpec,
    pub warmup_s: u32,
    pub record_s: u32,
    pub speed_limit_m_s: f64,
    pub trips: Vec<TripRecord>,
    pub signal_events: Vec<SignalEvent>,
    pub max_red: Vec<MaxRedObservation>,
    /// Per-step totals, one entry per simulated second.
    pub queue_series: Vec<u32>,
    pub on_network_series: Vec<u32>,
    pub transit_series: Vec<u32>,
    pub completions_series: Vec<u32>,
    pub arrived_series: Vec<u32>,
    pub virtual_series: Vec<u32>,
    /// Highest occupancy each link ever reached.
    pub max_occupancy: Vec<u32>,
    /// Vehicle-metres and vehicle-seconds accumulated inside the window.
    pub window_distance_m: f64,
    pub window_veh_s: f64,
}

struct GroupState {
    budget: f64,
    queue: std::collections::VecDeque<u32>,
}

struct LinkState {
    capacity: u32,
    traversal_s: u32,
    /// Vehicles a green movement may discharge per second.
    discharge_rate: f64,
    occupancy: u32,
    /// [turn class][0 = total, 1 = entitled] over transit plus queue.
    counts: [[u32; 2]; 2],
    groups: Vec<GroupState>,
    is_exit: bool,
}

impl LinkState {
    fn group_index(&self, class: u8) -> usize {
        if self.groups.len() == 2 {
            class as usize
        } else {
            0
        }
    }
}

struct Sim<'a> {
    net: &'a Network,
    routes: &'a RouteSet,
    vehicles: &'a [Vehicle],
    links: Vec<LinkState>,
    /// Feeder links per intersection, split by approach axis.
    feeders: Vec<[Vec<u32>; 2]>,
    controllers: Vec<Controller>,
    prev_indication: Vec<Option<SignalIndication>>,
    ring: Vec<Vec<u32>>,
    ring_size: usize,
    pos: Vec<u16>,
    vclass: Vec<u8>,
    depart: Vec<u32>,
    arrive: Vec<u32>,
    virtual_queues: Vec<std::collections::VecDeque<u32>>,
    sched_ptr: usize,
    on_network: u32,
    in_transit: u32,
    queued: u32,
    in_virtual: u32,
    completed: u32,
    events: Vec<SignalEvent>,
    max_occupancy: Vec<u32>,
}

const UNSET: u32 = u32::MAX;

impl<'a> Sim<'a> {
    fn new(
        net: &'a Network,
        routes: &'a RouteSet,
        vehicles: &'a [Vehicle],
        spec: &ControllerSpec,
        dynamics: DynamicsParams,
    ) -> Self {
        let links: Vec<LinkState> = net
            .links
            .iter()
            .map(|l| {
                let traversal = (l.length_m / l.free_flow_m_s).ceil().max(1.0) as u32;
                // Channelization: with two or more lanes, through/left and
                // right turns wait in separate lanes, so a red-class head
                // never blocks the green class. Each green movement serves
                // the approach at the full lane_count/saturation rate.
                let n_groups = match l.kind {
                    LinkKind::Exit => 0,
                    _ if l.lanes >= 2 => 2,
                    _ => 1,
                };
                let groups = (0..n_groups)
                    .map(|_| GroupState { budget: 0.0, queue: std::collections::VecDeque::new() })
                    .collect();
                LinkState {
                    capacity: net.storage_capacity(l.id, dynamics.effective_vehicle_length_m),
                    traversal_s: traversal,
                    discharge_rate: l.lanes as f64 / dynamics.saturation_headway_s,
                    occupancy: 0,
                    counts: [[0; 2]; 2],
                    groups,
                    is_exit: l.kind == LinkKind::Exit,
                }
            })
            .collect();

        let feeders: Vec<[Vec<u32>; 2]> = net
            .incoming
            .iter()
            .map(|inc| {
                let mut by_axis: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
                for &l in inc {
                    let axis = net.link(l).heading.axis();
                    by_axis[axis as usize].push(l);
                }
                by_axis
            })
            .collect();

        let controllers: Vec<Controller> = net
            .intersections
            .iter()
            .map(|i| spec.build(i.row, i.col))
            .collect();

        let ring_size = links.iter().map(|l| l.traversal_s).max().unwrap_or(1) as usize + 2;

        Sim {
            net,
            routes,
            vehicles,
            max_occupancy: vec![0; links.len()],
            links,
            feeders,
            controllers,
            prev_indication: vec![None; net.intersections.len()],
            ring: (0..ring_size).map(|_| Vec::new()).collect(),
            ring_size,
            pos: vec![0; vehicles.len()],
            vclass: vec![0; vehicles.len()],
            depart: vec![UNSET; vehicles.len()],
            arrive: vec![UNSET; vehicles.len()],
            virtual_queues: (0..net.entrances.len()).map(|_| Default::default()).collect(),
            sched_ptr: 0,
            on_network: 0,
            in_transit: 0,
            queued: 0,
            in_virtual: 0,
            completed: 0,
            events: Vec::new(),
        }
    }

    fn route_links(&self, v: usize) -> &[u32] {
        &self.routes.routes[self.vehicles[v].route as usize].links
    }

    fn observation(&self, intersection: usize) -> PhaseObservation {
        let mut obs = PhaseObservation::default();
        for phase in 0..obs.phases.len() {
            let (axis, class) = phase_components(phase);
            let mut count = PhaseCount::default();
            for &l in &self.feeders[intersection][axis as usize] {
                let c = &self.links[l as usize].counts[class as usize];
                count.total += c[0];
                count.entitled += c[1];
            }
            obs.phases[phase] = count;
        }
        obs
    }

    /// Puts a vehicle on a link and schedules its stop-line arrival.
    fn enter_link(&mut self, v: usize, route_pos: u16, clock: u32) {
        self.pos[v] = route_pos;
        let link_id = self.route_links(v)[route_pos as usize];
        let entitled = self.vehicles[v].entitled;
        let next = self.route_links(v).get(route_pos as usize + 1).copied();
        let ls = &mut self.links[link_id as usize];
        ls.occupancy += 1;
        if ls.occupancy > self.max_occupancy[link_id as usize] {
            self.max_occupancy[link_id as usize] = ls.occupancy;
        }
        let ready = clock + ls.traversal_s;
        self.in_transit += 1;
        if !ls.is_exit {
            // The class of a vehicle on a feeder link is set by the turn it
            // will make at the downstream intersection.
            let next = next.expect("non-exit route links have a successor");
            let turn = turn_between(
                self.net.link(link_id).heading,
                self.net.link(next).heading,
            );
            let class = turn.class() as u8;
            self.vclass[v] = class;
            ls.counts[class as usize][0] += 1;
            if entitled {
                ls.counts[class as usize][1] += 1;
            }
        }
        self.ring[ready as usize % self.ring_size].push(v as u32);
    }

    fn step(&mut self, clock: u32) -> StepTotals {
        // (a) Controllers pick indications from a pre-movement snapshot.
        let mut indications = Vec::with_capacity(self.controllers.len());
        for i in 0..self.controllers.len() {
            let obs = self.observation(i);
            let ind = self.controllers[i].tick(&obs, clock, i as u32, &mut self.events);
            if self.prev_indication[i] != Some(ind) {
                // Phase change wipes the fractional discharge budgets of the
                // approaches this intersection controls.
                for axis in 0..2 {
                    for &l in &self.feeders[i][axis] {
                        for g in &mut self.links[l as usize].groups {
                            g.budget = 0.0;
                        }
                    }
                }
                self.prev_indication[i] = Some(ind);
            }
            indications.push(ind);
        }

        // (b) Discharge green lane groups.
        for (i, ind) in indications.iter().enumerate() {
            if let SignalIndication::Green(phase) = ind {
                let (axis, class) = phase_components(*phase);
                let feeders = std::mem::take(&mut self.feeders[i][axis as usize]);
                for &l in &feeders {
                    self.discharge(l, class, clock);
                }
                self.feeders[i][axis as usize] = feeders;
            }
        }

        // (c) Traversal completions join their queue or finish the trip.
        let idx = clock as usize % self.ring_size;
        let mut bucket = std::mem::take(&mut self.ring[idx]);
        for &v32 in &bucket {
            let v = v32 as usize;
            let link_id = self.route_links(v)[self.pos[v] as usize];
            self.in_transit -= 1;
            let ls = &mut self.links[link_id as usize];
            if ls.is_exit {
                ls.occupancy -= 1;
                self.on_network -= 1;
                self.completed += 1;
                self.arrive[v] = clock;
            } else {
                let g = ls.group_index(self.vclass[v]);
                ls.groups[g].queue.push_back(v32);
                self.queued += 1;
            }
        }
        bucket.clear();
        self.ring[idx] = bucket;

        // (d) Spawns due this second queue up and enter while storage lasts.
        while self.sched_ptr < self.vehicles.len()
            && self.vehicles[self.sched_ptr].spawn_s <= clock as f64
        {
            let v = &self.vehicles[self.sched_ptr];
            self.virtual_queues[v.entrance_idx as usize].push_back(v.id);
            self.in_virtual += 1;
            self.sched_ptr += 1;
        }
        for e in 0..self.virtual_queues.len() {
            loop {
                let Some(&v32) = self.virtual_queues[e].front() else { break };
                let v = v32 as usize;
                let entrance = self.route_links(v)[0];
                let ls = &self.links[entrance as usize];
                if ls.occupancy >= ls.capacity {
                    break;
                }
                self.virtual_queues[e].pop_front();
                self.in_virtual -= 1;
                self.on_network += 1;
                self.depart[v] = clock;
                self.enter_link(v, 0, clock);
            }
        }

        // Conservation: every scheduled vehicle is exactly one of completed,
        // on the network, or waiting to enter.
        assert_eq!(
            self.sched_ptr as u32,
            self.completed + self.on_network + self.in_virtual,
            "vehicle conservation broken at clock {clock}"
        );
        debug_assert_eq!(self.on_network, self.in_transit + self.queued);

        StepTotals {
            queued: self.queued,
            on_network: self.on_network,
            in_transit: self.in_transit,
            completed: self.completed,
            arrived: self.sched_ptr as u32,
            in_virtual: self.in_virtual,
        }
    }

    fn discharge(&mut self, link_id: u32, class: TurnClass, clock: u32) {
        let g_idx = self.links[link_id as usize].group_index(class as u8);
        let rate = self.links[link_id as usize].discharge_rate;
        {
            let g = &mut self.links[link_id as usize].groups[g_idx];
            if g.queue.is_empty() {
                g.budget = 0.0;
                return;
            }
            // Cap keeps a blocked group from banking more than one vehicle
            // beyond its per-second rate.
            g.budget = (g.budget + rate).min(1.0 + rate);
        }
        loop {
            let front = {
                let g = &mut self.links[link_id as usize].groups[g_idx];
                if g.budget < 1.0 - 1e-9 {
                    break;
                }
                match g.queue.front() {
                    Some(&v) => v,
                    None => {
                        g.budget = 0.0;
                        break;
                    }
                }
            };
            let v = front as usize;
            // Single-group links serve both classes; the head only moves
            // when its own class has green.
            if self.vclass[v] != class as u8 {
                break;
            }
            let next_pos = self.pos[v] + 1;
            let next_link = self.route_links(v)[next_pos as usize];
            let nls = &self.links[next_link as usize];
            if nls.occupancy >= nls.capacity {
                break;
            }
            {
                let ls = &mut self.links[link_id as usize];
                ls.groups[g_idx].queue.pop_front();
                ls.groups[g_idx].budget -= 1.0;
                ls.occupancy -= 1;
                let class = self.vclass[v] as usize;
                ls.counts[class][0] -= 1;
                if self.vehicles[v].entitled {
                    ls.counts[class][1] -= 1;
                }
            }
            self.queued -= 1;
            self.enter_link(v, next_pos, clock);
        }
    }
}

struct StepTotals {
    queued: u32,
    on_network: u32,
    in_transit: u32,
    completed: u32,
    arrived: u32,
    in_virtual: u32,
}

/// Runs one complete scenario and collects every output stream.
///
/// `vehicles` must be sorted by spawn time (as `spawn_schedule` returns
/// them). The run covers `warmup_s + record_s` seconds starting at clock 0.
pub fn run_scenario(
    net: &Network,
    routes: &RouteSet,
    vehicles: &[Vehicle],
    controller: &ControllerSpec,
    dynamics: &DynamicsParams,
    run: &RunSpec,
) -> SimResult {
    debug_assert!(vehicles.windows(2).all(|w| w[0].spawn_s <= w[1].spawn_s));
    let mut sim = Sim::new(net, routes, vehicles, controller, *dynamics);
    let total = run.total_s();

    let mut queue_series = Vec::with_capacity(total as usize);
    let mut on_network_series = Vec::with_capacity(total as usize);
    let mut transit_series = Vec::with_capacity(total as usize);
    let mut completions_series = Vec::with_capacity(total as usize);
    let mut arrived_series = Vec::with_capacity(total as usize);
    let mut virtual_series = Vec::with_capacity(total as usize);
    let mut window_distance_m = 0.0;
    let mut window_veh_s = 0.0;
    let mut prev_completed = 0u32;

    for clock in 0..total {
        let totals = sim.step(clock);
        queue_series.push(totals.queued);
        on_network_series.push(totals.on_network);
        transit_series.push(totals.in_transit);
        completions_series.push(totals.completed - prev_completed);
        prev_completed = totals.completed;
        arrived_series.push(totals.arrived);
        virtual_series.push(totals.in_virtual);
        if clock >= run.warmup_s {
            window_veh_s += totals.on_network as f64;
            window_distance_m += totals.in_transit as f64 * net.speed_limit_m_s;
        }
    }

    let trips: Vec<TripRecord> = vehicles
        .iter()
        .map(|v| {
            let route = &routes.routes[v.route as usize];
            TripRecord {
                vehicle_id: v.id,
                entrance: v.entrance,
                exit: v.exit,
                route_length_m: route.length_m,
                free_flow_s: route.free_flow_s,
                entitled: v.entitled,
                vot: v.vot,
                spawn_s: v.spawn_s,
                depart_s: (sim.depart[v.id as usize] != UNSET).then(|| sim.depart[v.id as usize]),
                arrive_s: (sim.arrive[v.id as usize] != UNSET).then(|| sim.arrive[v.id as usize]),
            }
        })
        .collect();

    let mut max_red = Vec::new();
    for c in &mut sim.controllers {
        max_red.extend(c.take_max_red_log());
    }
    max_red.sort_by_key(|o| (o.clock_s, o.intersection));

    SimResult {
        controller: controller.clone(),
        warmup_s: run.warmup_s,
        record_s: run.record_s,
        speed_limit_m_s: net.speed_limit_m_s,
        trips,
        signal_events: sim.events,
        max_red,
        queue_series,
        on_network_series,
        transit_series,
        completions_series,
        arrived_series,
        virtual_series,
        max_occupancy: sim.max_occupancy,
        window_distance_m,
        window_veh_s,
    }
}
