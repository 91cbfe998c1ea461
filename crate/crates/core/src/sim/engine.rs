//! Simulation state and the per-tick update rules.
//!
//! Tick order: release turnaround containers, generate and fulfil orders
//! (this produces the tick's rewards), then move vessels and handle arrivals.
//! Decisions issued by arrivals are applied by the caller at the same tick;
//! docked vessels depart when the environment resumes.
//!
//! All container pools are integers and the total count is conserved exactly:
//! every move is a transfer between pools.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::obs::STATS_WINDOW;
use crate::sim::event_log::Event;
use crate::sim::orders::{generate_orders, Order};
use crate::sim::topology::Topology;
use crate::sim::{PortId, SimParams, VesselId, ACTION_COUNT};

/// Per-tick booking counters for one port.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PortTickStats {
    pub orders: i64,
    pub fulfilled: i64,
    pub failed: i64,
    pub discharged: i64,
    pub loaded: i64,
    pub released: i64,
    pub laden_in: i64,
}

#[derive(Debug, Clone)]
pub struct PortState {
    pub empty: i64,
    /// Laden awaiting shipment, keyed by destination.
    pub laden_waiting: BTreeMap<PortId, i64>,
    /// Discharged laden waiting out the turnaround delay: (release tick, qty).
    pub on_turnaround: VecDeque<(u64, i64)>,
    pub fulfilled_total: i64,
    pub shortage_total: i64,
    /// Counters of the tick currently being processed.
    pub tick_stats: PortTickStats,
    /// Ring of the last `STATS_WINDOW` completed ticks.
    pub recent: VecDeque<PortTickStats>,
}

impl PortState {
    pub fn laden_waiting_total(&self) -> i64 {
        self.laden_waiting.values().sum()
    }

    pub fn on_turnaround_total(&self) -> i64 {
        self.on_turnaround.iter().map(|(_, q)| q).sum()
    }

    /// Sums a stat over the recent window.
    pub fn recent_sum(&self, f: impl Fn(&PortTickStats) -> i64) -> i64 {
        self.recent.iter().map(f).sum()
    }
}

#[derive(Debug, Clone)]
pub struct VesselState {
    pub empty: i64,
    /// Laden on board, keyed by destination.
    pub laden: BTreeMap<PortId, i64>,
    /// Stop index the vessel is docked at, while awaiting departure.
    pub docked_at: Option<usize>,
    /// Leg being sailed (index of the stop last departed).
    pub leg: usize,
    pub departure_tick: u64,
    pub arrival_tick: u64,
    /// Noised length of the current leg.
    pub leg_effective: f64,
    /// (empty, laden) snapshots of the last `STATS_WINDOW` ticks.
    pub recent: VecDeque<(i64, i64)>,
}

impl VesselState {
    pub fn laden_total(&self) -> i64 {
        self.laden.values().sum()
    }

    pub fn remaining_space(&self, capacity: i64) -> i64 {
        capacity - self.empty - self.laden_total()
    }
}

/// Rewards of one processed tick. The global reward is computed as the sum
/// of the per-port local rewards, so the two agree bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReward {
    pub tick: u64,
    pub global: f64,
    /// Local rewards by port position in the topology.
    pub per_port: Vec<f64>,
    /// Consumed container counts by port position.
    pub consumed: Vec<i64>,
}

/// A repositioning decision demanded by a vessel arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRequest {
    pub port: PortId,
    pub vessel: VesselId,
    pub tick: u64,
    pub action_count: usize,
    pub feasible: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub tick: u64,
    pub ports: Vec<PortState>,
    pub vessels: Vec<VesselState>,
    pub rng: ChaCha8Rng,
    initial_total: i64,
}

impl SimState {
    /// Deterministic initial state; vessels depart their initial stops at
    /// tick 0 (noise draws in vessel order).
    pub fn reset(topo: &Topology, params: &SimParams, seed: u64, events: &mut Vec<Event>) -> SimState {
        use rand::SeedableRng;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        events.push(Event::Reset { seed });

        let ports: Vec<PortState> = topo
            .ports
            .iter()
            .map(|p| PortState {
                empty: p.initial_empty,
                laden_waiting: BTreeMap::new(),
                on_turnaround: VecDeque::new(),
                fulfilled_total: 0,
                shortage_total: 0,
                tick_stats: PortTickStats::default(),
                recent: VecDeque::new(),
            })
            .collect();

        let mut vessels = Vec::with_capacity(topo.vessels.len());
        let eta = topo.travel_noise(params.mode);
        let mut pending_departures = Vec::new();
        for v in &topo.vessels {
            vessels.push(VesselState {
                empty: v.initial_empty,
                laden: BTreeMap::new(),
                docked_at: Some(v.initial_stop),
                leg: v.initial_stop,
                departure_tick: 0,
                arrival_tick: 0,
                leg_effective: 0.0,
                recent: VecDeque::new(),
            });
            pending_departures.push(v.id);
        }

        let mut state = SimState {
            tick: 0,
            ports,
            vessels,
            rng,
            initial_total: 0,
        };
        state.initial_total = state.total_containers();
        for vid in pending_departures {
            state.depart(topo, vid, eta, 0, events);
        }
        state
    }

    /// Grand total over every pool; constant for the whole episode.
    pub fn total_containers(&self) -> i64 {
        let ports: i64 = self
            .ports
            .iter()
            .map(|p| p.empty + p.laden_waiting_total() + p.on_turnaround_total())
            .sum();
        let vessels: i64 = self.vessels.iter().map(|v| v.empty + v.laden_total()).sum();
        ports + vessels
    }

    pub fn initial_total(&self) -> i64 {
        self.initial_total
    }

    pub fn fulfilled_total(&self) -> i64 {
        self.ports.iter().map(|p| p.fulfilled_total).sum()
    }

    pub fn shortage_total(&self) -> i64 {
        self.ports.iter().map(|p| p.shortage_total).sum()
    }

    /// Fulfilled demand over all demand so far; 1 while no demand has
    /// appeared.
    pub fn fulfillment_ratio(&self) -> f64 {
        let fulfilled = self.fulfilled_total();
        let total = fulfilled + self.shortage_total();
        if total == 0 {
            1.0
        } else {
            fulfilled as f64 / total as f64
        }
    }

    /// Laden en route to `port` over all vessels.
    pub fn laden_inbound(&self, topo: &Topology, port: PortId) -> i64 {
        let _ = topo;
        self.vessels
            .iter()
            .map(|v| v.laden.get(&port).copied().unwrap_or(0))
            .sum()
    }

    fn port_pos(topo: &Topology, id: PortId) -> usize {
        topo.ports.iter().position(|p| p.id == id).expect("validated port id")
    }

    /// Starts `vessel` on its next leg, drawing the leg's travel noise.
    fn depart(
        &mut self,
        topo: &Topology,
        vessel: VesselId,
        eta: f64,
        tick: u64,
        events: &mut Vec<Event>,
    ) {
        let vpos = topo.vessels.iter().position(|v| v.id == vessel).unwrap();
        let spec = &topo.vessels[vpos];
        let route = topo.routes.iter().find(|r| r.id == spec.route).unwrap();
        let state = &mut self.vessels[vpos];
        let stop = state.docked_at.take().expect("depart requires a docked vessel");

        let nominal = route.leg_distances[stop];
        let factor = if eta > 0.0 {
            self.rng.gen_range(1.0 - eta..=1.0 + eta)
        } else {
            1.0
        };
        let effective = nominal * factor;
        let ticks = ((effective - 1e-9) / spec.speed).ceil().max(1.0) as u64;

        let state = &mut self.vessels[vpos];
        state.leg = stop;
        state.departure_tick = tick;
        state.arrival_tick = tick + ticks;
        state.leg_effective = effective;
        events.push(Event::Departure {
            tick,
            vessel,
            stop_index: stop,
            effective,
            arrival_tick: state.arrival_tick,
        });
    }

    /// Sends every docked vessel on its way (in vessel order). Called after
    /// the tick's decisions have been applied.
    pub fn depart_docked(&mut self, topo: &Topology, params: &SimParams, events: &mut Vec<Event>) {
        let eta = topo.travel_noise(params.mode);
        let tick = self.tick;
        let docked: Vec<VesselId> = topo
            .vessels
            .iter()
            .enumerate()
            .filter(|(i, _)| self.vessels[*i].docked_at.is_some())
            .map(|(_, v)| v.id)
            .collect();
        for vid in docked {
            self.depart(topo, vid, eta, tick, events);
        }
    }

    /// Serves one batch of orders: consumption is capped by the source
    /// port's empties, the served amount becomes laden waiting for shipment,
    /// and the shortfall counts as shortage. Returns per-port consumption.
    pub fn fulfill_orders(&mut self, topo: &Topology, orders: &[Order], events: &mut Vec<Event>) -> Vec<i64> {
        let mut consumed = vec![0i64; topo.ports.len()];
        for order in orders {
            let spos = Self::port_pos(topo, order.src);
            let port = &mut self.ports[spos];
            let served = order.quantity.min(port.empty);
            port.empty -= served;
            if served > 0 {
                *port.laden_waiting.entry(order.dst).or_insert(0) += served;
            }
            port.fulfilled_total += served;
            port.shortage_total += order.quantity - served;
            port.tick_stats.orders += order.quantity;
            port.tick_stats.fulfilled += served;
            port.tick_stats.failed += order.quantity - served;
            consumed[spos] += served;
            events.push(Event::Order {
                tick: self.tick,
                src: order.src,
                dst: order.dst,
                quantity: order.quantity,
                fulfilled: served,
            });
        }
        consumed
    }

    /// Handles one vessel arrival: discharge laden destined here into the
    /// turnaround queue, board waiting laden for downstream stops (nearest
    /// destination first), then demand a repositioning decision.
    pub fn vessel_arrival(
        &mut self,
        topo: &Topology,
        params: &SimParams,
        vessel: VesselId,
        events: &mut Vec<Event>,
    ) -> DecisionRequest {
        let vpos = topo.vessels.iter().position(|v| v.id == vessel).unwrap();
        let spec = &topo.vessels[vpos];
        let route = topo.routes.iter().find(|r| r.id == spec.route).unwrap();
        let stop_index = (self.vessels[vpos].leg + 1) % route.stops.len();
        let port_id = route.stops[stop_index];
        let ppos = Self::port_pos(topo, port_id);
        let tick = self.tick;

        events.push(Event::VesselArrival {
            tick,
            vessel,
            port: port_id,
        });

        // discharge laden destined for this port
        let arrived = self.vessels[vpos].laden.remove(&port_id).unwrap_or(0);
        if arrived > 0 {
            self.ports[ppos]
                .on_turnaround
                .push_back((tick + params.turnaround_ticks, arrived));
            self.ports[ppos].tick_stats.laden_in += arrived;
            events.push(Event::DischargeLaden {
                tick,
                vessel,
                port: port_id,
                amount: arrived,
            });
        }

        // board waiting laden, destinations in sailing order from this stop
        let n = route.stops.len();
        for step in 1..n {
            let dst = route.stops[(stop_index + step) % n];
            if dst == port_id {
                continue;
            }
            let space = self.vessels[vpos].remaining_space(spec.capacity);
            if space <= 0 {
                break;
            }
            let waiting = self.ports[ppos]
                .laden_waiting
                .get(&dst)
                .copied()
                .unwrap_or(0);
            if waiting == 0 {
                continue;
            }
            let boarded = waiting.min(space);
            let slot = self.ports[ppos].laden_waiting.get_mut(&dst).unwrap();
            *slot -= boarded;
            if *slot == 0 {
                self.ports[ppos].laden_waiting.remove(&dst);
            }
            *self.vessels[vpos].laden.entry(dst).or_insert(0) += boarded;
            events.push(Event::LoadLaden {
                tick,
                vessel,
                port: port_id,
                dst,
                amount: boarded,
            });
        }

        self.vessels[vpos].docked_at = Some(stop_index);
        DecisionRequest {
            port: port_id,
            vessel,
            tick,
            action_count: ACTION_COUNT,
            feasible: vec![true; ACTION_COUNT],
        }
    }

    /// Executes a repositioning action for a docked vessel at its port.
    /// Actions 0..=10 discharge (100 − 10a)% of the vessel's empties;
    /// 11..=21 load 10(a − 10)% of the port's empties (capped at 100%).
    /// Action 10 is the no-op. Returns the executed amount.
    pub fn apply_action(
        &mut self,
        topo: &Topology,
        request: &DecisionRequest,
        action: usize,
        events: &mut Vec<Event>,
    ) -> Result<i64> {
        if action >= ACTION_COUNT {
            return Err(Error::contract(format!(
                "action {action} out of range 0..{ACTION_COUNT}"
            )));
        }
        let vpos = topo
            .vessels
            .iter()
            .position(|v| v.id == request.vessel)
            .ok_or_else(|| Error::contract(format!("unknown vessel {}", request.vessel)))?;
        let ppos = Self::port_pos(topo, request.port);
        let port_capacity = topo.ports[ppos].capacity;
        let vessel_capacity = topo.vessels[vpos].capacity;

        let executed = if action <= 10 {
            let pct = (100 - 10 * action) as i64;
            let want = (self.vessels[vpos].empty * pct + 50) / 100;
            let headroom = port_capacity - self.ports[ppos].empty;
            let moved = want.min(headroom).max(0);
            self.vessels[vpos].empty -= moved;
            self.ports[ppos].empty += moved;
            self.ports[ppos].tick_stats.discharged += moved;
            moved
        } else {
            let pct = (10 * (action - 10)).min(100) as i64;
            let want = (self.ports[ppos].empty * pct + 50) / 100;
            let space = self.vessels[vpos].remaining_space(vessel_capacity);
            let moved = want.min(space).max(0);
            self.ports[ppos].empty -= moved;
            self.vessels[vpos].empty += moved;
            self.ports[ppos].tick_stats.loaded += moved;
            -moved
        };
        events.push(Event::Reposition {
            tick: self.tick,
            vessel: request.vessel,
            port: request.port,
            action,
            executed,
        });
        Ok(executed)
    }

    /// Processes one tick. Returns the tick's reward record and any decision
    /// requests raised by arrivals.
    pub fn advance_tick(
        &mut self,
        topo: &Topology,
        params: &SimParams,
        events: &mut Vec<Event>,
    ) -> (TickReward, Vec<DecisionRequest>) {
        self.tick += 1;
        let tick = self.tick;

        // 1. release turnaround containers up to yard headroom
        for (ppos, port_spec) in topo.ports.iter().enumerate() {
            let port = &mut self.ports[ppos];
            let mut released = 0;
            while let Some(&(due, qty)) = port.on_turnaround.front() {
                if due > tick {
                    break;
                }
                port.on_turnaround.pop_front();
                let headroom = port_spec.capacity - port.empty;
                let take = qty.min(headroom).max(0);
                port.empty += take;
                released += take;
                if take < qty {
                    // yard full: the remainder waits one more tick
                    port.on_turnaround.push_front((tick + 1, qty - take));
                    break;
                }
            }
            if released > 0 {
                port.tick_stats.released += released;
                events.push(Event::Release {
                    tick,
                    port: port_spec.id,
                    amount: released,
                });
            }
        }

        // 2. orders: generation consumes the tick's RNG draws, fulfilment
        //    consumes empties
        let orders = generate_orders(tick, &topo.order_model, params.mode, &mut self.rng);
        let consumed = self.fulfill_orders(topo, &orders, events);

        // 3. rewards; the global reward is the sum of the locals
        let per_port: Vec<f64> = consumed
            .iter()
            .map(|&a| params.reward_scale * a as f64)
            .collect();
        let global: f64 = per_port.iter().sum();
        let reward = TickReward {
            tick,
            global,
            per_port,
            consumed,
        };

        // 4. arrivals (vessel order)
        let mut requests = Vec::new();
        for (vpos, vessel_spec) in topo.vessels.iter().enumerate() {
            if self.vessels[vpos].docked_at.is_none() && self.vessels[vpos].arrival_tick == tick {
                requests.push(self.vessel_arrival(topo, params, vessel_spec.id, events));
            }
        }
        requests.sort_by_key(|r| (r.port, r.vessel));

        // 5. close the tick's booking stats
        for port in &mut self.ports {
            port.recent.push_back(port.tick_stats);
            if port.recent.len() > STATS_WINDOW {
                port.recent.pop_front();
            }
            port.tick_stats = PortTickStats::default();
        }
        for vessel in &mut self.vessels {
            vessel.recent.push_back((vessel.empty, vessel.laden_total()));
            if vessel.recent.len() > STATS_WINDOW {
                vessel.recent.pop_front();
            }
        }

        debug_assert_eq!(self.total_containers(), self.initial_total);
        (reward, requests)
    }

    /// Nominal ticks until `vessel` next reaches `port`, ignoring travel
    /// noise (the schedule an agent can see). `None` if the port is not on
    /// the vessel's route.
    pub fn ticks_until_arrival(&self, topo: &Topology, vessel: VesselId, port: PortId) -> Option<f64> {
        let vpos = topo.vessels.iter().position(|v| v.id == vessel)?;
        let spec = &topo.vessels[vpos];
        let route = topo.routes.iter().find(|r| r.id == spec.route)?;
        if !route.stops.contains(&port) {
            return None;
        }
        let state = &self.vessels[vpos];
        let n = route.stops.len();

        let (mut ticks, mut stop_index) = match state.docked_at {
            Some(stop) => {
                if route.stops[stop] == port {
                    return Some(0.0);
                }
                (0.0, stop)
            }
            None => {
                let covered = (self.tick - state.departure_tick) as f64 * spec.speed;
                let nominal = route.leg_distances[state.leg];
                let remaining = (nominal - covered).max(0.0);
                ((remaining / spec.speed).ceil(), (state.leg + 1) % n)
            }
        };
        for _ in 0..n {
            if route.stops[stop_index] == port {
                return Some(ticks);
            }
            ticks += (route.leg_distances[stop_index] / spec.speed).ceil();
            stop_index = (stop_index + 1) % n;
        }
        Some(ticks)
    }
}
