//! Route-network schema, validation, file I/O, and the synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{PortId, RouteId, VesselId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    Normal,
    Hard,
}

impl std::fmt::Display for OrderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderMode::Normal => write!(f, "normal"),
            OrderMode::Hard => write!(f, "hard"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Port {
    pub id: PortId,
    pub name: String,
    /// Maximum empty containers the yard holds.
    pub capacity: i64,
    pub initial_empty: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub id: RouteId,
    /// Cyclic stop sequence; leg i runs stops[i] → stops[(i+1) % n].
    pub stops: Vec<PortId>,
    /// One distance per leg, same length as `stops`.
    pub leg_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vessel {
    pub id: VesselId,
    pub route: RouteId,
    pub capacity: i64,
    /// Distance units covered per tick.
    pub speed: f64,
    /// Stop index the vessel departs from at tick 0.
    pub initial_stop: usize,
    pub initial_empty: i64,
}

/// Mean/deviation of one ordered trade pair's share of the per-tick total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairParam {
    pub src: PortId,
    pub dst: PortId,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderModel {
    pub mode: OrderMode,
    /// Baseline order volume per tick.
    pub total_base: f64,
    /// Long and short trend periods for hard mode.
    pub trend_periods: [u32; 2],
    /// Relative amplitudes of the two trend factors.
    pub trend_amplitudes: [f64; 2],
    /// Travel-noise half-width per mode.
    pub travel_noise_normal: f64,
    pub travel_noise_hard: f64,
    pub pair_params: Vec<PairParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub schema_version: u32,
    pub ports: Vec<Port>,
    pub routes: Vec<Route>,
    pub vessels: Vec<Vessel>,
    pub order_model: OrderModel,
}

impl Topology {
    pub fn load(path: &Path) -> Result<Topology> {
        let text = std::fs::read_to_string(path)?;
        let topo: Topology = serde_json::from_str(&text)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serialization")
    }

    /// Full validation; collects every violation rather than stopping at the
    /// first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.ports.is_empty() {
            errs.push("no ports".into());
        }
        if self.routes.is_empty() {
            errs.push("no routes".into());
        }
        if self.vessels.is_empty() {
            errs.push("no vessels".into());
        }

        let mut port_ids = BTreeSet::new();
        for p in &self.ports {
            if !port_ids.insert(p.id) {
                errs.push(format!("duplicate port id {}", p.id));
            }
            if p.capacity < 1 {
                errs.push(format!("{}: capacity must be >= 1", p.id));
            }
            if p.initial_empty < 0 || p.initial_empty > p.capacity {
                errs.push(format!("{}: initial_empty outside [0, capacity]", p.id));
            }
        }

        let mut route_ids = BTreeSet::new();
        for r in &self.routes {
            if !route_ids.insert(r.id) {
                errs.push(format!("duplicate route id {}", r.id));
            }
            if r.stops.len() < 2 {
                errs.push(format!("{}: needs at least 2 stops", r.id));
            }
            if r.leg_distances.len() != r.stops.len() {
                errs.push(format!("{}: leg_distances must match stops", r.id));
            }
            for s in &r.stops {
                if !port_ids.contains(s) {
                    errs.push(format!("{}: unknown stop {s}", r.id));
                }
            }
            for (i, d) in r.leg_distances.iter().enumerate() {
                if !(d.is_finite() && *d > 0.0) {
                    errs.push(format!("{}: leg {i} distance must be positive", r.id));
                }
            }
            let n = r.stops.len();
            if n >= 2 {
                for i in 0..n {
                    if r.stops[i] == r.stops[(i + 1) % n] {
                        errs.push(format!("{}: consecutive duplicate stop {}", r.id, r.stops[i]));
                    }
                }
            }
        }

        let mut vessel_ids = BTreeSet::new();
        for v in &self.vessels {
            if !vessel_ids.insert(v.id) {
                errs.push(format!("duplicate vessel id {}", v.id));
            }
            match self.routes.iter().find(|r| r.id == v.route) {
                None => errs.push(format!("{}: unknown route {}", v.id, v.route)),
                Some(r) => {
                    if v.initial_stop >= r.stops.len() {
                        errs.push(format!("{}: initial_stop out of range", v.id));
                    }
                }
            }
            if v.capacity < 1 {
                errs.push(format!("{}: capacity must be >= 1", v.id));
            }
            if !(v.speed.is_finite() && v.speed > 0.0) {
                errs.push(format!("{}: speed must be positive", v.id));
            }
            if v.initial_empty < 0 || v.initial_empty > v.capacity {
                errs.push(format!("{}: initial_empty outside [0, capacity]", v.id));
            }
        }

        let om = &self.order_model;
        if !(om.total_base.is_finite() && om.total_base >= 0.0) {
            errs.push("order_model: total_base must be non-negative".into());
        }
        for p in om.trend_periods {
            if p == 0 {
                errs.push("order_model: trend periods must be positive".into());
            }
        }
        for a in om.trend_amplitudes {
            if !(a.is_finite() && a >= 0.0) {
                errs.push("order_model: trend amplitudes must be non-negative".into());
            }
        }
        for eta in [om.travel_noise_normal, om.travel_noise_hard] {
            if !(0.0..1.0).contains(&eta) {
                errs.push("order_model: travel noise must lie in [0, 1)".into());
            }
        }

        let mut mu_sum = 0.0;
        let mut seen_pairs = BTreeSet::new();
        for pair in &om.pair_params {
            if pair.src == pair.dst {
                errs.push(format!("pair {} -> {}: src equals dst", pair.src, pair.dst));
            }
            if !seen_pairs.insert((pair.src, pair.dst)) {
                errs.push(format!("pair {} -> {}: duplicate", pair.src, pair.dst));
            }
            if !port_ids.contains(&pair.src) || !port_ids.contains(&pair.dst) {
                errs.push(format!("pair {} -> {}: unknown port", pair.src, pair.dst));
            }
            if !(pair.mu.is_finite() && pair.mu >= 0.0) || !(pair.sigma.is_finite() && pair.sigma >= 0.0)
            {
                errs.push(format!("pair {} -> {}: mu/sigma must be >= 0", pair.src, pair.dst));
            }
            mu_sum += pair.mu;
            let connected = self
                .routes
                .iter()
                .any(|r| r.stops.contains(&pair.src) && r.stops.contains(&pair.dst));
            if !connected {
                errs.push(format!(
                    "pair {} -> {}: ports share no route",
                    pair.src, pair.dst
                ));
            }
        }
        if mu_sum > 1.0 + 1e-9 {
            errs.push(format!("pair mu values sum to {mu_sum:.6}, must be <= 1"));
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(errs))
        }
    }

    pub fn port(&self, id: PortId) -> Result<&Port> {
        self.ports
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::contract(format!("unknown port {id}")))
    }

    pub fn travel_noise(&self, mode: OrderMode) -> f64 {
        match mode {
            OrderMode::Normal => self.order_model.travel_noise_normal,
            OrderMode::Hard => self.order_model.travel_noise_hard,
        }
    }
}

/// Precomputed lookups over a validated topology.
#[derive(Debug, Clone)]
pub struct TopoIndex {
    /// Port position in `topology.ports` by id.
    pub port_pos: BTreeMap<PortId, usize>,
    pub vessel_pos: BTreeMap<VesselId, usize>,
    pub route_pos: BTreeMap<RouteId, usize>,
    /// Routes through each port.
    pub routes_of_port: BTreeMap<PortId, BTreeSet<RouteId>>,
    /// Port-port neighbors (shared route, excluding self).
    pub port_neighbors: BTreeMap<PortId, Vec<PortId>>,
    /// Vessel neighbors per port (vessel's route passes the port).
    pub vessel_neighbors: BTreeMap<PortId, Vec<VesselId>>,
    /// Minimal along-route sailing distance between two ports over shared routes.
    route_distance: BTreeMap<(PortId, PortId), f64>,
}

impl TopoIndex {
    pub fn new(topo: &Topology) -> TopoIndex {
        let port_pos = topo
            .ports
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id, i))
            .collect();
        let vessel_pos = topo
            .vessels
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id, i))
            .collect();
        let route_pos: BTreeMap<RouteId, usize> = topo
            .routes
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i))
            .collect();

        let mut routes_of_port: BTreeMap<PortId, BTreeSet<RouteId>> = BTreeMap::new();
        for r in &topo.routes {
            for s in &r.stops {
                routes_of_port.entry(*s).or_default().insert(r.id);
            }
        }

        let mut route_distance = BTreeMap::new();
        for r in &topo.routes {
            let n = r.stops.len();
            for i in 0..n {
                let mut dist = 0.0;
                for step in 0..n - 1 {
                    let leg = (i + step) % n;
                    dist += r.leg_distances[leg];
                    let from = r.stops[i];
                    let to = r.stops[(i + step + 1) % n];
                    if from != to {
                        let e = route_distance.entry((from, to)).or_insert(f64::INFINITY);
                        if dist < *e {
                            *e = dist;
                        }
                    }
                }
            }
        }

        let mut port_neighbors: BTreeMap<PortId, Vec<PortId>> = BTreeMap::new();
        let mut vessel_neighbors: BTreeMap<PortId, Vec<VesselId>> = BTreeMap::new();
        for p in &topo.ports {
            let my_routes = routes_of_port.get(&p.id).cloned().unwrap_or_default();
            let mut ports = BTreeSet::new();
            for other in &topo.ports {
                if other.id == p.id {
                    continue;
                }
                let shares = routes_of_port
                    .get(&other.id)
                    .map(|rs| !rs.is_disjoint(&my_routes))
                    .unwrap_or(false);
                if shares {
                    ports.insert(other.id);
                }
            }
            let vessels: Vec<VesselId> = topo
                .vessels
                .iter()
                .filter(|v| my_routes.contains(&v.route))
                .map(|v| v.id)
                .collect();
            port_neighbors.insert(p.id, ports.into_iter().collect());
            vessel_neighbors.insert(p.id, vessels);
        }

        TopoIndex {
            port_pos,
            vessel_pos,
            route_pos,
            routes_of_port,
            port_neighbors,
            vessel_neighbors,
            route_distance,
        }
    }

    /// Minimal sailing distance from `from` to `to` over shared routes.
    pub fn route_distance(&self, from: PortId, to: PortId) -> Option<f64> {
        self.route_distance.get(&(from, to)).copied()
    }
}

/// Deterministic synthetic topology generator.
///
/// Every route passes through a shared hub (port 0) so the network is
/// connected and some empties must travel across routes. Non-hub ports
/// alternate between exporter and importer roles, which skews the trade
/// matrix enough that repositioning decisions matter.
pub fn generate(n_ports: u32, n_routes: u32, n_vessels: u32, seed: u64) -> Result<Topology> {
    if n_ports < 2 || n_routes < 1 || n_vessels < 1 {
        return Err(Error::config(
            "generator needs at least 2 ports, 1 route, 1 vessel",
        ));
    }
    if n_ports - 1 < n_routes {
        return Err(Error::config(
            "generator needs at least one non-hub port per route",
        ));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let total_base = 10.0 * n_ports as f64;
    let port_capacity = (total_base * 18.0).round() as i64;

    let ports: Vec<Port> = (0..n_ports)
        .map(|i| Port {
            id: PortId(i),
            name: format!("port-{i}"),
            capacity: port_capacity,
            initial_empty: (port_capacity as f64 * 0.35).round() as i64,
        })
        .collect();

    // hub-and-spoke routes: non-hub ports dealt round-robin
    let hub = PortId(0);
    let mut route_stops: Vec<Vec<PortId>> = (0..n_routes).map(|_| vec![hub]).collect();
    for (i, pid) in (1..n_ports).enumerate() {
        route_stops[i % n_routes as usize].push(PortId(pid));
    }
    let routes: Vec<Route> = route_stops
        .into_iter()
        .enumerate()
        .map(|(i, stops)| {
            let leg_distances = (0..stops.len())
                .map(|_| rng.gen_range(3..=6) as f64)
                .collect();
            Route {
                id: RouteId(i as u32),
                stops,
                leg_distances,
            }
        })
        .collect();

    let vessel_capacity = (total_base * 1.5).round() as i64;
    let vessels: Vec<Vessel> = (0..n_vessels)
        .map(|i| {
            let route = &routes[i as usize % routes.len()];
            Vessel {
                id: VesselId(i),
                route: route.id,
                capacity: vessel_capacity,
                speed: 1.0,
                initial_stop: rng.gen_range(0..route.stops.len()),
                initial_empty: (vessel_capacity as f64 * 0.3).round() as i64,
            }
        })
        .collect();

    // exporter-ness / importer-ness: alternating roles off the hub
    let export_strength = |p: PortId| -> f64 {
        if p == hub {
            0.5
        } else if p.0 % 2 == 1 {
            1.0 // exporter
        } else {
            0.15 // importer
        }
    };
    let import_strength = |p: PortId| -> f64 {
        if p == hub {
            0.5
        } else if p.0 % 2 == 1 {
            0.15
        } else {
            1.0
        }
    };

    let mut weights: Vec<(PortId, PortId, f64)> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in &routes {
        for &a in &r.stops {
            for &b in &r.stops {
                if a != b && seen.insert((a, b)) {
                    let jitter = rng.gen_range(0.7..1.3);
                    weights.push((a, b, export_strength(a) * import_strength(b) * jitter));
                }
            }
        }
    }
    let total_w: f64 = weights.iter().map(|(_, _, w)| w).sum();
    let scale = 0.92 / total_w;
    let pair_params: Vec<PairParam> = weights
        .into_iter()
        .map(|(src, dst, w)| {
            let mu = w * scale;
            PairParam {
                src,
                dst,
                mu,
                sigma: mu * 0.15,
            }
        })
        .collect();

    let topo = Topology {
        schema_version: SCHEMA_VERSION,
        ports,
        routes,
        vessels,
        order_model: OrderModel {
            mode: OrderMode::Normal,
            total_base,
            trend_periods: [112, 28],
            trend_amplitudes: [0.5, 0.25],
            travel_noise_normal: 0.0,
            travel_noise_hard: 0.1,
            pair_params,
        },
    };
    topo.validate()?;
    Ok(topo)
}

/// Seed baked into the bundled 6-port topology.
pub const BUNDLED_SEED: u64 = 5;

/// The bundled desk-scale topology: 6 ports, 3 routes sharing a hub,
/// 6 vessels.
pub fn bundled() -> Topology {
    generate(6, 3, 6, BUNDLED_SEED).expect("bundled topology generation")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_topology_is_valid_and_reproducible() {
        let a = bundled();
        a.validate().unwrap();
        let b = generate(6, 3, 6, BUNDLED_SEED).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ports.len(), 6);
        assert_eq!(a.routes.len(), 3);
        assert_eq!(a.vessels.len(), 6);
    }

    #[test]
    fn generated_topologies_pass_validation_over_100_seeds() {
        for seed in 0..100 {
            let topo = generate(6, 3, 6, seed).unwrap();
            topo.validate().unwrap();
        }
    }

    #[test]
    fn generator_handles_paper_scale() {
        let topo = generate(22, 13, 46, 1).unwrap();
        topo.validate().unwrap();
        assert_eq!(topo.ports.len(), 22);
        assert_eq!(topo.routes.len(), 13);
        assert_eq!(topo.vessels.len(), 46);
    }

    #[test]
    fn json_round_trip() {
        let topo = bundled();
        let text = topo.to_json();
        let back: Topology = serde_json::from_str(&text).unwrap();
        assert_eq!(topo, back);
    }

    #[test]
    fn validation_collects_violations() {
        let mut topo = bundled();
        topo.ports[0].initial_empty = topo.ports[0].capacity + 5;
        topo.vessels[0].speed = 0.0;
        topo.order_model.pair_params[0].mu = 2.0;
        let err = topo.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("initial_empty"));
        assert!(msg.contains("speed"));
        assert!(msg.contains("sum"));
    }

    #[test]
    fn order_pairs_share_routes() {
        let topo = bundled();
        let idx = TopoIndex::new(&topo);
        for pair in &topo.order_model.pair_params {
            assert!(idx
                .port_neighbors
                .get(&pair.src)
                .unwrap()
                .contains(&pair.dst));
        }
    }

    #[test]
    fn route_distance_is_directional_and_positive() {
        let topo = bundled();
        let idx = TopoIndex::new(&topo);
        for r in &topo.routes {
            let a = r.stops[0];
            let b = r.stops[1];
            let d = idx.route_distance(a, b).unwrap();
            assert!(d > 0.0);
            assert!(idx.route_distance(b, a).unwrap() > 0.0);
        }
    }

    #[test]
    fn neighborhood_is_symmetric() {
        let topo = generate(10, 4, 8, 3).unwrap();
        let idx = TopoIndex::new(&topo);
        for (p, neighbors) in &idx.port_neighbors {
            for q in neighbors {
                assert!(idx.port_neighbors.get(q).unwrap().contains(p));
            }
        }
    }
}
