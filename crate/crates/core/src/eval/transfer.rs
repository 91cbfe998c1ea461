//! Topology-transfer tooling: port merging, order-distribution reshuffling,
//! and direct evaluation of a trained checkpoint on the derived topology.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::autodiff::{checkpoint, ParameterSet};
use crate::encgat::NetConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, LearnedPolicy};
use crate::obs::PORT_INPUT_WIDTH;
use crate::sim::topology::{PairParam, Topology};
use crate::sim::{EcrEnv, PortId, SimParams};

/// Merges port `b` into port `a`: `a` takes over `b`'s route positions and
/// absorbs its capacity and stock. Order pairs are remapped; pairs that
/// collapse onto the merged port are dropped.
pub fn merge_ports(topo: &Topology, a: PortId, b: PortId) -> Result<Topology> {
    if a == b {
        return Err(Error::contract("merge_ports: ports must differ"));
    }
    topo.port(a)?;
    let absorbed = topo.port(b)?.clone();

    let mut merged = topo.clone();
    let keep = merged.ports.iter_mut().find(|p| p.id == a).unwrap();
    keep.capacity += absorbed.capacity;
    keep.initial_empty += absorbed.initial_empty;
    merged.ports.retain(|p| p.id != b);

    for route in &mut merged.routes {
        for stop in route.stops.iter_mut() {
            if *stop == b {
                *stop = a;
            }
        }
        // collapse consecutive duplicates (cyclically); the removed stop's
        // outbound leg folds into the leg leading to it, preserving cycle
        // length
        loop {
            let n = route.stops.len();
            if n < 2 {
                return Err(Error::Topology(vec![format!(
                    "merging {b} into {a} collapses {} below 2 stops",
                    route.id
                )]));
            }
            match (0..n).find(|&i| route.stops[i] == route.stops[(i + 1) % n]) {
                None => break,
                Some(i) if i + 1 < n => {
                    // drop stop i+1: leg i now reaches stop i+2
                    let folded = route.leg_distances[i] + route.leg_distances[i + 1];
                    route.stops.remove(i + 1);
                    route.leg_distances.remove(i + 1);
                    route.leg_distances[i] = folded;
                }
                Some(_) => {
                    // wrap-around duplicate: drop the final stop
                    let folded = route.leg_distances[n - 2] + route.leg_distances[n - 1];
                    route.stops.remove(n - 1);
                    route.leg_distances.remove(n - 1);
                    route.leg_distances[n - 2] = folded;
                }
            }
        }
    }

    // remap order pairs, summing shares that now coincide
    let mut folded: BTreeMap<(PortId, PortId), (f64, f64)> = BTreeMap::new();
    for pair in &merged.order_model.pair_params {
        let src = if pair.src == b { a } else { pair.src };
        let dst = if pair.dst == b { a } else { pair.dst };
        if src == dst {
            continue;
        }
        let slot = folded.entry((src, dst)).or_insert((0.0, 0.0));
        slot.0 += pair.mu;
        slot.1 += pair.sigma * pair.sigma;
    }
    merged.order_model.pair_params = folded
        .into_iter()
        .map(|((src, dst), (mu, var))| PairParam {
            src,
            dst,
            mu,
            sigma: var.sqrt(),
        })
        .collect();

    merged.validate()?;
    Ok(merged)
}

/// Redraws the order-share matrix from a symmetric Dirichlet (concentration
/// 1) over all valid same-route pairs, preserving the original total share
/// and the original aggregate sigma-to-mu ratio.
pub fn reshuffle_orders(topo: &Topology, seed: u64) -> Result<Topology> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mu_total: f64 = topo.order_model.pair_params.iter().map(|p| p.mu).sum();
    let sigma_total: f64 = topo.order_model.pair_params.iter().map(|p| p.sigma).sum();
    let noise_ratio = if mu_total > 0.0 { sigma_total / mu_total } else { 0.0 };

    // all ordered same-route pairs
    let mut pairs: Vec<(PortId, PortId)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for route in &topo.routes {
        for &src in &route.stops {
            for &dst in &route.stops {
                if src != dst && seen.insert((src, dst)) {
                    pairs.push((src, dst));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::contract("reshuffle_orders: no valid pairs"));
    }

    let shares: Vec<f64> = if pairs.len() == 1 {
        vec![1.0]
    } else {
        let dirichlet = rand_distr::Dirichlet::new(&vec![1.0; pairs.len()])
            .map_err(|e| Error::contract(format!("dirichlet: {e}")))?;
        dirichlet.sample(&mut rng)
    };

    let mut shuffled = topo.clone();
    shuffled.order_model.pair_params = pairs
        .into_iter()
        .zip(shares)
        .map(|((src, dst), share)| {
            let mu = share * mu_total;
            PairParam {
                src,
                dst,
                mu,
                sigma: mu * noise_ratio,
            }
        })
        .collect();
    shuffled.validate()?;
    Ok(shuffled)
}

/// Evaluates a trained checkpoint directly on a derived topology, with no
/// retraining; verifies by hash that evaluation leaves the parameters
/// untouched. Returns the report and the checkpoint digest.
pub fn transfer_evaluate(
    params: &ParameterSet,
    net: &NetConfig,
    decoder_only: bool,
    derived: &Topology,
    sim: &SimParams,
    n_lookback: usize,
    seeds: &[u64],
) -> Result<(EvalReport, String)> {
    let port_w = params.get("input.port.w")?;
    if port_w.shape[0] != PORT_INPUT_WIDTH {
        return Err(Error::contract(format!(
            "feature width mismatch: checkpoint expects {} port inputs, observations provide {}",
            port_w.shape[0],
            PORT_INPUT_WIDTH
        )));
    }
    let digest_before = checkpoint::digest(params);
    let mut env = EcrEnv::new(derived.clone(), sim.clone(), n_lookback, false)?;
    let mut policy = LearnedPolicy::new(params.clone(), net.clone(), decoder_only);
    let report = evaluate(&mut env, &mut policy, seeds)?;
    let digest_after = checkpoint::digest(policy.params());
    if digest_before != digest_after {
        return Err(Error::contract(
            "transfer_evaluate mutated the checkpoint parameters",
        ));
    }
    Ok((report, digest_before))
}
