//! Episode rollouts: runs the policy through one episode and packages the
//! decisions, intervals, and discounted reward sums for the update sweep.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParameterSet;
use crate::encgat::{Forward, NetConfig};
use crate::error::Result;
use crate::sim::engine::TickReward;
use crate::sim::{EcrEnv, PortId, VesselId};
use crate::train::{ActRecord, TickGroup, Transition};

/// Action selection during a rollout.
pub enum RolloutMode<'r> {
    /// Draw from the policy distribution.
    Sample(&'r mut ChaCha8Rng),
    /// Take the most probable action (ties to the lowest index).
    Greedy,
}

/// Per-decision embedding snapshot for the projection export.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub port: PortId,
    pub tick: u64,
    pub embedding: Vec<f64>,
}

/// One completed episode.
#[derive(Debug)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub transitions: Vec<Transition>,
    pub groups: Vec<TickGroup>,
    pub fulfillment: f64,
    /// Undiscounted local return summed per agent, averaged over agents.
    pub mean_local_return: f64,
    pub total_global_reward: f64,
    pub embeddings: Option<Vec<EmbeddingRow>>,
}

fn discounted(rewards: &[TickReward], from_tick: u64, k: u64, gamma: f64, ppos: Option<usize>) -> f64 {
    let mut acc = 0.0;
    let mut factor = 1.0;
    for j in 0..k {
        let reward = &rewards[(from_tick + j) as usize];
        debug_assert_eq!(reward.tick, from_tick + j + 1);
        acc += factor
            * match ppos {
                Some(p) => reward.per_port[p],
                None => reward.global,
            };
        factor *= gamma;
    }
    acc
}

/// Runs one episode under `params`, resetting the environment with
/// `episode_seed`. Decisions are grouped by simulator tick; each agent's
/// transition closes at its next decision (or episode end, bootstrapping
/// with value zero).
pub fn rollout(
    env: &mut EcrEnv,
    params: &ParameterSet,
    net: &NetConfig,
    decoder_only: bool,
    gamma: f64,
    episode_seed: u64,
    mut mode: RolloutMode<'_>,
    collect_embeddings: bool,
) -> Result<EpisodeRecord> {
    env.reset(episode_seed)?;
    let ports = env.port_ids();

    let mut transitions: Vec<Transition> = Vec::new();
    let mut groups: Vec<TickGroup> = Vec::new();
    // agent → index of its still-open transition
    let mut open: BTreeMap<PortId, usize> = BTreeMap::new();
    let mut embeddings = if collect_embeddings { Some(Vec::new()) } else { None };

    let mut result = env.step(&[])?;
    while !result.done {
        let tick = result.requests[0].tick;
        let gidx = groups.len();

        let mut obs_all = Vec::with_capacity(ports.len());
        for &port in &ports {
            obs_all.push(env.observe(port, None)?);
        }

        let mut decisions = Vec::new();
        let mut actions: Vec<(PortId, VesselId, usize)> = Vec::new();
        for request in &result.requests {
            let obs = env.observe(request.port, Some(request.vessel))?;
            let mut fwd = if decoder_only {
                Forward::decoder_only(params, net)
            } else {
                Forward::new(params, net)
            };
            let out = fwd.encgat_forward(&obs)?;
            let dist =
                fwd.actor_distribution(&out, request.port, request.vessel, &request.feasible)?;
            let probs = fwd.pt.tape.values(dist);
            let action = match &mut mode {
                RolloutMode::Sample(rng) => sample_index(probs, rng),
                RolloutMode::Greedy => argmax(probs),
            };
            let logp_sampled = probs[action].ln();
            if let Some(rows) = embeddings.as_mut() {
                rows.push(EmbeddingRow {
                    port: request.port,
                    tick,
                    embedding: fwd.pt.tape.values(out.center).to_vec(),
                });
            }
            actions.push((request.port, request.vessel, action));

            let act = ActRecord {
                vessel: request.vessel,
                action,
                logp_sampled,
                feasible: request.feasible.clone(),
            };
            let previous = open.get(&request.port).copied();
            match previous {
                // the same agent deciding again at the same tick extends its
                // open transition with a joint action
                Some(idx) if transitions[idx].tick == tick => {
                    transitions[idx].acts.push(act);
                }
                _ => {
                    if let Some(idx) = previous {
                        close_transition(&mut transitions[idx], tick, gidx, env, gamma);
                    }
                    let ppos = ports.iter().position(|p| *p == request.port).unwrap();
                    let idx = transitions.len();
                    transitions.push(Transition {
                        agent: request.port,
                        ppos,
                        tick,
                        group: gidx,
                        acts: vec![act],
                        k: 0,
                        local_return: 0.0,
                        global_return: 0.0,
                        next_group: None,
                        terminal: false,
                    });
                    decisions.push(idx);
                    open.insert(request.port, idx);
                }
            }
        }

        if let Some(last) = groups.last_mut() {
            last.k = tick - last.tick;
        }
        groups.push(TickGroup {
            tick,
            obs_all,
            decisions,
            k: 0,
            global_return: 0.0,
            terminal: false,
        });

        result = env.step(&actions)?;
    }

    let end = env.params().episode_len;
    for (_, idx) in open {
        let tr = &mut transitions[idx];
        tr.k = end - tr.tick;
        tr.local_return = discounted(env.rewards(), tr.tick, tr.k, gamma, Some(tr.ppos));
        tr.global_return = discounted(env.rewards(), tr.tick, tr.k, gamma, None);
        tr.terminal = true;
    }
    if let Some(last) = groups.last_mut() {
        last.k = end - last.tick;
        last.terminal = true;
    }
    for g in 0..groups.len() {
        let (tick, k) = (groups[g].tick, groups[g].k);
        groups[g].global_return = discounted(env.rewards(), tick, k, gamma, None);
    }

    let total_global: f64 = env.rewards().iter().map(|r| r.global).sum();
    let mean_local: f64 = env
        .rewards()
        .iter()
        .flat_map(|r| r.per_port.iter())
        .sum::<f64>()
        / ports.len() as f64;

    Ok(EpisodeRecord {
        seed: episode_seed,
        transitions,
        groups,
        fulfillment: env.fulfillment_ratio(),
        mean_local_return: mean_local,
        total_global_reward: total_global,
        embeddings,
    })
}

fn close_transition(tr: &mut Transition, now: u64, next_group: usize, env: &EcrEnv, gamma: f64) {
    tr.k = now - tr.tick;
    tr.local_return = discounted(env.rewards(), tr.tick, tr.k, gamma, Some(tr.ppos));
    tr.global_return = discounted(env.rewards(), tr.tick, tr.k, gamma, None);
    tr.next_group = Some(next_group);
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last_feasible = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_feasible = i;
            acc += p;
            if draw < acc {
                return i;
            }
        }
    }
    last_feasible
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
