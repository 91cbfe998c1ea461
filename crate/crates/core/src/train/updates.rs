//! Loss assembly and parameter updates for both training phases.
//!
//! Losses are accumulated over tape chunks (gradients of a sum are summed
//! gradients), with per-(tick, agent) forward passes cached within each
//! chunk. Advantage terms entering the policy loss are gradient-stopped;
//! the squared-advantage critic terms are left attached.

use std::collections::BTreeMap;

use crate::autodiff::{adam_step, clip_global_norm, AdamState, ParameterSet, Tx};
use crate::encgat::{CriticKind, EncGatOutput, Forward, NetConfig};
use crate::error::Result;
use crate::train::{EpisodeRecord, LossWeights, Transition};

/// Transitions per tape in the pre-training sweep.
const PRETRAIN_CHUNK: usize = 64;
/// Tick groups per tape in the fine-tuning sweep.
const FINETUNE_CHUNK: usize = 24;

/// Loss components of one episode's update, as plain values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Σ φ (policy terms).
    pub actor: f64,
    /// Σ δ_loc (unweighted squared local advantages).
    pub critic_local: f64,
    /// Σ δ (unweighted squared global advantages).
    pub critic_global: f64,
    /// Σ entropy of the evaluated distributions.
    pub entropy: f64,
}

impl LossBreakdown {
    fn absorb(&mut self, other: LossBreakdown) {
        self.total += other.total;
        self.actor += other.actor;
        self.critic_local += other.critic_local;
        self.critic_global += other.critic_global;
        self.entropy += other.entropy;
    }
}

fn forward_for<'p>(params: &'p ParameterSet, net: &NetConfig, decoder_only: bool) -> Forward<'p> {
    if decoder_only {
        Forward::decoder_only(params, net)
    } else {
        Forward::new(params, net)
    }
}

fn embed_cached(
    fwd: &mut Forward<'_>,
    cache: &mut BTreeMap<(usize, usize), EncGatOutput>,
    episode: &EpisodeRecord,
    group: usize,
    ppos: usize,
) -> Result<EncGatOutput> {
    if let Some(out) = cache.get(&(group, ppos)) {
        return Ok(out.clone());
    }
    let out = fwd.encgat_forward(&episode.groups[group].obs_all[ppos])?;
    cache.insert((group, ppos), out.clone());
    Ok(out)
}

/// Local advantage of one transition on the tape:
/// R_loc + γ^k V(O_next) − V(O_cur), bootstrapping with zero at terminal.
fn local_advantage_tx(
    fwd: &mut Forward<'_>,
    cache: &mut BTreeMap<(usize, usize), EncGatOutput>,
    episode: &EpisodeRecord,
    tr: &Transition,
    gamma: f64,
) -> Result<Tx> {
    let out_cur = embed_cached(fwd, cache, episode, tr.group, tr.ppos)?;
    let v_cur = fwd.critic_value(out_cur.center, CriticKind::Local)?;
    let v_cur = fwd.pt.tape.pick(v_cur, 0, 0)?;
    let mut adv = fwd.pt.tape.scalar(tr.local_return);
    if let Some(next) = tr.next_group {
        let out_next = embed_cached(fwd, cache, episode, next, tr.ppos)?;
        let v_next = fwd.critic_value(out_next.center, CriticKind::Local)?;
        let v_next = fwd.pt.tape.pick(v_next, 0, 0)?;
        let discounted = fwd.pt.tape.scale(v_next, gamma.powi(tr.k as i32));
        adv = fwd.pt.tape.add(adv, discounted)?;
    }
    fwd.pt.tape.sub(adv, v_cur)
}

/// Joint log-probability of a transition's actions, plus the summed
/// Σ p·ln p term when an entropy bonus is active.
fn joint_logp(
    fwd: &mut Forward<'_>,
    out: &EncGatOutput,
    tr: &Transition,
    want_entropy: bool,
) -> Result<(Tx, Option<Tx>)> {
    let mut logp: Option<Tx> = None;
    let mut plogp: Option<Tx> = None;
    for act in &tr.acts {
        let dist = fwd.actor_distribution(out, tr.agent, act.vessel, &act.feasible)?;
        let p = fwd.pt.tape.pick(dist, 0, act.action)?;
        let lp = fwd.pt.tape.log(p)?;
        logp = Some(match logp {
            None => lp,
            Some(acc) => fwd.pt.tape.add(acc, lp)?,
        });
        if want_entropy {
            let xl = fwd.pt.tape.xlogx(dist)?;
            let s = fwd.pt.tape.sum(xl);
            plogp = Some(match plogp {
                None => s,
                Some(acc) => fwd.pt.tape.add(acc, s)?,
            });
        }
    }
    Ok((logp.expect("transition without actions"), plogp))
}

/// Pre-training loss (phase one) over one episode, accumulating parameter
/// gradients: per transition, λ·Â² − log π(A)·sg(Â), summed over agents and
/// time.
pub fn pretrain_loss(
    params: &mut ParameterSet,
    episode: &EpisodeRecord,
    net: &NetConfig,
    decoder_only: bool,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if episode.transitions.is_empty() {
        return Err(crate::Error::contract("pretrain_loss: empty batch"));
    }
    let mut totals = LossBreakdown::default();
    let want_entropy = weights.entropy > 0.0;

    for chunk in episode.transitions.chunks(PRETRAIN_CHUNK) {
        let mut fwd = forward_for(params, net, decoder_only);
        let mut cache = BTreeMap::new();
        let mut chunk_totals = LossBreakdown::default();
        let mut loss_acc: Option<Tx> = None;

        for tr in chunk {
            let adv = local_advantage_tx(&mut fwd, &mut cache, episode, tr, weights.gamma)?;
            let delta = fwd.pt.tape.square(adv);
            let sg_adv = fwd.pt.tape.stop_gradient(adv);

            let out_cur = embed_cached(&mut fwd, &mut cache, episode, tr.group, tr.ppos)?;
            let (logp, plogp) = joint_logp(&mut fwd, &out_cur, tr, want_entropy)?;
            let prod = fwd.pt.tape.mul(logp, sg_adv)?;
            let phi = fwd.pt.tape.scale(prod, -1.0);

            chunk_totals.critic_local += fwd.pt.tape.item(delta);
            chunk_totals.actor += fwd.pt.tape.item(phi);

            let weighted = fwd.pt.tape.scale(delta, weights.pretrain_critic);
            let mut contrib = fwd.pt.tape.add(weighted, phi)?;
            if let Some(pl) = plogp {
                chunk_totals.entropy -= fwd.pt.tape.item(pl);
                let bonus = fwd.pt.tape.scale(pl, weights.entropy);
                contrib = fwd.pt.tape.add(contrib, bonus)?;
            }
            loss_acc = Some(match loss_acc {
                None => contrib,
                Some(acc) => fwd.pt.tape.add(acc, contrib)?,
            });
        }

        let loss = loss_acc.expect("non-empty chunk");
        chunk_totals.total = fwd.pt.tape.item(loss);
        let grads = fwd.backward_params(loss)?;
        drop(fwd);
        for (name, grad) in grads {
            params.get_mut(&name)?.accumulate_grad(&grad);
        }
        totals.absorb(chunk_totals);
    }
    Ok(totals)
}

/// Fine-tuning loss (phase two) over one episode, accumulating parameter
/// gradients: per decision tick, λ_l Σ_i Â_loc² + λ_g Â² − (Σ_i log π_i)·sg(Â),
/// with Â from global rewards and the global critic over the mean agent
/// embedding.
pub fn finetune_loss(
    params: &mut ParameterSet,
    episode: &EpisodeRecord,
    net: &NetConfig,
    decoder_only: bool,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if episode.groups.is_empty() {
        return Err(crate::Error::contract("finetune_loss: empty batch"));
    }
    let mut totals = LossBreakdown::default();
    let want_entropy = weights.entropy > 0.0;
    let n_ports = episode.groups[0].obs_all.len();

    let group_count = episode.groups.len();
    let mut start = 0;
    while start < group_count {
        let end = (start + FINETUNE_CHUNK).min(group_count);
        let mut fwd = forward_for(params, net, decoder_only);
        let mut cache = BTreeMap::new();
        let mut chunk_totals = LossBreakdown::default();
        let mut loss_acc: Option<Tx> = None;

        let global_value = |fwd: &mut Forward<'_>,
                                cache: &mut BTreeMap<(usize, usize), EncGatOutput>,
                                g: usize|
         -> Result<Tx> {
            let mut embs = Vec::with_capacity(n_ports);
            for ppos in 0..n_ports {
                embs.push(embed_cached(fwd, cache, episode, g, ppos)?.center);
            }
            let stack = fwd.pt.tape.concat_rows(&embs)?;
            let mean = fwd.pt.tape.mean_rows(stack);
            let v = fwd.critic_value(mean, CriticKind::Global)?;
            fwd.pt.tape.pick(v, 0, 0)
        };

        for g in start..end {
            let group = &episode.groups[g];
            let v_cur = global_value(&mut fwd, &mut cache, g)?;
            let mut adv = fwd.pt.tape.scalar(group.global_return);
            if !group.terminal {
                let v_next = global_value(&mut fwd, &mut cache, g + 1)?;
                let discounted = fwd.pt.tape.scale(v_next, weights.gamma.powi(group.k as i32));
                adv = fwd.pt.tape.add(adv, discounted)?;
            }
            let adv = fwd.pt.tape.sub(adv, v_cur)?;
            let delta_g = fwd.pt.tape.square(adv);
            let sg_adv = fwd.pt.tape.stop_gradient(adv);

            // joint policy term over all agents acting this tick
            let mut logp_sum: Option<Tx> = None;
            let mut plogp_sum: Option<Tx> = None;
            for &d in &group.decisions {
                let tr = &episode.transitions[d];
                let out = embed_cached(&mut fwd, &mut cache, episode, g, tr.ppos)?;
                let (logp, plogp) = joint_logp(&mut fwd, &out, tr, want_entropy)?;
                logp_sum = Some(match logp_sum {
                    None => logp,
                    Some(acc) => fwd.pt.tape.add(acc, logp)?,
                });
                if let Some(pl) = plogp {
                    plogp_sum = Some(match plogp_sum {
                        None => pl,
                        Some(acc) => fwd.pt.tape.add(acc, pl)?,
                    });
                }
            }
            let logp_sum = logp_sum.expect("group without decisions");
            let prod = fwd.pt.tape.mul(logp_sum, sg_adv)?;
            let phi = fwd.pt.tape.scale(prod, -1.0);

            chunk_totals.critic_global += fwd.pt.tape.item(delta_g);
            chunk_totals.actor += fwd.pt.tape.item(phi);

            let weighted_g = fwd.pt.tape.scale(delta_g, weights.global_critic);
            let mut contrib = fwd.pt.tape.add(weighted_g, phi)?;

            if weights.local_critic > 0.0 {
                for &d in &group.decisions {
                    let tr = &episode.transitions[d];
                    let adv_loc =
                        local_advantage_tx(&mut fwd, &mut cache, episode, tr, weights.gamma)?;
                    let delta_loc = fwd.pt.tape.square(adv_loc);
                    chunk_totals.critic_local += fwd.pt.tape.item(delta_loc);
                    let weighted = fwd.pt.tape.scale(delta_loc, weights.local_critic);
                    contrib = fwd.pt.tape.add(contrib, weighted)?;
                }
            }
            if let Some(pl) = plogp_sum {
                chunk_totals.entropy -= fwd.pt.tape.item(pl);
                let bonus = fwd.pt.tape.scale(pl, weights.entropy);
                contrib = fwd.pt.tape.add(contrib, bonus)?;
            }
            loss_acc = Some(match loss_acc {
                None => contrib,
                Some(acc) => fwd.pt.tape.add(acc, contrib)?,
            });
        }

        let loss = loss_acc.expect("non-empty chunk");
        chunk_totals.total = fwd.pt.tape.item(loss);
        let grads = fwd.backward_params(loss)?;
        drop(fwd);
        for (name, grad) in grads {
            params.get_mut(&name)?.accumulate_grad(&grad);
        }
        totals.absorb(chunk_totals);
        start = end;
    }
    Ok(totals)
}

/// One full pre-training update: gradients from [`pretrain_loss`], clipped
/// by global norm, applied by Adam.
pub fn pretrain_update(
    params: &mut ParameterSet,
    episode: &EpisodeRecord,
    net: &NetConfig,
    decoder_only: bool,
    weights: &LossWeights,
    opt: &mut AdamState,
    grad_clip: f64,
) -> Result<LossBreakdown> {
    params.ensure_grads();
    let breakdown = pretrain_loss(params, episode, net, decoder_only, weights)?;
    clip_global_norm(params, grad_clip);
    adam_step(params, opt)?;
    Ok(breakdown)
}

/// One full fine-tuning update.
pub fn finetune_update(
    params: &mut ParameterSet,
    episode: &EpisodeRecord,
    net: &NetConfig,
    decoder_only: bool,
    weights: &LossWeights,
    opt: &mut AdamState,
    grad_clip: f64,
) -> Result<LossBreakdown> {
    params.ensure_grads();
    let breakdown = finetune_loss(params, episode, net, decoder_only, weights)?;
    clip_global_norm(params, grad_clip);
    adam_step(params, opt)?;
    Ok(breakdown)
}
