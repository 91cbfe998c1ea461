//! Forward passes: temporal attention, encoder/decoder blocks, headers.
//!
//! Attention reductions over neighbors are computed in a canonical row order
//! (rows sorted by content before the block, un-sorted after), so encoder
//! outputs are bit-exactly equivariant and decoder outputs bit-exactly
//! invariant under any permutation of the neighbor rows.

use std::cmp::Ordering;

use crate::autodiff::tape::ParamTape;
use crate::autodiff::{ParameterSet, Tensor, Tx};
use crate::encgat::{CriticKind, EdgeType, NetConfig};
use crate::error::{Error, Result};
use crate::obs::HeteroObservation;
use crate::sim::{PortId, VesselId};

/// Vertex types of the interaction graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexKind {
    Port,
    Vessel,
}

impl VertexKind {
    fn input_prefix(self) -> &'static str {
        match self {
            VertexKind::Port => "input.port.",
            VertexKind::Vessel => "input.vessel.",
        }
    }
}

/// Result of one graph forward pass.
#[derive(Clone)]
pub struct EncGatOutput {
    /// Final center embedding, [1 × d_model].
    pub center: Tx,
    /// Per-edge-type aggregates of the last block.
    pub per_type: Vec<(EdgeType, Tx)>,
    /// Encoder-refined embeddings of the vessel neighbors.
    pub vessel_rows: Vec<(VesselId, Tx)>,
}

/// One forward context: a tape bound to a parameter set plus the network
/// configuration.
pub struct Forward<'p> {
    pub pt: ParamTape<'p>,
    cfg: NetConfig,
    decoder_only: bool,
}

fn sort_rows_perm(values: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.sort_by(|&a, &b| {
        let ra = &values[a * cols..(a + 1) * cols];
        let rb = &values[b * cols..(b + 1) * cols];
        for (x, y) in ra.iter().zip(rb) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    idx
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParameterSet, cfg: &NetConfig) -> Self {
        Forward {
            pt: ParamTape::new(params),
            cfg: cfg.clone(),
            decoder_only: false,
        }
    }

    /// Ablation variant: neighbor rows go straight to the decoder attention.
    pub fn decoder_only(params: &'p ParameterSet, cfg: &NetConfig) -> Self {
        Forward {
            pt: ParamTape::new(params),
            cfg: cfg.clone(),
            decoder_only: true,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn linear(&mut self, x: Tx, prefix: &str, w: &str, b: &str) -> Result<Tx> {
        let w = self.pt.p(&format!("{prefix}{w}"))?;
        let b = self.pt.p(&format!("{prefix}{b}"))?;
        let xw = self.pt.tape.matmul(x, w)?;
        self.pt.tape.add_row(xw, b)
    }

    fn layer_norm(&mut self, x: Tx, prefix: &str) -> Result<Tx> {
        let gain = self.pt.p(&format!("{prefix}.gain"))?;
        let bias = self.pt.p(&format!("{prefix}.bias"))?;
        self.pt.tape.layer_norm(x, gain, bias)
    }

    fn attention_single(&mut self, q: Tx, k: Tx, v: Tx) -> Result<Tx> {
        let dk = *self.pt.tape.shape(k).last().unwrap();
        let scores = self.pt.tape.matmul_transpose_b(q, k)?;
        let scaled = self.pt.tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = self.pt.tape.softmax_rows(scaled)?;
        self.pt.tape.matmul(weights, v)
    }

    /// Scaled dot-product attention, split over `heads` column slices.
    fn attention(&mut self, q: Tx, k: Tx, v: Tx) -> Result<Tx> {
        let heads = self.cfg.heads;
        if heads == 1 {
            return self.attention_single(q, k, v);
        }
        let d = *self.pt.tape.shape(q).last().unwrap();
        let dh = d / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qs = self.pt.tape.slice_cols(q, h * dh, dh)?;
            let ks = self.pt.tape.slice_cols(k, h * dh, dh)?;
            let vs = self.pt.tape.slice_cols(v, h * dh, dh)?;
            parts.push(self.attention_single(qs, ks, vs)?);
        }
        self.pt.tape.concat_last_dim(&parts)
    }

    /// Attention with query/key/value projections looked up under `prefix`.
    fn projected_attention(&mut self, prefix: &str, q_in: Tx, kv_in: Tx) -> Result<Tx> {
        let wq = self.pt.p(&format!("{prefix}.wq"))?;
        let wk = self.pt.p(&format!("{prefix}.wk"))?;
        let wv = self.pt.p(&format!("{prefix}.wv"))?;
        let q = self.pt.tape.matmul(q_in, wq)?;
        let k = self.pt.tape.matmul(kv_in, wk)?;
        let v = self.pt.tape.matmul(kv_in, wv)?;
        self.attention(q, k, v)
    }

    fn feedforward(&mut self, x: Tx, prefix: &str) -> Result<Tx> {
        let h = self.linear(x, &format!("{prefix}.ff."), "w1", "b1")?;
        let r = self.pt.tape.relu(h);
        self.linear(r, &format!("{prefix}.ff."), "w2", "b2")
    }

    /// Lifts a vertex's feature window into model width and attends over it
    /// with the newest row as the query. Rows must be ordered oldest→newest
    /// and there must be exactly `n_lookback` of them (zero-padded upstream).
    pub fn temporal_attention(&mut self, window: &Tensor, kind: VertexKind) -> Result<Tx> {
        if window.rows() != self.cfg.n_lookback {
            return Err(Error::contract(format!(
                "temporal_attention: window has {} rows, configured lookback is {}",
                window.rows(),
                self.cfg.n_lookback
            )));
        }
        let win = self.pt.input(window);
        let lifted = self.linear(win, kind.input_prefix(), "w", "b")?;
        let rows = window.rows();
        let query = self.pt.tape.gather_rows(lifted, &[rows - 1])?;
        self.projected_attention("temporal", query, lifted)
    }

    /// Encoder of one block for one edge type: neighbor self-attention with
    /// residual + layer norm, then a two-layer feedforward with residual +
    /// layer norm. Output rows correspond to input rows.
    pub fn encode_neighbors(&mut self, x: Tx, edge: EdgeType, block: usize) -> Result<Tx> {
        let prefix = format!("blk{block}.{}.enc", edge.key());
        let (rows, cols) = (
            self.pt.tape.shape(x)[0],
            *self.pt.tape.shape(x).last().unwrap(),
        );
        let perm = sort_rows_perm(self.pt.tape.values(x), rows, cols);
        let sorted = if is_identity(&perm) {
            x
        } else {
            self.pt.tape.gather_rows(x, &perm)?
        };

        let att = self.projected_attention(&prefix, sorted, sorted)?;
        let res1 = self.pt.tape.add(att, sorted)?;
        let normed = self.layer_norm(res1, &format!("{prefix}.ln1"))?;
        let ff = self.feedforward(normed, &prefix)?;
        let res2 = self.pt.tape.add(normed, ff)?;
        let out = self.layer_norm(res2, &format!("{prefix}.ln2"))?;

        if is_identity(&perm) {
            Ok(out)
        } else {
            self.pt.tape.gather_rows(out, &inverse_perm(&perm))
        }
    }

    /// Decoder of one block for one edge type: attention with the center
    /// vertex (expanded to neighbor count) as query over the encoded
    /// neighbors, residual + norm against the encoded rows, feedforward,
    /// and a final mean squeeze back to a single row.
    pub fn decode_aggregate(
        &mut self,
        center: Tx,
        encoded: Tx,
        edge: EdgeType,
        block: usize,
    ) -> Result<Tx> {
        let prefix = format!("blk{block}.{}.dec", edge.key());
        let (rows, cols) = (
            self.pt.tape.shape(encoded)[0],
            *self.pt.tape.shape(encoded).last().unwrap(),
        );
        let perm = sort_rows_perm(self.pt.tape.values(encoded), rows, cols);
        let sorted = if is_identity(&perm) {
            encoded
        } else {
            self.pt.tape.gather_rows(encoded, &perm)?
        };

        let expanded = self.pt.tape.gather_rows(center, &vec![0; rows])?;
        let att = self.projected_attention(&prefix, expanded, sorted)?;
        let res1 = self.pt.tape.add(att, sorted)?;
        let normed = self.layer_norm(res1, &format!("{prefix}.ln1"))?;
        let ff = self.feedforward(normed, &prefix)?;
        let res2 = self.pt.tape.add(normed, ff)?;
        let out = self.layer_norm(res2, &format!("{prefix}.ln2"))?;
        Ok(self.pt.tape.mean_rows(out))
    }

    /// Full graph pass for one observation.
    pub fn encgat_forward(&mut self, obs: &HeteroObservation) -> Result<EncGatOutput> {
        let mut center = self.temporal_attention(&obs.center_window, VertexKind::Port)?;

        let mut port_embs = Vec::with_capacity(obs.port_neighbors.len());
        for (_, window) in &obs.port_neighbors {
            port_embs.push(self.temporal_attention(window, VertexKind::Port)?);
        }
        let mut vessel_embs = Vec::with_capacity(obs.vessel_neighbors.len());
        for (_, window) in &obs.vessel_neighbors {
            vessel_embs.push(self.temporal_attention(window, VertexKind::Vessel)?);
        }

        let mut x_pp = if port_embs.is_empty() {
            None
        } else {
            Some(self.pt.tape.concat_rows(&port_embs)?)
        };
        let mut x_pv = if vessel_embs.is_empty() {
            None
        } else {
            Some(self.pt.tape.concat_rows(&vessel_embs)?)
        };

        let mut per_type = Vec::new();
        for block in 0..self.cfg.blocks {
            per_type.clear();
            let mut parts = Vec::with_capacity(EdgeType::ALL.len());
            for edge in EdgeType::ALL {
                let slot = match edge {
                    EdgeType::PortPort => &mut x_pp,
                    EdgeType::PortVessel => &mut x_pv,
                };
                let aggregate = match *slot {
                    None => self.pt.p(&format!("null.{}", edge.key()))?,
                    Some(x) => {
                        let encoded = if self.decoder_only {
                            x
                        } else {
                            self.encode_neighbors(x, edge, block)?
                        };
                        *slot = Some(encoded);
                        self.decode_aggregate(center, encoded, edge, block)?
                    }
                };
                per_type.push((edge, aggregate));
                parts.push(aggregate);
            }
            let cat = self.pt.tape.concat_last_dim(&parts)?;
            let projected = self.linear(cat, &format!("blk{block}.proj."), "w", "b")?;
            center = self.pt.tape.add(center, projected)?;
        }

        let mut vessel_rows = Vec::with_capacity(obs.vessel_neighbors.len());
        if let Some(x) = x_pv {
            for (i, (vid, _)) in obs.vessel_neighbors.iter().enumerate() {
                vessel_rows.push((*vid, self.pt.tape.gather_rows(x, &[i])?));
            }
        }
        Ok(EncGatOutput {
            center,
            per_type,
            vessel_rows,
        })
    }

    /// Actor header over the concatenated (port, current vessel) embeddings:
    /// one residual fully-connected layer, a logit layer, and a masked
    /// softmax over the action space. Works off the shared header unless the
    /// parameter set carries per-agent headers.
    pub fn actor_distribution(
        &mut self,
        out: &EncGatOutput,
        agent: PortId,
        vessel: VesselId,
        feasible: &[bool],
    ) -> Result<Tx> {
        let vemb = out
            .vessel_rows
            .iter()
            .find(|(vid, _)| *vid == vessel)
            .map(|(_, tx)| *tx)
            .ok_or_else(|| {
                Error::contract(format!(
                    "actor_distribution: vessel {vessel} is not a neighbor of {agent}"
                ))
            })?;
        let prefix = if self.pt.params().contains("actor.w1") {
            "actor.".to_string()
        } else {
            format!("actor.agent{}.", agent.0)
        };
        let u0 = self.pt.tape.concat_last_dim(&[out.center, vemb])?;
        let pre = self.linear(u0, &prefix, "w1", "b1")?;
        let act = self.pt.tape.relu(pre);
        let u1 = self.pt.tape.add(act, u0)?;
        let logits = self.linear(u1, &prefix, "w2", "b2")?;
        self.pt.tape.masked_softmax_rows(logits, feasible)
    }

    /// Scalar state value from an embedding: one residual fully-connected
    /// layer then a linear head. Local critics take one agent embedding; the
    /// global critic takes the mean of all agent embeddings.
    pub fn critic_value(&mut self, embedding: Tx, kind: CriticKind) -> Result<Tx> {
        let prefix = format!("critic.{}.", kind.key());
        let pre = self.linear(embedding, &prefix, "w1", "b1")?;
        let act = self.pt.tape.relu(pre);
        let h = self.pt.tape.add(act, embedding)?;
        self.linear(h, &prefix, "w2", "b2")
    }

    /// Reverse sweep from `loss`, accumulating parameter gradients into `out`.
    pub fn backward_into(&mut self, loss: Tx, out: &mut ParameterSet) -> Result<()> {
        self.pt.backward_into(loss, out)
    }

    /// Reverse sweep returning per-parameter gradients, for callers that
    /// hold the parameter set mutably elsewhere.
    pub fn backward_params(&mut self, loss: Tx) -> Result<Vec<(String, Vec<f64>)>> {
        self.pt.backward_params(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::encgat::params::init_params_global;
    use crate::encgat::{init_params, NetConfig};
    use crate::obs::HeteroObservation;
    use crate::sim::{PortId, VesselId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            d_model: 4,
            ff_width: 6,
            heads: 1,
            blocks: 2,
            n_lookback: 3,
            port_input_width: 5,
            vessel_input_width: 4,
            action_count: 22,
        }
    }

    fn rand_window(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], values).unwrap()
    }

    fn toy_obs(rng: &mut ChaCha8Rng, cfg: &NetConfig, ports: usize, vessels: usize) -> HeteroObservation {
        HeteroObservation {
            center: PortId(0),
            current_vessel: if vessels > 0 { Some(VesselId(0)) } else { None },
            tick: 0,
            center_window: rand_window(rng, cfg.n_lookback, cfg.port_input_width),
            port_neighbors: (0..ports)
                .map(|i| {
                    (
                        PortId(i as u32 + 1),
                        rand_window(rng, cfg.n_lookback, cfg.port_input_width),
                    )
                })
                .collect(),
            vessel_neighbors: (0..vessels)
                .map(|i| {
                    (
                        VesselId(i as u32),
                        rand_window(rng, cfg.n_lookback, cfg.vessel_input_width),
                    )
                })
                .collect(),
            feasible: HeteroObservation::all_feasible(),
        }
    }

    // plain-vector oracles for the hand-stepped checks
    fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (m.shape[0], m.shape[1]);
        let mut out = vec![0.0; cols];
        for j in 0..cols {
            for i in 0..rows {
                out[j] += x[i] * m.values[i * cols + j];
            }
        }
        out
    }

    fn ln_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        x.iter()
            .zip(gain.iter().zip(bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }

    #[test]
    fn temporal_attention_identical_rows_equals_single_key_value() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = init_params(&cfg, &mut rng, None);

        let row: Vec<f64> = (0..cfg.port_input_width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let window =
            Tensor::from_rows(&vec![row.clone(); cfg.n_lookback]).unwrap();

        let mut fwd = Forward::new(&params, &cfg);
        let out = fwd.temporal_attention(&window, VertexKind::Port).unwrap();

        // identical keys make the attention weights uniform 1/n, so the
        // output is the (single distinct) lifted value row through W_v
        let w = params.get("input.port.w").unwrap();
        let b = params.get("input.port.b").unwrap();
        let mut lifted = mat_vec(w, &row);
        for (l, bv) in lifted.iter_mut().zip(&b.values) {
            *l += bv;
        }
        let expected = mat_vec(params.get("temporal.wv").unwrap(), &lifted);
        for (got, want) in fwd.pt.tape.values(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn temporal_attention_single_row_window() {
        let mut cfg = tiny_cfg();
        cfg.n_lookback = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&cfg, &mut rng, None);
        let window = rand_window(&mut rng, 1, cfg.port_input_width);

        let mut fwd = Forward::new(&params, &cfg);
        let out = fwd.temporal_attention(&window, VertexKind::Port).unwrap();

        let w = params.get("input.port.w").unwrap();
        let b = params.get("input.port.b").unwrap();
        let mut lifted = mat_vec(w, &window.values);
        for (l, bv) in lifted.iter_mut().zip(&b.values) {
            *l += bv;
        }
        let expected = mat_vec(params.get("temporal.wv").unwrap(), &lifted);
        for (got, want) in fwd.pt.tape.values(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_attention_rejects_short_window() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(&cfg, &mut rng, None);
        let window = rand_window(&mut rng, cfg.n_lookback - 1, cfg.port_input_width);
        let mut fwd = Forward::new(&params, &cfg);
        assert!(fwd.temporal_attention(&window, VertexKind::Port).is_err());
    }

    #[test]
    fn encoder_single_neighbor_matches_hand_computation() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut fwd = Forward::new(&params, &cfg);
        let tx = fwd.pt.tape.constant(vec![1, d], x.clone());
        let out = fwd.encode_neighbors(tx, EdgeType::PortPort, 0).unwrap();

        // single neighbor: the self-attention weight is 1, so a = x·Wv
        let p = |n: &str| params.get(n).unwrap();
        let a = mat_vec(p("blk0.pp.enc.wv"), &x);
        let sum1: Vec<f64> = a.iter().zip(&x).map(|(l, r)| l + r).collect();
        let k = ln_row(
            &sum1,
            &p("blk0.pp.enc.ln1.gain").values,
            &p("blk0.pp.enc.ln1.bias").values,
        );
        let mut hidden = mat_vec(p("blk0.pp.enc.ff.w1"), &k);
        for (h, b) in hidden.iter_mut().zip(&p("blk0.pp.enc.ff.b1").values) {
            *h = (*h + *b).max(0.0);
        }
        let mut z = mat_vec(p("blk0.pp.enc.ff.w2"), &hidden);
        for (zv, b) in z.iter_mut().zip(&p("blk0.pp.enc.ff.b2").values) {
            *zv += b;
        }
        let sum2: Vec<f64> = k.iter().zip(&z).map(|(l, r)| l + r).collect();
        let o = ln_row(
            &sum2,
            &p("blk0.pp.enc.ln2.gain").values,
            &p("blk0.pp.enc.ln2.bias").values,
        );
        for (got, want) in fwd.pt.tape.values(out).iter().zip(&o) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn encoder_is_bit_exactly_permutation_equivariant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;

        for case in 0..50 {
            let mut case_rng = ChaCha8Rng::seed_from_u64(1000 + case);
            let n = case_rng.gen_range(2..7);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| case_rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, case_rng.gen_range(0..=i));
            }
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

            let run = |rows: &[Vec<f64>]| -> Vec<f64> {
                let mut fwd = Forward::new(&params, &cfg);
                let x = fwd
                    .pt
                    .tape
                    .constant(vec![rows.len(), d], rows.concat());
                let out = fwd.encode_neighbors(x, EdgeType::PortVessel, 1).unwrap();
                fwd.pt.tape.values(out).to_vec()
            };
            let base = run(&rows);
            let shuffled = run(&permuted);
            for (r, &src) in perm.iter().enumerate() {
                let got = &shuffled[r * d..(r + 1) * d];
                let want = &base[src * d..(src + 1) * d];
                assert_eq!(
                    got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    want.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "case {case}: row {r} differs"
                );
            }
        }
    }

    #[test]
    fn encoder_duplicated_rows_produce_duplicated_outputs() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut fwd = Forward::new(&params, &cfg);
        let x = fwd.pt.tape.constant(
            vec![3, d],
            [row.clone(), other, row.clone()].concat(),
        );
        let out = fwd.encode_neighbors(x, EdgeType::PortPort, 0).unwrap();
        let v = fwd.pt.tape.values(out);
        assert_eq!(
            v[0..d].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v[2 * d..3 * d].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn decoder_single_neighbor_ignores_query() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;
        let neighbor: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |center: Vec<f64>| -> Vec<f64> {
            let mut fwd = Forward::new(&params, &cfg);
            let c = fwd.pt.tape.constant(vec![1, d], center);
            let o = fwd.pt.tape.constant(vec![1, d], neighbor.clone());
            let h = fwd.decode_aggregate(c, o, EdgeType::PortPort, 0).unwrap();
            fwd.pt.tape.values(h).to_vec()
        };
        let a = run((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = run((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_is_bit_exactly_permutation_invariant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;

        for case in 0..50 {
            let mut case_rng = ChaCha8Rng::seed_from_u64(2000 + case);
            let n = case_rng.gen_range(2..7);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| case_rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let center: Vec<f64> = (0..d).map(|_| case_rng.gen_range(-1.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, case_rng.gen_range(0..=i));
            }
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

            let run = |rows: &[Vec<f64>]| -> Vec<u64> {
                let mut fwd = Forward::new(&params, &cfg);
                let c = fwd.pt.tape.constant(vec![1, d], center.clone());
                let o = fwd
                    .pt
                    .tape
                    .constant(vec![rows.len(), d], rows.concat());
                let h = fwd.decode_aggregate(c, o, EdgeType::PortVessel, 1).unwrap();
                fwd.pt.tape.values(h).iter().map(|v| v.to_bits()).collect()
            };
            assert_eq!(run(&rows), run(&permuted), "case {case}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = init_params(&cfg, &mut rng, None);
        let obs = toy_obs(&mut rng, &cfg, 2, 2);

        let run = || -> Vec<u64> {
            let mut fwd = Forward::new(&params, &cfg);
            let out = fwd.encgat_forward(&obs).unwrap();
            fwd.pt
                .tape
                .values(out.center)
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|&bits| f64::from_bits(bits).is_finite()));
    }

    #[test]
    fn isolated_vertex_uses_null_embeddings() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;

        // zero features → zero temporal embedding, so the center embedding
        // reduces to the sum of the blocks' projections of the concatenated
        // per-type null embeddings
        let mut obs = toy_obs(&mut rng, &cfg, 0, 0);
        obs.center_window = Tensor::zeros(vec![cfg.n_lookback, cfg.port_input_width]);
        obs.current_vessel = None;

        let mut fwd = Forward::new(&params, &cfg);
        let out = fwd.encgat_forward(&obs).unwrap();

        let p = |n: &str| params.get(n).unwrap();
        let bias = &p("input.port.b").values;
        let lifted_zero = bias.clone();
        let x0 = mat_vec(p("temporal.wv"), &lifted_zero);
        let cat: Vec<f64> = [p("null.pp").values.clone(), p("null.pv").values.clone()].concat();
        let mut expected = x0;
        for block in 0..cfg.blocks {
            let mut proj = mat_vec(p(&format!("blk{block}.proj.w")), &cat);
            for (pv, b) in proj.iter_mut().zip(&p(&format!("blk{block}.proj.b")).values) {
                *pv += b;
            }
            for (e, pv) in expected.iter_mut().zip(&proj) {
                *e += pv;
            }
        }
        for (got, want) in fwd.pt.tape.values(out.center).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert_eq!(fwd.pt.tape.values(out.center).len(), d);
    }

    #[test]
    fn embedding_width_constant_across_neighbor_mixes() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = init_params(&cfg, &mut rng, None);
        for (ports, vessels) in [(0, 0), (1, 0), (0, 3), (4, 2)] {
            let obs = toy_obs(&mut rng, &cfg, ports, vessels);
            let mut fwd = Forward::new(&params, &cfg);
            let out = fwd.encgat_forward(&obs).unwrap();
            assert_eq!(fwd.pt.tape.shape(out.center), &[1, cfg.d_model]);
            for (_, h) in &out.per_type {
                assert_eq!(fwd.pt.tape.shape(*h), &[1, cfg.d_model]);
            }
        }
    }

    #[test]
    fn actor_masks_and_normalizes() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = init_params(&cfg, &mut rng, None);
        let mut obs = toy_obs(&mut rng, &cfg, 1, 1);

        let mut fwd = Forward::new(&params, &cfg);
        let out = fwd.encgat_forward(&obs).unwrap();
        let dist = fwd.actor_distribution(&out, obs.center, obs.current_vessel.unwrap(), &obs.feasible).unwrap();
        let probs = fwd.pt.tape.values(dist);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
        assert!(probs.iter().all(|&p| p >= 0.0));

        obs.feasible = vec![false; 22];
        obs.feasible[7] = true;
        let mut fwd = Forward::new(&params, &cfg);
        let out = fwd.encgat_forward(&obs).unwrap();
        let dist = fwd.actor_distribution(&out, obs.center, obs.current_vessel.unwrap(), &obs.feasible).unwrap();
        let probs = fwd.pt.tape.values(dist);
        assert_eq!(probs[7], 1.0);
        assert!(probs.iter().enumerate().all(|(i, &p)| i == 7 || p == 0.0));
    }

    #[test]
    fn critic_zero_embedding_zero_header_gives_zero() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = init_params_global(&cfg, &mut rng, None);
        for name in ["critic.local.w1", "critic.local.b1", "critic.local.w2", "critic.local.b2"] {
            let t = params.get_mut(name).unwrap();
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut fwd = Forward::new(&params, &cfg);
        let zero = fwd.pt.tape.constant(vec![1, cfg.d_model], vec![0.0; cfg.d_model]);
        let v = fwd.critic_value(zero, CriticKind::Local).unwrap();
        assert_eq!(fwd.pt.tape.item(v), 0.0);
    }

    #[test]
    fn local_and_global_headers_agree_with_identical_weights() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = init_params_global(&cfg, &mut rng, None);
        for suffix in ["w1", "b1", "w2", "b2"] {
            let local = params.get(&format!("critic.local.{suffix}")).unwrap().clone();
            let global = params.get_mut(&format!("critic.global.{suffix}")).unwrap();
            global.values = local.values;
        }
        let emb: Vec<f64> = (0..cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut fwd = Forward::new(&params, &cfg);
        let e = fwd.pt.tape.constant(vec![1, cfg.d_model], emb);
        let vl = fwd.critic_value(e, CriticKind::Local).unwrap();
        let vg = fwd.critic_value(e, CriticKind::Global).unwrap();
        assert_eq!(fwd.pt.tape.item(vl), fwd.pt.tape.item(vg));
    }

    #[test]
    fn decoder_only_matches_full_network_for_identity_encoder() {
        // With Wv = I, zero feedforward, and unit-gain/zero-bias norms, the
        // encoder maps any row-normalized input x to LN(2x) = x up to the
        // variance epsilon, so on row-normalized inputs the two variants
        // agree to ~1e-5 and differ once the encoder gets random weights.
        let mut cfg = tiny_cfg();
        cfg.blocks = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;
        for edge in EdgeType::ALL {
            let prefix = format!("blk0.{}.enc", edge.key());
            let wv = params.get_mut(&format!("{prefix}.wv")).unwrap();
            wv.values.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                wv.values[i * d + i] = 1.0;
            }
            for name in ["ff.w1", "ff.b1", "ff.w2", "ff.b2"] {
                params
                    .get_mut(&format!("{prefix}.{name}"))
                    .unwrap()
                    .values
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }

        // a row with zero mean and unit population variance
        let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        row.iter_mut().for_each(|v| *v /= var.sqrt());

        let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |params: &ParameterSet, decoder_only: bool| -> Vec<f64> {
            let mut fwd = if decoder_only {
                Forward::decoder_only(params, &cfg)
            } else {
                Forward::new(params, &cfg)
            };
            let c = fwd.pt.tape.constant(vec![1, d], center.clone());
            let x = fwd.pt.tape.constant(vec![1, d], row.clone());
            let encoded = if decoder_only {
                x
            } else {
                fwd.encode_neighbors(x, EdgeType::PortPort, 0).unwrap()
            };
            let h = fwd
                .decode_aggregate(c, encoded, EdgeType::PortPort, 0)
                .unwrap();
            fwd.pt.tape.values(h).to_vec()
        };

        let full = run(&params, false);
        let dec_only = run(&params, true);
        for (a, b) in full.iter().zip(&dec_only) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        // random encoder weights break the agreement
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let noisy = init_params(&cfg, &mut rng2, None);
        let full_noisy = run(&noisy, false);
        let dec_noisy = run(&noisy, true);
        let diff: f64 = full_noisy
            .iter()
            .zip(&dec_noisy)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "expected the variants to differ, diff = {diff}");
    }

    #[test]
    fn decoder_only_smoke_on_toy_graph() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = init_params(&cfg, &mut rng, None);
        let obs = toy_obs(&mut rng, &cfg, 3, 2);
        let mut fwd = Forward::decoder_only(&params, &cfg);
        let out = fwd.encgat_forward(&obs).unwrap();
        assert!(fwd.pt.tape.values(out.center).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn multi_head_attention_still_normalizes() {
        let mut cfg = tiny_cfg();
        cfg.heads = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = init_params(&cfg, &mut rng, None);
        let obs = toy_obs(&mut rng, &cfg, 2, 1);
        let mut fwd = Forward::new(&params, &cfg);
        let out = fwd.encgat_forward(&obs).unwrap();
        let dist = fwd.actor_distribution(&out, obs.center, obs.current_vessel.unwrap(), &obs.feasible).unwrap();
        let sum: f64 = fwd.pt.tape.values(dist).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }

    /// Whole-network gradient check on a 3-port, 2-vessel toy graph against
    /// central finite differences, probing parameters from every group.
    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = init_params_global(&cfg, &mut rng, None);
        let obs = toy_obs(&mut rng, &cfg, 3, 2);

        let loss_fn = |params: &ParameterSet| -> (f64, ParameterSet) {
            let mut fwd = Forward::new(params, &cfg);
            let out = fwd.encgat_forward(&obs).unwrap();
            let dist = fwd.actor_distribution(&out, obs.center, obs.current_vessel.unwrap(), &obs.feasible).unwrap();
            let picked = fwd.pt.tape.pick(dist, 0, 3).unwrap();
            let logp = fwd.pt.tape.log(picked).unwrap();
            let v = fwd.critic_value(out.center, CriticKind::Local).unwrap();
            let vsq = fwd.pt.tape.square(v);
            let vsq_flat = fwd.pt.tape.sum(vsq);
            let vg = fwd.critic_value(out.center, CriticKind::Global).unwrap();
            let vg_flat = fwd.pt.tape.sum(vg);
            let combined = fwd.pt.tape.add(logp, vsq_flat).unwrap();
            let total = fwd.pt.tape.add(combined, vg_flat).unwrap();
            let loss = fwd.pt.tape.sum(total);
            let mut grads = params.clone();
            grads.zero_grads();
            fwd.backward_into(loss, &mut grads).unwrap();
            (fwd.pt.tape.item(loss), grads)
        };

        let (_, grads) = loss_fn(&params);

        // probe a spread of parameters, a few elements each
        let probes = [
            "input.port.w",
            "input.vessel.w",
            "temporal.wq",
            "blk0.pp.enc.wv",
            "blk0.pv.dec.wq",
            "blk1.pp.enc.ff.w1",
            "blk1.pv.dec.ln2.gain",
            "blk1.proj.w",
            "actor.w1",
            "critic.local.w2",
            "critic.global.w1",
            "null.pp",
        ];
        let mut entries = Vec::new();
        let mut pick_rng = ChaCha8Rng::seed_from_u64(18);
        for name in probes {
            let g = grads.get(name).unwrap();
            let grad = g.grad.clone().unwrap_or_else(|| vec![0.0; g.numel()]);
            for _ in 0..2 {
                let idx = pick_rng.gen_range(0..g.numel());
                entries.push((name.to_string(), idx, grad[idx]));
            }
        }
        let mut f = |p: &ParameterSet| loss_fn(p).0;
        let err = gradcheck::max_error_params(&mut f, &params, &entries, gradcheck::DEFAULT_STEP);
        assert!(err < 1e-4, "max relative error {err}");
    }

    /// Gradients through the three standalone operations.
    #[test]
    fn component_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let params = init_params(&cfg, &mut rng, None);
        let d = cfg.d_model;
        let window = rand_window(&mut rng, cfg.n_lookback, cfg.port_input_width);
        let neighbors = rand_window(&mut rng, 3, d);
        let center = rand_window(&mut rng, 1, d);

        // temporal
        let temporal = |p: &ParameterSet| -> (f64, ParameterSet) {
            let mut fwd = Forward::new(p, &cfg);
            let out = fwd.temporal_attention(&window, VertexKind::Port).unwrap();
            let loss = fwd.pt.tape.sum(out);
            let mut grads = p.clone();
            grads.zero_grads();
            fwd.backward_into(loss, &mut grads).unwrap();
            (fwd.pt.tape.item(loss), grads)
        };
        // encoder + decoder chained
        let enc_dec = |p: &ParameterSet| -> (f64, ParameterSet) {
            let mut fwd = Forward::new(p, &cfg);
            let c = fwd.pt.input(&center);
            let x = fwd.pt.input(&neighbors);
            let o = fwd.encode_neighbors(x, EdgeType::PortPort, 0).unwrap();
            let h = fwd.decode_aggregate(c, o, EdgeType::PortPort, 0).unwrap();
            let loss = fwd.pt.tape.sum(h);
            let mut grads = p.clone();
            grads.zero_grads();
            fwd.backward_into(loss, &mut grads).unwrap();
            (fwd.pt.tape.item(loss), grads)
        };

        for (label, run, names) in [
            (
                "temporal",
                &temporal as &dyn Fn(&ParameterSet) -> (f64, ParameterSet),
                vec!["temporal.wk", "input.port.w", "temporal.wv"],
            ),
            (
                "enc_dec",
                &enc_dec,
                vec!["blk0.pp.enc.wq", "blk0.pp.dec.wv", "blk0.pp.dec.ff.w2"],
            ),
        ] {
            let (_, grads) = run(&params);
            let mut entries = Vec::new();
            let mut pick_rng = ChaCha8Rng::seed_from_u64(20);
            for name in names {
                let g = grads.get(name).unwrap();
                let grad = g.grad.clone().unwrap_or_else(|| vec![0.0; g.numel()]);
                for _ in 0..3 {
                    let idx = pick_rng.gen_range(0..g.numel());
                    entries.push((name.to_string(), idx, grad[idx]));
                }
            }
            let mut f = |p: &ParameterSet| run(p).0;
            let err =
                gradcheck::max_error_params(&mut f, &params, &entries, gradcheck::DEFAULT_STEP);
            assert!(err < 1e-4, "{label}: max relative error {err}");
        }
    }
}
