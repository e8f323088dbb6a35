//! Dynamic graph cell: a GRU whose gates use diffusion convolution over a
//! per-step adjacency built from the cell input.
//!
//! For input `I = x ‖ h` (`[B, N, D_in]`):
//!
//! ```text
//! G_e = softmax_rows(relu(ψ₁(I)_e · ψ₂(I)_eᵀ))          e = 1..m
//! w   = softmax(mean_nodes(φ₃(I)))                       [m + 1]
//! z   = σ(φ₄(I) · φ₅(I)ᵀ),  M = 1[z > 0.5]
//! D̂   = (Σ_e w_e G_e + w_{m+1} Â) ⊙ M
//! conv(X) = Σ_{k<K} D̂ᵏ X
//! r = σ(conv(x‖h) W_r + b_r)
//! u = σ(conv(x‖h) W_u + b_u)
//! C = tanh(conv(x‖r⊙h) W_C + b_c)
//! h' = u ⊙ h + (1 - u) ⊙ C
//! ```
//!
//! The threshold in `M` has no derivative; its backward pass is the
//! straight-through identity onto `z`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ablation variants, each a strict superset of the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Static normalized adjacency only.
    Static,
    /// Adds multi-head dynamic graphs, mixed with uniform weights.
    MultiGraph,
    /// Adds learned dynamic mixing weights.
    DynamicWeights,
    /// Adds the gated kernel mask.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Static,
        Variant::MultiGraph,
        Variant::DynamicWeights,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Static => "s",
            Variant::MultiGraph => "sm",
            Variant::DynamicWeights => "smd",
            Variant::Full => "full",
        }
    }

    pub fn has_dynamic_graphs(self) -> bool {
        self >= Variant::MultiGraph
    }

    pub fn has_dynamic_weights(self) -> bool {
        self >= Variant::DynamicWeights
    }

    pub fn has_gated_kernel(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Variant::Static),
            "sm" => Ok(Variant::MultiGraph),
            "smd" => Ok(Variant::DynamicWeights),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected s, sm, smd or full"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellConfig {
    pub n_nodes: usize,
    pub in_channels: usize,
    /// Hidden size `q`.
    pub hidden: usize,
    /// Per-head projection width `D_out`.
    pub head_dim: usize,
    /// Number of dynamic graphs `m`.
    pub heads: usize,
    /// Diffusion terms `K`.
    pub diffusion_steps: usize,
}

impl CellConfig {
    pub fn d_in(&self) -> usize {
        self.in_channels + self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_nodes", self.n_nodes),
            ("in_channels", self.in_channels),
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("diffusion_steps", self.diffusion_steps),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("cell {name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Learnable parameters of one cell. Optional groups are absent (not zeroed)
/// in variants that do not use them.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub psi: Option<(ParamId, ParamId)>,
    pub phi3: Option<ParamId>,
    pub gate: Option<(ParamId, ParamId)>,
    pub w_r: ParamId,
    pub w_u: ParamId,
    pub w_c: ParamId,
    pub b_r: ParamId,
    pub b_u: ParamId,
    pub b_c: ParamId,
}

fn param_shapes(cfg: &CellConfig, variant: Variant) -> Vec<(&'static str, Vec<usize>)> {
    let (d_in, q) = (cfg.d_in(), cfg.hidden);
    let mut shapes = Vec::new();
    if variant.has_dynamic_graphs() {
        shapes.push(("psi1", vec![d_in, cfg.head_dim * cfg.heads]));
        shapes.push(("psi2", vec![d_in, cfg.head_dim * cfg.heads]));
    }
    if variant.has_dynamic_weights() {
        shapes.push(("phi3", vec![d_in, cfg.heads + 1]));
    }
    if variant.has_gated_kernel() {
        shapes.push(("phi4", vec![d_in, cfg.head_dim]));
        shapes.push(("phi5", vec![d_in, cfg.head_dim]));
    }
    for name in ["w_r", "w_u", "w_c"] {
        shapes.push((name, vec![d_in, q]));
    }
    for name in ["b_r", "b_u", "b_c"] {
        shapes.push((name, vec![q]));
    }
    shapes
}

impl CellParams {
    /// Registers fresh parameters under `prefix`. Weight matrices are drawn
    /// from `U[-1/√D_in, 1/√D_in]`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &CellConfig,
        variant: Variant,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in param_shapes(cfg, variant) {
            let value = if shape.len() == 2 {
                Tensor::fan_in_uniform(rng, shape[0], shape[1])
            } else {
                Tensor::zeros(&shape)
            };
            store.add(format!("{prefix}.{name}"), value)?;
        }
        Self::lookup(store, prefix, cfg, variant)
    }

    /// Resolves parameters by name and checks their shapes.
    pub fn lookup(store: &ParamStore, prefix: &str, cfg: &CellConfig, variant: Variant) -> Result<Self> {
        let mut ids = alloc::collections::BTreeMap::new();
        for (name, shape) in param_shapes(cfg, variant) {
            let full = format!("{prefix}.{name}");
            let id = store
                .find(&full)
                .ok_or_else(|| Error::Config(format!("missing parameter {full}")))?;
            let got = store.get(id).value.shape();
            if got != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {full} has shape {got:?}, expected {shape:?}"
                )));
            }
            ids.insert(name, id);
        }
        let get = |n: &str| ids.get(n).copied();
        Ok(CellParams {
            psi: get("psi1").zip(get("psi2")),
            phi3: get("phi3"),
            gate: get("phi4").zip(get("phi5")),
            w_r: ids["w_r"],
            w_u: ids["w_u"],
            w_c: ids["w_c"],
            b_r: ids["b_r"],
            b_u: ids["b_u"],
            b_c: ids["b_c"],
        })
    }

    /// Names of every parameter a cell of `variant` owns.
    pub fn names(prefix: &str, cfg: &CellConfig, variant: Variant) -> Vec<String> {
        param_shapes(cfg, variant)
            .into_iter()
            .map(|(n, _)| format!("{prefix}.{n}"))
            .collect()
    }
}

/// How gated-kernel masks are produced across successive cell steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum MaskTrace {
    /// Compute the mask live with the straight-through backward.
    #[default]
    Live,
    /// Compute live and keep a copy of every mask, in step order.
    Record(Vec<Tensor>),
    /// Reuse previously recorded masks as constants.
    Replay { masks: Vec<Tensor>, cursor: usize },
}

/// Overrides used by diagnostics and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphControl {
    /// Replace the mixing weights with this fixed vector of length `m + 1`.
    pub force_weights: Option<Vec<f64>>,
    /// Replace the gated-kernel mask with all ones.
    pub force_all_ones_mask: bool,
    pub mask_trace: MaskTrace,
}

impl GraphControl {
    /// Freezes recorded masks for replay.
    pub fn into_replay(self) -> Self {
        let masks = match self.mask_trace {
            MaskTrace::Record(m) => m,
            MaskTrace::Replay { masks, .. } => masks,
            MaskTrace::Live => Vec::new(),
        };
        GraphControl {
            mask_trace: MaskTrace::Replay { masks, cursor: 0 },
            ..self
        }
    }
}

/// Tape handles of one step's fused adjacency.
#[derive(Debug, Clone, Copy)]
pub struct FusedAdjacency {
    /// `[B, m + 1, N, N]`: dynamic graphs followed by `Â`.
    pub graphs: Option<Var>,
    /// `[B, m + 1]`.
    pub weights: Option<Var>,
    /// `[B, N, N]` binary mask.
    pub mask: Option<Var>,
    /// `[B, N, N]` gate probabilities behind the mask.
    pub gate: Option<Var>,
    /// `[B, N, N]`.
    pub fused: Var,
}

/// `I = x ‖ h` along the feature axis.
pub fn build_input(tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
    tape.concat_last(&[x, h_prev])
}

/// `m` row-stochastic graphs `[B, N, N]` from `I: [B, N, D_in]`.
pub fn gen_dynamic_graphs(
    tape: &mut Tape,
    store: &ParamStore,
    input: Var,
    psi: (ParamId, ParamId),
    heads: usize,
) -> Result<Vec<Var>> {
    let w1 = tape.param(store, psi.0);
    let w2 = tape.param(store, psi.1);
    let p1 = tape.linear(input, w1, None)?;
    let p2 = tape.linear(input, w2, None)?;
    let width = *tape.shape(p1).last().unwrap();
    if !width.is_multiple_of(heads) {
        return Err(Error::shape(
            "gen_dynamic_graphs",
            format!("{width} features do not split into {heads} heads"),
        ));
    }
    let head_dim = width / heads;
    let axis = tape.shape(p1).len() - 1;
    (0..heads)
        .map(|e| {
            let a = tape.narrow(p1, axis, e * head_dim, head_dim)?;
            let b = tape.narrow(p2, axis, e * head_dim, head_dim)?;
            let scores = tape.bmm_nt(a, b)?;
            let scores = tape.relu(scores);
            Ok(tape.softmax_last(scores))
        })
        .collect()
}

/// Mixing weights `[B, m + 1]`: softmax of the node-averaged `φ₃(I)`.
pub fn dynamic_weights(tape: &mut Tape, store: &ParamStore, input: Var, phi3: ParamId) -> Result<Var> {
    let w = tape.param(store, phi3);
    let logits = tape.linear(input, w, None)?;
    let pooled = tape.mean_axis(logits, 1)?;
    Ok(tape.softmax_last(pooled))
}

/// Gate probabilities `z = σ(φ₄(I)·φ₅(I)ᵀ)` and the straight-through mask
/// `1[z > 0.5]`, both `[B, N, N]`.
pub fn gated_kernel(tape: &mut Tape, store: &ParamStore, input: Var, gate: (ParamId, ParamId)) -> Result<(Var, Var)> {
    let w4 = tape.param(store, gate.0);
    let w5 = tape.param(store, gate.1);
    let a = tape.linear(input, w4, None)?;
    let b = tape.linear(input, w5, None)?;
    let logits = tape.bmm_nt(a, b)?;
    let z = tape.sigmoid(logits);
    let mask = tape.straight_through_step(z);
    Ok((mask, z))
}

/// `(Σ_e w_e G_e) ⊙ M` for `weights: [B, E]`, `graphs: [B, E, N, N]`.
pub fn fuse(tape: &mut Tape, graphs: Var, weights: Var, mask: Option<Var>) -> Result<Var> {
    let mixed = tape.weighted_sum(weights, graphs)?;
    match mask {
        Some(m) => tape.mul(mixed, m),
        None => Ok(mixed),
    }
}

/// `Σ_{k=0}^{K-1} D̂ᵏ X`, evaluated as `X + D̂X + D̂(D̂X) + ...`.
pub fn diffusion_conv(tape: &mut Tape, adj: Var, x: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs K >= 1".into()));
    }
    let mut acc = x;
    let mut term = x;
    for _ in 1..steps {
        term = tape.bmm(adj, term)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// One dynamic graph cell bound to its parameters and the static graph.
#[derive(Debug, Clone)]
pub struct DynamicGraphCell {
    pub config: CellConfig,
    pub variant: Variant,
    pub params: CellParams,
    /// Row-normalized static adjacency `[N, N]`.
    pub static_adj: Tensor,
}

impl DynamicGraphCell {
    /// Builds `D̂` for one step from the cell input `I: [B, N, D_in]`.
    pub fn adjacency(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        control: &mut GraphControl,
    ) -> Result<FusedAdjacency> {
        let batch = tape.shape(input)[0];
        let n = self.config.n_nodes;
        let static_b = self.static_adj.repeat_leading(batch);
        let Some(psi) = self.params.psi.filter(|_| self.variant.has_dynamic_graphs()) else {
            let fused = tape.constant(static_b);
            return Ok(FusedAdjacency {
                graphs: None,
                weights: None,
                mask: None,
                gate: None,
                fused,
            });
        };
        let heads = self.config.heads;
        let mut parts = Vec::with_capacity(heads + 1);
        for g in gen_dynamic_graphs(tape, store, input, psi, heads)? {
            parts.push(tape.reshape(g, &[batch, 1, n, n])?);
        }
        let static_v = tape.constant(static_b.reshape(&[batch, 1, n, n])?);
        parts.push(static_v);
        let graphs = tape.concat(&parts, 1)?;

        let weights = match (&control.force_weights, self.params.phi3) {
            (Some(w), _) => {
                if w.len() != heads + 1 {
                    return Err(Error::Config(format!("forced weights need {} entries", heads + 1)));
                }
                tape.constant(Tensor::vector(w).repeat_leading(batch))
            }
            (None, Some(phi3)) if self.variant.has_dynamic_weights() => dynamic_weights(tape, store, input, phi3)?,
            _ => tape.constant(Tensor::full(&[batch, heads + 1], 1.0 / (heads + 1) as f64)),
        };

        let (mask, gate) = match self.params.gate.filter(|_| self.variant.has_gated_kernel()) {
            Some(_) if control.force_all_ones_mask => (None, None),
            Some(gate) => {
                let (live, z) = gated_kernel(tape, store, input, gate)?;
                let mask = match &mut control.mask_trace {
                    MaskTrace::Live => live,
                    MaskTrace::Record(masks) => {
                        masks.push(tape.value(live).clone());
                        live
                    }
                    MaskTrace::Replay { masks, cursor } => {
                        let frozen = masks
                            .get(*cursor)
                            .cloned()
                            .ok_or_else(|| Error::Contract("mask replay ran past the recorded steps".into()))?;
                        *cursor += 1;
                        tape.constant(frozen)
                    }
                };
                (Some(mask), Some(z))
            }
            None => (None, None),
        };
        let fused = fuse(tape, graphs, weights, mask)?;
        Ok(FusedAdjacency {
            graphs: Some(graphs),
            weights: Some(weights),
            mask,
            gate,
            fused,
        })
    }

    /// One GRU step; returns `h_t: [B, N, q]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        control: &mut GraphControl,
    ) -> Result<Var> {
        Ok(self.step_with_adjacency(tape, store, x, h_prev, control)?.0)
    }

    /// Like [`step`](Self::step) but also returns the adjacency handles.
    pub fn step_with_adjacency(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        control: &mut GraphControl,
    ) -> Result<(Var, FusedAdjacency)> {
        let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h_prev).to_vec());
        let c = &self.config;
        if xs.len() != 3
            || hs.len() != 3
            || xs[..2] != hs[..2]
            || xs[1] != c.n_nodes
            || xs[2] != c.in_channels
            || hs[2] != c.hidden
        {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "x {xs:?} and h {hs:?} do not fit N={}, in={}, q={}",
                    c.n_nodes, c.in_channels, c.hidden
                ),
            ));
        }
        let input = build_input(tape, x, h_prev)?;
        let adj = self.adjacency(tape, store, input, control)?;
        let k = c.diffusion_steps;
        let p = &self.params;

        let conv = diffusion_conv(tape, adj.fused, input, k)?;
        let (w_r, b_r) = (tape.param(store, p.w_r), tape.param(store, p.b_r));
        let (w_u, b_u) = (tape.param(store, p.w_u), tape.param(store, p.b_u));
        let r = tape.linear(conv, w_r, Some(b_r))?;
        let r = tape.sigmoid(r);
        let u = tape.linear(conv, w_u, Some(b_u))?;
        let u = tape.sigmoid(u);

        let rh = tape.mul(r, h_prev)?;
        let candidate_in = tape.concat_last(&[x, rh])?;
        let conv_c = diffusion_conv(tape, adj.fused, candidate_in, k)?;
        let (w_c, b_c) = (tape.param(store, p.w_c), tape.param(store, p.b_c));
        let cand = tape.linear(conv_c, w_c, Some(b_c))?;
        let cand = tape.tanh(cand);

        let keep = tape.mul(u, h_prev)?;
        let one_minus_u = tape.one_minus(u);
        let update = tape.mul(one_minus_u, cand)?;
        let h = tape.add(keep, update)?;
        Ok((h, adj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(variant: Variant, n: usize, seed: u64) -> (DynamicGraphCell, ParamStore) {
        let cfg = CellConfig {
            n_nodes: n,
            in_channels: 2,
            hidden: 3,
            head_dim: 2,
            heads: 2,
            diffusion_steps: 2,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CellParams::init(&mut store, "enc", &cfg, variant, &mut rng).unwrap();
        let g = crate::graph::StaticGraph::path(n).unwrap();
        (
            DynamicGraphCell {
                config: cfg,
                variant,
                params,
                static_adj: g.normalized().clone(),
            },
            store,
        )
    }

    #[test]
    fn variant_parsing_roundtrips() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("sad".parse::<Variant>().is_err());
    }

    #[test]
    fn input_width_law() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 3]));
        let h = tape.constant(Tensor::zeros(&[1, 4, 32]));
        let i = build_input(&mut tape, x, h).unwrap();
        assert_eq!(tape.shape(i), &[1, 4, 35]);
        assert!(tape
            .value(i)
            .data()
            .chunks(35)
            .all(|row| row[3..].iter().all(|&v| v == 0.0)));
        let back = tape.narrow(i, 2, 0, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn zero_projections_give_uniform_graphs() {
        let (c, mut store) = cell(Variant::Full, 4, 1);
        let (p1, p2) = c.params.psi.unwrap();
        store.get_mut(p1).value.data_mut().fill(0.0);
        store.get_mut(p2).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::ones(&[1, 4, 5]));
        for g in gen_dynamic_graphs(&mut tape, &store, i, (p1, p2), 2).unwrap() {
            assert!(tape.value(g).data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn single_node_graph_is_one() {
        let (c, store) = cell(Variant::Full, 1, 2);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::full(&[1, 1, 5], 0.3));
        for g in gen_dynamic_graphs(&mut tape, &store, i, c.params.psi.unwrap(), 2).unwrap() {
            assert_eq!(tape.value(g).data(), &[1.0]);
        }
    }

    #[test]
    fn dynamic_weight_examples() {
        let (c, mut store) = cell(Variant::Full, 3, 3);
        let phi3 = c.params.phi3.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::fan_in_uniform(&mut rng, 3, 5).reshape(&[1, 3, 5]).unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(input.clone());
        let w = dynamic_weights(&mut tape, &store, i, phi3).unwrap();
        assert_eq!(tape.shape(w), &[1, 3]);
        let base = tape.value(w).clone();

        // A constant feature column adds the same offset to every logit.
        let shifted = {
            let mut t = input.clone();
            for row in t.data_mut().chunks_mut(5) {
                row[0] = 1.0;
            }
            t
        };
        let mut with_const = input.clone();
        for row in with_const.data_mut().chunks_mut(5) {
            row[0] = 0.0;
        }
        let value = store.get(phi3).value.clone();
        let mut v2 = value.clone();
        v2.data_mut()[..3].fill(0.7);
        store.get_mut(phi3).value = v2;
        let mut tape = Tape::new();
        let a = tape.constant(with_const);
        let b = tape.constant(shifted);
        let wa = dynamic_weights(&mut tape, &store, a, phi3).unwrap();
        let wb = dynamic_weights(&mut tape, &store, b, phi3).unwrap();
        for (x, y) in tape.value(wa).data().iter().zip(tape.value(wb).data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((base.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        store.get_mut(phi3).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let i = tape.constant(input);
        let w = dynamic_weights(&mut tape, &store, i, phi3).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_gate_projection_masks_everything() {
        let (c, mut store) = cell(Variant::Full, 3, 4);
        let gate = c.params.gate.unwrap();
        store.get_mut(gate.0).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::ones(&[1, 3, 5]));
        let (mask, z) = gated_kernel(&mut tape, &store, i, gate).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(mask).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aligned_large_gate_logits_open_the_mask() {
        let (c, mut store) = cell(Variant::Full, 3, 5);
        let gate = c.params.gate.unwrap();
        store.get_mut(gate.0).value.data_mut().fill(10.0);
        store.get_mut(gate.1).value.data_mut().fill(10.0);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::ones(&[1, 3, 5]));
        let (mask, _) = gated_kernel(&mut tape, &store, i, gate).unwrap();
        assert!(tape.value(mask).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fuse_limits() {
        let mut tape = Tape::new();
        let g = Tensor::from_rows(&[&[0.2, 0.8], &[0.6, 0.4]]).unwrap();
        let a_hat = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let stack = Tensor::stack(&[g.clone(), a_hat.clone()])
            .unwrap()
            .reshape(&[1, 2, 2, 2])
            .unwrap();
        let graphs = tape.constant(stack);

        let w = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let ones = tape.constant(Tensor::ones(&[1, 2, 2]));
        let d = fuse(&mut tape, graphs, w, Some(ones)).unwrap();
        assert_eq!(tape.value(d).data(), g.data());

        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let d = fuse(&mut tape, graphs, w, Some(zeros)).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));

        let w = tape.constant(Tensor::from_rows(&[&[0.0, 1.0]]).unwrap());
        let d = fuse(&mut tape, graphs, w, Some(ones)).unwrap();
        assert_eq!(tape.value(d).data(), a_hat.data());
    }

    #[test]
    fn diffusion_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap());
        let d = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let y = diffusion_conv(&mut tape, d, x, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = diffusion_conv(&mut tape, d, x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0]);
        let z = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let y = diffusion_conv(&mut tape, z, x, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        assert!(diffusion_conv(&mut tape, d, x, 0).is_err());
    }

    fn zero_weights(c: &DynamicGraphCell, store: &mut ParamStore) {
        for id in [c.params.w_r, c.params.w_u, c.params.w_c] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let (c, mut store) = cell(Variant::Full, 3, 6);
        zero_weights(&c, &mut store);
        store.get_mut(c.params.b_u).value.data_mut().fill(20.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 2]));
        let h0 = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 / 10.0 - 0.4).collect()).unwrap();
        let h = tape.constant(h0.clone());
        let h1 = c.step(&mut tape, &store, x, h, &mut GraphControl::default()).unwrap();
        for (a, b) in tape.value(h1).data().iter().zip(h0.data()) {
            assert!((a - b).abs() < 1e-8);
        }

        store.get_mut(c.params.b_u).value.data_mut().fill(-20.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 2]));
        let h = tape.constant(h0);
        let h1 = c.step(&mut tape, &store, x, h, &mut GraphControl::default()).unwrap();
        assert!(tape.value(h1).data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn variant_lattice_is_strict() {
        let cfg = CellConfig {
            n_nodes: 3,
            in_channels: 1,
            hidden: 2,
            head_dim: 2,
            heads: 2,
            diffusion_steps: 2,
        };
        let sets: Vec<Vec<String>> = Variant::ALL.iter().map(|&v| CellParams::names("c", &cfg, v)).collect();
        for pair in sets.windows(2) {
            assert!(pair[0].len() < pair[1].len());
            assert!(pair[0].iter().all(|n| pair[1].contains(n)));
        }
        assert!(!sets[0].iter().any(|n| n.contains("psi") || n.contains("phi")));
    }

    #[test]
    fn shape_errors_are_reported() {
        let (c, store) = cell(Variant::Static, 3, 7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 5]));
        let h = tape.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(
            c.step(&mut tape, &store, x, h, &mut GraphControl::default()),
            Err(Error::Shape { .. })
        ));
    }
}
