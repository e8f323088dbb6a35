//! Resolution fusion and node-wise self-attention.
//!
//! The current, day and week blocks are spliced into a channel axis of size
//! `r = 3`. For every time step independently the `N` nodes are the tokens:
//!
//! ```text
//! Q, K, V = x̂·Φ_f, x̂·Φ_g, x̂·Φ_h           (N × C_out each)
//! out     = softmax_rows(Q·Kᵀ)·V + x̂
//! ```
//!
//! No `1/√d` scaling is applied and there is a single head. The residual
//! needs `C_out = r`.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of temporal resolutions (current, day, week).
pub const RESOLUTIONS: usize = 3;

/// Splices `(current, day, week)` blocks of shape `[..., N]` into `[..., N, 3]`.
pub fn fuse_blocks(current: &Tensor, day: &Tensor, week: &Tensor) -> Result<Tensor> {
    if current.shape() != day.shape() || current.shape() != week.shape() {
        return Err(Error::shape(
            "fuse_resolutions",
            alloc::format!(
                "blocks {:?}, {:?}, {:?} differ",
                current.shape(),
                day.shape(),
                week.shape()
            ),
        ));
    }
    let mut shape = current.shape().to_vec();
    shape.push(RESOLUTIONS);
    let mut data = Vec::with_capacity(current.numel() * RESOLUTIONS);
    for ((&c, &d), &w) in current.data().iter().zip(day.data()).zip(week.data()) {
        data.extend_from_slice(&[c, d, w]);
    }
    Tensor::new(shape, data)
}

/// `X̂` for one window: `[S, N, 3]` in channel order (current, day, week).
pub fn fuse_resolutions(sample: &WindowSample) -> Result<Tensor> {
    fuse_blocks(&sample.x_current, &sample.x_day, &sample.x_week)
}

/// The three pointwise projections producing queries, keys and values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub phi_f: ParamId,
    pub phi_g: ParamId,
    pub phi_h: ParamId,
}

impl AttentionParams {
    pub const NAMES: [&'static str; 3] = ["phi_f", "phi_g", "phi_h"];

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c_out: usize, rng: &mut R) -> Result<Self> {
        if c_out != RESOLUTIONS {
            return Err(Error::Config(alloc::format!(
                "self-attention residual needs C_out = {RESOLUTIONS}, got {c_out}"
            )));
        }
        let mut add = |name: &str| {
            store.add(
                alloc::format!("{prefix}.{name}"),
                Tensor::fan_in_uniform(rng, RESOLUTIONS, c_out),
            )
        };
        Ok(AttentionParams {
            phi_f: add("phi_f")?,
            phi_g: add("phi_g")?,
            phi_h: add("phi_h")?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            let full = alloc::format!("{prefix}.{name}");
            store
                .find(&full)
                .ok_or_else(|| Error::Config(alloc::format!("missing parameter {full}")))
        };
        Ok(AttentionParams {
            phi_f: get("phi_f")?,
            phi_g: get("phi_g")?,
            phi_h: get("phi_h")?,
        })
    }
}

/// Output of [`self_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Same shape as the input.
    pub output: Var,
    /// `[G, N, N]` attention rows, one matrix per time step (and batch entry).
    pub weights: Var,
}

/// Applies self-attention over the node axis of `x̂: [..., N, r]`,
/// independently for every leading index.
pub fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x_hat: Var,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let shape = tape.shape(x_hat).to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != RESOLUTIONS {
        return Err(Error::shape(
            "self_attention",
            alloc::format!("expected [..., N, {RESOLUTIONS}], got {shape:?}"),
        ));
    }
    let c_out = store.get(params.phi_h).value.shape()[1];
    if c_out != RESOLUTIONS {
        return Err(Error::Config(alloc::format!(
            "self-attention residual needs C_out = {RESOLUTIONS}, got {c_out}"
        )));
    }
    let n = shape[shape.len() - 2];
    let groups: usize = shape[..shape.len() - 2].iter().product();
    let x = tape.reshape(x_hat, &[groups, n, RESOLUTIONS])?;
    let (wf, wg, wh) = (
        tape.param(store, params.phi_f),
        tape.param(store, params.phi_g),
        tape.param(store, params.phi_h),
    );
    let q = tape.linear(x, wf, None)?;
    let k = tape.linear(x, wg, None)?;
    let v = tape.linear(x, wh, None)?;
    let scores = tape.bmm_nt(q, k)?;
    let weights = tape.softmax_last(scores);
    let mixed = tape.bmm(weights, v)?;
    let out = tape.add(mixed, x)?;
    let output = tape.reshape(out, &shape)?;
    Ok(AttentionOutput { output, weights })
}
